//! Denoising spectrogram frontend extracted from a frozen Conformer encoder.
//!
//! The pipeline: synthesize a paired noisy/clean corpus, pretrain a small
//! Conformer CTC backbone on clean speech, freeze it, and train a Parallel
//! Weighted Sum over its block outputs feeding four interleaved Highway
//! Networks that reconstruct clean log-Mel frames.

pub mod asr;
pub mod cleancoder;
pub mod corpus;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod numgrad;
pub mod parallel;
pub mod trainer;

pub use error::{Error, Result};
