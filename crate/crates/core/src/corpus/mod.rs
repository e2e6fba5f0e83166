//! Synthetic paired noisy/clean corpus, manifests and padded batching.

mod batch;
mod build;
mod manifest;
mod noise;
mod synth;

pub use batch::{load_audio, load_features, make_batches, row_features, Batch, Utterance};
pub use build::{build_corpus, manifest_path, CorpusConfig, CorpusSummary, RowSpec, SPLITS};
pub use manifest::{write_manifest, Manifest, ManifestRow};
pub use noise::{
    gen_noise, mix_at_snr, mix_gain, tile, white_noise_raw, NoiseKind, BABBLE_STREAMS, CLIP_WARN_FRACTION, NOISE_RMS,
};
pub use synth::{
    speaker_factor, symbol_hz, synth_utterance, Alphabet, BASE_HZ, HARMONIC_GAINS, PEAK, ROOM_TONE_DB, SPEAKER_DETUNE,
    STEPS_PER_OCTAVE, SYMBOL_MS, SYMBOL_SAMPLES,
};

#[cfg(test)]
mod tests;
