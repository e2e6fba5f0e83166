//! Audio I/O, resampling and the log-Mel feature front end.

mod mel;
mod resample;
mod wav;

pub use mel::{
    frame_count, hz_to_mel, log_floor, log_mel, mel_to_hz, MelFilterbank, F_MAX, HOP, LOG_FLOOR_ENERGY, MEL_BINS,
    N_FFT, SAMPLE_RATE, WINDOW,
};
pub use resample::{resample, Resampler, KAISER_BETA, TAPS_PER_PHASE};
pub use wav::{decode_wav, encode_wav, load_wav, quantize, write_wav};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::Tensor;

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform must hold at least one sample"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean square over the whole clip.
    pub fn power(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    /// Round-trip through PCM16 so the in-memory copy equals what a WAV file holds.
    pub fn quantized(&self) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|&v| quantize(v) as f64 / 32768.0).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// `T x 80` grid of log-Mel energies (or their normalized counterpart).
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    values: Tensor,
}

impl MelSpectrogram {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 || values.shape()[1] != MEL_BINS {
            return Err(Error::invalid(format!(
                "spectrogram must be [T, {MEL_BINS}], got {:?}",
                values.shape()
            )));
        }
        Ok(MelSpectrogram { values })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }
}

/// Mean absolute error over all `T x F` cells.
pub fn spec_mae(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    if a.values.shape() != b.values.shape() {
        return Err(Error::ShapeMismatch {
            op: "spec_mae",
            lhs: "a".into(),
            lhs_shape: a.values.shape().to_vec(),
            rhs: "b".into(),
            rhs_shape: b.values.shape().to_vec(),
        });
    }
    let total: f64 = a
        .values
        .data()
        .iter()
        .zip(b.values.data())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(total / a.values.len() as f64)
}

pub const STD_FLOOR: f64 = 1e-5;

/// Per-mel-bin mean and standard deviation of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != MEL_BINS || std.len() != MEL_BINS {
            return Err(Error::invalid(format!(
                "feature stats need {MEL_BINS} bins, got mean {} / std {}",
                mean.len(),
                std.len()
            )));
        }
        Ok(FeatureStats { mean, std })
    }

    pub fn identity() -> Self {
        FeatureStats {
            mean: vec![0.0; MEL_BINS],
            std: vec![1.0; MEL_BINS],
        }
    }

    /// Population statistics over every frame of `specs`.
    pub fn compute<'a>(specs: impl IntoIterator<Item = &'a MelSpectrogram>) -> Result<Self> {
        let mut sum = vec![0.0; MEL_BINS];
        let mut count = 0usize;
        let specs: Vec<&MelSpectrogram> = specs.into_iter().collect();
        for s in &specs {
            for row in s.values.data().chunks(MEL_BINS) {
                for (acc, v) in sum.iter_mut().zip(row) {
                    *acc += v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::invalid("cannot compute feature stats from zero frames"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; MEL_BINS];
        for s in &specs {
            for row in s.values.data().chunks(MEL_BINS) {
                for ((acc, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let std = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        FeatureStats::new(mean, std)
    }

    fn check(&self) -> Result<()> {
        if self.mean.len() != MEL_BINS || self.std.len() != MEL_BINS {
            return Err(Error::invalid(format!(
                "feature stats need {MEL_BINS} bins, got {}",
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, spec: &MelSpectrogram) -> Result<MelSpectrogram> {
        self.check()?;
        let mut v = spec.values.clone();
        for row in v.data_mut().chunks_mut(MEL_BINS) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s.max(STD_FLOOR);
            }
        }
        MelSpectrogram::new(v)
    }

    pub fn denormalize(&self, spec: &MelSpectrogram) -> Result<MelSpectrogram> {
        self.check()?;
        let mut v = spec.values.clone();
        for row in v.data_mut().chunks_mut(MEL_BINS) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = *x * s.max(STD_FLOOR) + m;
            }
        }
        MelSpectrogram::new(v)
    }
}
