use serde::{Deserialize, Serialize};

use crate::corpus::synth::{symbol_hz, speaker_factor, Alphabet, HARMONIC_GAINS, SYMBOL_SAMPLES};
use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::numgrad::Rng;

pub const NOISE_RMS: f64 = 0.1;
pub const BABBLE_STREAMS: usize = 8;
/// Fraction of clipped samples above which mixing logs a warning.
pub const CLIP_WARN_FRACTION: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Babble,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Babble => "babble",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "babble" => Ok(NoiseKind::Babble),
            other => Err(Error::invalid(format!("unknown noise kind `{other}`"))),
        }
    }
}

/// iid uniform samples in `[-1, 1]`, before any level normalization.
pub fn white_noise_raw(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

fn rms_normalize(samples: &mut [f64], target: f64) {
    let rms = (samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64).sqrt();
    if rms > 0.0 {
        samples.iter_mut().for_each(|v| *v *= target / rms);
    }
}

fn babble(alphabet: &Alphabet, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    let mut out = vec![0.0; n];
    for _ in 0..BABBLE_STREAMS {
        let factor = speaker_factor(rng.next_u64());
        let offset = rng.below(SYMBOL_SAMPLES);
        let symbols = (n + offset) / SYMBOL_SAMPLES + 1;
        let mut pos = 0usize;
        for _ in 0..symbols {
            let f0 = symbol_hz(rng.below(alphabet.len())) * factor;
            for k in 0..SYMBOL_SAMPLES {
                let global = pos + k;
                if global < offset || global - offset >= n {
                    continue;
                }
                let t = k as f64 / SAMPLE_RATE as f64;
                let env = 0.5 - 0.5 * (std::f64::consts::TAU * k as f64 / SYMBOL_SAMPLES as f64).cos();
                let v: f64 = HARMONIC_GAINS
                    .iter()
                    .enumerate()
                    .map(|(h, g)| g * (std::f64::consts::TAU * f0 * (h + 1) as f64 * t).sin())
                    .sum();
                out[global - offset] += env * v;
            }
            pos += SYMBOL_SAMPLES;
        }
    }
    out
}

/// White noise or 8-talker babble of `n_samples`, normalized to RMS 0.1.
pub fn gen_noise(alphabet: &Alphabet, kind: NoiseKind, n_samples: usize, seed: u64) -> Result<Waveform> {
    if n_samples == 0 {
        return Err(Error::invalid("noise length must be at least one sample"));
    }
    let mut samples = match kind {
        NoiseKind::White => white_noise_raw(n_samples, seed),
        NoiseKind::Babble => babble(alphabet, n_samples, seed),
    };
    rms_normalize(&mut samples, NOISE_RMS);
    Waveform::new(samples, SAMPLE_RATE)
}

/// Noise gain `alpha` giving `10 log10(P_clean / P(alpha * noise)) = snr_db`,
/// with powers taken as full-clip mean squares and `noise` tiled or
/// truncated to the clean length.
pub fn mix_gain(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<f64> {
    let tiled = tile(noise.samples(), clean.len());
    let pc = clean.power();
    let pn = tiled.iter().map(|v| v * v).sum::<f64>() / tiled.len() as f64;
    if pc == 0.0 {
        return Err(Error::invalid("clean signal is silent (zero power)"));
    }
    if pn == 0.0 {
        return Err(Error::invalid("noise signal is silent (zero power)"));
    }
    Ok((pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

pub fn tile(samples: &[f64], len: usize) -> Vec<f64> {
    samples.iter().copied().cycle().take(len).collect()
}

/// `clean + alpha * noise`, clipped to `[-1, 1]`.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if clean.sample_rate() != noise.sample_rate() {
        return Err(Error::invalid(format!(
            "sample rates differ: clean {} Hz, noise {} Hz",
            clean.sample_rate(),
            noise.sample_rate()
        )));
    }
    let alpha = mix_gain(clean, noise, snr_db)?;
    let tiled = tile(noise.samples(), clean.len());
    let mut clipped = 0usize;
    let out: Vec<f64> = clean
        .samples()
        .iter()
        .zip(&tiled)
        .map(|(c, n)| {
            let v = c + alpha * n;
            if v.abs() > 1.0 {
                clipped += 1;
            }
            v.clamp(-1.0, 1.0)
        })
        .collect();
    if clipped as f64 > CLIP_WARN_FRACTION * out.len() as f64 {
        log::warn!(
            "mixing at {snr_db} dB clipped {clipped} of {} samples",
            out.len()
        );
    }
    Waveform::new(out, clean.sample_rate())
}
