use crate::dsp::Waveform;
use crate::error::{Error, Result};

pub const KAISER_BETA: f64 = 8.0;
pub const TAPS_PER_PHASE: usize = 32;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Polyphase windowed-sinc resampler for a rational rate change.
pub struct Resampler {
    up: usize,
    down: usize,
    /// `up` phases of `TAPS_PER_PHASE` taps, each normalized to unit DC gain.
    phases: Vec<[f64; TAPS_PER_PHASE]>,
}

impl Resampler {
    pub fn new(source_hz: u32, target_hz: u32) -> Result<Self> {
        if source_hz == 0 || target_hz == 0 {
            return Err(Error::invalid(format!(
                "sample rates must be positive (source {source_hz}, target {target_hz})"
            )));
        }
        let g = gcd(source_hz as u64, target_hz as u64);
        let up = (target_hz as u64 / g) as usize;
        let down = (source_hz as u64 / g) as usize;
        // Cutoff relative to the input Nyquist frequency.
        let cutoff = (up as f64 / down as f64).min(1.0);
        let half = (TAPS_PER_PHASE / 2) as f64;
        let norm = bessel_i0(KAISER_BETA);
        let phases = (0..up)
            .map(|phase| {
                let frac = phase as f64 / up as f64;
                let mut taps = [0.0; TAPS_PER_PHASE];
                for (j, tap) in taps.iter_mut().enumerate() {
                    // Distance from the output instant to input sample `base - 15 + j`.
                    let x = j as f64 - (half - 1.0) - frac;
                    let r = x / half;
                    let window = if r.abs() <= 1.0 {
                        bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm
                    } else {
                        0.0
                    };
                    *tap = cutoff * sinc(cutoff * x) * window;
                }
                let total: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|t| *t /= total);
                taps
            })
            .collect();
        Ok(Resampler { up, down, phases })
    }

    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        let out_len = ((input.len() as u128 * self.up as u128 + self.down as u128 / 2) / self.down as u128) as usize;
        let half = TAPS_PER_PHASE as isize / 2;
        (0..out_len)
            .map(|n| {
                let pos = n * self.down;
                let base = (pos / self.up) as isize;
                let taps = &self.phases[pos % self.up];
                let mut acc = 0.0;
                for (j, &tap) in taps.iter().enumerate() {
                    let i = base - (half - 1) + j as isize;
                    if i >= 0 && (i as usize) < input.len() {
                        acc += tap * input[i as usize];
                    }
                }
                acc
            })
            .collect()
    }
}

/// Resample to `target_hz`; output length is `round(len * target / source)`.
pub fn resample(w: &Waveform, target_hz: u32) -> Result<Waveform> {
    if target_hz == 0 {
        return Err(Error::invalid("target sample rate must be positive"));
    }
    if target_hz == w.sample_rate() {
        return Ok(w.clone());
    }
    let r = Resampler::new(w.sample_rate(), target_hz)?;
    let out = r.process(w.samples());
    if out.is_empty() {
        return Err(Error::invalid("resampled waveform would be empty"));
    }
    Waveform::new(out, target_hz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn sine(freq: f64, rate: u32, n: usize) -> Vec<f64> {
        (0..n).map(|i| (TAU * freq * i as f64 / rate as f64).sin()).collect()
    }

    #[test]
    fn three_to_one_length() {
        let w = Waveform::new(vec![0.0; 48000], 48000).unwrap();
        assert_eq!(resample(&w, 16000).unwrap().samples().len(), 16000);
        let w = Waveform::new(vec![0.0; 44100], 44100).unwrap();
        assert_eq!(resample(&w, 16000).unwrap().samples().len(), 16000);
    }

    #[test]
    fn dc_is_preserved() {
        let w = Waveform::new(vec![0.7; 4800], 48000).unwrap();
        let out = resample(&w, 16000).unwrap();
        for &v in &out.samples()[20..out.samples().len() - 20] {
            assert!((v - 0.7).abs() <= 1e-3, "{v}");
        }
    }

    #[test]
    fn sine_survives_downsampling() {
        let w = Waveform::new(sine(1000.0, 48000, 48000).iter().map(|v| 0.5 * v).collect(), 48000).unwrap();
        let out = resample(&w, 16000).unwrap();
        let expect: Vec<f64> = sine(1000.0, 16000, out.samples().len()).iter().map(|v| 0.5 * v).collect();
        let (a, b) = (&out.samples()[100..15900], &expect[100..15900]);
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (na * nb) >= 0.999, "{}", dot / (na * nb));
    }

    #[test]
    fn aliasing_tone_is_attenuated() {
        // 12 kHz is above the 8 kHz output Nyquist and must be suppressed.
        let w = Waveform::new(sine(12000.0, 48000, 9600), 48000).unwrap();
        let out = resample(&w, 16000).unwrap();
        let interior = &out.samples()[50..out.samples().len() - 50];
        let rms = (interior.iter().map(|v| v * v).sum::<f64>() / interior.len() as f64).sqrt();
        assert!(rms < 0.01, "{rms}");
    }

    #[test]
    fn zero_target_rejected() {
        let w = Waveform::new(vec![0.0; 10], 48000).unwrap();
        assert!(resample(&w, 0).is_err());
    }
}
