use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::dsp::{MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::numgrad::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
/// 25 ms analysis window at 16 kHz.
pub const WINDOW: usize = 400;
/// 10 ms frame stride at 16 kHz.
pub const HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const MEL_BINS: usize = 80;
pub const F_MAX: f64 = 8000.0;
/// Energies are clamped here before the logarithm.
pub const LOG_FLOOR_ENERGY: f64 = 1e-10;

pub fn log_floor() -> f64 {
    LOG_FLOOR_ENERGY.ln()
}

/// Number of frames for `n` samples (no padding).
pub fn frame_count(n: usize) -> Option<usize> {
    (n >= WINDOW).then(|| (n - WINDOW) / HOP + 1)
}

// Slaney mel scale: linear below 1 kHz, logarithmic above.
const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4_f64.ln() / 27.0
}

pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < MIN_LOG_MEL {
        mel * F_SP
    } else {
        MIN_LOG_HZ * (log_step() * (mel - MIN_LOG_MEL)).exp()
    }
}

/// Triangular, area-normalized filters on the Slaney mel scale. Filter
/// centers are evenly spaced in mel from 0 Hz to 8 kHz, so every FFT bin in
/// `[0, 8000]` Hz is covered by at least one filter.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// Per filter: first FFT bin and the weights from there on.
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new() -> Self {
        let step = hz_to_mel(F_MAX) / (MEL_BINS - 1) as f64;
        let edges: Vec<f64> = (0..MEL_BINS + 2)
            .map(|i| mel_to_hz((i as f64 - 1.0) * step))
            .collect();
        let bins = N_FFT / 2 + 1;
        let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
        let mut filters = Vec::with_capacity(MEL_BINS);
        for m in 0..MEL_BINS {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let enorm = 2.0 / (hi - lo);
            let weights: Vec<(usize, f64)> = (0..bins)
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = ((f - lo) / (center - lo)).min((hi - f) / (hi - center)).max(0.0);
                    (w > 0.0).then_some((k, w * enorm))
                })
                .collect();
            let start = weights.first().map_or(0, |w| w.0);
            let mut dense = vec![0.0; weights.last().map_or(0, |w| w.0 + 1 - start)];
            for (k, w) in weights {
                dense[k - start] = w;
            }
            filters.push((start, dense));
        }
        MelFilterbank {
            filters,
            centers_hz: edges[1..=MEL_BINS].to_vec(),
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Weight of FFT bin `k` in filter `m`.
    pub fn weight(&self, m: usize, k: usize) -> f64 {
        let (start, w) = &self.filters[m];
        if k < *start {
            0.0
        } else {
            w.get(k - start).copied().unwrap_or(0.0)
        }
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for ((start, w), o) in self.filters.iter().zip(out.iter_mut()) {
            *o = w.iter().zip(&power[*start..]).map(|(a, b)| a * b).sum();
        }
    }
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new()
    }
}

struct MelFrontend {
    window: Vec<f64>,
    bank: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
}

fn frontend() -> &'static MelFrontend {
    static FRONTEND: OnceLock<MelFrontend> = OnceLock::new();
    FRONTEND.get_or_init(|| MelFrontend {
        // Periodic Hann.
        window: (0..WINDOW)
            .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / WINDOW as f64).cos())
            .collect(),
        bank: MelFilterbank::new(),
        fft: FftPlanner::new().plan_fft_forward(N_FFT),
    })
}

/// 80-bin log-Mel spectrogram: 25 ms Hann frames every 10 ms, 512-point
/// power spectrum, natural log of floored filter energies.
pub fn log_mel(w: &Waveform) -> Result<MelSpectrogram> {
    if w.sample_rate() != SAMPLE_RATE {
        return Err(Error::invalid(format!(
            "log_mel expects {SAMPLE_RATE} Hz audio, got {} Hz",
            w.sample_rate()
        )));
    }
    let samples = w.samples();
    let frames = frame_count(samples.len()).ok_or(Error::TooShort(samples.len()))?;
    let fe = frontend();
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut scratch = vec![Complex::new(0.0, 0.0); fe.fft.get_inplace_scratch_len()];
    let mut power = vec![0.0; N_FFT / 2 + 1];
    let mut out = vec![0.0; frames * MEL_BINS];
    let floor = log_floor();
    for t in 0..frames {
        let frame = &samples[t * HOP..t * HOP + WINDOW];
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(if i < WINDOW { frame[i] * fe.window[i] } else { 0.0 }, 0.0);
        }
        fe.fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        let row = &mut out[t * MEL_BINS..(t + 1) * MEL_BINS];
        fe.bank.apply(&power, row);
        for v in row.iter_mut() {
            *v = if *v > LOG_FLOOR_ENERGY { v.ln() } else { floor };
        }
    }
    MelSpectrogram::new(Tensor::from_parts(vec![frames, MEL_BINS], out))
}
