use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::numgrad::Rng;

/// Duration of one rendered symbol.
pub const SYMBOL_MS: usize = 120;
pub const SYMBOL_SAMPLES: usize = SAMPLE_RATE as usize * SYMBOL_MS / 1000;
pub const BASE_HZ: f64 = 110.0;
/// Symbols are spaced this many steps per octave apart.
pub const STEPS_PER_OCTAVE: f64 = 4.0;
pub const HARMONIC_GAINS: [f64; 3] = [1.0, 0.5, 1.0 / 3.0];
pub const PEAK: f64 = 0.3;
/// Maximum per-speaker detuning, as a fraction of the fundamental.
pub const SPEAKER_DETUNE: f64 = 0.04;
/// Level of the recording noise floor relative to the peak.
pub const ROOM_TONE_DB: f64 = -60.0;

/// Symbol inventory of the synthetic language. Token id 0 is the CTC blank;
/// symbol `i` of the alphabet has token id `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Default for Alphabet {
    fn default() -> Self {
        Alphabet::new("abcdefghijkl").unwrap()
    }
}

impl Alphabet {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.is_empty() {
            return Err(Error::invalid("alphabet must not be empty"));
        }
        if symbols.iter().any(|c| c.is_whitespace()) {
            return Err(Error::invalid("alphabet must not contain whitespace"));
        }
        let mut sorted = symbols.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != symbols.len() {
            return Err(Error::invalid("alphabet symbols must be unique"));
        }
        Ok(Alphabet { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// CTC vocabulary size including the blank.
    pub fn vocab_size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn as_string(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    pub fn symbol(&self, index: usize) -> char {
        self.symbols[index]
    }

    /// Token ids (blank excluded) for the non-whitespace characters of `text`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| {
                self.index_of(c)
                    .map(|i| i + 1)
                    .ok_or_else(|| Error::invalid(format!("unknown symbol {c:?}")))
            })
            .collect()
    }

    /// Render token ids as words of `word_len` symbols separated by spaces.
    pub fn render_words(&self, tokens: &[usize], word_len: usize) -> String {
        tokens
            .chunks(word_len.max(1))
            .map(|w| w.iter().map(|&t| self.symbols[t - 1]).collect::<String>())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Random transcript of `words` words with `word_len` symbols each.
    pub fn random_text(&self, words: usize, word_len: usize, rng: &mut Rng) -> String {
        (0..words)
            .map(|_| (0..word_len).map(|_| self.symbols[rng.below(self.len())]).collect::<String>())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Fundamental frequency of symbol `index` before speaker detuning.
pub fn symbol_hz(index: usize) -> f64 {
    BASE_HZ * 2f64.powf(index as f64 / STEPS_PER_OCTAVE)
}

/// Speaker-dependent multiplier applied to every fundamental.
pub fn speaker_factor(speaker_seed: u64) -> f64 {
    let mut rng = Rng::new(speaker_seed ^ 0x5BEA_4E55);
    1.0 + rng.uniform(-SPEAKER_DETUNE, SPEAKER_DETUNE)
}

fn render(indices: &[usize], factor: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(indices.len() * SYMBOL_SAMPLES);
    for &idx in indices {
        let f0 = symbol_hz(idx) * factor;
        for n in 0..SYMBOL_SAMPLES {
            let t = n as f64 / SAMPLE_RATE as f64;
            let env = 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / SYMBOL_SAMPLES as f64).cos();
            let v: f64 = HARMONIC_GAINS
                .iter()
                .enumerate()
                .map(|(h, g)| g * (std::f64::consts::TAU * f0 * (h + 1) as f64 * t).sin())
                .sum();
            out.push(env * v);
        }
    }
    out
}

fn peak_normalize(samples: &mut [f64], peak: f64) {
    let max = samples.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        samples.iter_mut().for_each(|v| *v *= peak / max);
    }
}

fn text_seed(text: &str) -> u64 {
    text.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3))
}

/// Render `text` as a sequence of 120 ms harmonic tones (whitespace is not
/// rendered) over a faint gaussian noise floor, peak-normalized to 0.3.
pub fn synth_utterance(alphabet: &Alphabet, text: &str, speaker_seed: u64) -> Result<Waveform> {
    let tokens = alphabet.tokenize(text)?;
    if tokens.is_empty() {
        return Err(Error::invalid("cannot synthesize an empty transcript"));
    }
    let indices: Vec<usize> = tokens.iter().map(|t| t - 1).collect();
    let mut samples = render(&indices, speaker_factor(speaker_seed));
    peak_normalize(&mut samples, PEAK);
    let sigma = PEAK * 10f64.powf(ROOM_TONE_DB / 20.0);
    let mut rng = Rng::new(speaker_seed ^ text_seed(text));
    samples.iter_mut().for_each(|v| *v += sigma * rng.normal());
    peak_normalize(&mut samples, PEAK);
    Waveform::new(samples, SAMPLE_RATE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::log_mel;

    #[test]
    fn five_symbols_last_600ms() {
        let w = synth_utterance(&Alphabet::default(), "abc de", 7).unwrap();
        assert_eq!(w.len(), 9600);
        assert!((w.duration_s() - 0.6).abs() < 1e-12);
        let peak = w.samples().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!((peak - PEAK).abs() < 1e-12);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_utterance(&Alphabet::default(), "abc", 3).unwrap();
        let b = synth_utterance(&Alphabet::default(), "abc", 3).unwrap();
        assert_eq!(a, b);
        let c = synth_utterance(&Alphabet::default(), "abc", 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn errors_on_empty_and_unknown() {
        assert!(synth_utterance(&Alphabet::default(), "  ", 1).is_err());
        assert!(synth_utterance(&Alphabet::default(), "abz", 1).is_err());
    }

    fn dominant_bin(spec: &crate::dsp::MelSpectrogram, frames: std::ops::Range<usize>) -> usize {
        let mut avg = vec![0.0; crate::dsp::MEL_BINS];
        for t in frames.clone() {
            for (a, v) in avg.iter_mut().zip(spec.values().row(t)) {
                *a += v;
            }
        }
        (0..avg.len()).max_by(|&a, &b| avg[a].total_cmp(&avg[b])).unwrap()
    }

    #[test]
    fn distinct_symbols_have_distinct_dominant_bins() {
        let alphabet = Alphabet::default();
        for (x, y) in [('a', 'e'), ('b', 'l'), ('c', 'h')] {
            let text: String = [x, y].iter().collect();
            let spec = log_mel(&synth_utterance(&alphabet, &text, 11).unwrap()).unwrap();
            // Frames whose window lies inside the first / second 120 ms segment.
            let first = dominant_bin(&spec, 2..8);
            let second = dominant_bin(&spec, 14..20);
            assert_ne!(first, second, "{x} vs {y}");
        }
    }

    #[test]
    fn render_words_chunks_tokens() {
        let a = Alphabet::default();
        let toks = a.tokenize("abc def g").unwrap();
        assert_eq!(a.render_words(&toks, 3), "abc def g");
        assert_eq!(a.vocab_size(), 13);
    }
}
