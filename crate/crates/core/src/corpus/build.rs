use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::manifest::{write_manifest, ManifestRow};
use crate::corpus::noise::{gen_noise, mix_at_snr, NoiseKind};
use crate::corpus::synth::{synth_utterance, Alphabet};
use crate::dsp::write_wav;
use crate::error::{Error, Result};
use crate::numgrad::Rng;
use crate::parallel;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub alphabet: String,
    pub snr_grid: Vec<f64>,
    pub noise_kinds: Vec<NoiseKind>,
    pub words_min: usize,
    pub words_max: usize,
    pub word_len: usize,
    pub train_speakers: usize,
    pub val_speakers: usize,
    pub test_speakers: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train: 800,
            val: 100,
            test: 100,
            alphabet: Alphabet::default().as_string(),
            snr_grid: vec![2.5, 7.5, 12.5, 17.5],
            noise_kinds: vec![NoiseKind::White, NoiseKind::Babble],
            words_min: 2,
            words_max: 3,
            word_len: 3,
            train_speakers: 24,
            val_speakers: 4,
            test_speakers: 4,
            seed: 42,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<Alphabet> {
        for (name, n) in [
            ("train", self.train),
            ("val", self.val),
            ("test", self.test),
            ("train_speakers", self.train_speakers),
            ("val_speakers", self.val_speakers),
            ("test_speakers", self.test_speakers),
            ("words_min", self.words_min),
            ("word_len", self.word_len),
        ] {
            if n < 1 {
                return Err(Error::invalid(format!("corpus.{name} must be at least 1")));
            }
        }
        if self.words_max < self.words_min {
            return Err(Error::invalid("corpus.words_max must be >= words_min"));
        }
        if self.snr_grid.is_empty() || self.snr_grid.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("corpus.snr_grid must hold finite values"));
        }
        if self.noise_kinds.is_empty() {
            return Err(Error::invalid("corpus.noise_kinds must not be empty"));
        }
        Alphabet::new(&self.alphabet)
    }

    pub fn count(&self, split: usize) -> usize {
        [self.train, self.val, self.test][split]
    }

    pub fn speakers(&self, split: usize) -> usize {
        [self.train_speakers, self.val_speakers, self.test_speakers][split]
    }

    /// Speaker seeds differ across splits by construction: the split index
    /// occupies bits the per-split speaker index never reaches.
    pub fn speaker_seed(&self, split: usize, speaker: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (((split as u64 + 1) << 40) | speaker as u64)
    }

    /// Deterministic description of row `index` of `split`.
    pub fn row_spec(&self, alphabet: &Alphabet, split: usize, index: usize) -> RowSpec {
        let mut rng = Rng::new(self.seed ^ ((split as u64 + 1) << 48) ^ (index as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
        let cells = self.snr_grid.len() * self.noise_kinds.len();
        let cell = index % cells;
        let snr_db = self.snr_grid[cell % self.snr_grid.len()];
        let noise = self.noise_kinds[cell / self.snr_grid.len()];
        let speaker = rng.below(self.speakers(split));
        let words = self.words_min + rng.below(self.words_max - self.words_min + 1);
        let text = alphabet.random_text(words, self.word_len, &mut rng);
        RowSpec {
            id: format!("{}_{index:04}", SPLITS[split]),
            text,
            snr_db,
            noise,
            speaker: format!("{}-spk{speaker:02}", SPLITS[split]),
            speaker_seed: self.speaker_seed(split, speaker),
            noise_seed: rng.next_u64(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowSpec {
    pub id: String,
    pub text: String,
    pub snr_db: f64,
    pub noise: NoiseKind,
    pub speaker: String,
    pub speaker_seed: u64,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CorpusSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn render_row(alphabet: &Alphabet, spec: &RowSpec, out_dir: &Path) -> Result<ManifestRow> {
    // The clean reference is quantized first so that the stored clean file
    // is exactly the signal the noise was added to.
    let clean = synth_utterance(alphabet, &spec.text, spec.speaker_seed)?.quantized();
    let noise = gen_noise(alphabet, spec.noise, clean.len(), spec.noise_seed)?;
    let noisy = mix_at_snr(&clean, &noise, spec.snr_db)?.quantized();
    let name = format!("{}.wav", spec.id);
    write_wav(out_dir.join("wav_clean").join(&name), &clean)?;
    write_wav(out_dir.join("wav_noisy").join(&name), &noisy)?;
    Ok(ManifestRow {
        id: spec.id.clone(),
        noisy_path: format!("../wav_noisy/{name}"),
        clean_path: format!("../wav_clean/{name}"),
        text: spec.text.clone(),
        snr_db: spec.snr_db,
        noise_type: spec.noise.as_str().to_string(),
        speaker: spec.speaker.clone(),
    })
}

/// Write `out_dir/{wav_clean,wav_noisy,manifests}` with train/val/test
/// manifests.
pub fn build_corpus(config: &CorpusConfig, out_dir: impl AsRef<Path>) -> Result<CorpusSummary> {
    let alphabet = config.validate()?;
    let out_dir = out_dir.as_ref();
    for sub in ["wav_clean", "wav_noisy", "manifests"] {
        ensure_dir(&out_dir.join(sub))?;
    }
    for (split, name) in SPLITS.iter().enumerate() {
        let specs: Vec<RowSpec> = (0..config.count(split)).map(|i| config.row_spec(&alphabet, split, i)).collect();
        let rows = parallel::map(&specs, |_, s| render_row(&alphabet, s, out_dir)).into_iter().collect::<Result<Vec<_>>>()?;
        write_manifest(out_dir.join("manifests").join(format!("{name}.jsonl")), &rows)?;
        log::info!("wrote {} {name} rows", rows.len());
    }
    Ok(CorpusSummary { train: config.train, val: config.val, test: config.test })
}

pub fn manifest_path(corpus_dir: impl AsRef<Path>, split: &str) -> std::path::PathBuf {
    corpus_dir.as_ref().join("manifests").join(format!("{split}.jsonl"))
}
