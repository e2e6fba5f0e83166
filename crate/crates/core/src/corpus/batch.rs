use crate::corpus::manifest::{Manifest, ManifestRow};
use crate::corpus::synth::Alphabet;
use crate::dsp::{load_wav, log_floor, log_mel, resample, FeatureStats, MelSpectrogram, Waveform, MEL_BINS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::numgrad::{Rng, Tensor};
use crate::parallel;

/// Log-Mel features of one manifest row.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub row: ManifestRow,
    pub noisy: MelSpectrogram,
    pub clean: MelSpectrogram,
    pub tokens: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.noisy.frames()
    }
}

pub fn load_audio(path: &std::path::Path) -> Result<Waveform> {
    let w = load_wav(path)?;
    if w.sample_rate() == SAMPLE_RATE {
        Ok(w)
    } else {
        resample(&w, SAMPLE_RATE)
    }
}

pub fn row_features(manifest: &Manifest, row: &ManifestRow, alphabet: &Alphabet) -> Result<Utterance> {
    let noisy_wav = load_audio(&manifest.resolve(&row.noisy_path))?;
    let clean_wav = load_audio(&manifest.resolve(&row.clean_path))?;
    if noisy_wav.len() != clean_wav.len() {
        return Err(Error::invalid(format!(
            "{}: noisy and clean lengths differ ({} vs {})",
            row.id,
            noisy_wav.len(),
            clean_wav.len()
        )));
    }
    Ok(Utterance {
        row: row.clone(),
        noisy: log_mel(&noisy_wav)?,
        clean: log_mel(&clean_wav)?,
        tokens: alphabet.tokenize(&row.text)?,
    })
}

/// Features for every row of a manifest, in manifest order.
pub fn load_features(manifest: &Manifest, alphabet: &Alphabet) -> Result<Vec<Utterance>> {
    parallel::map(&manifest.rows, |_, row| row_features(manifest, row, alphabet)).into_iter().collect()
}

/// Zero-padded minibatch; padded frames hold the log floor and are masked.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// Normalized noisy features, `[N, T_max, 80]`.
    pub specs: Tensor,
    /// Normalized clean features, `[N, T_max, 80]`.
    pub clean: Tensor,
    pub lengths: Vec<usize>,
    pub texts: Vec<Vec<usize>>,
    /// `[N, T_max]`, 1 for real frames.
    pub pad_mask: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn t_max(&self) -> usize {
        self.specs.shape()[1]
    }

    fn item(t: &Tensor, i: usize, len: usize) -> Tensor {
        let stride = t.shape()[1] * MEL_BINS;
        let data = t.data()[i * stride..i * stride + len * MEL_BINS].to_vec();
        Tensor::new(vec![len, MEL_BINS], data).unwrap()
    }

    /// Unpadded noisy features of item `i`.
    pub fn noisy_item(&self, i: usize) -> Tensor {
        Self::item(&self.specs, i, self.lengths[i])
    }

    pub fn clean_item(&self, i: usize) -> Tensor {
        Self::item(&self.clean, i, self.lengths[i])
    }
}

fn pad_into(dst: &mut [f64], spec: &MelSpectrogram) {
    let n = spec.values().len();
    dst[..n].copy_from_slice(spec.values().data());
    dst[n..].iter_mut().for_each(|v| *v = log_floor());
}

/// Split `utts` into padded batches. With `shuffle_seed` the order is a
/// deterministic permutation; utterances longer than `max_frames` are
/// dropped with a warning.
pub fn make_batches(
    utts: &[Utterance],
    batch_size: usize,
    stats: &FeatureStats,
    shuffle_seed: Option<u64>,
    max_frames: Option<usize>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..utts.len())
        .filter(|&i| match max_frames {
            Some(cap) if utts[i].frames() > cap => {
                log::warn!("skipping {}: {} frames exceeds cap {cap}", utts[i].row.id, utts[i].frames());
                false
            }
            _ => true,
        })
        .collect();
    if let Some(seed) = shuffle_seed {
        Rng::new(seed).shuffle(&mut order);
    }
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let t_max = chunk.iter().map(|&i| utts[i].frames()).max().unwrap();
        let n = chunk.len();
        let cell = t_max * MEL_BINS;
        let mut specs = vec![0.0; n * cell];
        let mut clean = vec![0.0; n * cell];
        let mut mask = vec![0.0; n * t_max];
        for (j, &i) in chunk.iter().enumerate() {
            let u = &utts[i];
            pad_into(&mut specs[j * cell..(j + 1) * cell], &stats.normalize(&u.noisy)?);
            pad_into(&mut clean[j * cell..(j + 1) * cell], &stats.normalize(&u.clean)?);
            mask[j * t_max..j * t_max + u.frames()].iter_mut().for_each(|v| *v = 1.0);
        }
        batches.push(Batch {
            ids: chunk.iter().map(|&i| utts[i].row.id.clone()).collect(),
            specs: Tensor::new(vec![n, t_max, MEL_BINS], specs)?,
            clean: Tensor::new(vec![n, t_max, MEL_BINS], clean)?,
            lengths: chunk.iter().map(|&i| utts[i].frames()).collect(),
            texts: chunk.iter().map(|&i| utts[i].tokens.clone()).collect(),
            pad_mask: Tensor::new(vec![n, t_max], mask)?,
        });
    }
    Ok(batches)
}
