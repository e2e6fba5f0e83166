use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cleancoder_core::asr::AsrModel;
use cleancoder_core::cleancoder::CleancoderModel;
use cleancoder_core::corpus::Alphabet;
use cleancoder_core::dsp::FeatureStats;
use cleancoder_core::encoder::{Encoder, EncoderConfig};
use cleancoder_core::trainer::{load_checkpoint, save_checkpoint};

pub const KIND_ASR: &str = "asr";
pub const KIND_FRONTEND: &str = "frontend";

/// Checkpoint metadata: everything besides tensors needed to rebuild a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub kind: String,
    pub encoder: EncoderConfig,
    pub stats: FeatureStats,
    pub seed: u64,
    pub alphabet: String,
    pub word_len: usize,
}

impl ArtifactMeta {
    pub fn alphabet(&self) -> Result<Alphabet> {
        Ok(Alphabet::new(&self.alphabet)?)
    }
}

fn read(path: &Path, kind: &str, stage: &str) -> Result<(cleancoder_core::numgrad::ParamMap, ArtifactMeta)> {
    if !path.exists() {
        bail!("{kind} checkpoint {} not found; run `cleancoder {stage}` first", path.display());
    }
    let (tensors, meta) = load_checkpoint(path)?;
    let meta: ArtifactMeta = serde_json::from_value(meta)
        .with_context(|| format!("{} has no readable model metadata", path.display()))?;
    if meta.kind != kind {
        bail!("{} holds a `{}` model, expected `{kind}`", path.display(), meta.kind);
    }
    Ok((tensors, meta))
}

pub fn save_asr(path: &Path, model: &AsrModel, meta: &ArtifactMeta) -> Result<()> {
    save_checkpoint(path, &model.tensors(), &serde_json::to_value(meta)?)?;
    Ok(())
}

pub fn load_asr(path: &Path, stage: &str) -> Result<(AsrModel, ArtifactMeta)> {
    let (tensors, meta) = read(path, KIND_ASR, stage)?;
    let model = AsrModel::from_tensors(meta.encoder.clone(), meta.stats.clone(), &tensors)?;
    Ok((model, meta))
}

/// Frontend checkpoints carry the frozen encoder tensors too, so they load
/// without the backbone file.
pub fn save_frontend(path: &Path, model: &CleancoderModel, meta: &ArtifactMeta) -> Result<()> {
    let mut tensors = model.encoder.params.clone();
    tensors.extend(model.params.iter().map(|(k, v)| (k.clone(), v.clone())));
    save_checkpoint(path, &tensors, &serde_json::to_value(meta)?)?;
    Ok(())
}

pub fn load_frontend(path: &Path) -> Result<(CleancoderModel, ArtifactMeta)> {
    let (tensors, meta) = read(path, KIND_FRONTEND, "train-frontend")?;
    let encoder = Encoder::from_params(meta.encoder.clone(), &tensors)?;
    let model = CleancoderModel::from_tensors(encoder, meta.stats.clone(), &tensors)?;
    Ok((model, meta))
}
