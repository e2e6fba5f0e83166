use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use cleancoder_core::corpus::CorpusConfig;
use cleancoder_core::encoder::{EncoderConfig, PretrainConfig};
use cleancoder_core::trainer::{Scheduler, TrainConfig};

use crate::UsageError;

/// One JSON document driving every pipeline stage. Sections may be partial;
/// given keys overlay the defaults below. The top-level `seed` replaces the
/// `seed` field of each training section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub encoder: EncoderSection,
    pub frontend: FrontendSection,
    pub asr: TrainConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            corpus: CorpusConfig::default(),
            encoder: EncoderSection::default(),
            frontend: FrontendSection::default(),
            asr: TrainConfig {
                epochs: 12,
                lr: 2e-3,
                scheduler: Scheduler::Noam,
                warmup_steps: 200,
                ..TrainConfig::default()
            },
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    /// `medium-mini` or `large-mini`; mutually exclusive with `model`.
    pub preset: Option<String>,
    pub model: Option<EncoderConfig>,
    pub pretrain: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendSection {
    /// Also train on clean-to-clean pairs.
    pub identity_pairs: bool,
    pub train: TrainConfig,
}

impl Default for FrontendSection {
    fn default() -> Self {
        FrontendSection { identity_pairs: true, train: TrainConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Corpus split used when a command is pointed at a corpus directory.
    pub split: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { split: "test".into() }
    }
}

fn overlay(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() => overlay(slot, v),
                    Some(slot) => *slot = v,
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| UsageError(format!("config {}: {}", path.display(), e.0)))
    }

    pub fn parse(text: &str) -> Result<Self, UsageError> {
        let invalid = |e: serde_json::Error| UsageError(format!("invalid config: {e}"));
        let patch: Value = serde_json::from_str(text).map_err(invalid)?;
        if !patch.is_object() {
            return Err(UsageError("invalid config: expected a JSON object".into()));
        }
        let mut merged = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize");
        overlay(&mut merged, patch);
        let cfg: ExperimentConfig = serde_json::from_value(merged).map_err(invalid)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let bad = |e: cleancoder_core::Error| UsageError(e.to_string());
        self.corpus.validate().map_err(bad)?;
        self.encoder_config()?.validate().map_err(bad)?;
        self.pretrain_config().train.validate().map_err(bad)?;
        self.frontend_config().validate().map_err(bad)?;
        self.asr_config().validate().map_err(bad)?;
        if !["train", "val", "test"].contains(&self.eval.split.as_str()) {
            return Err(UsageError(format!("eval.split `{}` is not train, val or test", self.eval.split)));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig, UsageError> {
        match (&self.encoder.preset, &self.encoder.model) {
            (Some(_), Some(_)) => Err(UsageError("encoder.preset and encoder.model are mutually exclusive".into())),
            (Some(name), None) => EncoderConfig::preset(name).map_err(|e| UsageError(e.to_string())),
            (None, Some(m)) => Ok(m.clone()),
            (None, None) => Ok(EncoderConfig::default()),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let mut p = self.encoder.pretrain.clone();
        p.train.seed = self.seed;
        p
    }

    pub fn frontend_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.frontend.train.clone() }
    }

    pub fn asr_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.asr.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(ExperimentConfig::parse("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn partial_sections_keep_section_defaults() {
        let cfg = ExperimentConfig::parse(r#"{"asr": {"epochs": 3}, "encoder": {"pretrain": {"train": {"epochs": 2}}}}"#)
            .unwrap();
        assert_eq!(cfg.asr.epochs, 3);
        assert_eq!(cfg.asr.scheduler, Scheduler::Noam);
        assert_eq!(cfg.asr.lr, ExperimentConfig::default().asr.lr);
        let p = cfg.pretrain_config();
        assert_eq!(p.train.epochs, 2);
        assert_eq!(p.train.scheduler, PretrainConfig::default().train.scheduler);
        assert_eq!(p.target_wer, PretrainConfig::default().target_wer);
    }

    #[test]
    fn top_level_seed_reaches_every_stage() {
        let cfg = ExperimentConfig::parse(r#"{"seed": 9, "frontend": {"train": {"seed": 4}}}"#).unwrap();
        assert_eq!(cfg.pretrain_config().train.seed, 9);
        assert_eq!(cfg.frontend_config().seed, 9);
        assert_eq!(cfg.asr_config().seed, 9);
    }

    #[test]
    fn encoder_selection() {
        let cfg = ExperimentConfig::parse(r#"{"encoder": {"preset": "medium-mini"}}"#).unwrap();
        assert_eq!(cfg.encoder_config().unwrap().d_model, 48);
        let cfg = ExperimentConfig::parse(r#"{"encoder": {"model": {"d_model": 32}}}"#).unwrap();
        assert_eq!(cfg.encoder_config().unwrap(), EncoderConfig { d_model: 32, ..EncoderConfig::default() });
        assert!(ExperimentConfig::parse(r#"{"encoder": {"preset": "large-mini", "model": {}}}"#).is_err());
        assert!(ExperimentConfig::parse(r#"{"encoder": {"preset": "huge"}}"#).is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::parse(r#"{"sed": 1}"#).is_err());
        assert!(ExperimentConfig::parse(r#"{"frontend": {"train": {"epochz": 1}}}"#).is_err());
        assert!(ExperimentConfig::parse(r#"{"frontend": {"train": {"epochs": 0}}}"#).is_err());
        assert!(ExperimentConfig::parse(r#"{"eval": {"split": "dev"}}"#).is_err());
        assert!(ExperimentConfig::parse("[]").is_err());
    }
}
