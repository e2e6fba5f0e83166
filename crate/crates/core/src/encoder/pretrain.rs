use serde::{Deserialize, Serialize};

use crate::asr::{clean_inputs, AsrModel};
use crate::corpus::Utterance;
use crate::dsp::FeatureStats;
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::numgrad::Rng;
use crate::trainer::{train_asr, Scheduler, TrainConfig, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    /// Stop once validation greedy WER reaches this value.
    pub target_wer: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            train: TrainConfig {
                epochs: 30,
                lr: 2e-3,
                scheduler: Scheduler::Noam,
                warmup_steps: 200,
                ..TrainConfig::default()
            },
            target_wer: 0.15,
        }
    }
}

pub struct PretrainOutcome {
    pub model: AsrModel,
    pub outcome: TrainOutcome,
    pub converged: bool,
}

/// Train encoder and CTC head on clean speech.
pub fn pretrain_backbone(
    train: &[Utterance],
    val: &[Utterance],
    encoder: &EncoderConfig,
    cfg: &PretrainConfig,
    vocab: usize,
    stats: &FeatureStats,
    word_len: usize,
) -> Result<PretrainOutcome> {
    let mut rng = Rng::new(cfg.train.seed ^ 0xBAC0_B0DE);
    let mut model = AsrModel::init(encoder.clone(), vocab, stats.clone(), &mut rng)?;
    let tr = clean_inputs(train, stats)?;
    let va = clean_inputs(val, stats)?;
    let outcome = train_asr(&mut model, &tr, &va, &cfg.train, word_len, Some(cfg.target_wer))?;
    let converged = outcome.best_value <= cfg.target_wer;
    if !converged {
        log::warn!(
            "pretraining stopped at validation WER {:.3}, above the target {:.3}",
            outcome.best_value,
            cfg.target_wer
        );
    }
    Ok(PretrainOutcome { model, outcome, converged })
}
