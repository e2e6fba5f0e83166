//! Optimizer, schedules, training loops, metric logs and checkpoints.

mod checkpoint;
mod loops;
mod optim;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use loops::{
    asr_batch_loss, frontend_batch_loss, frontend_examples, frontend_val_l1, train_asr, train_frontend,
    train_scratch_asr,
    FrontendExample, TrainOutcome,
};
pub use optim::{adam_step, noam_lr, AdamConfig, AdamState, ParamStore};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    Constant,
    Noam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub scheduler: Scheduler,
    pub warmup_steps: u64,
    pub min_lr: f64,
    pub seed: u64,
    /// Steps between validation passes; 0 evaluates once per epoch.
    pub eval_every: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 16,
            lr: 1e-3,
            scheduler: Scheduler::Constant,
            warmup_steps: 500,
            min_lr: 1e-6,
            seed: 0,
            eval_every: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.lr {
            return Err(Error::invalid("learning rates must satisfy 0 <= min_lr <= lr, lr > 0"));
        }
        if self.scheduler == Scheduler::Noam && self.warmup_steps == 0 {
            return Err(Error::invalid("noam warmup_steps must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        match self.scheduler {
            Scheduler::Constant => Ok(self.lr),
            Scheduler::Noam => noam_lr(step, self.lr, self.warmup_steps, self.min_lr),
        }
    }
}

/// One metric observation; logs are written as `step,split,metric,value,seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

pub const METRIC_HEADER: &str = "step,split,metric,value,seed";

pub fn write_metric_log(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    writeln!(buf, "{METRIC_HEADER}").unwrap();
    for r in rows {
        writeln!(buf, "{},{},{},{},{}", r.step, r.split, r.metric, r.value, r.seed).unwrap();
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_metric_log(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRIC_HEADER) {
        return Err(Error::invalid(format!("{}: expected header `{METRIC_HEADER}`", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::invalid(format!("{} line {}: malformed metric row", path.display(), i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(MetricRow {
                step: f[0].parse().map_err(|_| bad())?,
                split: f[1].to_string(),
                metric: f[2].to_string(),
                value: f[3].parse().map_err(|_| bad())?,
                seed: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Values of one (split, metric) series in step order.
pub fn series(rows: &[MetricRow], split: &str, metric: &str) -> Vec<(u64, f64)> {
    rows.iter().filter(|r| r.split == split && r.metric == metric).map(|r| (r.step, r.value)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            MetricRow { step: 0, split: "val".into(), metric: "ctc".into(), value: 3.25, seed: 1 },
            MetricRow { step: 50, split: "val".into(), metric: "wer".into(), value: 0.1, seed: 1 },
        ];
        let p = dir.path().join("m.csv");
        write_metric_log(&p, &rows).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("step,split,metric,value,seed\n"));
        assert_eq!(read_metric_log(&p).unwrap(), rows);
        assert_eq!(series(&rows, "val", "wer"), vec![(50, 0.1)]);
        std::fs::write(&p, "a,b\n").unwrap();
        assert!(read_metric_log(&p).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { min_lr: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
