use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mae,
    Wer,
    CtcLoss,
}

/// One `(snr, condition, metric, seed)` cell of an SNR-grouped table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrRow {
    pub snr_db: f64,
    pub condition: String,
    pub metric: Metric,
    pub mean: f64,
    pub count: usize,
    pub seed: u64,
}

/// Per-utterance spectrogram error under one condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeRow {
    pub id: String,
    pub snr_db: f64,
    pub noise_type: String,
    pub condition: String,
    pub mae: f64,
}

/// Group `(snr, condition, value)` triples. Rows come out sorted by SNR,
/// conditions in order of first appearance.
pub fn snr_report<'a>(
    values: impl IntoIterator<Item = (f64, &'a str, f64)>,
    metric: Metric,
    seed: u64,
) -> Vec<SnrRow> {
    let mut conditions: Vec<&str> = Vec::new();
    let mut cells: Vec<(f64, usize, f64, usize)> = Vec::new();
    for (snr, cond, v) in values {
        let ci = match conditions.iter().position(|c| *c == cond) {
            Some(i) => i,
            None => {
                conditions.push(cond);
                conditions.len() - 1
            }
        };
        match cells.iter_mut().find(|c| c.0 == snr && c.1 == ci) {
            Some(c) => {
                c.2 += v;
                c.3 += 1;
            }
            None => cells.push((snr, ci, v, 1)),
        }
    }
    cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cells
        .into_iter()
        .map(|(snr, ci, sum, n)| SnrRow {
            snr_db: snr,
            condition: conditions[ci].to_string(),
            metric,
            mean: sum / n as f64,
            count: n,
            seed,
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    r.deserialize().map(|row| row.with_context(|| format!("malformed row in {}", path.display()))).collect()
}

/// SNR labels and one series per condition, for a grouped bar chart.
pub fn bar_series(report: &[SnrRow]) -> (Vec<f64>, Vec<(String, Vec<f64>)>) {
    let mut snrs: Vec<f64> = Vec::new();
    let mut series: Vec<(String, Vec<f64>)> = Vec::new();
    for r in report {
        if !snrs.contains(&r.snr_db) {
            snrs.push(r.snr_db);
        }
        if !series.iter().any(|(c, _)| *c == r.condition) {
            series.push((r.condition.clone(), Vec::new()));
        }
    }
    for (cond, values) in &mut series {
        *values = snrs
            .iter()
            .map(|s| report.iter().find(|r| r.snr_db == *s && r.condition == *cond).map_or(0.0, |r| r.mean))
            .collect();
    }
    (snrs, series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_sorted_by_snr_then_condition_order() {
        let rows = [(7.5, "noisy", 1.0), (2.5, "noisy", 3.0), (2.5, "denoised", 2.0), (2.5, "noisy", 5.0)];
        let r = snr_report(rows, Metric::Mae, 4);
        let cells: Vec<(f64, &str, f64, usize)> =
            r.iter().map(|x| (x.snr_db, x.condition.as_str(), x.mean, x.count)).collect();
        assert_eq!(cells, vec![(2.5, "noisy", 4.0, 2), (2.5, "denoised", 2.0, 1), (7.5, "noisy", 1.0, 1)]);
        assert!(r.iter().all(|x| x.seed == 4 && x.metric == Metric::Mae));
    }

    #[test]
    fn bar_series_fills_missing_cells_with_zero() {
        let r = snr_report([(2.5, "a", 1.0), (7.5, "b", 2.0)], Metric::Wer, 0);
        let (snrs, series) = bar_series(&r);
        assert_eq!(snrs, vec![2.5, 7.5]);
        assert_eq!(series, vec![("a".to_string(), vec![1.0, 0.0]), ("b".to_string(), vec![0.0, 2.0])]);
    }
}
