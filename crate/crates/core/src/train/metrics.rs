//! Task metrics and multi-seed summaries.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pairs(pred_len: usize, truth_len: usize) -> Result<()> {
    if pred_len == 0 {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    if pred_len != truth_len {
        return Err(Error::invalid(format!(
            "{pred_len} predictions for {truth_len} labels"
        )));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pairs(pred.len(), truth.len())?;
    let sq: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// Asymmetric prognostics score of one prediction: late predictions
/// (`pred > truth`) are penalized with scale 10, early ones with scale 13.
pub fn score_term(pred: f64, truth: f64) -> f64 {
    let d = pred - truth;
    if d < 0.0 {
        (-d / 13.0).exp() - 1.0
    } else {
        (d / 10.0).exp() - 1.0
    }
}

/// Mean of [`score_term`] over the samples.
pub fn score(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pairs(pred.len(), truth.len())?;
    let total: f64 = pred.iter().zip(truth).map(|(&p, &t)| score_term(p, t)).sum();
    Ok(total / pred.len() as f64)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pairs(pred.len(), truth.len())?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Unweighted mean of per-class F1 over every class that occurs in either
/// the predictions or the labels.
pub fn macro_f1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pairs(pred.len(), truth.len())?;
    let classes: BTreeSet<usize> = pred.iter().chain(truth).copied().collect();
    let mut total = 0.0;
    for &c in &classes {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        total += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    }
    Ok(total / classes.len() as f64)
}

/// Index of the largest logit in each row; ties resolve to the lower index.
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metrics {
    Regression { rmse: f64, score: f64 },
    Classification { accuracy: f64, macro_f1: f64 },
}

impl Metrics {
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        match *self {
            Metrics::Regression { rmse, score } => vec![("rmse", rmse), ("score", score)],
            Metrics::Classification { accuracy, macro_f1 } => {
                vec![("accuracy", accuracy), ("mf1", macro_f1)]
            }
        }
    }

    /// The model-selection criterion, oriented so that larger is better.
    pub fn selection_value(&self) -> f64 {
        match *self {
            Metrics::Regression { score, .. } => -score,
            Metrics::Classification { accuracy, .. } => accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    /// Population standard deviation over the runs.
    pub std: f64,
}

/// One line of the metrics output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub variant: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub runs: Vec<SeedRun>,
}

impl MetricsReport {
    pub fn new(variant: impl Into<String>) -> Self {
        MetricsReport {
            variant: variant.into(),
            runs: Vec::new(),
        }
    }

    pub fn push(&mut self, seed: u64, metrics: Metrics) -> Result<()> {
        if let Some(first) = self.runs.first() {
            if std::mem::discriminant(&first.metrics) != std::mem::discriminant(&metrics) {
                return Err(Error::invalid("cannot mix regression and classification runs"));
            }
        }
        self.runs.push(SeedRun { seed, metrics });
        Ok(())
    }

    pub fn summary(&self) -> Vec<MetricSummary> {
        let Some(first) = self.runs.first() else {
            return Vec::new();
        };
        first
            .metrics
            .named()
            .iter()
            .enumerate()
            .map(|(k, (name, _))| {
                let values: Vec<f64> = self.runs.iter().map(|r| r.metrics.named()[k].1).collect();
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                MetricSummary {
                    metric: name.to_string(),
                    mean,
                    std: var.sqrt(),
                }
            })
            .collect()
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.summary().into_iter().find(|s| s.metric == metric).map(|s| s.mean)
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        self.runs
            .iter()
            .flat_map(|r| {
                r.metrics.named().into_iter().map(move |(metric, value)| MetricRecord {
                    variant: self.variant.clone(),
                    seed: r.seed,
                    metric: metric.to_string(),
                    value,
                })
            })
            .collect()
    }
}

/// Plain-text table with one row per report, `mean ± std` per metric.
pub fn summary_table(reports: &[MetricsReport]) -> String {
    let Some(first) = reports.iter().find(|r| !r.runs.is_empty()) else {
        return String::new();
    };
    let names: Vec<String> = first.summary().into_iter().map(|s| s.metric).collect();
    let width = reports.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
    let mut out = format!("{:<width$}  {:>5}", "variant", "runs");
    for n in &names {
        out.push_str(&format!("  {:>21}", n));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{:<width$}  {:>5}", r.variant, r.runs.len()));
        for s in r.summary() {
            out.push_str(&format!("  {:>10.4} ± {:>8.4}", s.mean, s.std));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_regression() {
        let y = [3.0, 10.0, 125.0];
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        assert_eq!(score(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn score_branches() {
        let e1 = 1f64.exp() - 1.0;
        assert_eq!(score(&[10.0], &[0.0]).unwrap(), e1);
        assert_eq!(score(&[0.0], &[13.0]).unwrap(), e1);
        let early = score(&[0.0], &[10.0]).unwrap();
        assert_eq!(early, (10.0f64 / 13.0).exp() - 1.0);
        assert!(early < e1);
        assert!((e1 - 1.7183).abs() < 1e-4);
    }

    #[test]
    fn empty_split_rejected() {
        assert!(rmse(&[], &[]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn macro_f1_small_case() {
        // class 0: tp 1, fp 0, fn 1 -> 2/3; class 1: tp 1, fp 1, fn 0 -> 2/3
        let f = macro_f1(&[0, 1, 1], &[0, 0, 1]).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn report_summary_uses_population_std() {
        let mut r = MetricsReport::new("full");
        r.push(0, Metrics::Classification { accuracy: 0.5, macro_f1: 0.5 }).unwrap();
        r.push(1, Metrics::Classification { accuracy: 0.7, macro_f1: 0.5 }).unwrap();
        let s = r.summary();
        assert!((s[0].mean - 0.6).abs() < 1e-15);
        assert!((s[0].std - 0.1).abs() < 1e-15);
        assert_eq!(r.records().len(), 4);
        assert!(r.push(2, Metrics::Regression { rmse: 1.0, score: 1.0 }).is_err());
    }
}
