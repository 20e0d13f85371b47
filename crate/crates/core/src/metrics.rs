//! Regression (Acc7, binary F1, MAE, Corr) and classification (Acc, wF1)
//! metrics, plus the serialized report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::protocols::Protocol;

fn check_pair(preds: usize, labels: usize, what: &'static str) -> Result<()> {
    if preds == 0 || labels == 0 {
        return Err(Error::EmptyInput(what));
    }
    if preds != labels {
        return Err(Error::dim(what, labels, preds));
    }
    Ok(())
}

/// Seven-way bin of a score: clamp to `[-3, 3]`, round half away from zero.
pub fn sentiment_bin(x: f64) -> i32 {
    x.clamp(-3.0, 3.0).round() as i32
}

/// Class-balanced seven-class accuracy: mean per-bin recall over the bins
/// that occur in `labels`.
pub fn acc7(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds.len(), labels.len(), "acc7")?;
    let mut hit = [0usize; 7];
    let mut support = [0usize; 7];
    for (&p, &y) in preds.iter().zip(labels) {
        let b = (sentiment_bin(y) + 3) as usize;
        support[b] += 1;
        if sentiment_bin(p) == sentiment_bin(y) {
            hit[b] += 1;
        }
    }
    let present: Vec<f64> = (0..7).filter(|&b| support[b] > 0).map(|b| hit[b] as f64 / support[b] as f64).collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Fraction of samples whose seven-way bins agree.
pub fn acc7_sample_mean(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds.len(), labels.len(), "acc7")?;
    let hits = preds.iter().zip(labels).filter(|(&p, &y)| sentiment_bin(p) == sentiment_bin(y)).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Per-class F1 with zero when precision and recall are both zero.
fn f1(tp: usize, predicted: usize, actual: usize) -> f64 {
    let p = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
    let r = if actual > 0 { tp as f64 / actual as f64 } else { 0.0 };
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Per-class F1 scores and supports for class indices in `0..num_classes`.
pub fn per_class_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<(f64, usize)>> {
    check_pair(preds.len(), labels.len(), "per_class_f1")?;
    if let Some(&c) = preds.iter().chain(labels).find(|&&c| c >= num_classes) {
        return Err(Error::Domain(format!("class {c} outside 0..{num_classes}")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut predicted = vec![0usize; num_classes];
    let mut actual = vec![0usize; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        predicted[p] += 1;
        actual[y] += 1;
        if p == y {
            tp[p] += 1;
        }
    }
    Ok((0..num_classes).map(|c| (f1(tp[c], predicted[c], actual[c]), actual[c])).collect())
}

fn support_weighted(per_class: &[(f64, usize)]) -> f64 {
    let n: usize = per_class.iter().map(|&(_, s)| s).sum();
    per_class.iter().map(|&(f, s)| f * s as f64 / n as f64).sum()
}

/// Support-weighted F1 after splitting scores at zero (zero counts as
/// non-negative).
pub fn binary_f1(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds.len(), labels.len(), "binary_f1")?;
    let bin = |x: f64| usize::from(x >= 0.0);
    let p: Vec<usize> = preds.iter().map(|&x| bin(x)).collect();
    let y: Vec<usize> = labels.iter().map(|&x| bin(x)).collect();
    Ok(support_weighted(&per_class_f1(&p, &y, 2)?))
}

pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds.len(), labels.len(), "mae")?;
    Ok(preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / preds.len() as f64)
}

/// Pearson correlation; a constant side leaves it undefined (domain error).
pub fn pearson_corr(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds.len(), labels.len(), "pearson_corr")?;
    let n = preds.len() as f64;
    let mp = preds.iter().sum::<f64>() / n;
    let my = labels.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &y) in preds.iter().zip(labels) {
        let (dp, dy) = (p - mp, y - my);
        sxy += dp * dy;
        sxx += dp * dp;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Domain("correlation undefined for zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(preds.len(), labels.len(), "accuracy")?;
    Ok(preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / preds.len() as f64)
}

pub fn weighted_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    Ok(support_weighted(&per_class_f1(preds, labels, num_classes)?))
}

pub const REGRESSION_METRICS: [&str; 5] = ["acc7", "acc7_sample", "f1", "mae", "corr"];
pub const CLASSIFICATION_METRICS: [&str; 2] = ["acc", "wf1"];

pub fn metric_names(task: Task) -> &'static [&'static str] {
    match task {
        Task::Regression => &REGRESSION_METRICS,
        Task::Classification => &CLASSIFICATION_METRICS,
    }
}

/// Metric values for one protocol; `None` marks an undefined value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub protocol: Protocol,
    pub seed: u64,
    pub metrics: BTreeMap<String, Option<f64>>,
}

impl MetricReport {
    pub fn regression(preds: &[f64], labels: &[f64], protocol: Protocol, seed: u64) -> Result<Self> {
        let mut m = BTreeMap::new();
        m.insert("acc7".to_string(), Some(acc7(preds, labels)?));
        m.insert("acc7_sample".to_string(), Some(acc7_sample_mean(preds, labels)?));
        m.insert("f1".to_string(), Some(binary_f1(preds, labels)?));
        m.insert("mae".to_string(), Some(mae(preds, labels)?));
        m.insert("corr".to_string(), pearson_corr(preds, labels).ok());
        Ok(Self { task: Task::Regression, protocol, seed, metrics: m })
    }

    pub fn classification(preds: &[usize], labels: &[usize], num_classes: usize, protocol: Protocol, seed: u64) -> Result<Self> {
        let mut m = BTreeMap::new();
        m.insert("acc".to_string(), Some(accuracy(preds, labels)?));
        m.insert("wf1".to_string(), Some(weighted_f1(preds, labels, num_classes)?));
        Ok(Self { task: Task::Classification, protocol, seed, metrics: m })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied().flatten()
    }

    /// The headline metric and whether larger is better.
    pub fn primary(&self) -> (&'static str, bool) {
        match self.task {
            Task::Regression => ("mae", false),
            Task::Classification => ("acc", true),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("metric report JSON: {e}")))
    }

    pub fn csv_header(task: Task) -> String {
        let mut cols = vec!["protocol", "seed"];
        cols.extend_from_slice(metric_names(task));
        cols.join(",")
    }

    /// `protocol,seed,<metrics in fixed order>`; undefined values are empty.
    pub fn csv_row(&self) -> String {
        let mut cells = vec![csv_cell(&self.protocol.to_string()), self.seed.to_string()];
        for name in metric_names(self.task) {
            cells.push(self.get(name).map(format_metric).unwrap_or_default());
        }
        cells.join(",")
    }
}

/// Fixed-precision rendering used in every table.
pub fn format_metric(v: f64) -> String {
    format!("{v:.6}")
}

pub fn csv_cell(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, sd))
}
