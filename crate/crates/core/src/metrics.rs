//! Classification metrics: accuracy, per-class F1, macro-F1.
//!
//! Macro-F1 averages per-class F1 over ALL classes defined at a level, not
//! only the observed ones; a class with precision + recall = 0 contributes
//! an F1 of 0. That convention keeps rarely-predicted classes visible.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Metrics for one hierarchy level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub level: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// (label, f1) for every class defined at the level.
    pub per_class_f1: Vec<(String, f64)>,
}

/// Per-level metrics for a whole evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_level: Vec<LevelMetrics>,
}

impl MetricsReport {
    /// Early-stopping selection score: macro-F1 summed over levels.
    pub fn summed_macro_f1(&self) -> f64 {
        self.per_level.iter().map(|l| l.macro_f1).sum()
    }
}

/// Computes metrics for one level from gold/predicted class indices.
/// `labels` enumerates every class defined at the level.
pub fn level_metrics(
    level: usize,
    labels: &[String],
    gold: &[usize],
    pred: &[usize],
) -> Result<LevelMetrics> {
    if gold.len() != pred.len() {
        return Err(Error::data(format!(
            "metrics: {} gold labels vs {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let k = labels.len();
    if let Some(&bad) = gold.iter().chain(pred).find(|&&i| i >= k) {
        return Err(Error::data(format!(
            "metrics: class index {bad} out of range for {k} classes"
        )));
    }
    let n = gold.len();
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fneg = vec![0usize; k];
    let mut correct = 0usize;
    for (&g, &p) in gold.iter().zip(pred) {
        if g == p {
            correct += 1;
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[g] += 1;
        }
    }
    let mut per_class_f1 = Vec::with_capacity(k);
    let mut f1_sum = 0.0f64;
    for c in 0..k {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        let f1 = if denom == 0 {
            0.0
        } else {
            2.0 * tp[c] as f64 / denom as f64
        };
        f1_sum += f1;
        per_class_f1.push((labels[c].clone(), f1));
    }
    Ok(LevelMetrics {
        level,
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        macro_f1: if k == 0 { 0.0 } else { f1_sum / k as f64 },
        per_class_f1,
    })
}
