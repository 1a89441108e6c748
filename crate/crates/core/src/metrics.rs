//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::config::F1Average;
use crate::error::{ensure_len, Error, Result};

/// `K × K` counts, rows are true classes and columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        ensure_len("predictions", preds.len(), labels.len())?;
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&p, &l) in preds.iter().zip(labels) {
            if p >= classes || l >= classes {
                return Err(Error::Range(format!("class index {} out of range for K={classes}", p.max(l))));
            }
            counts[l][p] += 1;
        }
        Ok(Self { classes, counts })
    }

    /// Per-class F1; a class with no true and no predicted samples scores 0.
    pub fn f1_scores(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                let tp = self.counts[k][k] as f64;
                let actual: u64 = self.counts[k].iter().sum();
                let predicted: u64 = self.counts.iter().map(|r| r[k]).sum();
                let denom = actual as f64 + predicted as f64;
                if denom == 0.0 {
                    0.0
                } else {
                    2.0 * tp / denom
                }
            })
            .collect()
    }

    pub fn support(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    ensure_len("predictions", preds.len(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::Shape("accuracy of an empty set".into()));
    }
    Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

/// Unweighted mean of per-class F1 over all `classes` classes.
pub fn macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    f1(preds, labels, classes, F1Average::Macro)
}

pub fn f1(preds: &[usize], labels: &[usize], classes: usize, average: F1Average) -> Result<f64> {
    if labels.is_empty() || classes == 0 {
        return Err(Error::Shape("F1 of an empty set".into()));
    }
    let cm = ConfusionMatrix::new(preds, labels, classes)?;
    let scores = cm.f1_scores();
    Ok(match average {
        F1Average::Macro => scores.iter().sum::<f64>() / classes as f64,
        F1Average::Weighted => {
            let support = cm.support();
            scores.iter().zip(&support).map(|(f, &s)| f * s as f64).sum::<f64>() / labels.len() as f64
        }
    })
}

/// Mean, and population standard deviation, of a sample.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}
