//! Classification metrics and percent deltas.
//!
//! Macro-F1 averages over all `K` dataset classes, with F1 := 0 whenever
//! precision and recall are both undefined or zero. A [`Prediction::NoMatch`]
//! lands in a sink column: it is wrong for accuracy, counts as a false
//! negative for the gold class, and is never part of the macro average.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Prediction {
    Class(usize),
    NoMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub accuracy: f64,
    /// `K × (K + 1)`: row = gold, column = predicted, last column = NoMatch.
    pub confusion: Vec<Vec<u64>>,
    pub n: u64,
    pub no_match: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn classification_metrics(gold: &[usize], pred: &[Prediction], k: usize) -> Result<ClassificationResult> {
    if gold.len() != pred.len() {
        return Err(Error::shape("classification_metrics", &[gold.len()], &[pred.len()]));
    }
    if gold.is_empty() {
        return Err(Error::EmptyInput("no examples to score".into()));
    }
    let mut confusion = vec![vec![0u64; k + 1]; k];
    for (&g, &p) in gold.iter().zip(pred) {
        if g >= k {
            return Err(Error::Label(format!("gold label {g} out of range for {k} classes")));
        }
        let col = match p {
            Prediction::Class(c) if c < k => c,
            Prediction::Class(c) => return Err(Error::Label(format!("predicted class {c} out of range for {k} classes"))),
            Prediction::NoMatch => k,
        };
        confusion[g][col] += 1;
    }
    let n = gold.len() as u64;
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = confusion[c][c];
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = (0..k).map(|g| confusion[g][c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (predicted + support) as f64
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support,
        });
    }
    let macro_f1 = if k == 0 {
        0.0
    } else {
        per_class.iter().map(|m| m.f1).sum::<f64>() / k as f64
    };
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let no_match = confusion.iter().map(|row| row[k]).sum();
    Ok(ClassificationResult {
        per_class,
        macro_f1,
        accuracy: ratio(correct, n),
        confusion,
        n,
        no_match,
    })
}

/// `100 · (new − original) / original`, full precision.
pub fn percent_change(original: f64, new: f64) -> Result<f64> {
    if original == 0.0 {
        return Err(Error::UndefinedDelta);
    }
    Ok(100.0 * (new - original) / original)
}

/// Round half away from zero to `places` decimals.
pub fn round_half_away(x: f64, places: i32) -> f64 {
    let scale = 10f64.powi(places);
    (x * scale).round() / scale
}

/// `+462.41%` / `-27.49%` style display string.
pub fn format_percent(delta: f64) -> String {
    let r = round_half_away(delta, 2);
    let r = if r == 0.0 { 0.0 } else { r };
    if r >= 0.0 {
        format!("+{r:.2}%")
    } else {
        format!("{r:.2}%")
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
