//! Zero-shot cosine classification against label prototypes, and the
//! uniform-random baseline.

use serde::{Deserialize, Serialize};

use crate::data::{ImageEmbeddingSequence, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{classification_metrics, mean_std, ClassificationResult, Prediction};
use crate::ops::mean_pool_tokens;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// One embedding per class name, `K×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPrototypes {
    matrix: Tensor,
    norms: Vec<f64>,
}

impl LabelPrototypes {
    pub fn new(matrix: Tensor) -> Result<Self> {
        let (k, _) = matrix.dims2()?;
        matrix.ensure_finite("label prototypes")?;
        let norms: Vec<f64> = (0..k).map(|c| l2(matrix.row(c))).collect();
        if let Some(c) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::Degenerate(format!("prototype row {c} has zero norm")));
        }
        Ok(Self { matrix, norms })
    }

    pub fn num_classes(&self) -> usize {
        self.norms.len()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean-pools the tokens and returns the class with the highest cosine
/// similarity; ties go to the lowest index.
pub fn cosine_classify(e: &ImageEmbeddingSequence, protos: &LabelPrototypes) -> Result<usize> {
    let pooled = mean_pool_tokens(e.tokens())?;
    let (_, d) = protos.matrix.dims2()?;
    if pooled.len() != d {
        return Err(Error::shape("cosine_classify", &[pooled.len()], &[d]));
    }
    let norm = l2(pooled.data());
    if norm == 0.0 {
        return Err(Error::Degenerate("pooled image embedding has zero norm".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..protos.num_classes() {
        let dot: f64 = pooled.data().iter().zip(protos.matrix.row(c)).map(|(a, b)| a * b).sum();
        let cos = dot / (norm * protos.norms[c]);
        if cos > best.1 {
            best = (c, cos);
        }
    }
    Ok(best.0)
}

/// Scores the cosine classifier on one split.
pub fn evaluate_cosine(ds: &LabeledDataset, protos: &LabelPrototypes, split: Split) -> Result<ClassificationResult> {
    if protos.num_classes() != ds.num_classes() {
        return Err(Error::Label(format!(
            "{} prototypes for {} classes",
            protos.num_classes(),
            ds.num_classes()
        )));
    }
    let examples = ds.split_view(split)?;
    let mut gold = Vec::with_capacity(examples.len());
    let mut pred = Vec::with_capacity(examples.len());
    for ex in examples {
        gold.push(ex.label);
        pred.push(Prediction::Class(cosine_classify(&ex.embedding, protos)?));
    }
    classification_metrics(&gold, &pred, ds.num_classes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    /// Analytic expectation, `1/K`.
    pub expected_accuracy: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub trials: usize,
}

/// Monte Carlo statistics of uniform random guessing on the test split.
pub fn random_uniform_baseline(ds: &LabeledDataset, seed: u64, trials: usize) -> Result<RandomBaseline> {
    let gold: Vec<usize> = ds.split_view(Split::Test)?.iter().map(|e| e.label).collect();
    random_baseline_for(&gold, ds.num_classes(), seed, trials)
}

pub fn random_baseline_for(gold: &[usize], k: usize, seed: u64, trials: usize) -> Result<RandomBaseline> {
    if trials < 1 {
        return Err(Error::Parameter("trials must be at least 1".into()));
    }
    if k < 2 {
        return Err(Error::Parameter("random baseline needs at least 2 classes".into()));
    }
    let root = RngState::new(seed).derive_str("random-baseline");
    let mut f1s = Vec::with_capacity(trials);
    let mut accs = Vec::with_capacity(trials);
    let mut pred = vec![Prediction::NoMatch; gold.len()];
    for t in 0..trials {
        let mut g = root.derive(t as u64).generator();
        for p in pred.iter_mut() {
            *p = Prediction::Class(g.below(k));
        }
        let r = classification_metrics(gold, &pred, k)?;
        f1s.push(r.macro_f1);
        accs.push(r.accuracy);
    }
    let (accuracy_mean, accuracy_std) = mean_std(&accs);
    let (macro_f1_mean, macro_f1_std) = mean_std(&f1s);
    Ok(RandomBaseline {
        expected_accuracy: 1.0 / k as f64,
        accuracy_mean,
        accuracy_std,
        macro_f1_mean,
        macro_f1_std,
        trials,
    })
}
