//! Richness probe: a fixed-architecture MLP (token mean-pool, then a
//! Linear+ReLU stack, then class logits) trained on frozen features.

use serde::{Deserialize, Serialize};

use crate::data::{ImageEmbeddingSequence, LabeledDataset, LabeledExample, Split};
use crate::error::{Error, Result};
use crate::metrics::{classification_metrics, ClassificationResult, Prediction};
use crate::ops::{linear_backward, linear_forward, mean_pool_tokens, relu, relu_backward, softmax_cross_entropy};
use crate::optim::{Adam, Module, Parameter};
use crate::projection::ProjectionParams;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Hidden widths of the image-only reference MLP.
pub const IMAGE_ONLY_HIDDEN: [usize; 5] = [2000, 3600, 1024, 600, 256];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without a train-loss improvement greater than `min_delta`
    /// before stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            batch_size: 128,
            lr: 1e-4,
            patience: 5,
            min_delta: 1e-4,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    /// The large reference ladder, for full-size pooled embeddings.
    pub fn image_only_preset() -> Self {
        Self {
            hidden: IMAGE_ONLY_HIDDEN.to_vec(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Config("probe hidden sizes must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("probe batch size must be >= 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("probe learning rate {} invalid", self.lr)));
        }
        Ok(())
    }
}

/// Layer widths from input to class logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeArchitecture {
    pub widths: Vec<usize>,
}

impl ProbeArchitecture {
    pub fn new(input: usize, hidden: &[usize], classes: usize) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(classes);
        Self { widths }
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub setting: String,
    pub seed: u64,
    pub epochs_run: usize,
    /// Full-train-set loss after each epoch.
    pub loss_history: Vec<f64>,
    /// Epoch whose weights were kept (lowest train loss).
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub architecture: ProbeArchitecture,
    pub layers: Vec<(Parameter, Parameter)>,
    pub provenance: Provenance,
}

impl Module for ProbeModel {
    fn parameters(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect()
    }
}

struct ForwardTrace {
    inputs: Vec<Tensor>,
    pre_acts: Vec<Tensor>,
}

impl ProbeModel {
    pub fn init(architecture: ProbeArchitecture, rng: RngState) -> Self {
        let mut g = rng.generator();
        let layers = architecture
            .layer_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, (fi, fo))| {
                (
                    Parameter::fan_in_uniform(format!("probe.l{i}.w"), &[fi, fo], fi, &mut g),
                    Parameter::zeros(format!("probe.l{i}.b"), &[fo]),
                )
            })
            .collect();
        Self {
            architecture,
            layers,
            provenance: Provenance {
                setting: String::new(),
                seed: 0,
                epochs_run: 0,
                loss_history: Vec::new(),
                best_epoch: 0,
            },
        }
    }

    pub fn num_classes(&self) -> usize {
        *self.architecture.widths.last().unwrap()
    }

    /// Logits for a batch of already-pooled rows.
    pub fn logits(&self, pooled: &Tensor) -> Result<Tensor> {
        Ok(self.forward(pooled)?.0)
    }

    fn forward(&self, pooled: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        let mut x = pooled.clone();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let z = linear_forward(&x, &w.value, &b.value)?;
            inputs.push(x);
            if i + 1 == self.layers.len() {
                x = z;
            } else {
                x = relu(&z);
                pre_acts.push(z);
            }
        }
        Ok((x, ForwardTrace { inputs, pre_acts }))
    }

    /// Mean cross-entropy on a batch, accumulating gradients.
    pub fn loss_and_backward(&mut self, pooled: &Tensor, labels: &[usize]) -> Result<f64> {
        let (logits, trace) = self.forward(pooled)?;
        let ce = softmax_cross_entropy(&logits, labels)?;
        let mut g = ce.grad;
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                g = relu_backward(&trace.pre_acts[i], &g);
            }
            let (w, b) = &mut self.layers[i];
            g = linear_backward(&trace.inputs[i], &w.value, &g, &mut w.grad, &mut b.grad)?;
        }
        Ok(ce.loss)
    }

    pub fn loss(&self, pooled: &Tensor, labels: &[usize]) -> Result<f64> {
        Ok(softmax_cross_entropy(&self.logits(pooled)?, labels)?.loss)
    }

    /// Argmax class per row, ties to the lowest index.
    pub fn predict(&self, pooled: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(pooled)?;
        let (n, _) = logits.dims2()?;
        Ok((0..n)
            .map(|r| {
                let row = logits.row(r);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }
}

/// Post-projection tokens `H_v` for every example, same ids, labels and
/// splits. Pooling is left to the probe.
pub fn extract_post_projection(proj: &ProjectionParams, ds: &LabeledDataset) -> Result<LabeledDataset> {
    let examples = ds
        .examples
        .iter()
        .map(|ex| {
            Ok(LabeledExample {
                id: ex.id.clone(),
                embedding: ImageEmbeddingSequence::new(proj.project(ex.embedding.tokens())?)?,
                label: ex.label,
                split: ex.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset {
        name: format!("{}-post-projection", ds.name),
        classes: ds.classes.clone(),
        examples,
        tokens: ds.tokens,
        dim: proj.dims().d_lm,
        prototypes: None,
    })
}

/// Mean-pooled rows `N×D` and labels of one split.
pub fn pooled_split(ds: &LabeledDataset, split: Split) -> Result<(Tensor, Vec<usize>)> {
    let examples = ds.split_view(split)?;
    let mut data = Vec::with_capacity(examples.len() * ds.dim);
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        data.extend_from_slice(mean_pool_tokens(ex.embedding.tokens())?.data());
        labels.push(ex.label);
    }
    Ok((Tensor::new(vec![labels.len(), ds.dim], data)?, labels))
}

fn gather_rows(x: &Tensor, rows: &[usize]) -> Tensor {
    let d = x.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    Tensor::new(vec![rows.len(), d], data).expect("row gather")
}

/// Trains a probe on the train split of `ds` with Adam and early stopping
/// on the full train loss; the lowest-loss weights are kept.
pub fn train_probe(ds: &LabeledDataset, cfg: &ProbeConfig, setting: &str) -> Result<ProbeModel> {
    cfg.validate()?;
    let (x, y) = pooled_split(ds, Split::Train)
        .map_err(|_| Error::Data("probe training needs a non-empty train split".into()))?;
    let k = ds.num_classes();
    if let Some(&bad) = y.iter().find(|&&l| l >= k) {
        return Err(Error::Label(format!("label {bad} but probe has {k} classes")));
    }
    let root = RngState::new(cfg.seed);
    let arch = ProbeArchitecture::new(ds.dim, &cfg.hidden, k);
    let mut model = ProbeModel::init(arch, root.derive_str("probe-init"));
    let adam = Adam::new(cfg.lr);
    let n = y.len();

    let mut best = (model.clone(), f64::INFINITY, 0usize);
    let mut history = Vec::new();
    let mut since_improved = 0;
    for epoch in 0..cfg.max_epochs {
        let order = root.derive_str("probe-order").derive(epoch as u64).generator().permutation(n);
        for batch in order.chunks(cfg.batch_size) {
            let xb = gather_rows(&x, batch);
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            model.zero_grads();
            let loss = model.loss_and_backward(&xb, &yb)?;
            if !loss.is_finite() {
                return Err(Error::Numerical {
                    name: format!("probe loss at epoch {epoch}"),
                    detail: loss.to_string(),
                });
            }
            model.adam_step(&adam)?;
        }
        let loss = model.loss(&x, &y)?;
        history.push(loss);
        if loss < best.1 - cfg.min_delta {
            since_improved = 0;
        } else {
            since_improved += 1;
        }
        if loss < best.1 {
            best = (model.clone(), loss, epoch);
        }
        if since_improved >= cfg.patience {
            break;
        }
    }
    let mut model = best.0;
    model.zero_grads();
    model.provenance = Provenance {
        setting: setting.to_string(),
        seed: cfg.seed,
        epochs_run: history.len(),
        loss_history: history,
        best_epoch: best.2,
    };
    Ok(model)
}

/// Scores a trained probe on one split.
pub fn probe_richness(model: &ProbeModel, ds: &LabeledDataset, split: Split) -> Result<ClassificationResult> {
    if model.num_classes() != ds.num_classes() {
        return Err(Error::Label(format!(
            "probe has {} classes, dataset {}",
            model.num_classes(),
            ds.num_classes()
        )));
    }
    let (x, y) = pooled_split(ds, split)?;
    let pred: Vec<Prediction> = model.predict(&x)?.into_iter().map(Prediction::Class).collect();
    classification_metrics(&y, &pred, ds.num_classes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOnlyResult {
    pub macro_f1: f64,
    pub accuracy: f64,
    pub param_count: usize,
}

/// The probe machinery trained directly on pre-projection embeddings.
pub fn image_only_baseline(ds: &LabeledDataset, cfg: &ProbeConfig) -> Result<ImageOnlyResult> {
    let model = train_probe(ds, cfg, "image-only")?;
    let r = probe_richness(&model, ds, Split::Test)?;
    Ok(ImageOnlyResult {
        macro_f1: r.macro_f1,
        accuracy: r.accuracy,
        param_count: model.num_params(),
    })
}
