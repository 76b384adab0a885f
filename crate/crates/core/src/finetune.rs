//! Fine-tuning regimes (projection only / end to end) and prompted
//! evaluation of the full model.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::lm::{answer_nll_forward, greedy_generate, parse_label, prompt_example, Layout, LmParams, Vocab};
use crate::metrics::{classification_metrics, ClassificationResult, Prediction};
use crate::optim::{Adam, Module};
use crate::projection::ProjectionParams;
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Update the projection only; the LM stays frozen.
    ProjOnly,
    /// Update projection and LM together.
    EndToEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle_class_order: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            regime: Regime::ProjOnly,
            epochs: 1,
            lr: 1e-4,
            batch_size: 8,
            seed: 0,
            shuffle_class_order: true,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Task name, class list and the vocabulary built from them.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub name: String,
    pub classes: Vec<String>,
    pub vocab: Vocab,
}

impl Task {
    pub fn new(name: &str, classes: &[String]) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            classes: classes.to_vec(),
            vocab: Vocab::for_task(name, classes)?,
        })
    }

    pub fn layout(&self) -> Layout {
        Layout::from_vocab(&self.vocab)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epoch_mean_loss: Vec<f64>,
    pub wall_seconds: f64,
    pub lm_hash_before: String,
    pub lm_hash_after: String,
    pub proj_hash_before: String,
    pub proj_hash_after: String,
}

impl TrainLog {
    /// One JSON object per line: `{"step":…,"epoch":…,"loss":…}`.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn prompt_stream(root: RngState, purpose: &str, epoch: Option<usize>, index: usize) -> RngState {
    let base = root.derive_str(purpose);
    match epoch {
        Some(e) => base.derive(e as u64).derive(index as u64),
        None => base.derive(index as u64),
    }
}

/// Minimizes answer NLL over the train split with Adam. In
/// [`Regime::ProjOnly`] the returned LM is bit-identical to the input.
pub fn finetune(
    proj: &ProjectionParams,
    lm: &LmParams,
    ds: &LabeledDataset,
    task: &Task,
    cfg: &FinetuneConfig,
) -> Result<(ProjectionParams, LmParams, TrainLog)> {
    finetune_observed(proj, lm, ds, task, cfg, |_| Ok(()))
}

/// [`finetune`] with a callback receiving every step record as it is
/// produced, including the one whose loss turned out non-finite.
pub fn finetune_observed(
    proj: &ProjectionParams,
    lm: &LmParams,
    ds: &LabeledDataset,
    task: &Task,
    cfg: &FinetuneConfig,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<(ProjectionParams, LmParams, TrainLog)> {
    cfg.validate()?;
    let train = ds
        .split_view(Split::Train)
        .map_err(|_| Error::Data("fine-tuning needs a non-empty train split".into()))?;
    let started = Instant::now();
    let mut proj = proj.clone();
    let mut lm = lm.clone();
    let (lm_hash_before, proj_hash_before) = (lm.param_hash(), proj.param_hash());
    let adam = Adam::new(cfg.lr);
    let layout = task.layout();
    let root = RngState::new(cfg.seed);
    let mut steps = Vec::new();
    let mut epoch_mean_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = root.derive_str("batch-order").derive(epoch as u64).generator().permutation(train.len());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            proj.zero_grads();
            lm.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let shuffle = cfg
                    .shuffle_class_order
                    .then(|| prompt_stream(root, "train-prompt", Some(epoch), i));
                let ex = prompt_example(&task.vocab, &task.name, &task.classes, train[i], shuffle)?;
                let pass = answer_nll_forward(&lm, &proj, layout, &ex)?;
                pass.backward(&mut lm, &mut proj, scale)?;
                batch_loss += pass.loss * scale;
            }
            let step = steps.len();
            let record = StepRecord {
                step,
                epoch,
                loss: batch_loss,
            };
            on_step(&record)?;
            if !batch_loss.is_finite() {
                return Err(Error::Numerical {
                    name: format!("training loss at step {step}"),
                    detail: batch_loss.to_string(),
                });
            }
            proj.adam_step(&adam)?;
            if cfg.regime == Regime::EndToEnd {
                lm.adam_step(&adam)?;
            }
            epoch_loss += batch_loss * batch.len() as f64;
            steps.push(record);
        }
        epoch_mean_loss.push(epoch_loss / train.len() as f64);
    }
    proj.zero_grads();
    lm.zero_grads();
    let log = TrainLog {
        steps,
        epoch_mean_loss,
        wall_seconds: started.elapsed().as_secs_f64(),
        lm_hash_after: lm.param_hash(),
        proj_hash_after: proj.param_hash(),
        lm_hash_before,
        proj_hash_before,
    };
    Ok((proj, lm, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MllmEvaluation {
    pub result: ClassificationResult,
    pub predictions: Vec<Prediction>,
    pub generations: Vec<String>,
}

pub const DEFAULT_MAX_NEW_TOKENS: usize = 3;

/// Prompted zero-shot classification: seeded class shuffle, greedy
/// decoding, strict label parsing.
pub fn evaluate_mllm(
    proj: &ProjectionParams,
    lm: &LmParams,
    ds: &LabeledDataset,
    task: &Task,
    split: Split,
    seed: u64,
    max_new_tokens: usize,
) -> Result<MllmEvaluation> {
    let examples = ds
        .split_view(split)
        .map_err(|_| Error::Data(format!("cannot evaluate on empty {split} split")))?;
    let layout = task.layout();
    let root = RngState::new(seed);
    let mut gold = Vec::with_capacity(examples.len());
    let mut predictions = Vec::with_capacity(examples.len());
    let mut generations = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let rng = prompt_stream(root, "eval-prompt", None, i);
        let prompted = prompt_example(&task.vocab, &task.name, &task.classes, ex, Some(rng))?;
        let h_v = proj.project(&prompted.image)?;
        let ids = greedy_generate(lm, &h_v, layout, &prompted.question, max_new_tokens)?;
        let text = task.vocab.decode(&ids);
        predictions.push(parse_label(&text, &task.classes));
        generations.push(text);
        gold.push(ex.label);
    }
    Ok(MllmEvaluation {
        result: classification_metrics(&gold, &predictions, task.classes.len())?,
        predictions,
        generations,
    })
}
