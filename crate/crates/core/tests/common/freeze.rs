//! Which parameters fine-tuning is allowed to touch.

use mmprobe::data::{generate_synthetic, LabeledDataset, SyntheticSpec};
use mmprobe::finetune::{finetune, FinetuneConfig, Regime, Task};
use mmprobe::lm::{LmConfig, LmParams};
use mmprobe::optim::Module;
use mmprobe::projection::{ProjectionDims, ProjectionParams};
use mmprobe::rng::RngState;

use super::{ensure, lib, Outcome};

pub const RUNS: u64 = 50;

pub struct Case {
    pub proj: ProjectionParams,
    pub lm: LmParams,
    pub ds: LabeledDataset,
    pub task: Task,
    pub cfg: FinetuneConfig,
}

fn bytes<M: Module>(m: &M) -> Vec<Vec<u8>> {
    m.parameters().iter().map(|p| p.value.to_le_bytes()).collect()
}

/// Random shapes, data, learning rate, batch size and epoch count.
pub fn random_case(seed: u64, regime: Regime) -> Result<Case, String> {
    let mut g = RngState::new(seed).derive_str("freeze-case").generator();
    let spec = SyntheticSpec {
        classes: 2 + g.below(3),
        tokens: 1 + g.below(3),
        dim: 2 + g.below(6),
        mean_scale: 1.0,
        noise_std: g.uniform(0.1, 2.0),
        train_per_class: 1 + g.below(4),
        test_per_class: 1,
        seed,
    };
    let ds = lib(generate_synthetic(&spec))?;
    let task = lib(Task::new("freeze check", &ds.classes))?;
    let n_heads = 1 + g.below(2);
    let d_model = n_heads * (2 + g.below(4));
    let lm_cfg = LmConfig {
        vocab_size: task.vocab.len(),
        d_model,
        n_layers: 1 + g.below(2),
        n_heads,
        d_ff: 2 + g.below(8),
        max_len: 64,
    };
    let dims = ProjectionDims {
        d_in: spec.dim,
        d_hidden: 2 + g.below(8),
        d_lm: d_model,
    };
    let cfg = FinetuneConfig {
        regime,
        epochs: 1 + g.below(2),
        lr: 10f64.powf(g.uniform(-4.0, -1.0)),
        batch_size: 1 + g.below(4),
        seed: g.next_u64(),
        shuffle_class_order: g.below(2) == 0,
    };
    Ok(Case {
        proj: lib(ProjectionParams::init(dims, RngState::new(seed).derive_str("proj")))?,
        lm: lib(LmParams::init(lm_cfg, RngState::new(seed).derive_str("lm")))?,
        ds,
        task,
        cfg,
    })
}

/// Projection-only runs leave every LM tensor byte-identical and move the
/// projection.
pub fn proj_only_runs() -> Outcome {
    let mut moved = 0;
    for seed in 0..RUNS {
        let c = random_case(seed, Regime::ProjOnly)?;
        let (proj, lm, log) = lib(finetune(&c.proj, &c.lm, &c.ds, &c.task, &c.cfg))?;
        ensure(bytes(&lm) == bytes(&c.lm), || format!("run {seed}: LM tensors changed"))?;
        ensure(lm.param_hash() == c.lm.param_hash(), || format!("run {seed}: LM hash changed"))?;
        ensure(log.lm_hash_after == log.lm_hash_before, || format!("run {seed}: log shows LM change"))?;
        if bytes(&proj) != bytes(&c.proj) {
            moved += 1;
        }
    }
    ensure(moved == RUNS, || format!("projection moved in only {moved}/{RUNS} runs"))?;
    Ok(format!("{RUNS} randomized runs, LM hash unchanged in all"))
}

/// End-to-end training with a zero learning rate changes nothing.
pub fn e2e_zero_lr() -> Outcome {
    for seed in 0..10 {
        let mut c = random_case(seed, Regime::EndToEnd)?;
        c.cfg.lr = 0.0;
        let (proj, lm, _) = lib(finetune(&c.proj, &c.lm, &c.ds, &c.task, &c.cfg))?;
        ensure(bytes(&lm) == bytes(&c.lm), || format!("case {seed}: LM changed at lr 0"))?;
        ensure(bytes(&proj) == bytes(&c.proj), || format!("case {seed}: projection changed at lr 0"))?;
    }
    Ok("10 end-to-end runs at lr 0, all parameters byte-identical".into())
}

pub fn criterion() -> Outcome {
    let a = proj_only_runs()?;
    let b = e2e_zero_lr()?;
    Ok(format!("{a}; {b}"))
}
