//! Analytic gradients against central finite differences, every layer,
//! many seeds and shapes. Each check returns the worst relative error seen.

use std::time::Instant;

use mmprobe::gradcheck::{check_coordinates, DEFAULT_STEP};
use mmprobe::lm::{answer_nll, answer_nll_forward, Layout, LmConfig, LmParams, PromptedExample};
use mmprobe::ops::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, linear_backward, linear_forward, mean_pool_backward, mean_pool_tokens, relu,
    relu_backward, softmax_cross_entropy,
};
use mmprobe::optim::Module;
use mmprobe::probe::{ProbeArchitecture, ProbeModel};
use mmprobe::projection::{ProjectionDims, ProjectionParams};
use mmprobe::rng::{RngState, SeededRng};
use mmprobe::Tensor;

use super::Outcome;

pub const TOL: f64 = 1e-5;
pub const BUDGET_SECS: f64 = 60.0;

const SEEDS: u64 = 20;
const RESOLVABLE: f64 = 1e-5;

fn accept(worst: &mut f64, err: f64, context: impl FnOnce() -> String) -> Result<(), String> {
    *worst = worst.max(err);
    if err < TOL {
        Ok(())
    } else {
        Err(context())
    }
}

fn random(g: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| g.uniform(-1.0, 1.0)).collect()).unwrap()
}

/// Values bounded away from 0 so ReLU stays differentiable under `±h`.
fn away_from_zero(g: &mut SeededRng, shape: &[usize]) -> Tensor {
    let mut t = random(g, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn shape_for(g: &mut SeededRng) -> (usize, usize, usize) {
    (1 + g.below(5), 1 + g.below(6), 1 + g.below(6))
}

pub fn linear() -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut g = RngState::new(seed).generator();
        let (m, k, n) = shape_for(&mut g);
        let (x, w, b, c) = (
            random(&mut g, &[m, k]),
            random(&mut g, &[k, n]),
            random(&mut g, &[n]),
            random(&mut g, &[m, n]),
        );
        let loss = |v: &[Tensor; 3]| dot(&linear_forward(&v[0], &v[1], &v[2]).unwrap(), &c);
        let mut gw = Tensor::zeros(&[k, n]);
        let mut gb = Tensor::zeros(&[n]);
        let gx = linear_backward(&x, &w, &c, &mut gw, &mut gb).unwrap();
        let mut vars = [x, w, b];
        for (i, analytic) in [gx, gw, gb].iter().enumerate() {
            let err = check_coordinates(&mut vars, |v| v[i].data_mut(), analytic.data(), loss, DEFAULT_STEP).unwrap();
            accept(&mut worst, err, || format!("seed {seed} input {i}: {err:e}"))?;
        }
    }
    Ok(worst)
}

pub fn relu_op() -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut g = RngState::new(seed).generator();
        let (m, n, _) = shape_for(&mut g);
        let x = away_from_zero(&mut g, &[m, n]);
        let c = random(&mut g, &[m, n]);
        let analytic = relu_backward(&x, &c);
        let mut x = x;
        let err = check_coordinates(&mut x, |x| x.data_mut(), analytic.data(), |x| dot(&relu(x), &c), DEFAULT_STEP)
            .unwrap();
        accept(&mut worst, err, || format!("seed {seed}: {err:e}"))?;
    }
    Ok(worst)
}

pub fn gelu_op() -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut g = RngState::new(seed).generator();
        let (m, n, _) = shape_for(&mut g);
        let mut x = random(&mut g, &[m, n]);
        x.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        let c = random(&mut g, &[m, n]);
        let analytic = gelu_backward(&x, &c);
        let err = check_coordinates(&mut x, |x| x.data_mut(), analytic.data(), |x| dot(&gelu(x), &c), DEFAULT_STEP)
            .unwrap();
        accept(&mut worst, err, || format!("seed {seed}: {err:e}"))?;
    }
    Ok(worst)
}

pub fn softmax_ce() -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut g = RngState::new(seed).generator();
        let (m, _, n) = shape_for(&mut g);
        let n = n + 1;
        let mut logits = random(&mut g, &[m, n]);
        logits.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        let targets: Vec<usize> = (0..m).map(|_| g.below(n)).collect();
        let ce = softmax_cross_entropy(&logits, &targets).unwrap();
        let err = check_coordinates(
            &mut logits,
            |l| l.data_mut(),
            ce.grad.data(),
            |l| softmax_cross_entropy(l, &targets).unwrap().loss,
            DEFAULT_STEP,
        )
        .unwrap();
        accept(&mut worst, err, || format!("seed {seed}: {err:e}"))?;
    }
    Ok(worst)
}

pub fn mean_pool() -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut g = RngState::new(seed).generator();
        let (t, d, _) = shape_for(&mut g);
        let mut x = random(&mut g, &[t, d]);
        let c = random(&mut g, &[1, d]);
        let analytic = mean_pool_backward(&c, t);
        let err = check_coordinates(
            &mut x,
            |x| x.data_mut(),
            analytic.data(),
            |x| dot(&mean_pool_tokens(x).unwrap(), &c),
            DEFAULT_STEP,
        )
        .unwrap();
        accept(&mut worst, err, || format!("seed {seed}: {err:e}"))?;
    }
    Ok(worst)
}

pub fn layer_norm_op() -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut g = RngState::new(seed).generator();
        let (m, d, _) = shape_for(&mut g);
        let d = d + 1;
        let (x, gain, bias, c) = (
            random(&mut g, &[m, d]),
            random(&mut g, &[d]),
            random(&mut g, &[d]),
            random(&mut g, &[m, d]),
        );
        let (_, cache) = layer_norm(&x, &gain, &bias).unwrap();
        let mut gg = Tensor::zeros(&[d]);
        let mut gbias = Tensor::zeros(&[d]);
        let gx = layer_norm_backward(&cache, &gain, &c, &mut gg, &mut gbias);
        let loss = |v: &[Tensor; 3]| dot(&layer_norm(&v[0], &v[1], &v[2]).unwrap().0, &c);
        let mut vars = [x, gain, bias];
        for (i, analytic) in [gx, gg, gbias].iter().enumerate() {
            let err = check_coordinates(&mut vars, |v| v[i].data_mut(), analytic.data(), loss, DEFAULT_STEP).unwrap();
            accept(&mut worst, err, || format!("seed {seed} input {i}: {err:e}"))?;
        }
    }
    Ok(worst)
}

pub fn projection() -> Result<f64, String> {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..2 * SEEDS {
        if checked == SEEDS {
            break;
        }
        let mut g = RngState::new(seed + 100).generator();
        let dims = ProjectionDims {
            d_in: 1 + g.below(5),
            d_hidden: 1 + g.below(6),
            d_lm: 1 + g.below(5),
        };
        let t = 1 + g.below(4);
        let mut proj = ProjectionParams::init(dims, RngState::new(seed)).unwrap();
        proj.b1.value = random(&mut g, &[dims.d_hidden]);
        let x = random(&mut g, &[t, dims.d_in]);
        let c = random(&mut g, &[t, dims.d_lm]);
        let (_, cache) = proj.forward(&x).unwrap();
        let pre = &cache_pre_activation(&proj, &x);
        if pre.data().iter().any(|v| v.abs() < 1e-4) {
            continue; // too close to the ReLU kink for a two-sided difference
        }
        proj.zero_grads();
        let gx = proj.backward(&cache, &c).unwrap();
        let loss = |p: &ProjectionParams, x: &Tensor| dot(&p.project(x).unwrap(), &c);
        for j in 0..4 {
            let analytic = proj.parameters()[j].grad.data().to_vec();
            let err = check_coordinates(
                &mut proj,
                |p| p.parameters_mut().into_iter().nth(j).unwrap().value.data_mut(),
                &analytic,
                |p| loss(p, &x),
                DEFAULT_STEP,
            )
            .unwrap();
            accept(&mut worst, err, || format!("seed {seed} param {j}: {err:e}"))?;
        }
        let mut xm = x.clone();
        let err = check_coordinates(&mut xm, |x| x.data_mut(), gx.data(), |x| loss(&proj, x), DEFAULT_STEP).unwrap();
        accept(&mut worst, err, || format!("seed {seed} input: {err:e}"))?;
        checked += 1;
    }
    if checked != SEEDS {
        return Err(format!("only {checked} usable projection cases"));
    }
    Ok(worst)
}

fn cache_pre_activation(p: &ProjectionParams, x: &Tensor) -> Tensor {
    linear_forward(x, &p.w1.value, &p.b1.value).unwrap()
}

const LAYOUT: Layout = Layout {
    sep: 1,
    begin_answer: 2,
    eos: 3,
};

struct LmCase {
    lm: LmParams,
    proj: ProjectionParams,
    ex: PromptedExample,
}

fn lm_case(seed: u64) -> LmCase {
    let mut g = RngState::new(seed + 1000).generator();
    let n_heads = 1 + g.below(2);
    let d_model = n_heads * (3 + g.below(2));
    let vocab_size = 6 + g.below(4);
    let cfg = LmConfig {
        vocab_size,
        d_model,
        n_layers: 1 + g.below(2),
        n_heads,
        d_ff: 3 + g.below(4),
        max_len: 16,
    };
    let mut lm = LmParams::init(cfg, RngState::new(seed)).unwrap();
    // Non-trivial gains and biases, and sharper attention than at init, so
    // gradients sit well above the finite-difference noise floor (about
    // 1e-16·|loss|/h ≈ 1e-11).
    for p in lm.parameters_mut() {
        let leaf = p.name.rsplit('.').next().unwrap().to_string();
        if leaf.starts_with("ln") || leaf.starts_with('b') {
            for v in p.value.data_mut() {
                *v += g.uniform(-0.5, 0.5);
            }
        } else {
            let k = if leaf == "wq" || leaf == "wk" { 3.0 } else { 2.0 };
            p.value.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    let dims = ProjectionDims {
        d_in: 2 + g.below(3),
        d_hidden: 3 + g.below(3),
        d_lm: d_model,
    };
    let mut proj = ProjectionParams::init(dims, RngState::new(seed + 7)).unwrap();
    for v in proj.b1.value.data_mut() {
        *v = g.uniform(-0.5, 0.5);
    }
    let t = 1 + g.below(3);
    let ex = PromptedExample {
        image: random(&mut g, &[t, dims.d_in]),
        question: (0..2 + g.below(3)).map(|_| 4 + g.below(vocab_size - 4)).collect(),
        answer: vec![4 + g.below(vocab_size - 4), LAYOUT.eos],
        class_order: vec![],
    };
    LmCase { lm, proj, ex }
}

pub fn toy_lm() -> Result<f64, String> {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..2 * SEEDS {
        if checked == SEEDS {
            break;
        }
        let LmCase { lm, proj, ex } = lm_case(seed);
        let pre = cache_pre_activation(&proj, &ex.image);
        if pre.data().iter().any(|v| v.abs() < 1e-3) {
            continue;
        }
        let mut pair = (lm, proj);
        pair.0.zero_grads();
        pair.1.zero_grads();
        let pass = answer_nll_forward(&pair.0, &pair.1, LAYOUT, &ex).unwrap();
        let gx = pass.backward(&mut pair.0, &mut pair.1, 1.0).unwrap();
        // Central differences resolve gradients only down to about
        // 1e-16·|loss|/h; a coordinate far below that cannot show a relative
        // error under 1e-5, right or wrong. Such points are skipped, decided
        // from the analytic gradient alone. Exact zeros (rows of unused
        // tokens and positions) stay in.
        let smallest = pair
            .0
            .parameters()
            .into_iter()
            .chain(pair.1.parameters())
            .flat_map(|p| p.grad.data().iter().copied())
            .filter(|v| *v != 0.0)
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if smallest < RESOLVABLE {
            continue;
        }
        let loss = |m: &(LmParams, ProjectionParams)| answer_nll(&m.0, &m.1, LAYOUT, &ex).unwrap();

        let n_lm = pair.0.parameters().len();
        for j in 0..n_lm {
            let p = &pair.0.parameters()[j];
            let (name, analytic) = (p.name.clone(), p.grad.data().to_vec());
            let err = check_coordinates(
                &mut pair,
                |m| m.0.parameters_mut().into_iter().nth(j).unwrap().value.data_mut(),
                &analytic,
                loss,
                DEFAULT_STEP,
            )
            .unwrap();
            accept(&mut worst, err, || format!("seed {seed} {name}: {err:e}"))?;
        }
        for j in 0..4 {
            let p = &pair.1.parameters()[j];
            let (name, analytic) = (p.name.clone(), p.grad.data().to_vec());
            let err = check_coordinates(
                &mut pair,
                |m| m.1.parameters_mut().into_iter().nth(j).unwrap().value.data_mut(),
                &analytic,
                loss,
                DEFAULT_STEP,
            )
            .unwrap();
            accept(&mut worst, err, || format!("seed {seed} {name}: {err:e}"))?;
        }
        let mut exm = ex.clone();
        let err = check_coordinates(
            &mut exm,
            |e| e.image.data_mut(),
            gx.data(),
            |e| answer_nll(&pair.0, &pair.1, LAYOUT, e).unwrap(),
            DEFAULT_STEP,
        )
        .unwrap();
        accept(&mut worst, err, || format!("seed {seed} image: {err:e}"))?;
        checked += 1;
    }
    if checked != SEEDS {
        return Err(format!("only {checked} usable toy-LM cases"));
    }
    Ok(worst)
}

/// The richness probe on pooled post-projection tokens.
pub fn probe_mlp() -> Result<f64, String> {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..2 * SEEDS {
        if checked == SEEDS {
            break;
        }
        let mut g = RngState::new(seed + 2000).generator();
        let dims = ProjectionDims {
            d_in: 1 + g.below(5),
            d_hidden: 2 + g.below(5),
            d_lm: 1 + g.below(5),
        };
        let proj = ProjectionParams::init(dims, RngState::new(seed)).unwrap();
        let (n, t, k) = (1 + g.below(6), 1 + g.below(3), 2 + g.below(3));
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let x = random(&mut g, &[t, dims.d_in]);
                mean_pool_tokens(&proj.project(&x).unwrap()).unwrap().into_data()
            })
            .collect();
        let pooled = Tensor::from_rows(&rows).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| g.below(k)).collect();
        let hidden: Vec<usize> = (0..1 + g.below(2)).map(|_| 2 + g.below(5)).collect();
        let mut probe = ProbeModel::init(ProbeArchitecture::new(dims.d_lm, &hidden, k), RngState::new(seed + 9));
        for (_, b) in probe.layers.iter_mut() {
            b.value.data_mut().iter_mut().for_each(|v| *v = g.uniform(-0.5, 0.5));
        }
        let mut x = pooled.clone();
        let mut near_kink = false;
        for (w, b) in &probe.layers[..probe.layers.len() - 1] {
            let z = linear_forward(&x, &w.value, &b.value).unwrap();
            near_kink |= z.data().iter().any(|v| v.abs() < 1e-3);
            x = relu(&z);
        }
        if near_kink {
            continue;
        }
        probe.zero_grads();
        probe.loss_and_backward(&pooled, &labels).unwrap();
        for j in 0..probe.parameters().len() {
            let analytic = probe.parameters()[j].grad.data().to_vec();
            let err = check_coordinates(
                &mut probe,
                |p| p.parameters_mut().into_iter().nth(j).unwrap().value.data_mut(),
                &analytic,
                |p| p.loss(&pooled, &labels).unwrap(),
                DEFAULT_STEP,
            )
            .unwrap();
            accept(&mut worst, err, || format!("seed {seed} param {j}: {err:e}"))?;
        }
        checked += 1;
    }
    if checked != SEEDS {
        return Err(format!("only {checked} usable probe cases"));
    }
    Ok(worst)
}

type Check = fn() -> Result<f64, String>;

pub const CHECKS: [(&str, Check); 9] = [
    ("linear", linear),
    ("relu", relu_op),
    ("gelu", gelu_op),
    ("softmax-ce", softmax_ce),
    ("mean-pool", mean_pool),
    ("layer-norm", layer_norm_op),
    ("projection", projection),
    ("toy-lm", toy_lm),
    ("probe", probe_mlp),
];

/// Every check, with the overall worst error and the wall-clock budget.
pub fn all() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for (name, check) in CHECKS {
        worst = worst.max(check().map_err(|e| format!("{name}: {e}"))?);
    }
    let secs = started.elapsed().as_secs_f64();
    if secs >= BUDGET_SECS {
        return Err(format!("took {secs:.1}s, budget {BUDGET_SECS}s"));
    }
    Ok(format!("max rel err {worst:.2e} over {} checks in {secs:.1}s", CHECKS.len()))
}
