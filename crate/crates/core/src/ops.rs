//! Differentiable primitives. Each forward has a matching backward that
//! returns (or accumulates) gradients with respect to its inputs.

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};

/// `y = x·W + b` for `x: N×I`, `W: I×O`, `b: O`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, i) = x.dims2()?;
    let (wi, o) = w.dims2()?;
    if wi != i {
        return Err(Error::shape("linear_forward", x.shape(), w.shape()));
    }
    if b.shape() != [o] {
        return Err(Error::shape("linear_forward(bias)", w.shape(), b.shape()));
    }
    let mut out = Vec::with_capacity(n * o);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    matmul_acc(x.data(), w.data(), &mut out, n, i, o);
    Tensor::new(vec![n, o], out)
}

/// Gradients of `linear_forward` accumulated into `gw` and `gb`; returns the
/// gradient with respect to `x`.
pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    grad_y: &Tensor,
    gw: &mut Tensor,
    gb: &mut Tensor,
) -> Result<Tensor> {
    let (n, i) = x.dims2()?;
    let (_, o) = w.dims2()?;
    if grad_y.shape() != [n, o] {
        return Err(Error::shape("linear_backward", grad_y.shape(), &[n, o]));
    }
    matmul_at_b_acc(x.data(), grad_y.data(), gw.data_mut(), n, i, o);
    for r in 0..n {
        for (g, d) in gb.data_mut().iter_mut().zip(grad_y.row(r)) {
            *g += d;
        }
    }
    let mut gx = vec![0.0; n * i];
    matmul_a_bt_acc(grad_y.data(), w.data(), &mut gx, n, o, i);
    Tensor::new(vec![n, i], gx)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Passes gradient only where the forward input was strictly positive.
pub fn relu_backward(x: &Tensor, grad_y: &Tensor) -> Tensor {
    let mut g = grad_y.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh form: `0.5·x·(1 + tanh(c·(x + 0.044715·x³)))`.
pub fn gelu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| {
        let u = GELU_C * (*v + 0.044715 * *v * *v * *v);
        *v = 0.5 * *v * (1.0 + u.tanh());
    });
    y
}

pub fn gelu_backward(x: &Tensor, grad_y: &Tensor) -> Tensor {
    let mut g = grad_y.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        let t = (GELU_C * (xv + 0.044715 * xv * xv * xv)).tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv);
        *gv *= 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
    }
    g
}

/// Numerically stable in-place softmax over one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, _) = logits.dims2()?;
    let mut p = logits.clone();
    for r in 0..n {
        softmax_in_place(p.row_mut(r));
    }
    Ok(p)
}

/// `log Σ exp(row)` with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub loss: f64,
    pub grad: Tensor,
}

/// Mean over rows of `−log softmax(logits)[target]`, with gradient
/// `(softmax − onehot) / N`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<CrossEntropy> {
    let (n, k) = logits.dims2()?;
    if targets.len() != n {
        return Err(Error::shape("softmax_cross_entropy", &[n], &[targets.len()]));
    }
    if n == 0 {
        return Err(Error::EmptyInput("softmax_cross_entropy over zero rows".into()));
    }
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = 0.0;
    let scale = 1.0 / n as f64;
    for (r, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::Index {
                what: "class logits",
                index: t,
                bound: k,
            });
        }
        let row = logits.row(r);
        loss -= row[t] - log_sum_exp(row);
        let g = grad.row_mut(r);
        g.copy_from_slice(row);
        softmax_in_place(g);
        g[t] -= 1.0;
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(CrossEntropy {
        loss: loss * scale,
        grad,
    })
}

/// Arithmetic mean over the token axis of a `T×D` tensor.
pub fn mean_pool_tokens(x: &Tensor) -> Result<Tensor> {
    let (t, d) = x.dims2()?;
    if t == 0 {
        return Err(Error::EmptyInput("mean_pool_tokens over zero tokens".into()));
    }
    let mut out = vec![0.0; d];
    for r in 0..t {
        for (o, v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / t as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::vector(out))
}

/// Spreads a pooled gradient evenly back over `tokens` rows.
pub fn mean_pool_backward(grad_pooled: &Tensor, tokens: usize) -> Tensor {
    let d = grad_pooled.len();
    let inv = 1.0 / tokens as f64;
    let mut g = Tensor::zeros(&[tokens, d]);
    for r in 0..tokens {
        for (o, v) in g.row_mut(r).iter_mut().zip(grad_pooled.data()) {
            *o = v * inv;
        }
    }
    g
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row statistics cached by [`layer_norm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer normalization with affine `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let (n, d) = x.dims2()?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let mut normalized = Tensor::zeros(&[n, d]);
    let mut out = Tensor::zeros(&[n, d]);
    let mut inv_std = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(istd);
        let nrow = normalized.row_mut(r);
        for (o, v) in nrow.iter_mut().zip(row) {
            *o = (v - mean) * istd;
        }
        let nrow = normalized.row(r).to_vec();
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = nrow[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    grad_y: &Tensor,
    g_gain: &mut Tensor,
    g_bias: &mut Tensor,
) -> Tensor {
    let (n, d) = (cache.inv_std.len(), gain.len());
    let mut gx = Tensor::zeros(&[n, d]);
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let gy = grad_y.row(r);
        let xhat = cache.normalized.row(r);
        for j in 0..d {
            g_gain.data_mut()[j] += gy[j] * xhat[j];
            g_bias.data_mut()[j] += gy[j];
            dxhat[j] = gy[j] * gain.data()[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let istd = cache.inv_std[r];
        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
            *o = istd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    gx
}
