//! Pre-norm decoder-only transformer over `[H_v ∥ <sep> ∥ prompt ∥ <ans> ∥ answer]`
//! with hand-written backward passes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{
    layer_norm, layer_norm_backward, linear_backward, linear_forward, log_sum_exp, gelu, gelu_backward,
    softmax_in_place, LayerNormCache,
};
use crate::optim::{Module, Parameter};
use crate::projection::{ProjectionCache, ProjectionParams};
use crate::rng::RngState;
use crate::tensor::{matmul, matmul_a_bt_acc, matmul_at_b_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl LmConfig {
    pub fn desk_scale(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 48,
            n_layers: 2,
            n_heads: 2,
            d_ff: 96,
            max_len: 64,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_len == 0 || self.d_ff == 0 {
            return Err(Error::Parameter(format!("invalid LM config {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Parameter(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_g: Parameter,
    pub ln1_b: Parameter,
    pub wq: Parameter,
    pub bq: Parameter,
    /// No key bias: it shifts every score in a row equally and the
    /// softmax cancels it.
    pub wk: Parameter,
    pub wv: Parameter,
    pub bv: Parameter,
    pub wo: Parameter,
    pub bo: Parameter,
    pub ln2_g: Parameter,
    pub ln2_b: Parameter,
    pub w_ff1: Parameter,
    pub b_ff1: Parameter,
    pub w_ff2: Parameter,
    pub b_ff2: Parameter,
}

impl Block {
    fn init(i: usize, cfg: &LmConfig, g: &mut crate::rng::SeededRng) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let n = |s: &str| format!("lm.block{i}.{s}");
        Self {
            ln1_g: Parameter::new(n("ln1_g"), Tensor::full(&[d], 1.0)),
            ln1_b: Parameter::zeros(n("ln1_b"), &[d]),
            wq: Parameter::fan_in_uniform(n("wq"), &[d, d], d, g),
            bq: Parameter::zeros(n("bq"), &[d]),
            wk: Parameter::fan_in_uniform(n("wk"), &[d, d], d, g),
            wv: Parameter::fan_in_uniform(n("wv"), &[d, d], d, g),
            bv: Parameter::zeros(n("bv"), &[d]),
            wo: Parameter::fan_in_uniform(n("wo"), &[d, d], d, g),
            bo: Parameter::zeros(n("bo"), &[d]),
            ln2_g: Parameter::new(n("ln2_g"), Tensor::full(&[d], 1.0)),
            ln2_b: Parameter::zeros(n("ln2_b"), &[d]),
            w_ff1: Parameter::fan_in_uniform(n("w_ff1"), &[d, f], d, g),
            b_ff1: Parameter::zeros(n("b_ff1"), &[f]),
            w_ff2: Parameter::fan_in_uniform(n("w_ff2"), &[f, d], f, g),
            b_ff2: Parameter::zeros(n("b_ff2"), &[d]),
        }
    }

    fn params(&self) -> [&Parameter; 15] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.ln2_g, &self.ln2_b, &self.w_ff1, &self.b_ff1, &self.w_ff2, &self.b_ff2,
        ]
    }

    fn params_mut(&mut self) -> [&mut Parameter; 15] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo, &mut self.ln2_g, &mut self.ln2_b,
            &mut self.w_ff1, &mut self.b_ff1, &mut self.w_ff2, &mut self.b_ff2,
        ]
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LayerNormCache,
    a: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Per head, `L×L` attention weights (zero above the diagonal).
    probs: Vec<Vec<f64>>,
    attn_concat: Tensor,
    ln2: LayerNormCache,
    c: Tensor,
    ff_pre: Tensor,
    ff_act: Tensor,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct LmCache {
    image_tokens: usize,
    ids: Vec<usize>,
    blocks: Vec<BlockCache>,
    lnf: LayerNormCache,
    z: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams {
    pub config: LmConfig,
    pub tok_emb: Parameter,
    pub pos_emb: Parameter,
    pub blocks: Vec<Block>,
    pub lnf_g: Parameter,
    pub lnf_b: Parameter,
    pub head: Parameter,
}

impl Module for LmParams {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.head]);
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.head]);
        out
    }
}

impl LmParams {
    pub fn init(config: LmConfig, rng: RngState) -> Result<Self> {
        config.validate()?;
        let mut g = rng.generator();
        let d = config.d_model;
        let tok_emb = Parameter::fan_in_uniform("lm.tok_emb", &[config.vocab_size, d], 1, &mut g);
        let pos_emb = Parameter::fan_in_uniform("lm.pos_emb", &[config.max_len, d], 1, &mut g);
        let blocks = (0..config.n_layers).map(|i| Block::init(i, &config, &mut g)).collect();
        let head = Parameter::fan_in_uniform("lm.head", &[d, config.vocab_size], d, &mut g);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: Parameter::new("lm.lnf_g", Tensor::full(&[d], 1.0)),
            lnf_b: Parameter::zeros("lm.lnf_b", &[d]),
            head,
        })
    }

    /// Logits `L×V` for the sequence `[image ∥ ids]`, where `image` holds
    /// already-projected tokens.
    pub fn forward(&self, image: &Tensor, ids: &[usize]) -> Result<(Tensor, LmCache)> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let (t, di) = image.dims2()?;
        if di != d {
            return Err(Error::shape("lm.forward(image)", image.shape(), &[t, d]));
        }
        let len = t + ids.len();
        if len > cfg.max_len {
            return Err(Error::Length { len, max: cfg.max_len });
        }
        if len == 0 {
            return Err(Error::EmptyInput("empty LM input".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::Index {
                what: "vocab",
                index: bad,
                bound: cfg.vocab_size,
            });
        }

        let mut x = Tensor::zeros(&[len, d]);
        for p in 0..len {
            let src = if p < t { image.row(p) } else { self.tok_emb.value.row(ids[p - t]) };
            let pos = self.pos_emb.value.row(p);
            for ((o, a), b) in x.row_mut(p).iter_mut().zip(src).zip(pos) {
                *o = a + b;
            }
        }

        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, cache) = self.block_forward(block, &x)?;
            x = out;
            caches.push(cache);
        }
        let (z, lnf) = layer_norm(&x, &self.lnf_g.value, &self.lnf_b.value)?;
        let logits = Tensor::new(vec![len, cfg.vocab_size], matmul(z.data(), self.head.value.data(), len, d, cfg.vocab_size))?;
        Ok((
            logits,
            LmCache {
                image_tokens: t,
                ids: ids.to_vec(),
                blocks: caches,
                lnf,
                z,
            },
        ))
    }

    fn block_forward(&self, b: &Block, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (len, d) = x.dims2()?;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let (a, ln1) = layer_norm(x, &b.ln1_g.value, &b.ln1_b.value)?;
        let q = linear_forward(&a, &b.wq.value, &b.bq.value)?;
        let k = linear_forward(&a, &b.wk.value, &Tensor::zeros(&[d]))?;
        let v = linear_forward(&a, &b.wv.value, &b.bv.value)?;

        let mut attn_concat = Tensor::zeros(&[len, d]);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = vec![0.0; len * len];
            for i in 0..len {
                let qi = &q.row(i)[off..off + dh];
                let row = &mut p[i * len..i * len + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k.row(j)[off..off + dh];
                    *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(row);
                let out = &mut attn_concat.row_mut(i)[off..off + dh];
                for (j, &w) in p[i * len..i * len + i + 1].iter().enumerate() {
                    let vj = &v.row(j)[off..off + dh];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
            probs.push(p);
        }
        let attn = linear_forward(&attn_concat, &b.wo.value, &b.bo.value)?;
        let mut x1 = x.clone();
        x1.add_assign(&attn)?;

        let (c, ln2) = layer_norm(&x1, &b.ln2_g.value, &b.ln2_b.value)?;
        let ff_pre = linear_forward(&c, &b.w_ff1.value, &b.b_ff1.value)?;
        let ff_act = gelu(&ff_pre);
        let ff = linear_forward(&ff_act, &b.w_ff2.value, &b.b_ff2.value)?;
        let mut x2 = x1;
        x2.add_assign(&ff)?;
        Ok((
            x2,
            BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                attn_concat,
                ln2,
                c,
                ff_pre,
                ff_act,
            },
        ))
    }

    /// Accumulates gradients of all LM parameters given `dL/dlogits`;
    /// returns the gradient w.r.t. the projected image tokens.
    pub fn backward(&mut self, cache: &LmCache, grad_logits: &Tensor) -> Result<Tensor> {
        let cfg = self.config;
        let d = cfg.d_model;
        let len = cache.image_tokens + cache.ids.len();
        if grad_logits.shape() != [len, cfg.vocab_size] {
            return Err(Error::shape("lm.backward", grad_logits.shape(), &[len, cfg.vocab_size]));
        }
        matmul_at_b_acc(
            cache.z.data(),
            grad_logits.data(),
            self.head.grad.data_mut(),
            len,
            d,
            cfg.vocab_size,
        );
        let mut gz = vec![0.0; len * d];
        matmul_a_bt_acc(grad_logits.data(), self.head.value.data(), &mut gz, len, cfg.vocab_size, d);
        let gz = Tensor::new(vec![len, d], gz)?;
        let mut gx = layer_norm_backward(&cache.lnf, &self.lnf_g.value, &gz, &mut self.lnf_g.grad, &mut self.lnf_b.grad);

        let heads = cfg.n_heads;
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            gx = block_backward(block, bc, &gx, heads)?;
        }

        let t = cache.image_tokens;
        let mut g_image = Tensor::zeros(&[t, d]);
        for p in 0..len {
            let g = gx.row(p);
            for (o, v) in self.pos_emb.grad.row_mut(p).iter_mut().zip(g) {
                *o += v;
            }
            let dst = if p < t {
                g_image.row_mut(p)
            } else {
                self.tok_emb.grad.row_mut(cache.ids[p - t])
            };
            for (o, v) in dst.iter_mut().zip(g) {
                *o += v;
            }
        }
        Ok(g_image)
    }
}

fn block_backward(b: &mut Block, c: &BlockCache, g_out: &Tensor, heads: usize) -> Result<Tensor> {
    let (len, d) = g_out.dims2()?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // x2 = x1 + ff(ln2(x1))
    let g_ff_act = linear_backward(&c.ff_act, &b.w_ff2.value, g_out, &mut b.w_ff2.grad, &mut b.b_ff2.grad)?;
    let g_ff_pre = gelu_backward(&c.ff_pre, &g_ff_act);
    let g_c = linear_backward(&c.c, &b.w_ff1.value, &g_ff_pre, &mut b.w_ff1.grad, &mut b.b_ff1.grad)?;
    let mut g_x1 = layer_norm_backward(&c.ln2, &b.ln2_g.value, &g_c, &mut b.ln2_g.grad, &mut b.ln2_b.grad);
    g_x1.add_assign(g_out)?;

    // x1 = x + attn(ln1(x))
    let g_concat = linear_backward(&c.attn_concat, &b.wo.value, &g_x1, &mut b.wo.grad, &mut b.bo.grad)?;
    let mut gq = Tensor::zeros(&[len, d]);
    let mut gk = Tensor::zeros(&[len, d]);
    let mut gv = Tensor::zeros(&[len, d]);
    let mut dp = vec![0.0; len];
    for h in 0..heads {
        let off = h * dh;
        let p = &c.probs[h];
        for i in 0..len {
            let go = &g_concat.row(i)[off..off + dh];
            let prow = &p[i * len..i * len + i + 1];
            for j in 0..=i {
                let vj = &c.v.row(j)[off..off + dh];
                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                let w = prow[j];
                for (o, g) in gv.row_mut(j)[off..off + dh].iter_mut().zip(go) {
                    *o += w * g;
                }
            }
            let dot: f64 = prow.iter().zip(&dp[..=i]).map(|(a, b)| a * b).sum();
            let qi: Vec<f64> = c.q.row(i)[off..off + dh].to_vec();
            for j in 0..=i {
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &c.k.row(j)[off..off + dh];
                for (o, kv) in gq.row_mut(i)[off..off + dh].iter_mut().zip(kj) {
                    *o += ds * kv;
                }
                for (o, qv) in gk.row_mut(j)[off..off + dh].iter_mut().zip(&qi) {
                    *o += ds * qv;
                }
            }
        }
    }
    let mut g_a = linear_backward(&c.a, &b.wq.value, &gq, &mut b.wq.grad, &mut b.bq.grad)?;
    let mut unused_bias_grad = Tensor::zeros(&[gk.shape()[1]]);
    g_a.add_assign(&linear_backward(&c.a, &b.wk.value, &gk, &mut b.wk.grad, &mut unused_bias_grad)?)?;
    g_a.add_assign(&linear_backward(&c.a, &b.wv.value, &gv, &mut b.wv.grad, &mut b.bv.grad)?)?;
    let mut g_x = layer_norm_backward(&c.ln1, &b.ln1_g.value, &g_a, &mut b.ln1_g.grad, &mut b.ln1_b.grad);
    g_x.add_assign(&g_x1)?;
    Ok(g_x)
}

/// A prompted training/evaluation example. `image` holds the
/// pre-projection tokens `X_v`; the projection is applied by the consumer.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptedExample {
    pub image: Tensor,
    pub question: Vec<usize>,
    /// Target tokens, normally the class token followed by `<eos>`.
    pub answer: Vec<usize>,
    pub class_order: Vec<usize>,
}

/// Special token ids the sequence layout depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub sep: usize,
    pub begin_answer: usize,
    pub eos: usize,
}

impl Layout {
    pub fn from_vocab(v: &super::Vocab) -> Self {
        Self {
            sep: v.sep(),
            begin_answer: v.begin_answer(),
            eos: v.eos(),
        }
    }

    /// Text ids fed after the image: `<sep> question <ans> answer[..n-1]`.
    fn input_ids(&self, ex: &PromptedExample) -> Vec<usize> {
        let mut ids = Vec::with_capacity(ex.question.len() + ex.answer.len() + 1);
        ids.push(self.sep);
        ids.extend_from_slice(&ex.question);
        ids.push(self.begin_answer);
        if let Some((_, head)) = ex.answer.split_last() {
            ids.extend_from_slice(head);
        }
        ids
    }
}

/// Mean cross-entropy over the answer positions of an `L×V` logit matrix,
/// and its gradient (zero everywhere else).
pub fn masked_answer_nll(logits: &Tensor, answer: &[usize]) -> Result<(f64, Tensor)> {
    let (len, v) = logits.dims2()?;
    let n = answer.len();
    if n == 0 {
        return Err(Error::EmptyInput("answer has no tokens".into()));
    }
    if n > len {
        return Err(Error::Length { len: n, max: len });
    }
    let start = len - n;
    let mut grad = Tensor::zeros(&[len, v]);
    let mut loss = 0.0;
    let inv = 1.0 / n as f64;
    for (i, &target) in answer.iter().enumerate() {
        if target >= v {
            return Err(Error::Index {
                what: "vocab",
                index: target,
                bound: v,
            });
        }
        let row = logits.row(start + i);
        loss += log_sum_exp(row) - row[target];
        let g = grad.row_mut(start + i);
        g.copy_from_slice(row);
        softmax_in_place(g);
        g[target] -= 1.0;
        g.iter_mut().for_each(|x| *x *= inv);
    }
    Ok((loss * inv, grad))
}

/// Forward state kept between [`answer_nll_forward`] and the backward pass.
pub struct AnswerPass {
    pub loss: f64,
    grad_logits: Tensor,
    lm_cache: LmCache,
    proj_cache: ProjectionCache,
}

pub fn answer_nll_forward(
    lm: &LmParams,
    proj: &ProjectionParams,
    layout: Layout,
    ex: &PromptedExample,
) -> Result<AnswerPass> {
    let (h_v, proj_cache) = proj.forward(&ex.image)?;
    let ids = layout.input_ids(ex);
    let (logits, lm_cache) = lm.forward(&h_v, &ids)?;
    let (loss, grad_logits) = masked_answer_nll(&logits, &ex.answer)?;
    Ok(AnswerPass {
        loss,
        grad_logits,
        lm_cache,
        proj_cache,
    })
}

impl AnswerPass {
    /// Accumulates `scale · ∂loss` into the LM and projection gradients and
    /// returns the gradient w.r.t. the pre-projection image tokens.
    pub fn backward(&self, lm: &mut LmParams, proj: &mut ProjectionParams, scale: f64) -> Result<Tensor> {
        let mut g = self.grad_logits.clone();
        if scale != 1.0 {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        let g_hv = lm.backward(&self.lm_cache, &g)?;
        proj.backward(&self.proj_cache, &g_hv)
    }
}

/// Mean next-token NLL over the answer tokens only.
pub fn answer_nll(lm: &LmParams, proj: &ProjectionParams, layout: Layout, ex: &PromptedExample) -> Result<f64> {
    Ok(answer_nll_forward(lm, proj, layout, ex)?.loss)
}

/// Argmax decoding after `<sep> prompt <ans>`; stops at `<eos>` (not
/// included) or after `max_new_tokens`. Ties go to the lowest id.
pub fn greedy_generate(
    lm: &LmParams,
    h_v: &Tensor,
    layout: Layout,
    prompt: &[usize],
    max_new_tokens: usize,
) -> Result<Vec<usize>> {
    let (t, _) = h_v.dims2()?;
    let needed = t + prompt.len() + 2 + max_new_tokens.saturating_sub(1);
    if needed > lm.config.max_len {
        return Err(Error::Length {
            len: needed,
            max: lm.config.max_len,
        });
    }
    let mut ids = Vec::with_capacity(prompt.len() + 2 + max_new_tokens);
    ids.push(layout.sep);
    ids.extend_from_slice(prompt);
    ids.push(layout.begin_answer);
    let mut out = Vec::new();
    for _ in 0..max_new_tokens {
        let (logits, _) = lm.forward(h_v, &ids)?;
        let last = logits.row(t + ids.len() - 1);
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        if best == layout.eos {
            break;
        }
        out.push(best);
        ids.push(best);
    }
    Ok(out)
}
