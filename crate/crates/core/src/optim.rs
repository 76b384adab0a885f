//! Trainable parameters and the Adam optimizer.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// A named tensor with its gradient and Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
            step: 0,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    /// Weights drawn from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn fan_in_uniform(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        Self::new(name, Tensor::new(shape.to_vec(), data).expect("shape product matches"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Replaces the value, resetting gradient and optimizer state.
    pub fn load_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape("Parameter::load_value", self.value.shape(), value.shape()));
        }
        *self = Parameter::new(self.name.clone(), value);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update. The gradient is left in place; callers
    /// clear it before the next accumulation.
    pub fn step(&self, p: &mut Parameter) -> Result<()> {
        p.grad.ensure_finite(&format!("gradient of {}", p.name))?;
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let g = p.grad.data();
        let m = p.m.data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
        }
        let v = p.v.data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
        }
        let (m, v) = (p.m.data(), p.v.data());
        for ((x, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// A collection of named parameters, in a fixed order.
pub trait Module {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn num_params(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    fn zero_grads(&mut self) {
        self.parameters_mut().into_iter().for_each(Parameter::zero_grad);
    }

    /// SHA-256 over parameter names, shapes and value bytes.
    fn param_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.parameters() {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(p.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn adam_step(&mut self, adam: &Adam) -> Result<()> {
        for p in self.parameters_mut() {
            adam.step(p)?;
        }
        Ok(())
    }
}
