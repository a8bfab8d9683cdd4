//! Adam over [`Params`] and plain tensors.

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }

    /// StyleGAN2-style correction for a loss whose regularizer runs every
    /// `interval` steps: `lr * c` and `beta^c` with `c = interval / (interval + 1)`.
    pub fn lazy(self, interval: usize) -> Self {
        if interval == 0 {
            return self;
        }
        let c = interval as f64 / (interval as f64 + 1.0);
        Self { lr: self.lr * c, beta1: self.beta1.powf(c), beta2: self.beta2.powf(c), eps: self.eps }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::config(path, "need lr >= 0, betas in [0, 1) and eps > 0"));
        }
        Ok(())
    }
}

/// First and second moments for a list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: impl IntoIterator<Item = Vec<usize>>) -> Self {
        let (m, v) = shapes.into_iter().map(|s| (Tensor::zeros(&s), Tensor::zeros(&s))).unzip();
        Self { cfg, t: 0, m, v }
    }

    pub fn for_params(cfg: AdamConfig, p: &Params<f32>) -> Self {
        Self::new(cfg, p.tensors().iter().map(|t| t.shape().to_vec()))
    }

    /// One bias-corrected update of `values` with `grads`.
    pub fn step(&mut self, values: &mut [Tensor<f32>], grads: &[Tensor<f32>]) -> Result<()> {
        if values.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, got {} values and {} gradients",
                self.m.len(),
                values.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = (c.lr / bc1) as f32;
        let bc2s = bc2.sqrt() as f32;
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, c.eps as f32);
        for (((x, g), m), v) in values.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if x.shape() != g.shape() || x.shape() != m.shape() {
                return Err(Error::contract(format!("gradient shape {:?} for tensor {:?}", g.shape(), x.shape())));
            }
            for (((xi, &gi), mi), vi) in x.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *xi -= step * *mi / (vi.sqrt() / bc2s + eps);
            }
        }
        Ok(())
    }

    pub fn step_params(&mut self, p: &mut Params<f32>, grads: &[Tensor<f32>]) -> Result<()> {
        self.step(p.tensors_mut(), grads)
    }

    /// Stores moments as `{prefix}/m/{name}` and `{prefix}/v/{name}`.
    pub fn save(&self, a: &mut Archive, prefix: &str, names: &[String]) -> Result<()> {
        if names.len() != self.m.len() {
            return Err(Error::contract("optimizer name list does not match its state"));
        }
        for ((n, m), v) in names.iter().zip(&self.m).zip(&self.v) {
            a.push(format!("{prefix}/m/{n}"), m.clone())?;
            a.push(format!("{prefix}/v/{n}"), v.clone())?;
        }
        Ok(())
    }

    pub fn load(&mut self, a: &Archive, prefix: &str, names: &[String], t: u64) -> Result<()> {
        if names.len() != self.m.len() {
            return Err(Error::contract("optimizer name list does not match its state"));
        }
        for (i, n) in names.iter().enumerate() {
            for (kind, dst) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let src = a.require(&format!("{prefix}/{kind}/{n}"))?;
                if src.shape() != dst.shape() {
                    return Err(Error::contract(format!("optimizer state `{n}` has the wrong shape")));
                }
                *dst = src.clone();
            }
        }
        self.t = t;
        Ok(())
    }
}
