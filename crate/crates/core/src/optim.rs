//! Gradient buffers and the Adam/AdamW optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::numerics::Tape;

/// One flat gradient buffer per parameter, in the module's visit order.
#[derive(Clone, Debug)]
pub struct Grads {
    bufs: Vec<Vec<f32>>,
}

impl Grads {
    pub fn zeros_like(model: &dyn ModuleRef) -> Self {
        Self {
            bufs: model.shapes().iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    /// Add the gradients a tape holds for `model`'s parameters.
    pub fn accumulate(&mut self, model: &dyn ModuleRef, tape: &Tape<f32>) {
        for (buf, g) in self.bufs.iter_mut().zip(model.grads_from(tape)) {
            if let Some(g) = g {
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for b in &mut self.bufs {
            for v in b.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.bufs
            .iter()
            .flatten()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`.
    pub fn clip(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale((max_norm / n) as f32);
        }
    }

    pub fn buffers(&self) -> &[Vec<f32>] {
        &self.bufs
    }
}

/// Object-safe view of a [`Module`] used by [`Grads`].
pub trait ModuleRef {
    fn shapes(&self) -> Vec<usize>;
    fn grads_from<'t>(&self, tape: &'t Tape<f32>) -> Vec<Option<&'t [f32]>>;
}

impl<M: Module> ModuleRef for M {
    fn shapes(&self) -> Vec<usize> {
        self.params().iter().map(|(_, t)| t.numel()).collect()
    }

    fn grads_from<'t>(&self, tape: &'t Tape<f32>) -> Vec<Option<&'t [f32]>> {
        self.params()
            .iter()
            .map(|(_, t)| tape.param_grad(t))
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to weight matrices only.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<M: Module>(&mut self, model: &mut M, grads: &Grads) -> Result<()> {
        let mut params = model.params_mut();
        if params.len() != grads.bufs.len() {
            return Err(Error::Usage(format!(
                "{} gradient buffers for {} parameters",
                grads.bufs.len(),
                params.len()
            )));
        }
        if self.m.is_empty() {
            self.m = grads.bufs.iter().map(|b| vec![0.0; b.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr_t = (c.lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, c.eps as f32);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let decay = c.weight_decay > 0.0 && p.shape().len() >= 2 && p.shape()[0] > 1;
            let shrink = (1.0 - c.lr * c.weight_decay) as f32;
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.bufs[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                if decay {
                    data[j] *= shrink;
                }
                data[j] -= lr_t * m[j] / (v[j].sqrt() + eps);
            }
        }
        Ok(())
    }
}
