//! Layers shared by the encoders, the fusion block and the regressor, plus
//! the parameter-visiting trait the optimizer and checkpoints rely on.

mod attention;
mod layers;

pub use attention::{AttentionOutput, MultiHeadAttention, PostNormBlock, PreNormBlock};
pub use layers::{FeedForward, LayerNorm, Linear, Mlp};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Anything that owns trainable tensors. Visit order must be stable: the
/// optimizer and gradient buffers index parameters by it.
pub trait Module {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn state_dict(&self) -> BTreeMap<String, Tensor> {
        self.params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// Copy every parameter from `state`; names and shapes must match exactly.
    fn load_state_dict(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != state.len() {
            return Err(Error::Input(format!(
                "state has {} tensors, model expects {}",
                state.len(),
                params.len()
            )));
        }
        for (name, p) in params.iter_mut() {
            let src = state
                .get(name.as_str())
                .ok_or_else(|| Error::Input(format!("state is missing tensor {name}")))?;
            if src.shape() != p.shape() {
                return Err(Error::shape("load_state_dict", p.shape(), src.shape()));
            }
            **p = src.clone();
        }
        Ok(())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Deterministic generator for stream `stream` of `seed`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

pub(crate) fn normal(rng: &mut impl Rng, std: f32, shape: &[usize]) -> Tensor {
    let dist = rand_distr::Normal::new(0.0f32, std).expect("positive std");
    Tensor::from_fn(shape, |_| rng.sample(dist))
}
