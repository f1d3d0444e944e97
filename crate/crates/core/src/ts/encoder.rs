use rand::Rng;
use serde::{Deserialize, Serialize};

use super::N_CH;
use crate::error::{Error, Result};
use crate::nn::{join, seeded_rng, xavier, Linear, Module};
use crate::numerics::{Float, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsConfig {
    pub depth: usize,
    pub channels: usize,
    pub kernel: usize,
    pub d_m: usize,
}

impl TsConfig {
    pub fn paper() -> Self {
        Self {
            depth: 7,
            channels: 40,
            kernel: 3,
            d_m: 160,
        }
    }

    pub fn desk() -> Self {
        Self {
            d_m: 32,
            ..Self::paper()
        }
    }

    pub fn dilation(&self, block: usize) -> usize {
        1 << block
    }

    /// Samples visible to the last output column.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel - 1) * (0..self.depth).map(|b| self.dilation(b)).sum::<usize>()
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock {
    /// `[c_out × c_in × k]`
    pub weight: Tensor,
    /// `[c_out × 1]`
    pub bias: Tensor,
    pub dilation: usize,
}

impl ConvBlock {
    fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, k: usize, dilation: usize) -> Self {
        Self {
            weight: xavier(rng, c_in * k, c_out * k, &[c_out, c_in, k]),
            bias: Tensor::zeros(&[c_out, 1]),
            dilation,
        }
    }
}

/// Dilated causal convolution stack → max over time → linear to `d_m`.
#[derive(Clone, Debug)]
pub struct TsEncoder {
    pub cfg: TsConfig,
    pub blocks: Vec<ConvBlock>,
    /// 1×1 convolution matching the input width to the block width.
    pub input_residual: Tensor,
    pub head: Linear,
}

impl TsEncoder {
    pub fn new(cfg: &TsConfig, seed: u64) -> Result<Self> {
        if cfg.depth == 0 || cfg.channels == 0 || cfg.kernel == 0 || cfg.d_m == 0 {
            return Err(Error::Input(format!("degenerate encoder config {cfg:?}")));
        }
        let mut rng = seeded_rng(seed, 2);
        let blocks = (0..cfg.depth)
            .map(|b| {
                let c_in = if b == 0 { N_CH } else { cfg.channels };
                ConvBlock::new(&mut rng, c_in, cfg.channels, cfg.kernel, cfg.dilation(b))
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            input_residual: xavier(&mut rng, N_CH, cfg.channels, &[cfg.channels, N_CH, 1]),
            head: Linear::new(&mut rng, cfg.channels, cfg.d_m, true),
        })
    }

    /// Feature map `[channels × T]` after the last block.
    pub fn features<T: Float>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if tape.shape(x).len() != 2 || tape.shape(x)[0] != N_CH {
            return Err(Error::shape("encode_ts", tape.shape(x), &[N_CH, 0]));
        }
        let mut h = x;
        for (i, b) in self.blocks.iter().enumerate() {
            let w = tape.param(&b.weight);
            let bias = tape.param(&b.bias);
            let y = tape.conv1d_causal_dilated(h, w, b.dilation)?;
            let y = tape.add_broadcast(y, bias)?;
            let y = tape.relu(y);
            let r = if i == 0 {
                let rw = tape.param(&self.input_residual);
                tape.conv1d_causal_dilated(h, rw, 1)?
            } else {
                h
            };
            h = tape.add(y, r)?;
        }
        Ok(h)
    }

    /// `x: [18 × T]` (normalized) → `[1 × d_m]`.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.features(tape, x)?;
        let pooled = tape.max_cols(h)?;
        let row = tape.transpose(pooled)?;
        self.head.forward(tape, row)
    }
}

impl Module for TsEncoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((join(prefix, &format!("blocks.{i}.weight")), &b.weight));
            out.push((join(prefix, &format!("blocks.{i}.bias")), &b.bias));
        }
        out.push((join(prefix, "input_residual"), &self.input_residual));
        self.head.visit(&join(prefix, "head"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((join(prefix, &format!("blocks.{i}.weight")), &mut b.weight));
            out.push((join(prefix, &format!("blocks.{i}.bias")), &mut b.bias));
        }
        out.push((join(prefix, "input_residual"), &mut self.input_residual));
        self.head.visit_mut(&join(prefix, "head"), out);
    }
}

/// `−log σ(a·p) − Σ_k log σ(−a·n_k)` for row vectors.
pub fn triplet_loss<T: Float>(
    tape: &mut Tape<T>,
    anchor: Var,
    positive: Var,
    negatives: &[Var],
) -> Result<Var> {
    let at = tape.transpose(anchor)?;
    let dot = |tape: &mut Tape<T>, v: Var| tape.matmul(v, at);
    let ap = dot(tape, positive)?;
    let mut total = tape.log_sigmoid(ap);
    for &n in negatives {
        let an = dot(tape, n)?;
        let neg = tape.scale(an, -T::one());
        let term = tape.log_sigmoid(neg);
        total = tape.add(total, term)?;
    }
    let s = tape.sum(total);
    Ok(tape.scale(s, -T::one()))
}
