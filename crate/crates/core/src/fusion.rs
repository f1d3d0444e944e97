//! Cross-attention fusion of the time-series latent (query) with the visual
//! tokens (keys/values), the supervised contrastive objective, and the
//! concatenation baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, seeded_rng, AttentionOutput, Mlp, Module, PostNormBlock};
use crate::numerics::{Float, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub n_h: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_sa: usize,
    pub d_ff: usize,
    pub tau: f64,
    pub dropout: f64,
    pub dropout_attention: bool,
    pub dropout_residual: bool,
}

impl FusionConfig {
    pub fn paper() -> Self {
        Self {
            n_h: 4,
            d_k: 160,
            d_v: 160,
            n_sa: 7,
            d_ff: 640,
            tau: 0.05,
            dropout: 0.1,
            dropout_attention: true,
            dropout_residual: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            n_h: 2,
            d_k: 32,
            d_v: 32,
            n_sa: 2,
            d_ff: 128,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_h == 0 || self.d_k == 0 || self.d_v == 0 || self.d_ff == 0 {
            return Err(Error::Input(format!("degenerate fusion config {self:?}")));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::Input(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

pub struct FusionOutput {
    /// Cross-attention block output.
    pub z_imd: Var,
    pub z_comb: Var,
    pub cross: AttentionOutput,
}

#[derive(Clone, Debug)]
pub struct FusionNet {
    pub cfg: FusionConfig,
    pub d_m: usize,
    pub d_e: usize,
    pub cross: PostNormBlock,
    pub self_blocks: Vec<PostNormBlock>,
}

impl FusionNet {
    pub fn new(cfg: &FusionConfig, d_m: usize, d_e: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed, 4);
        let mut cross = PostNormBlock::new(
            &mut rng, d_m, d_e, cfg.n_h, cfg.d_k, cfg.d_v, cfg.d_ff, false,
        );
        let mut self_blocks: Vec<PostNormBlock> = (0..cfg.n_sa)
            .map(|_| {
                PostNormBlock::new(
                    &mut rng, cfg.d_v, cfg.d_v, cfg.n_h, cfg.d_k, cfg.d_v, cfg.d_ff, false,
                )
            })
            .collect();
        let attn = if cfg.dropout_attention {
            cfg.dropout
        } else {
            0.0
        };
        let resid = if cfg.dropout_residual {
            cfg.dropout
        } else {
            0.0
        };
        for b in std::iter::once(&mut cross).chain(self_blocks.iter_mut()) {
            b.set_dropout(attn, resid);
        }
        Ok(Self {
            cfg: cfg.clone(),
            d_m,
            d_e,
            cross,
            self_blocks,
        })
    }

    fn check<T: Float>(&self, tape: &Tape<T>, z_ts: Var, z_img: Var) -> Result<()> {
        let (a, b) = (tape.shape(z_ts), tape.shape(z_img));
        if a != [1, self.d_m] || b.len() != 2 || b[1] != self.d_e {
            return Err(Error::Input(format!(
                "fusion expects z_ts 1×{} and z_img n×{}, got {a:?} and {b:?}",
                self.d_m, self.d_e
            )));
        }
        Ok(())
    }

    /// Multi-head attention of `z_ts` over the rows of `z_img`, projected to `1×d_v`.
    pub fn cross_attend<T: Float>(
        &self,
        tape: &mut Tape<T>,
        z_ts: Var,
        z_img: Var,
    ) -> Result<AttentionOutput> {
        self.check(tape, z_ts, z_img)?;
        self.cross.attn.forward(tape, z_ts, z_img)
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        z_ts: Var,
        z_img: Var,
    ) -> Result<FusionOutput> {
        self.check(tape, z_ts, z_img)?;
        let (z_imd, cross) = self.cross.forward(tape, z_ts, z_img)?;
        let mut z = z_imd;
        for b in &self.self_blocks {
            z = b.forward(tape, z, z)?.0;
        }
        Ok(FusionOutput {
            z_imd,
            z_comb: z,
            cross,
        })
    }
}

impl Module for FusionNet {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.cross.visit(&join(prefix, "cross"), out);
        for (i, b) in self.self_blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("self_blocks.{i}")), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.cross.visit_mut(&join(prefix, "cross"), out);
        for (i, b) in self.self_blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("self_blocks.{i}")), out);
        }
    }
}

/// Baseline: mean-pool the visual tokens, concatenate with `z_ts`, and map
/// through two hidden layers to `d_v`.
#[derive(Clone, Debug)]
pub struct ConcatMlp {
    pub mlp: Mlp,
}

impl ConcatMlp {
    pub fn new(d_m: usize, d_e: usize, d_v: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, 5);
        let hidden = 4 * d_v;
        Self {
            mlp: Mlp::new(&mut rng, &[d_e + d_m, hidden, hidden, d_v]),
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, z_ts: Var, z_img: Var) -> Result<Var> {
        let pooled = tape.mean_rows(z_img)?;
        let x = tape.concat_cols(&[pooled, z_ts])?;
        self.mlp.forward(tape, x)
    }
}

impl Module for ConcatMlp {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.mlp.visit(&join(prefix, "mlp"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.mlp.visit_mut(&join(prefix, "mlp"), out);
    }
}

/// Supervised contrastive loss over the rows of `latents`, summed over
/// anchors that have at least one positive.
pub fn supcon_loss<T: Float>(
    tape: &mut Tape<T>,
    latents: Var,
    labels: &[usize],
    tau: f64,
) -> Result<Var> {
    let m = tape.shape(latents)[0];
    if labels.len() != m || tape.shape(latents).len() != 2 {
        return Err(Error::shape(
            "supcon_loss",
            tape.shape(latents),
            &[labels.len()],
        ));
    }
    if m < 2 {
        return Err(Error::Input(
            "supervised contrastive loss needs at least 2 samples".into(),
        ));
    }
    if tau <= 0.0 {
        return Err(Error::Input(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let mut weights = vec![T::zero(); m * m];
    let mut anchors = 0;
    for i in 0..m {
        let pos: Vec<usize> = (0..m)
            .filter(|&p| p != i && labels[p] == labels[i])
            .collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let w = T::cst(-1.0 / pos.len() as f64);
        for p in pos {
            weights[i * m + p] = w;
        }
    }
    if anchors == 0 {
        return Err(Error::DegenerateBatch);
    }
    let z = tape.l2_normalize_rows(latents)?;
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let sim = tape.scale(sim, T::cst(1.0 / tau));
    let mask = (0..m * m).map(|j| j / m != j % m).collect();
    let lsm = tape.masked_log_softmax_rows(sim, Some(mask))?;
    let w = tape.constant(Tensor::new(&[m, m], weights)?);
    let weighted = tape.mul(lsm, w)?;
    Ok(tape.sum(weighted))
}
