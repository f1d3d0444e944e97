use super::{sincos_2d, MaskPlan, VisionConfig, PATCH_DIM};
use crate::error::{Error, Result};
use crate::nn::{join, normal, seeded_rng, LayerNorm, Linear, Module, PreNormBlock};
use crate::numerics::{Float, Tape, Tensor, Var};

/// ViT encoder over visible patches with a learned summary token, plus an
/// optional lightweight decoder used only while training.
#[derive(Clone, Debug)]
pub struct MaskedAutoencoder {
    pub cfg: VisionConfig,
    pub patch_embed: Linear,
    pub summary_token: Tensor,
    pub blocks: Vec<PreNormBlock>,
    pub norm: LayerNorm,
    pub decoder: Option<MaeDecoder>,
    pos: Tensor,
}

#[derive(Clone, Debug)]
pub struct MaeDecoder {
    pub embed: Linear,
    pub mask_token: Tensor,
    pub blocks: Vec<PreNormBlock>,
    pub norm: LayerNorm,
    pub pred: Linear,
    pos: Tensor,
}

impl MaskedAutoencoder {
    pub fn new(cfg: &VisionConfig, seed: u64, with_decoder: bool) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed, 1);
        let d = cfg.d_e;
        let patch_embed = Linear::new(&mut rng, PATCH_DIM, d, true);
        let summary_token = normal(&mut rng, 0.02, &[1, d]);
        let blocks = (0..cfg.encoder_depth)
            .map(|_| PreNormBlock::new(&mut rng, d, cfg.n_heads, cfg.mlp_ratio))
            .collect();
        let decoder = with_decoder.then(|| {
            let dd = cfg.decoder_dim;
            MaeDecoder {
                embed: Linear::new(&mut rng, d, dd, true),
                mask_token: normal(&mut rng, 0.02, &[1, dd]),
                blocks: (0..cfg.decoder_depth)
                    .map(|_| PreNormBlock::new(&mut rng, dd, cfg.decoder_heads, cfg.mlp_ratio))
                    .collect(),
                norm: LayerNorm::new(dd),
                pred: Linear::new(&mut rng, dd, PATCH_DIM, true),
                pos: sincos_2d(cfg.grid(), dd),
            }
        });
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            summary_token,
            blocks,
            norm: LayerNorm::new(d),
            decoder,
            pos: sincos_2d(cfg.grid(), d),
        })
    }

    /// Encode patches `[k×768]` whose grid positions are `positions`.
    /// Output is `[(k+1)×d_e]` with the summary token first.
    pub fn encode_tokens<T: Float>(
        &self,
        tape: &mut Tape<T>,
        patches: Var,
        positions: &[usize],
    ) -> Result<Var> {
        let n_p = self.cfg.n_patches();
        let shape = tape.shape(patches).to_vec();
        if !positions.is_empty() && shape != [positions.len(), PATCH_DIM] {
            return Err(Error::Input(format!(
                "{} positions for patch tensor {:?}",
                positions.len(),
                shape
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= n_p) {
            return Err(Error::Input(format!(
                "patch position {p} outside a {n_p}-patch grid"
            )));
        }
        let summary = tape.param(&self.summary_token);
        let mut x = if positions.is_empty() {
            summary
        } else {
            let e = self.patch_embed.forward(tape, patches)?;
            let table = tape.fixed(&self.pos);
            let pos = tape.gather_rows(table, positions)?;
            let e = tape.add(e, pos)?;
            tape.concat_rows(&[summary, e])?
        };
        for b in &self.blocks {
            x = b.forward(tape, x)?;
        }
        self.norm.forward(tape, x)
    }

    /// Visual latent for one image: `[(n_v+1)×d_e]`.
    pub fn encode_visible<T: Float>(
        &self,
        tape: &mut Tape<T>,
        patches: Var,
        plan: &MaskPlan,
    ) -> Result<Var> {
        self.check_plan(tape, patches, plan)?;
        if plan.visible.is_empty() {
            let dummy = tape.constant(Tensor::zeros(&[1, 1]));
            return self.encode_tokens(tape, dummy, &[]);
        }
        let vis = tape.gather_rows(patches, &plan.visible)?;
        self.encode_tokens(tape, vis, &plan.visible)
    }

    /// Reconstruction of every patch, `[n_patches×768]` in raster order.
    pub fn decode<T: Float>(
        &self,
        tape: &mut Tape<T>,
        latent: Var,
        plan: &MaskPlan,
    ) -> Result<Var> {
        let dec = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Usage("model was built without a decoder".into()))?;
        let n_v = plan.visible.len();
        let h = dec.embed.forward(tape, latent)?;
        let summary = tape.gather_rows(h, &[0])?;
        let mut parts = Vec::with_capacity(2);
        if n_v > 0 {
            let idx: Vec<usize> = (1..=n_v).collect();
            parts.push(tape.gather_rows(h, &idx)?);
        }
        if !plan.masked.is_empty() {
            let m = tape.param(&dec.mask_token);
            parts.push(tape.gather_rows(m, &vec![0; plan.masked.len()])?);
        }
        let stacked = tape.concat_rows(&parts)?;
        // row of patch p inside `stacked` (visible first, then masked)
        let mut restore = vec![0; plan.n_patches()];
        for (row, &p) in plan.visible.iter().chain(&plan.masked).enumerate() {
            restore[p] = row;
        }
        let full = tape.gather_rows(stacked, &restore)?;
        let table = tape.fixed(&dec.pos);
        let full = tape.add(full, table)?;
        let mut x = tape.concat_rows(&[summary, full])?;
        for b in &dec.blocks {
            x = b.forward(tape, x)?;
        }
        let x = dec.norm.forward(tape, x)?;
        let out = dec.pred.forward(tape, x)?;
        let rows: Vec<usize> = (1..=plan.n_patches()).collect();
        tape.gather_rows(out, &rows)
    }

    /// Masked-patch reconstruction loss for one image.
    pub fn mae_loss<T: Float>(
        &self,
        tape: &mut Tape<T>,
        patches: Var,
        plan: &MaskPlan,
    ) -> Result<Var> {
        if plan.masked.is_empty() {
            return Err(Error::Input(
                "mask has no masked patches; nothing to reconstruct".into(),
            ));
        }
        let z = self.encode_visible(tape, patches, plan)?;
        let pred = self.decode(tape, z, plan)?;
        reconstruction_loss(tape, pred, patches, &plan.masked)
    }

    fn check_plan<T: Float>(&self, tape: &Tape<T>, patches: Var, plan: &MaskPlan) -> Result<()> {
        let n_p = self.cfg.n_patches();
        if tape.shape(patches) != [n_p, PATCH_DIM] || plan.n_patches() != n_p {
            return Err(Error::Input(format!(
                "mask covers {} patches, patch tensor is {:?}, model expects {n_p}",
                plan.n_patches(),
                tape.shape(patches)
            )));
        }
        Ok(())
    }
}

/// `(1/|M|) Σ_{i∈M} ‖target_i − pred_i‖²`.
pub fn reconstruction_loss<T: Float>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    masked: &[usize],
) -> Result<Var> {
    if masked.is_empty() {
        return Err(Error::Input("no masked patches".into()));
    }
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape(
            "reconstruction_loss",
            tape.shape(pred),
            tape.shape(target),
        ));
    }
    let p = tape.gather_rows(pred, masked)?;
    let t = tape.gather_rows(target, masked)?;
    let d = tape.sub(p, t)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, T::cst(1.0 / masked.len() as f64)))
}

impl Module for MaskedAutoencoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), out);
        out.push((join(prefix, "summary_token"), &self.summary_token));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.visit(&join(prefix, "norm"), out);
        if let Some(d) = &self.decoder {
            d.visit(&join(prefix, "decoder"), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.patch_embed
            .visit_mut(&join(prefix, "patch_embed"), out);
        out.push((join(prefix, "summary_token"), &mut self.summary_token));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.visit_mut(&join(prefix, "norm"), out);
        if let Some(d) = &mut self.decoder {
            d.visit_mut(&join(prefix, "decoder"), out);
        }
    }
}

impl Module for MaeDecoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.embed.visit(&join(prefix, "embed"), out);
        out.push((join(prefix, "mask_token"), &self.mask_token));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.visit(&join(prefix, "norm"), out);
        self.pred.visit(&join(prefix, "pred"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.embed.visit_mut(&join(prefix, "embed"), out);
        out.push((join(prefix, "mask_token"), &mut self.mask_token));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.visit_mut(&join(prefix, "norm"), out);
        self.pred.visit_mut(&join(prefix, "pred"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{Adam, AdamConfig, Grads};
    use crate::vision::sample_mask;

    fn tiny() -> VisionConfig {
        VisionConfig {
            n_i: 32,
            d_e: 64,
            encoder_depth: 2,
            decoder_depth: 1,
            decoder_dim: 32,
            decoder_heads: 2,
            ..VisionConfig::desk()
        }
    }

    fn patches(n_p: usize, seed: u64) -> Tensor {
        Tensor::from_fn(&[n_p, PATCH_DIM], |i| {
            ((i as u64 * 2654435761 + seed) % 1000) as f32 / 500.0 - 1.0
        })
    }

    #[test]
    fn desk_latent_shape() {
        let cfg = tiny();
        let mae = MaskedAutoencoder::new(&cfg, 0, false).unwrap();
        let plan = sample_mask(4, 0.75, 3).unwrap();
        let mut t = Tape::<f32>::inference();
        let p = t.constant(patches(4, 1));
        let z = mae.encode_visible(&mut t, p, &plan).unwrap();
        assert_eq!(t.shape(z), &[2, 64]);
    }

    #[test]
    fn visible_order_does_not_matter_when_positions_travel_along() {
        let cfg = VisionConfig { n_i: 64, ..tiny() };
        let mae = MaskedAutoencoder::new(&cfg, 5, false).unwrap();
        let all = patches(16, 2);
        let positions = [3, 7, 8, 12];
        let reversed: Vec<usize> = positions.iter().rev().copied().collect();
        let run = |pos: &[usize]| {
            let mut t = Tape::<f64>::inference();
            let p = t.constant(all.cast());
            let v = t.gather_rows(p, pos).unwrap();
            let z = mae.encode_tokens(&mut t, v, pos).unwrap();
            t.value(z).clone()
        };
        let a = run(&positions);
        let b = run(&reversed);
        assert!((0..64).all(|c| (a.at2(0, c) - b.at2(0, c)).abs() < 1e-5));
        for (i, j) in [(1, 4), (2, 3), (3, 2), (4, 1)] {
            assert!((0..64).all(|c| (a.at2(i, c) - b.at2(j, c)).abs() < 1e-5));
        }
    }

    #[test]
    fn loss_examples() {
        let target = patches(4, 3).cast::<f64>();
        let masked = [0, 2, 3];
        let mut t = Tape::<f64>::new();
        let tv = t.constant(target.clone());
        let l0 = reconstruction_loss(&mut t, tv, tv, &masked).unwrap();
        assert_eq!(t.value(l0).data()[0], 0.0);
        let shifted = t.constant(Tensor::from_fn(&[4, PATCH_DIM], |i| target.data()[i] + 1.0));
        let l1 = reconstruction_loss(&mut t, shifted, tv, &masked).unwrap();
        assert!((t.value(l1).data()[0] - 768.0).abs() < 1e-9);
    }

    #[test]
    fn loss_ignores_visible_rows_and_has_closed_form_gradient() {
        let target = patches(4, 4).cast::<f64>();
        let pred = patches(4, 5).cast::<f64>();
        let masked = [1, 2];
        let mut t = Tape::<f64>::new();
        let pv = t.leaf(pred.clone());
        let tv = t.constant(target.clone());
        let l = reconstruction_loss(&mut t, pv, tv, &masked).unwrap();
        t.backward(l).unwrap();
        let g = t.grad(pv).unwrap();
        for r in 0..4 {
            for c in 0..PATCH_DIM {
                let i = r * PATCH_DIM + c;
                let expect = if masked.contains(&r) {
                    2.0 * (pred.data()[i] - target.data()[i]) / 2.0
                } else {
                    0.0
                };
                assert!((g[i] - expect).abs() < 1e-12);
            }
        }
        let mut other = pred.clone();
        for c in 0..PATCH_DIM {
            other.data_mut()[c] += 3.0;
            other.data_mut()[3 * PATCH_DIM + c] -= 1.0;
        }
        let mut t2 = Tape::<f64>::new();
        let (pv, tv) = (t2.constant(other), t2.constant(target));
        let l2 = reconstruction_loss(&mut t2, pv, tv, &masked).unwrap();
        assert_eq!(t2.value(l2).data()[0], t.value(l).data()[0]);
    }

    #[test]
    fn unmasked_plan_cannot_train() {
        let mae = MaskedAutoencoder::new(&tiny(), 0, true).unwrap();
        let mut t = Tape::<f32>::new();
        let p = t.constant(patches(4, 1));
        let plan = sample_mask(4, 0.0, 0).unwrap();
        assert!(matches!(
            mae.mae_loss(&mut t, p, &plan),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn one_step_reduces_loss() {
        let mut mae = MaskedAutoencoder::new(&tiny(), 11, true).unwrap();
        let x = patches(4, 7);
        let plan = sample_mask(4, 0.5, 2).unwrap();
        let loss_of = |m: &MaskedAutoencoder| {
            let mut t = Tape::<f32>::new();
            let p = t.constant(x.clone());
            let l = m.mae_loss(&mut t, p, &plan).unwrap();
            (t.value(l).data()[0], t, l)
        };
        let (before, mut tape, l) = loss_of(&mae);
        tape.backward(l).unwrap();
        let mut g = Grads::zeros_like(&mae);
        g.accumulate(&mae, &tape);
        let mut opt = Adam::new(AdamConfig {
            lr: 1e-3,
            ..Default::default()
        });
        opt.step(&mut mae, &g).unwrap();
        let (after, _, _) = loss_of(&mae);
        assert!(after < before, "{after} >= {before}");
    }
}
