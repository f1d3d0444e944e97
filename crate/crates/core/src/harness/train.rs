//! Staged training: MAE, time-series encoder, fusion, regressor and the
//! concatenation baseline. Upstream stages are frozen: their outputs are
//! computed once and fed to the next stage as constants.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{supcon_loss, ConcatMlp, FusionNet};
use crate::gait::{mse_loss, select_labels, GaitParams, GaitRegressor};
use crate::nn::{seeded_rng, Module};
use crate::numerics::{Float, Tape, Tensor, Var};
use crate::optim::{Adam, Grads};
use crate::synth::with_workers;
use crate::ts::{triplet_loss, SubWindow, TripletSampler, TsEncoder, TsStats, N_CH};
use crate::vision::{
    crop_bottom_center, patchify, sample_mask, ImageStats, MaskPlan, MaskedAutoencoder,
};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
use super::config::{PipelineConfig, StageConfig};
use super::dataset::{Dataset, Split};

/// Samples (or batches) in the fixed set used for initial/final loss.
const EVAL_ITEMS: usize = 64;
const EVAL_BATCHES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss on a fixed evaluation set before the first update.
    pub initial_loss: f64,
    /// Same evaluation set after the last update.
    pub final_loss: f64,
    /// Upstream module → (digest before, digest after).
    pub frozen: BTreeMap<String, (String, String)>,
}

impl StageReport {
    pub fn ratio(&self) -> f64 {
        self.final_loss / self.initial_loss
    }
}

/// SHA-256 over parameter names, shapes and little-endian values.
pub fn model_digest(m: &impl Module) -> String {
    let mut h = Sha256::new();
    for (name, t) in m.params() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Model inputs shared by every stage: patch matrices and normalized windows.
pub struct Inputs {
    pub patches: Vec<Tensor>,
    pub series: Vec<Tensor>,
}

pub fn prepare_inputs(ds: &Dataset, n_i: usize) -> Result<Inputs> {
    let m = &ds.manifest;
    with_workers(|| {
        let patches = ds
            .images
            .par_iter()
            .map(|img| Ok(patchify(&crop_bottom_center(img, n_i, &m.image_stats)?)))
            .collect::<Result<Vec<_>>>()?;
        let series = ds
            .windows
            .par_iter()
            .map(|w| w.normalized(&m.ts_stats))
            .collect();
        Ok(Inputs { patches, series })
    })
}

/// Frozen-encoder outputs for every sample.
pub struct Latents {
    /// `[(n_v+1) × d_e]`
    pub z_img: Vec<Tensor>,
    /// `[1 × d_m]`
    pub z_ts: Vec<Tensor>,
}

pub fn inference_mask(cfg: &PipelineConfig) -> Result<MaskPlan> {
    sample_mask(
        cfg.vision.n_patches(),
        cfg.vision.mask_ratio,
        cfg.inference_mask_seed,
    )
}

pub fn encode_image(mae: &MaskedAutoencoder, patches: &Tensor, mask: &MaskPlan) -> Result<Tensor> {
    let mut tape = Tape::<f32>::inference();
    let x = tape.constant(patches.clone());
    let z = mae.encode_visible(&mut tape, x, mask)?;
    Ok(tape.value(z).clone())
}

pub fn encode_series(ts: &TsEncoder, series: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::<f32>::inference();
    let x = tape.constant(series.clone());
    let z = ts.forward(&mut tape, x)?;
    Ok(tape.value(z).clone())
}

pub fn encode_latents(
    mae: &MaskedAutoencoder,
    ts: &TsEncoder,
    inputs: &Inputs,
    cfg: &PipelineConfig,
) -> Result<Latents> {
    let mask = inference_mask(cfg)?;
    with_workers(|| {
        let z_img = inputs
            .patches
            .par_iter()
            .map(|p| encode_image(mae, p, &mask))
            .collect::<Result<Vec<_>>>()?;
        let z_ts = inputs
            .series
            .par_iter()
            .map(|s| encode_series(ts, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Latents { z_img, z_ts })
    })
}

/// A trainable map from `(Z_TS, Z_img)` to one latent row.
pub trait Embedder: Module + Sync {
    fn embed<T: Float>(&self, tape: &mut Tape<T>, z_ts: Var, z_img: Var) -> Result<Var>;
}

impl Embedder for FusionNet {
    fn embed<T: Float>(&self, tape: &mut Tape<T>, z_ts: Var, z_img: Var) -> Result<Var> {
        Ok(self.forward(tape, z_ts, z_img)?.z_comb)
    }
}

impl Embedder for ConcatMlp {
    fn embed<T: Float>(&self, tape: &mut Tape<T>, z_ts: Var, z_img: Var) -> Result<Var> {
        self.forward(tape, z_ts, z_img)
    }
}

pub fn embed_all<E: Embedder>(model: &E, latents: &Latents) -> Result<Vec<Tensor>> {
    with_workers(|| {
        latents
            .z_img
            .par_iter()
            .zip(&latents.z_ts)
            .map(|(zi, zt)| {
                let mut tape = Tape::<f32>::inference();
                let (a, b) = (tape.constant(zt.clone()), tape.constant(zi.clone()));
                let z = model.embed(&mut tape, a, b)?;
                Ok(tape.value(z).clone())
            })
            .collect()
    })
}

/// Up to `n` evenly spaced entries of `ids`.
fn spread(ids: &[usize], n: usize) -> Vec<usize> {
    if ids.len() <= n {
        return ids.to_vec();
    }
    (0..n).map(|k| ids[k * ids.len() / n]).collect()
}

fn stage_seed(seed: u64, stage: Stage) -> u64 {
    seeded_rng(seed, 60 + stage as u64).random()
}

fn finite_or_diverged(stage: Stage, epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            stage: stage.name().to_string(),
            epoch,
            loss,
        })
    }
}

/// Runs `sc.epochs` passes over `order` in batches. `batch_step` returns the
/// batch gradients (already averaged as the loss defines) and the batch loss,
/// or `None` to skip the batch.
fn run_epochs<M: Module>(
    stage: Stage,
    model: &mut M,
    sc: &StageConfig,
    mut order: Vec<usize>,
    rng: &mut ChaCha8Rng,
    mut batch_step: impl FnMut(&M, &[usize], &mut ChaCha8Rng) -> Result<Option<(Grads, f64)>>,
) -> Result<Vec<f64>> {
    let mut opt = Adam::new(sc.optimizer.clone());
    let mut history = Vec::with_capacity(sc.epochs);
    let total_steps = (sc.epochs * order.len().div_ceil(sc.batch)).max(1);
    let mut step = 0usize;
    for epoch in 0..sc.epochs {
        order.shuffle(rng);
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(sc.batch) {
            if sc.cosine_decay {
                let progress = step as f64 / total_steps as f64;
                opt.cfg.lr =
                    sc.optimizer.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            }
            step += 1;
            let Some((mut grads, loss)) = batch_step(model, batch, rng)? else {
                continue;
            };
            finite_or_diverged(stage, epoch, loss)?;
            if sc.grad_clip > 0.0 {
                grads.clip(sc.grad_clip);
            }
            opt.step(model, &grads)?;
            total += loss;
            count += 1;
        }
        let mean = if count > 0 {
            total / count as f64
        } else {
            f64::NAN
        };
        finite_or_diverged(stage, epoch, mean)?;
        history.push(mean);
    }
    Ok(history)
}

fn scalar(tape: &Tape<f32>, v: Var) -> f64 {
    tape.value(v).data()[0] as f64
}

pub fn train_mae(
    ds: &Dataset,
    inputs: &Inputs,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(MaskedAutoencoder, StageReport)> {
    let sc = &cfg.train.mae;
    let mut model = MaskedAutoencoder::new(&cfg.vision, stage_seed(seed, Stage::Mae), true)?;
    let (n_p, ratio) = (cfg.vision.n_patches(), cfg.vision.mask_ratio);
    let train = ds.indices(Split::Train);
    let mut rng = seeded_rng(seed, 40);
    let eval_set = spread(&train, EVAL_ITEMS)
        .iter()
        .map(|&i| Ok((i, sample_mask(n_p, ratio, rng.random())?)))
        .collect::<Result<Vec<_>>>()?;
    let eval = |m: &MaskedAutoencoder| -> Result<f64> {
        let mut sum = 0.0;
        for (i, plan) in &eval_set {
            let mut tape = Tape::<f32>::inference();
            let x = tape.constant(inputs.patches[*i].clone());
            let l = m.mae_loss(&mut tape, x, plan)?;
            sum += scalar(&tape, l);
        }
        Ok(sum / eval_set.len() as f64)
    };
    let initial = eval(&model)?;
    let history = run_epochs(
        Stage::Mae,
        &mut model,
        sc,
        train,
        &mut rng,
        |m, batch, rng| {
            let mut grads = Grads::zeros_like(m);
            let mut total = 0.0;
            for &i in batch {
                let plan = sample_mask(n_p, ratio, rng.random())?;
                let mut tape = Tape::<f32>::new();
                let x = tape.constant(inputs.patches[i].clone());
                let l = m.mae_loss(&mut tape, x, &plan)?;
                total += scalar(&tape, l);
                tape.backward(l)?;
                grads.accumulate(m, &tape);
            }
            grads.scale(1.0 / batch.len() as f32);
            Ok(Some((grads, total / batch.len() as f64)))
        },
    )?;
    let final_loss = eval(&model)?;
    Ok((
        model,
        StageReport {
            stage: Stage::Mae,
            epoch_losses: history,
            initial_loss: initial,
            final_loss,
            frozen: BTreeMap::new(),
        },
    ))
}

/// Columns `[offset, offset+len)` of an `18 × T` matrix.
pub fn sub_series(x: &Tensor, offset: usize, len: usize) -> Tensor {
    let t = x.shape()[1];
    let mut out = Vec::with_capacity(N_CH * len);
    for c in 0..N_CH {
        out.extend_from_slice(&x.data()[c * t + offset..c * t + offset + len]);
    }
    Tensor::new(&[N_CH, len], out).expect("sub-window inside the window")
}

fn triplet_tape_loss<T: Float>(
    tape: &mut Tape<T>,
    enc: &TsEncoder,
    series: &[&Tensor],
    trip: &crate::ts::Triplet,
) -> Result<Var> {
    let run = |tape: &mut Tape<T>, s: &SubWindow| -> Result<Var> {
        let x = tape.constant(sub_series(series[s.window], s.offset, s.len).cast());
        enc.forward(tape, x)
    };
    let a = run(tape, &trip.anchor)?;
    let p = run(tape, &trip.positive)?;
    let negs = trip
        .negatives
        .iter()
        .map(|n| run(tape, n))
        .collect::<Result<Vec<_>>>()?;
    triplet_loss(tape, a, p, &negs)
}

pub fn train_ts(
    ds: &Dataset,
    inputs: &Inputs,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(TsEncoder, StageReport)> {
    let sc = &cfg.train.ts;
    let mut model = TsEncoder::new(&cfg.ts, stage_seed(seed, Stage::Ts))?;
    let train = ds.indices(Split::Train);
    let series: Vec<&Tensor> = train.iter().map(|&i| &inputs.series[i]).collect();
    let segs: Vec<usize> = train
        .iter()
        .map(|&i| ds.manifest.samples[i].segment)
        .collect();
    let labels: Vec<usize> = train
        .iter()
        .map(|&i| ds.manifest.samples[i].label)
        .collect();
    let mode = cfg.train.positive_mode;
    let k = cfg.train.negatives;
    let mut eval_sampler = TripletSampler::new(&segs, &labels, mode, k, seed ^ 0x5eed)?;
    let eval_set: Vec<_> = (0..EVAL_ITEMS).map(|_| eval_sampler.sample()).collect();
    let eval = |m: &TsEncoder| -> Result<f64> {
        let mut sum = 0.0;
        for trip in &eval_set {
            let mut tape = Tape::<f32>::inference();
            let l = triplet_tape_loss(&mut tape, m, &series, trip)?;
            sum += scalar(&tape, l);
        }
        Ok(sum / eval_set.len() as f64)
    };
    let initial = eval(&model)?;
    let mut sampler = TripletSampler::new(&segs, &labels, mode, k, seed)?;
    let mut rng = seeded_rng(seed, 41);
    let order: Vec<usize> = (0..train.len()).collect();
    let history = run_epochs(Stage::Ts, &mut model, sc, order, &mut rng, |m, batch, _| {
        let mut grads = Grads::zeros_like(m);
        let mut total = 0.0;
        for _ in batch {
            let trip = sampler.sample();
            let mut tape = Tape::<f32>::new();
            let l = triplet_tape_loss(&mut tape, m, &series, &trip)?;
            total += scalar(&tape, l);
            tape.backward(l)?;
            grads.accumulate(m, &tape);
        }
        grads.scale(1.0 / batch.len() as f32);
        Ok(Some((grads, total / batch.len() as f64)))
    })?;
    let final_loss = eval(&model)?;
    Ok((
        model,
        StageReport {
            stage: Stage::Ts,
            epoch_losses: history,
            initial_loss: initial,
            final_loss,
            frozen: BTreeMap::new(),
        },
    ))
}

/// Supervised contrastive loss of one batch, normalized per sample.
fn contrastive_batch<E: Embedder>(
    tape: &mut Tape<f32>,
    model: &E,
    latents: &Latents,
    labels: &[usize],
    batch: &[usize],
    tau: f64,
) -> Result<Option<Var>> {
    let mut rows = Vec::with_capacity(batch.len());
    for &i in batch {
        let zt = tape.constant(latents.z_ts[i].clone());
        let zi = tape.constant(latents.z_img[i].clone());
        rows.push(model.embed(tape, zt, zi)?);
    }
    let z = tape.concat_rows(&rows)?;
    let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
    match supcon_loss(tape, z, &y, tau) {
        Ok(l) => Ok(Some(l)),
        Err(Error::DegenerateBatch) => Ok(None),
        Err(e) => Err(e),
    }
}

fn train_contrastive<E: Embedder>(
    stage: Stage,
    mut model: E,
    sc: &StageConfig,
    ds: &Dataset,
    latents: &Latents,
    tau: f64,
    seed: u64,
) -> Result<(E, Vec<f64>, f64, f64)> {
    let train = ds.indices(Split::Train);
    let labels = ds.labels();
    let mut rng = seeded_rng(seed, 42);
    let mut fixed = train.clone();
    fixed.shuffle(&mut rng);
    let eval_batches: Vec<Vec<usize>> = fixed
        .chunks(sc.batch)
        .take(EVAL_BATCHES)
        .map(<[usize]>::to_vec)
        .collect();
    let eval = |m: &E| -> Result<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for b in &eval_batches {
            let mut tape = Tape::<f32>::inference();
            if let Some(l) = contrastive_batch(&mut tape, m, latents, &labels, b, tau)? {
                sum += scalar(&tape, l) / b.len() as f64;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::DegenerateBatch);
        }
        Ok(sum / n as f64)
    };
    let initial = eval(&model)?;
    let history = run_epochs(stage, &mut model, sc, train, &mut rng, |m, batch, rng| {
        let mut tape = Tape::<f32>::new().with_dropout(rng.random());
        let Some(l) = contrastive_batch(&mut tape, m, latents, &labels, batch, tau)? else {
            return Ok(None);
        };
        let loss = scalar(&tape, l) / batch.len() as f64;
        tape.backward(l)?;
        let mut grads = Grads::zeros_like(m);
        grads.accumulate(m, &tape);
        Ok(Some((grads, loss)))
    })?;
    let final_loss = eval(&model)?;
    Ok((model, history, initial, final_loss))
}

fn frozen_check(
    before: &[(String, String)],
    mae: &MaskedAutoencoder,
    ts: &TsEncoder,
) -> BTreeMap<String, (String, String)> {
    let after = [model_digest(mae), model_digest(ts)];
    before
        .iter()
        .zip(after)
        .map(|((name, b), a)| (name.clone(), (b.clone(), a)))
        .collect()
}

pub fn train_fusion(
    ds: &Dataset,
    latents: &Latents,
    encoders: (&MaskedAutoencoder, &TsEncoder),
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(FusionNet, StageReport)> {
    let before = [
        ("mae".to_string(), model_digest(encoders.0)),
        ("ts".to_string(), model_digest(encoders.1)),
    ];
    let model = FusionNet::new(
        &cfg.fusion,
        cfg.ts.d_m,
        cfg.vision.d_e,
        stage_seed(seed, Stage::Fusion),
    )?;
    let (model, history, initial, final_loss) = train_contrastive(
        Stage::Fusion,
        model,
        &cfg.train.fusion,
        ds,
        latents,
        cfg.fusion.tau,
        seed,
    )?;
    Ok((
        model,
        StageReport {
            stage: Stage::Fusion,
            epoch_losses: history,
            initial_loss: initial,
            final_loss,
            frozen: frozen_check(&before, encoders.0, encoders.1),
        },
    ))
}

pub fn train_concat(
    ds: &Dataset,
    latents: &Latents,
    encoders: (&MaskedAutoencoder, &TsEncoder),
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(ConcatMlp, StageReport)> {
    let before = [
        ("mae".to_string(), model_digest(encoders.0)),
        ("ts".to_string(), model_digest(encoders.1)),
    ];
    let model = ConcatMlp::new(
        cfg.ts.d_m,
        cfg.vision.d_e,
        cfg.d_v(),
        stage_seed(seed, Stage::Concat),
    );
    let (model, history, initial, final_loss) = train_contrastive(
        Stage::Concat,
        model,
        &cfg.train.concat,
        ds,
        latents,
        cfg.fusion.tau,
        seed,
    )?;
    Ok((
        model,
        StageReport {
            stage: Stage::Concat,
            epoch_losses: history,
            initial_loss: initial,
            final_loss,
            frozen: frozen_check(&before, encoders.0, encoders.1),
        },
    ))
}

/// Per-terrain gait labels from the window metrics of every sample.
pub fn dataset_labels(ds: &Dataset, cfg: &PipelineConfig) -> Result<BTreeMap<String, GaitParams>> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let records = ds.metric_records(&all);
    select_labels(&records, &cfg.grid, &cfg.weights)
}

pub fn train_head(
    ds: &Dataset,
    z_comb: &[Tensor],
    labels: &BTreeMap<String, GaitParams>,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(GaitRegressor, StageReport)> {
    let sc = &cfg.train.head;
    let mut model = GaitRegressor::new(cfg.d_v(), stage_seed(seed, Stage::Head));
    let targets = ds
        .manifest
        .samples
        .iter()
        .map(|r| {
            labels
                .get(&r.terrain)
                .map(|g| {
                    Tensor::new(&[1, 2], vec![g.step_height as f32, g.hip_splay as f32])
                        .expect("1×2")
                })
                .ok_or_else(|| Error::Input(format!("no gait label for terrain {}", r.terrain)))
        })
        .collect::<Result<Vec<_>>>()?;
    let train = ds.indices(Split::Train);
    let loss_of = |m: &GaitRegressor, tape: &mut Tape<f32>, i: usize| -> Result<Var> {
        let z = tape.constant(z_comb[i].clone());
        let y = tape.constant(targets[i].clone());
        let pred = m.forward(tape, z)?;
        mse_loss(tape, pred, y)
    };
    let eval = |m: &GaitRegressor| -> Result<f64> {
        let mut sum = 0.0;
        for &i in &train {
            let mut tape = Tape::<f32>::inference();
            let l = loss_of(m, &mut tape, i)?;
            sum += scalar(&tape, l);
        }
        Ok(sum / train.len() as f64)
    };
    let initial = eval(&model)?;
    let mut rng = seeded_rng(seed, 43);
    let history = run_epochs(
        Stage::Head,
        &mut model,
        sc,
        train.clone(),
        &mut rng,
        |m, batch, _| {
            let mut grads = Grads::zeros_like(m);
            let mut total = 0.0;
            for &i in batch {
                let mut tape = Tape::<f32>::new();
                let l = loss_of(m, &mut tape, i)?;
                total += scalar(&tape, l);
                tape.backward(l)?;
                grads.accumulate(m, &tape);
            }
            grads.scale(1.0 / batch.len() as f32);
            Ok(Some((grads, total / batch.len() as f64)))
        },
    )?;
    let final_loss = eval(&model)?;
    Ok((
        model,
        StageReport {
            stage: Stage::Head,
            epoch_losses: history,
            initial_loss: initial,
            final_loss,
            frozen: BTreeMap::new(),
        },
    ))
}

/// Everything the pipeline and the evaluation need.
#[derive(Clone, Debug)]
pub struct Models {
    pub mae: MaskedAutoencoder,
    pub ts: TsEncoder,
    pub fusion: FusionNet,
    pub head: Option<GaitRegressor>,
    pub concat: Option<ConcatMlp>,
    pub image_stats: ImageStats,
    pub ts_stats: TsStats,
    pub labels: BTreeMap<String, GaitParams>,
}

/// Options for [`train_all`].
#[derive(Clone, Copy, Debug)]
pub struct TrainPlan {
    pub head: bool,
    pub concat: bool,
}

/// Train every stage in memory.
pub fn train_all(
    ds: &Dataset,
    cfg: &PipelineConfig,
    seed: u64,
    plan: TrainPlan,
) -> Result<(Models, Vec<StageReport>)> {
    cfg.validate()?;
    let inputs = prepare_inputs(ds, cfg.vision.n_i)?;
    let (mut mae, r_mae) = train_mae(ds, &inputs, cfg, seed)?;
    mae.decoder = None;
    let (ts, r_ts) = train_ts(ds, &inputs, cfg, seed)?;
    let latents = encode_latents(&mae, &ts, &inputs, cfg)?;
    let (fusion, r_fusion) = train_fusion(ds, &latents, (&mae, &ts), cfg, seed)?;
    let mut reports = vec![r_mae, r_ts, r_fusion];
    let mut labels = BTreeMap::new();
    let head = if plan.head {
        labels = dataset_labels(ds, cfg)?;
        let z_comb = embed_all(&fusion, &latents)?;
        let (head, r) = train_head(ds, &z_comb, &labels, cfg, seed)?;
        reports.push(r);
        Some(head)
    } else {
        None
    };
    let concat = if plan.concat {
        let (c, r) = train_concat(ds, &latents, (&mae, &ts), cfg, seed)?;
        reports.push(r);
        Some(c)
    } else {
        None
    };
    Ok((
        Models {
            mae,
            ts,
            fusion,
            head,
            concat,
            image_stats: ds.manifest.image_stats,
            ts_stats: ds.manifest.ts_stats.clone(),
            labels,
        },
        reports,
    ))
}

/// Metadata stored alongside every stage checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageMeta {
    pub pipeline: PipelineConfig,
    pub image_stats: ImageStats,
    pub ts_stats: TsStats,
    pub categories: Vec<String>,
    pub report: StageReport,
    #[serde(default)]
    pub labels: BTreeMap<String, GaitParams>,
}

pub fn stage_meta(c: &Checkpoint) -> Result<StageMeta> {
    Ok(serde_json::from_value(c.config.clone())?)
}

fn require(dir: &Path, needed: Stage, by: Stage) -> Result<Checkpoint> {
    let path = dir.join(needed.file_name());
    if !path.exists() {
        return Err(Error::Dependency(format!(
            "stage {} needs the {} checkpoint at {}",
            by.name(),
            needed.name(),
            path.display()
        )));
    }
    let c = load_checkpoint(&path)?;
    if c.stage != needed {
        return Err(Error::Corrupt {
            path,
            reason: format!("holds stage {}, expected {}", c.stage.name(), needed.name()),
        });
    }
    Ok(c)
}

fn restore<M: Module>(mut m: M, c: &Checkpoint) -> Result<M> {
    m.load_state_dict(&c.tensors)?;
    Ok(m)
}

pub fn load_mae(c: &Checkpoint) -> Result<MaskedAutoencoder> {
    let meta = stage_meta(c)?;
    let mut m = restore(MaskedAutoencoder::new(&meta.pipeline.vision, 0, true)?, c)?;
    m.decoder = None;
    Ok(m)
}

pub fn load_ts(c: &Checkpoint) -> Result<TsEncoder> {
    let meta = stage_meta(c)?;
    restore(TsEncoder::new(&meta.pipeline.ts, 0)?, c)
}

pub fn load_fusion(c: &Checkpoint) -> Result<FusionNet> {
    let p = stage_meta(c)?.pipeline;
    restore(FusionNet::new(&p.fusion, p.ts.d_m, p.vision.d_e, 0)?, c)
}

pub fn load_head(c: &Checkpoint) -> Result<GaitRegressor> {
    let p = stage_meta(c)?.pipeline;
    restore(GaitRegressor::new(p.d_v(), 0), c)
}

pub fn load_concat(c: &Checkpoint) -> Result<ConcatMlp> {
    let p = stage_meta(c)?.pipeline;
    restore(ConcatMlp::new(p.ts.d_m, p.vision.d_e, p.d_v(), 0), c)
}

/// Load every available stage from a checkpoint directory.
pub fn load_models(dir: &Path) -> Result<(Models, PipelineConfig)> {
    let c_fusion = require(dir, Stage::Fusion, Stage::Fusion)?;
    let meta = stage_meta(&c_fusion)?;
    let mae = load_mae(&require(dir, Stage::Mae, Stage::Fusion)?)?;
    let ts = load_ts(&require(dir, Stage::Ts, Stage::Fusion)?)?;
    let fusion = load_fusion(&c_fusion)?;
    let (head, labels) = match dir.join(Stage::Head.file_name()).exists() {
        true => {
            let c = require(dir, Stage::Head, Stage::Head)?;
            (Some(load_head(&c)?), stage_meta(&c)?.labels)
        }
        false => (None, BTreeMap::new()),
    };
    let concat = match dir.join(Stage::Concat.file_name()).exists() {
        true => Some(load_concat(&require(dir, Stage::Concat, Stage::Concat)?)?),
        false => None,
    };
    Ok((
        Models {
            mae,
            ts,
            fusion,
            head,
            concat,
            image_stats: meta.image_stats,
            ts_stats: meta.ts_stats,
            labels,
        },
        meta.pipeline,
    ))
}

/// Train one stage from a dataset, loading prerequisites from `dir` and
/// saving the result there. A failed stage leaves existing files untouched.
pub fn train_stage(
    stage: Stage,
    ds: &Dataset,
    cfg: &PipelineConfig,
    dir: &Path,
    seed: u64,
) -> Result<(Checkpoint, StageReport)> {
    cfg.validate()?;
    let inputs = prepare_inputs(ds, cfg.vision.n_i)?;
    let encoders = |by: Stage| -> Result<(MaskedAutoencoder, TsEncoder)> {
        Ok((
            load_mae(&require(dir, Stage::Mae, by)?)?,
            load_ts(&require(dir, Stage::Ts, by)?)?,
        ))
    };
    let mut labels = BTreeMap::new();
    let (tensors, report) = match stage {
        Stage::Mae => {
            let (m, r) = train_mae(ds, &inputs, cfg, seed)?;
            (m.state_dict(), r)
        }
        Stage::Ts => {
            let (m, r) = train_ts(ds, &inputs, cfg, seed)?;
            (m.state_dict(), r)
        }
        Stage::Fusion => {
            let (mae, ts) = encoders(stage)?;
            let latents = encode_latents(&mae, &ts, &inputs, cfg)?;
            let (m, r) = train_fusion(ds, &latents, (&mae, &ts), cfg, seed)?;
            (m.state_dict(), r)
        }
        Stage::Concat => {
            let (mae, ts) = encoders(stage)?;
            let latents = encode_latents(&mae, &ts, &inputs, cfg)?;
            let (m, r) = train_concat(ds, &latents, (&mae, &ts), cfg, seed)?;
            (m.state_dict(), r)
        }
        Stage::Head => {
            let fusion = load_fusion(&require(dir, Stage::Fusion, stage)?)?;
            let (mae, ts) = encoders(stage)?;
            let latents = encode_latents(&mae, &ts, &inputs, cfg)?;
            let z_comb = embed_all(&fusion, &latents)?;
            labels = dataset_labels(ds, cfg)?;
            let (m, r) = train_head(ds, &z_comb, &labels, cfg, seed)?;
            (m.state_dict(), r)
        }
    };
    let meta = StageMeta {
        pipeline: cfg.clone(),
        image_stats: ds.manifest.image_stats,
        ts_stats: ds.manifest.ts_stats.clone(),
        categories: ds.manifest.categories.clone(),
        report: report.clone(),
        labels,
    };
    let ckpt = Checkpoint::new(stage, tensors, serde_json::to_value(&meta)?, seed);
    save_checkpoint(&dir.join(stage.file_name()), &ckpt)?;
    Ok((ckpt, report))
}
