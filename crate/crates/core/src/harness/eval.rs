//! Probe evaluation of the learned representations and their ablations.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::seeded_rng;
use crate::numerics::Tensor;

use super::config::PipelineConfig;
use super::dataset::{Dataset, Split};
use super::probe::{probe_fit_eval, ProbeReport};
use super::train::{embed_all, encode_latents, prepare_inputs, Latents, Models};

/// One feature vector per sample for each representation under test.
pub struct LatentSet {
    /// Fused latent `Z_comb`.
    pub fused: Vec<Vec<f32>>,
    /// Time-series latent alone.
    pub ts_only: Vec<Vec<f32>>,
    /// Mean-pooled image tokens alone.
    pub vision_only: Vec<Vec<f32>>,
    /// Concatenation-MLP latent, when that baseline is trained.
    pub concat: Option<Vec<Vec<f32>>>,
}

fn rows(ts: &[Tensor]) -> Vec<Vec<f32>> {
    ts.iter().map(|t| t.data().to_vec()).collect()
}

pub fn mean_pool(z: &Tensor) -> Vec<f32> {
    let (r, c) = z.dims2().expect("token matrix");
    let mut out = vec![0.0f32; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(z.row(i)) {
            *o += v / r as f32;
        }
    }
    out
}

pub fn latent_set(models: &Models, latents: &Latents) -> Result<LatentSet> {
    let fused = rows(&embed_all(&models.fusion, latents)?);
    let concat = match &models.concat {
        Some(c) => Some(rows(&embed_all(c, latents)?)),
        None => None,
    };
    Ok(LatentSet {
        fused,
        ts_only: rows(&latents.z_ts),
        vision_only: latents.z_img.iter().map(mean_pool).collect(),
        concat,
    })
}

pub fn collect_latents(ds: &Dataset, models: &Models, cfg: &PipelineConfig) -> Result<LatentSet> {
    let mut ds_view = ds.clone();
    ds_view.manifest.image_stats = models.image_stats;
    ds_view.manifest.ts_stats = models.ts_stats.clone();
    let inputs = prepare_inputs(&ds_view, cfg.vision.n_i)?;
    let latents = encode_latents(&models.mae, &models.ts, &inputs, cfg)?;
    latent_set(models, &latents)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub report: ProbeReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    /// Fused latents with permuted labels.
    pub shuffle_control: ProbeReport,
    pub n_categories: usize,
}

pub const ROW_FULL: &str = "full";
pub const ROW_NO_VISION: &str = "w/o vision";
pub const ROW_NO_PROPRIO: &str = "w/o proprioception";
pub const ROW_MLP: &str = "mlp fusion";

impl EvalTable {
    pub fn row(&self, name: &str) -> Option<&ProbeReport> {
        self.rows.iter().find(|r| r.name == name).map(|r| &r.report)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("model\taccuracy\tprecision\trecall\tf1\n");
        for r in &self.rows {
            s.push_str(&r.report.tsv_row(&r.name));
            s.push('\n');
        }
        s
    }

    pub fn chance(&self) -> f64 {
        100.0 / self.n_categories as f64
    }
}

/// Probe every representation on the dataset's train/holdout split; all rows
/// share that split and `split_seed`.
pub fn evaluate_latents(
    ds: &Dataset,
    set: &LatentSet,
    split_seed: u64,
    cfg: &PipelineConfig,
) -> Result<EvalTable> {
    let train = ds.indices(Split::Train);
    let test = ds.indices(Split::Holdout);
    if test.is_empty() {
        return Err(Error::Input("dataset has no holdout samples".into()));
    }
    let labels = ds.labels();
    let probe = |x: &[Vec<f32>], y: &[usize]| -> Result<ProbeReport> {
        let pick = |ix: &[usize]| -> (Vec<Vec<f32>>, Vec<usize>) {
            (
                ix.iter().map(|&i| x[i].clone()).collect(),
                ix.iter().map(|&i| y[i]).collect(),
            )
        };
        let (xtr, ytr) = pick(&train);
        let (xte, yte) = pick(&test);
        probe_fit_eval(&xtr, &ytr, &xte, &yte, split_seed, &cfg.probe)
    };
    let mut rows = vec![
        EvalRow {
            name: ROW_FULL.into(),
            report: probe(&set.fused, &labels)?,
        },
        EvalRow {
            name: ROW_NO_VISION.into(),
            report: probe(&set.ts_only, &labels)?,
        },
        EvalRow {
            name: ROW_NO_PROPRIO.into(),
            report: probe(&set.vision_only, &labels)?,
        },
    ];
    if let Some(c) = &set.concat {
        rows.push(EvalRow {
            name: ROW_MLP.into(),
            report: probe(c, &labels)?,
        });
    }
    let mut shuffled = labels.clone();
    shuffled.shuffle(&mut seeded_rng(split_seed, 32));
    let shuffle_control = probe(&set.fused, &shuffled)?;
    let mut cats = labels.clone();
    cats.sort_unstable();
    cats.dedup();
    Ok(EvalTable {
        rows,
        shuffle_control,
        n_categories: cats.len(),
    })
}

pub fn evaluate(
    ds: &Dataset,
    models: &Models,
    cfg: &PipelineConfig,
    split_seed: u64,
) -> Result<EvalTable> {
    let set = collect_latents(ds, models, cfg)?;
    evaluate_latents(ds, &set, split_seed, cfg)
}
