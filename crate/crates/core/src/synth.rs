//! Deterministic stand-in for field data: procedural terrain images and
//! gait-locked proprioceptive signals whose RMS metrics have closed forms.
//!
//! Signal model for terrain θ and gait g = (h, w):
//!
//! ```text
//! D = |h − h*|/0.09 + |w − w*|/0.04        v = 1 + 0.5·D
//! f = 1.5·(1 + w) Hz                       φ ~ U[0, 2π)
//! ω_c   = A_ω·v·sin(2πft + φ + 2πc/3) + σ_g·v·ε
//! a_c   = A_a·v·sin(2πft + φ + 2πc/3) + σ_a·v·ε      c ∈ {x, y}
//! a_z   = 9.81 + A_z·v·sin(4πft + φ)   + σ_a·v·ε
//! τ_j   = B·m_j + s·v + A_J·v·sin(2πft + φ + πj/6) + σ_J·v·ε
//! ```
//!
//! Every metric grows with v, which is 1 exactly at the designed optimum
//! g*(θ), so the per-terrain argmin is g* for any non-negative weights.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gait::{GaitGrid, GaitParams, RawMetrics, GRAVITY};
use crate::harness::dataset::{Dataset, DatasetManifest};
use crate::nn::seeded_rng;
use crate::numerics::Tensor;
use crate::ts::{ImuSample, JointSample, TimeSeriesWindow, D_TS, N_CH, RATE_HZ};
use crate::vision::RawImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terrain {
    HardSurface,
    Grass,
    Vegetation,
    Sand,
    Pebbles,
}

impl Terrain {
    pub const ALL: [Terrain; 5] = [
        Terrain::HardSurface,
        Terrain::Grass,
        Terrain::Vegetation,
        Terrain::Sand,
        Terrain::Pebbles,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Terrain::HardSurface => "hard_surface",
            Terrain::Grass => "grass",
            Terrain::Vegetation => "vegetation",
            Terrain::Sand => "sand",
            Terrain::Pebbles => "pebbles",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

/// Multipliers on the joint baseline for abduction, hip and knee motors.
const JOINT_SCALE: [f64; 3] = [0.5, 1.0, 1.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalParams {
    pub optimum: GaitParams,
    pub amp_gyro: f64,
    pub amp_acc: f64,
    pub amp_acc_z: f64,
    pub noise_gyro: f64,
    pub noise_acc: f64,
    pub noise_joint: f64,
    pub joint_base: f64,
    pub sinkage: f64,
    pub amp_joint: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    /// RGB, 0-255
    pub base_color: [f64; 3],
    pub noise_amp: f64,
    /// Value-noise lattice spacing, pixels.
    pub granularity: f64,
    /// Features per 1000 px².
    pub blob_density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainSpec {
    pub terrain: Terrain,
    pub signal: SignalParams,
    pub texture: TextureParams,
}

impl TerrainSpec {
    pub fn default_for(terrain: Terrain) -> Self {
        use Terrain::*;
        let (opt, sig, tex) = match terrain {
            HardSurface => (
                (0.03, 0.13),
                [0.15, 0.8, 1.5, 0.03, 0.3, 0.4, 12.0, 0.5, 4.0],
                ([112.0, 116.0, 126.0], 10.0, 3.0, 0.6),
            ),
            Grass => (
                (0.12, 0.13),
                [0.2, 1.0, 1.8, 0.06, 0.5, 0.8, 14.0, 1.0, 5.0],
                ([76.0, 140.0, 56.0], 16.0, 3.0, 12.0),
            ),
            Vegetation => (
                (0.30, 0.13),
                [0.3, 1.2, 2.0, 0.12, 0.9, 1.6, 17.0, 2.5, 6.0],
                ([38.0, 84.0, 32.0], 20.0, 6.0, 5.0),
            ),
            Sand => (
                (0.21, 0.17),
                [0.25, 0.9, 1.2, 0.08, 0.6, 1.2, 19.0, 3.5, 5.0],
                ([196.0, 172.0, 124.0], 6.0, 12.0, 0.0),
            ),
            Pebbles => (
                (0.12, 0.20),
                [0.35, 1.4, 2.4, 0.15, 1.2, 1.0, 15.0, 1.5, 5.5],
                ([140.0, 126.0, 108.0], 12.0, 4.0, 6.0),
            ),
        };
        Self {
            terrain,
            signal: SignalParams {
                optimum: GaitParams::new(opt.0, opt.1),
                amp_gyro: sig[0],
                amp_acc: sig[1],
                amp_acc_z: sig[2],
                noise_gyro: sig[3],
                noise_acc: sig[4],
                noise_joint: sig[5],
                joint_base: sig[6],
                sinkage: sig[7],
                amp_joint: sig[8],
            },
            texture: TextureParams {
                base_color: tex.0,
                noise_amp: tex.1,
                granularity: tex.2,
                blob_density: tex.3,
            },
        }
    }

    pub fn defaults() -> Vec<Self> {
        Terrain::ALL.into_iter().map(Self::default_for).collect()
    }
}

pub fn mismatch_factor(sp: &SignalParams, g: GaitParams) -> f64 {
    let d = (g.step_height - sp.optimum.step_height).abs() / 0.09
        + (g.hip_splay - sp.optimum.hip_splay).abs() / 0.04;
    1.0 + 0.5 * d
}

pub fn step_frequency(g: GaitParams) -> f64 {
    1.5 * (1.0 + g.hip_splay)
}

/// Expected RMS metrics of a window generated at `(sp, g)`.
pub fn closed_form_metrics(sp: &SignalParams, g: GaitParams) -> RawMetrics {
    let v = mismatch_factor(sp, g);
    let omega2 = 3.0 * v * v * (sp.amp_gyro.powi(2) / 2.0 + sp.noise_gyro.powi(2));
    let az2 = v * v * (sp.amp_acc_z.powi(2) / 2.0 + sp.noise_acc.powi(2));
    let base2 = JOINT_SCALE
        .iter()
        .map(|m| (sp.joint_base * m + sp.sinkage * v).powi(2))
        .sum::<f64>()
        / 3.0;
    let effort2 = base2 + v * v * (sp.amp_joint.powi(2) / 2.0 + sp.noise_joint.powi(2));
    RawMetrics {
        omega: omega2.sqrt(),
        a_z: az2.sqrt(),
        effort: effort2.sqrt(),
    }
}

/// Continuous-time signal generator for one (terrain, gait) condition.
struct SignalModel<'a> {
    sp: &'a SignalParams,
    v: f64,
    f: f64,
    phase: f64,
}

impl<'a> SignalModel<'a> {
    fn new(sp: &'a SignalParams, g: GaitParams, phase: f64) -> Self {
        Self {
            sp,
            v: mismatch_factor(sp, g),
            f: step_frequency(g),
            phase,
        }
    }

    fn imu(&self, t: f64, rng: &mut ChaCha8Rng) -> ImuSample {
        let (sp, v) = (self.sp, self.v);
        let arg = 2.0 * PI * self.f * t + self.phase;
        let mut eps = || rng.sample::<f64, _>(StandardNormal);
        let mut gyro = [0.0; 3];
        for (c, g) in gyro.iter_mut().enumerate() {
            *g = sp.amp_gyro * v * (arg + 2.0 * PI * c as f64 / 3.0).sin()
                + sp.noise_gyro * v * eps();
        }
        let mut acc = [0.0; 3];
        for (c, a) in acc.iter_mut().take(2).enumerate() {
            *a =
                sp.amp_acc * v * (arg + 2.0 * PI * c as f64 / 3.0).sin() + sp.noise_acc * v * eps();
        }
        acc[2] = GRAVITY
            + sp.amp_acc_z * v * (4.0 * PI * self.f * t + self.phase).sin()
            + sp.noise_acc * v * eps();
        ImuSample { t, acc, gyro }
    }

    fn joints(&self, t: f64, rng: &mut ChaCha8Rng) -> JointSample {
        let (sp, v) = (self.sp, self.v);
        let arg = 2.0 * PI * self.f * t + self.phase;
        let mut effort = [0.0; 12];
        for (j, e) in effort.iter_mut().enumerate() {
            let base = sp.joint_base * JOINT_SCALE[j % 3] + sp.sinkage * v;
            let osc = sp.amp_joint * v * (arg + PI * j as f64 / 6.0).sin();
            *e = base + osc + sp.noise_joint * v * rng.sample::<f64, _>(StandardNormal);
        }
        JointSample { t, effort }
    }
}

/// One 18×100 window at 25 Hz, last sample at `t = 99/25` s.
pub fn gen_timeseries(sp: &SignalParams, g: GaitParams, seed: u64) -> TimeSeriesWindow {
    let mut rng = seeded_rng(seed, 11);
    let phase = rng.random_range(0.0..2.0 * PI);
    let model = SignalModel::new(sp, g, phase);
    let mut data = vec![0.0f32; N_CH * D_TS];
    for k in 0..D_TS {
        let t = k as f64 / RATE_HZ;
        let imu = model.imu(t, &mut rng);
        let jt = model.joints(t, &mut rng);
        for c in 0..3 {
            data[c * D_TS + k] = imu.acc[c] as f32;
            data[(3 + c) * D_TS + k] = imu.gyro[c] as f32;
        }
        for j in 0..12 {
            data[(6 + j) * D_TS + k] = jt.effort[j] as f32;
        }
    }
    let t_end = (D_TS - 1) as f64 / RATE_HZ;
    TimeSeriesWindow::new(
        Tensor::new(&[N_CH, D_TS], data).expect("window shape"),
        t_end,
    )
    .expect("window shape")
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn blend(&mut self, r: isize, c: isize, color: [f64; 3], alpha: f64) {
        if r < 0 || c < 0 || r as usize >= self.h || c as usize >= self.w {
            return;
        }
        let i = (r as usize * self.w + c as usize) * 3;
        for ch in 0..3 {
            self.px[i + ch] = self.px[i + ch] * (1.0 - alpha) + color[ch] * alpha;
        }
    }

    fn line(&mut self, (r0, c0): (f64, f64), angle: f64, len: f64, color: [f64; 3], alpha: f64) {
        let steps = len.ceil() as usize;
        for s in 0..=steps {
            let r = r0 + angle.sin() * s as f64;
            let c = c0 + angle.cos() * s as f64;
            self.blend(r.round() as isize, c.round() as isize, color, alpha);
        }
    }

    fn ellipse(
        &mut self,
        (rc, cc): (f64, f64),
        (ra, rb): (f64, f64),
        fill: [f64; 3],
        edge: [f64; 3],
    ) {
        let reach = ra.max(rb).ceil() as isize + 1;
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let q = (dr as f64 / rb).powi(2) + (dc as f64 / ra).powi(2);
                let (r, c) = (rc.round() as isize + dr, cc.round() as isize + dc);
                if q <= 0.6 {
                    self.blend(r, c, fill, 1.0);
                } else if q <= 1.0 {
                    self.blend(r, c, edge, 1.0);
                }
            }
        }
    }

    fn into_image(self) -> RawImage {
        let data = self
            .px
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        RawImage::new(self.h, self.w, data).expect("canvas size")
    }
}

/// Smooth random field in roughly `[-1, 1]` on a lattice of spacing `cell`.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: f64) -> Vec<f64> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let y = r as f64 / cell;
        let (y0, ty) = (y.floor() as usize, smooth(y.fract()));
        for c in 0..w {
            let x = c as f64 / cell;
            let (x0, tx) = (x.floor() as usize, smooth(x.fract()));
            let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn shade(color: [f64; 3], k: f64) -> [f64; 3] {
    color.map(|c| c * k)
}

/// Procedural `height × width` texture for `spec`.
pub fn gen_image(spec: &TerrainSpec, height: usize, width: usize, seed: u64) -> RawImage {
    let mut rng = seeded_rng(seed, 12);
    let tex = &spec.texture;
    let jitter = 1.0 + rng.random_range(-0.04..0.04);
    let base = shade(tex.base_color, jitter);
    let coarse = value_noise(&mut rng, height, width, tex.granularity);
    let fine = value_noise(&mut rng, height, width, (tex.granularity / 2.0).max(1.0));
    let mut cv = Canvas {
        h: height,
        w: width,
        px: Vec::with_capacity(height * width * 3),
    };
    for i in 0..height * width {
        let n = tex.noise_amp * (0.7 * coarse[i] + 0.3 * fine[i]);
        cv.px.extend(base.iter().map(|b| b + n));
    }

    let area = (height * width) as f64;
    let count = (tex.blob_density * area / 1000.0).round() as usize;
    let point = |rng: &mut ChaCha8Rng| {
        (
            rng.random_range(0.0..height as f64),
            rng.random_range(0.0..width as f64),
        )
    };
    match spec.terrain {
        Terrain::HardSurface => {
            for _ in 0..count.max(1) {
                let (mut r, mut c) = point(&mut rng);
                let mut angle = rng.random_range(0.0..2.0 * PI);
                for _ in 0..rng.random_range(8..20) {
                    cv.line((r, c), angle, 3.0, shade(base, 0.55), 0.8);
                    r += 3.0 * angle.sin();
                    c += 3.0 * angle.cos();
                    angle += rng.random_range(-0.6..0.6);
                }
            }
        }
        Terrain::Grass => {
            for _ in 0..count {
                let p = point(&mut rng);
                let angle = -PI / 2.0 + rng.random_range(-0.4..0.4);
                let k = rng.random_range(0.75..1.3);
                cv.line(p, angle, rng.random_range(3.0..6.0), shade(base, k), 0.9);
            }
        }
        Terrain::Vegetation => {
            for _ in 0..count {
                let p = point(&mut rng);
                let angle = -PI / 2.0 + rng.random_range(-0.7..0.7);
                let k = rng.random_range(0.7..1.6);
                cv.line(p, angle, rng.random_range(10.0..20.0), shade(base, k), 0.9);
                if rng.random_bool(0.4) {
                    let leaf = shade([60.0, 130.0, 40.0], jitter);
                    let q = point(&mut rng);
                    cv.ellipse(
                        q,
                        (rng.random_range(2.0..4.0), rng.random_range(1.0..2.0)),
                        leaf,
                        shade(leaf, 0.8),
                    );
                }
            }
        }
        Terrain::Sand => {
            let dir = rng.random_range(0.0..PI);
            let period = rng.random_range(6.0..10.0);
            let ph = rng.random_range(0.0..2.0 * PI);
            for r in 0..height {
                for c in 0..width {
                    let u = r as f64 * dir.sin() + c as f64 * dir.cos();
                    let d = 8.0 * (2.0 * PI * u / period + ph).sin();
                    let i = (r * width + c) * 3;
                    for ch in 0..3 {
                        cv.px[i + ch] += d;
                    }
                }
            }
        }
        Terrain::Pebbles => {
            for _ in 0..count {
                let p = point(&mut rng);
                let k = rng.random_range(0.7..1.35);
                let fill = shade(base, k);
                let radii = (rng.random_range(2.0..6.0), rng.random_range(1.5..4.5));
                cv.ellipse(p, radii, fill, shade(fill, 0.6));
            }
        }
    }
    cv.into_image()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub samples_per_cell: usize,
    pub n_i: usize,
    pub xor_mode: bool,
    pub terrains: Vec<TerrainSpec>,
    pub grid: GaitGrid,
}

impl SynthConfig {
    pub fn new(seed: u64, samples_per_cell: usize, n_i: usize) -> Self {
        Self {
            seed,
            samples_per_cell,
            n_i,
            xor_mode: false,
            terrains: TerrainSpec::defaults(),
            grid: GaitGrid::default(),
        }
    }

    pub fn xor(seed: u64, samples_per_cell: usize, n_i: usize) -> Self {
        Self {
            xor_mode: true,
            ..Self::new(seed, samples_per_cell, n_i)
        }
    }

    /// Raw image size; larger than the crop so cropping is exercised.
    pub fn image_size(&self) -> (usize, usize) {
        (self.n_i + self.n_i / 4, self.n_i + self.n_i / 2)
    }

    pub fn spec(&self, t: Terrain) -> Result<&TerrainSpec> {
        self.terrains
            .iter()
            .find(|s| s.terrain == t)
            .ok_or_else(|| Error::Input(format!("no parameters for terrain {}", t.name())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_cell == 0 {
            return Err(Error::Input("samples_per_cell must be positive".into()));
        }
        if self.n_i == 0 || !self.n_i.is_multiple_of(16) {
            return Err(Error::Input(format!(
                "n_i = {} is not a multiple of 16",
                self.n_i
            )));
        }
        for s in &self.terrains {
            let sp = &s.signal;
            let amps = [
                sp.amp_gyro,
                sp.amp_acc,
                sp.amp_acc_z,
                sp.noise_gyro,
                sp.noise_acc,
                sp.noise_joint,
                sp.joint_base,
                sp.sinkage,
                sp.amp_joint,
                s.texture.noise_amp,
                s.texture.blob_density,
            ];
            if amps.iter().any(|a| *a < 0.0 || !a.is_finite()) || s.texture.granularity <= 0.0 {
                return Err(Error::Input(format!(
                    "negative amplitude for {}",
                    s.terrain.name()
                )));
            }
        }
        for t in Terrain::ALL {
            self.spec(t)?;
        }
        Ok(())
    }

    pub fn categories(&self) -> Vec<String> {
        if self.xor_mode {
            (0..4).map(xor_name).collect()
        } else {
            Terrain::ALL.iter().map(|t| t.name().to_string()).collect()
        }
    }

    pub fn sample_count(&self) -> usize {
        let groups = if self.xor_mode { 4 } else { Terrain::ALL.len() };
        groups * self.grid.len() * self.samples_per_cell
    }
}

pub fn xor_name(category: usize) -> String {
    format!("xor_{category}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: RawImage,
    pub window: TimeSeriesWindow,
    /// Category name: a terrain name, or `xor_k`.
    pub terrain: String,
    pub label: usize,
    pub gait: GaitParams,
    pub segment: usize,
    pub holdout: bool,
}

/// Plan for one sample, computed serially so generation order is irrelevant.
struct Plan {
    image_terrain: Terrain,
    signal_terrain: Terrain,
    gait: GaitParams,
    label: usize,
    segment: usize,
    holdout: bool,
    image_seed: u64,
    signal_seed: u64,
}

fn plans(cfg: &SynthConfig) -> Vec<Plan> {
    let mut rng = seeded_rng(cfg.seed, 13);
    let cells = cfg.grid.cells();
    let mut out = Vec::with_capacity(cfg.sample_count());
    let groups = if cfg.xor_mode { 4 } else { Terrain::ALL.len() };
    for group in 0..groups {
        for (block, &cell) in cells.iter().enumerate() {
            for rep in 0..cfg.samples_per_cell {
                let (image_terrain, signal_terrain, gait) = if cfg.xor_mode {
                    let img = if group & 1 == 0 {
                        Terrain::HardSurface
                    } else {
                        Terrain::Vegetation
                    };
                    let sig = if group & 2 == 0 {
                        Terrain::Grass
                    } else {
                        Terrain::Pebbles
                    };
                    let g = cfg.spec(sig).map(|s| s.signal.optimum).unwrap_or(cell);
                    (img, sig, g)
                } else {
                    let t = Terrain::ALL[group];
                    (t, t, cell)
                };
                out.push(Plan {
                    image_terrain,
                    signal_terrain,
                    gait,
                    label: group,
                    segment: group * cells.len() + block,
                    holdout: (rep + block) % 5 == 0,
                    image_seed: rng.random(),
                    signal_seed: rng.random(),
                });
            }
        }
    }
    out
}

/// Worker count from `CROSSGAIT_THREADS`, default 1.
pub fn worker_threads() -> usize {
    std::env::var("CROSSGAIT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Run `f` on a pool sized by [`worker_threads`].
pub fn with_workers<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
    {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Every sample of the dataset, in a fixed order.
pub fn gen_samples(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let (h, w) = cfg.image_size();
    let names = cfg.categories();
    let plans = plans(cfg);
    with_workers(|| {
        plans
            .par_iter()
            .map(|p| {
                let image = gen_image(cfg.spec(p.image_terrain)?, h, w, p.image_seed);
                let window =
                    gen_timeseries(&cfg.spec(p.signal_terrain)?.signal, p.gait, p.signal_seed);
                Ok(SynthSample {
                    image,
                    window,
                    terrain: names[p.label].clone(),
                    label: p.label,
                    gait: p.gait,
                    segment: p.segment,
                    holdout: p.holdout,
                })
            })
            .collect()
    })
}

/// Generate the dataset in memory, with statistics from the train split.
pub fn build_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    Dataset::from_samples(gen_samples(cfg)?, cfg.n_i, cfg.categories())
}

/// Generate and write the dataset to `dir`.
pub fn gen_dataset(cfg: &SynthConfig, dir: &Path) -> Result<DatasetManifest> {
    let ds = build_dataset(cfg)?;
    ds.save(dir)?;
    Ok(ds.manifest)
}

/// One stretch of a traversal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Leg {
    pub terrain: Terrain,
    pub gait: GaitParams,
    pub duration_s: f64,
}

/// Sensor streams for a traversal: IMU at 50 Hz, joints at 25 Hz, camera
/// frames at 20 Hz as `(timestamp, terrain)`.
pub struct Traverse {
    pub imu: Vec<ImuSample>,
    pub joints: Vec<JointSample>,
    pub frames: Vec<(f64, Terrain, u64)>,
}

pub fn gen_traverse(specs: &[TerrainSpec], legs: &[Leg], seed: u64) -> Result<Traverse> {
    let mut rng = seeded_rng(seed, 14);
    let phase = rng.random_range(0.0..2.0 * PI);
    let total: f64 = legs.iter().map(|l| l.duration_s).sum();
    let leg_at = |t: f64| {
        let mut acc = 0.0;
        for l in legs {
            acc += l.duration_s;
            if t < acc {
                return l;
            }
        }
        legs.last().expect("non-empty traverse")
    };
    if legs.is_empty() || total <= 0.0 {
        return Err(Error::Input(
            "traverse needs at least one leg of positive duration".into(),
        ));
    }
    let spec = |t: Terrain| {
        specs
            .iter()
            .find(|s| s.terrain == t)
            .ok_or_else(|| Error::Input(format!("no parameters for terrain {}", t.name())))
    };
    let mut out = Traverse {
        imu: Vec::new(),
        joints: Vec::new(),
        frames: Vec::new(),
    };
    let n_imu = (total * 50.0).floor() as usize;
    for i in 0..=n_imu {
        let t = i as f64 / 50.0;
        let leg = leg_at(t);
        let model = SignalModel::new(&spec(leg.terrain)?.signal, leg.gait, phase);
        out.imu.push(model.imu(t, &mut rng));
        if i % 2 == 0 {
            out.joints.push(model.joints(t, &mut rng));
        }
    }
    let n_frames = (total * 20.0).floor() as usize;
    for i in 0..=n_frames {
        let t = i as f64 / 20.0;
        out.frames.push((t, leg_at(t).terrain, rng.random()));
    }
    Ok(out)
}
