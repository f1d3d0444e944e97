//! Gait parameters: the exponential cost over normalized terrain metrics,
//! label selection over the 4×5 grid, the MLP regressor, and the
//! rate-limiting window applied before commands reach the robot.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, seeded_rng, Mlp, Module};
use crate::numerics::{Float, Tape, Tensor, Var};
use crate::ts::{TimeSeriesWindow, D_TS};

pub const GRAVITY: f64 = 9.81;
pub const STEP_BOUNDS: (f64, f64) = (0.03, 0.3);
pub const SPLAY_BOUNDS: (f64, f64) = (0.05, 0.2);
pub const MAX_DELTA: f64 = 0.01;
/// Absolute slack for float comparisons against the window limits.
pub const WINDOW_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaitParams {
    pub step_height: f64,
    pub hip_splay: f64,
}

impl GaitParams {
    pub fn new(step_height: f64, hip_splay: f64) -> Self {
        Self {
            step_height,
            hip_splay,
        }
    }

    pub fn clamped(self) -> Self {
        Self {
            step_height: self.step_height.clamp(STEP_BOUNDS.0, STEP_BOUNDS.1),
            hip_splay: self.hip_splay.clamp(SPLAY_BOUNDS.0, SPLAY_BOUNDS.1),
        }
    }

    pub fn in_bounds(&self) -> bool {
        (STEP_BOUNDS.0..=STEP_BOUNDS.1).contains(&self.step_height)
            && (SPLAY_BOUNDS.0..=SPLAY_BOUNDS.1).contains(&self.hip_splay)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaitGrid {
    pub step_heights: Vec<f64>,
    pub hip_splays: Vec<f64>,
}

impl Default for GaitGrid {
    fn default() -> Self {
        Self {
            step_heights: vec![0.03, 0.12, 0.21, 0.3],
            hip_splays: vec![0.05, 0.09, 0.13, 0.17, 0.2],
        }
    }
}

impl GaitGrid {
    pub fn len(&self) -> usize {
        self.step_heights.len() * self.hip_splays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cells ordered by step height, then hip splay, both ascending.
    pub fn cells(&self) -> Vec<GaitParams> {
        self.step_heights
            .iter()
            .flat_map(|&h| self.hip_splays.iter().map(move |&s| GaitParams::new(h, s)))
            .collect()
    }

    pub fn index_of(&self, g: GaitParams) -> Option<usize> {
        let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
        let h = self
            .step_heights
            .iter()
            .position(|&v| close(v, g.step_height))?;
        let s = self
            .hip_splays
            .iter()
            .position(|&v| close(v, g.hip_splay))?;
        Some(h * self.hip_splays.len() + s)
    }
}

/// Window aggregates before normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawMetrics {
    /// RMS of ‖ω‖
    pub omega: f64,
    /// RMS of a_z − g
    pub a_z: f64,
    /// RMS over all joints and time
    pub effort: f64,
}

pub fn window_metrics(w: &TimeSeriesWindow) -> RawMetrics {
    let n = D_TS as f64;
    let mut om = 0.0;
    let mut az = 0.0;
    let mut ef = 0.0;
    for t in 0..D_TS {
        for c in 3..6 {
            om += (w.channel(c)[t] as f64).powi(2);
        }
        az += (w.channel(2)[t] as f64 - GRAVITY).powi(2);
        for c in 6..18 {
            ef += (w.channel(c)[t] as f64).powi(2);
        }
    }
    RawMetrics {
        omega: (om / n).sqrt(),
        a_z: (az / n).sqrt(),
        effort: (ef / (12.0 * n)).sqrt(),
    }
}

/// Metrics after min-max normalization, each in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainMetrics {
    pub omega: f64,
    pub a_z: f64,
    pub effort: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
            gamma: 1.0 / 3.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|v| *v < 0.0 || !v.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Input(format!("invalid cost weights {self:?}")));
        }
        Ok(())
    }
}

pub fn gait_cost(m: &TerrainMetrics, w: &CostWeights) -> f64 {
    (w.alpha * m.omega + w.beta * m.a_z + w.gamma * m.effort).exp()
}

/// One labelled observation: terrain name, commanded gait, window metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub terrain: String,
    pub gait: GaitParams,
    pub metrics: RawMetrics,
}

/// Per-cell normalized metrics for every terrain, in grid order.
pub fn normalized_surfaces(
    records: &[MetricRecord],
    grid: &GaitGrid,
) -> Result<BTreeMap<String, Vec<TerrainMetrics>>> {
    let mut sums: BTreeMap<&str, Vec<(RawMetrics, usize)>> = BTreeMap::new();
    for r in records {
        let cell = grid.index_of(r.gait).ok_or_else(|| {
            Error::Input(format!(
                "gait ({}, {}) is not on the grid",
                r.gait.step_height, r.gait.hip_splay
            ))
        })?;
        let cells = sums
            .entry(r.terrain.as_str())
            .or_insert_with(|| vec![(RawMetrics::default(), 0); grid.len()]);
        let (acc, n) = &mut cells[cell];
        acc.omega += r.metrics.omega;
        acc.a_z += r.metrics.a_z;
        acc.effort += r.metrics.effort;
        *n += 1;
    }
    let cells = grid.cells();
    let mut means: BTreeMap<String, Vec<RawMetrics>> = BTreeMap::new();
    for (terrain, list) in sums {
        let mut out = Vec::with_capacity(list.len());
        for (i, (acc, n)) in list.into_iter().enumerate() {
            if n == 0 {
                return Err(Error::IncompleteGrid {
                    terrain: terrain.to_string(),
                    step_height: cells[i].step_height,
                    hip_splay: cells[i].hip_splay,
                });
            }
            let k = n as f64;
            out.push(RawMetrics {
                omega: acc.omega / k,
                a_z: acc.a_z / k,
                effort: acc.effort / k,
            });
        }
        means.insert(terrain.to_string(), out);
    }
    let all: Vec<&RawMetrics> = means.values().flatten().collect();
    let range = |f: fn(&RawMetrics) -> f64| {
        let lo = all.iter().map(|m| f(m)).fold(f64::INFINITY, f64::min);
        let hi = all.iter().map(|m| f(m)).fold(f64::NEG_INFINITY, f64::max);
        move |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }
    };
    let (no, na, ne) = (range(|m| m.omega), range(|m| m.a_z), range(|m| m.effort));
    Ok(means
        .into_iter()
        .map(|(t, cells)| {
            let norm = cells
                .iter()
                .map(|m| TerrainMetrics {
                    omega: no(m.omega),
                    a_z: na(m.a_z),
                    effort: ne(m.effort),
                })
                .collect();
            (t, norm)
        })
        .collect())
}

/// Lowest-cost cell; ties go to the smaller step height, then the smaller splay.
pub fn argmin_cell(costs: &[f64], grid: &GaitGrid) -> GaitParams {
    let cells = grid.cells();
    let mut best = 0;
    for i in 1..costs.len() {
        if costs[i] < costs[best] {
            best = i;
        }
    }
    cells[best]
}

pub fn select_labels(
    records: &[MetricRecord],
    grid: &GaitGrid,
    w: &CostWeights,
) -> Result<BTreeMap<String, GaitParams>> {
    w.validate()?;
    let surfaces = normalized_surfaces(records, grid)?;
    Ok(surfaces
        .into_iter()
        .map(|(t, cells)| {
            let costs: Vec<f64> = cells.iter().map(|m| gait_cost(m, w)).collect();
            (t, argmin_cell(&costs, grid))
        })
        .collect())
}

/// Tab-separated `terrain step_height hip_splay` table with a header.
pub fn label_table(labels: &BTreeMap<String, GaitParams>) -> String {
    let mut s = String::from("terrain\tstep_height\thip_splay\n");
    for (t, g) in labels {
        let _ = writeln!(s, "{t}\t{:.2}\t{:.2}", g.step_height, g.hip_splay);
    }
    s
}

/// `d_v → 128 → relu → 64 → relu → 2`
#[derive(Clone, Debug)]
pub struct GaitRegressor {
    pub mlp: Mlp,
}

impl GaitRegressor {
    pub fn new(d_v: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, 6);
        Self {
            mlp: Mlp::new(&mut rng, &[d_v, 128, 64, 2]),
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        self.mlp.forward(tape, z)
    }

    /// Raw (unwindowed) prediction for one latent.
    pub fn predict(&self, z: &Tensor) -> Result<GaitParams> {
        let mut tape = Tape::<f32>::inference();
        let v = tape.fixed(z);
        let y = self.forward(&mut tape, v)?;
        let d = tape.value(y).data();
        Ok(GaitParams::new(d[0] as f64, d[1] as f64))
    }
}

impl Module for GaitRegressor {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.mlp.visit(&join(prefix, "mlp"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.mlp.visit_mut(&join(prefix, "mlp"), out);
    }
}

pub fn mse_loss<T: Float>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowState {
    pub current: GaitParams,
    pub max_delta_step: f64,
    pub max_delta_splay: f64,
}

impl WindowState {
    pub fn new(start: GaitParams) -> Self {
        Self {
            current: start.clamped(),
            max_delta_step: MAX_DELTA,
            max_delta_splay: MAX_DELTA,
        }
    }
}

fn limit(current: f64, target: f64, max: f64, bounds: (f64, f64)) -> f64 {
    let d = target - current;
    let next = if d.abs() <= max + WINDOW_EPS {
        target
    } else {
        current + max.copysign(d)
    };
    next.clamp(bounds.0, bounds.1)
}

pub fn apply_dynamic_window(s: &mut WindowState, target: GaitParams) -> GaitParams {
    let next = GaitParams {
        step_height: limit(
            s.current.step_height,
            target.step_height,
            s.max_delta_step,
            STEP_BOUNDS,
        ),
        hip_splay: limit(
            s.current.hip_splay,
            target.hip_splay,
            s.max_delta_splay,
            SPLAY_BOUNDS,
        ),
    };
    s.current = next;
    next
}

/// Iterations the window needs to reach `clamp(target)` from `start`.
pub fn predicted_steps(start: GaitParams, target: GaitParams) -> usize {
    let goal = target.clamped();
    let n = |d: f64| (((d.abs() - WINDOW_EPS) / MAX_DELTA).ceil().max(0.0)) as usize;
    n(goal.step_height - start.step_height).max(n(goal.hip_splay - start.hip_splay))
}
