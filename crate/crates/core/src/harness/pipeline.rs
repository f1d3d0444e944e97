//! The streaming loop: sensor windows and camera frames in, rate-limited gait
//! parameters out, ticking at 60 Hz on the freshest data available.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionNet;
use crate::gait::{apply_dynamic_window, GaitParams, GaitRegressor, WindowState};
use crate::numerics::Tape;
use crate::synth::{gen_image, gen_traverse, Leg, Terrain, TerrainSpec};
use crate::ts::{
    assemble_window, ImuSample, JointSample, TimeSeriesWindow, TsEncoder, TsStats, D_TS, RATE_HZ,
};
use crate::vision::{
    crop_bottom_center, patchify, ImageStats, MaskPlan, MaskedAutoencoder, RawImage,
};

use super::config::PipelineConfig;
use super::dataset::{decode_ppm, encode_ppm};
use super::train::{inference_mask, Models};

pub const TICK_HZ: f64 = 60.0;

/// Default starting gait: the middle of the commanded range.
pub fn default_start() -> GaitParams {
    GaitParams::new(0.12, 0.13)
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub mae: MaskedAutoencoder,
    pub ts: TsEncoder,
    pub fusion: FusionNet,
    pub head: GaitRegressor,
    pub image_stats: ImageStats,
    pub ts_stats: TsStats,
    pub mask: MaskPlan,
    pub window: WindowState,
}

impl Pipeline {
    pub fn from_models(models: Models, cfg: &PipelineConfig, start: GaitParams) -> Result<Self> {
        let head = models
            .head
            .ok_or_else(|| Error::Dependency("pipeline needs a trained head checkpoint".into()))?;
        Ok(Self {
            cfg: cfg.clone(),
            mask: inference_mask(cfg)?,
            mae: models.mae,
            ts: models.ts,
            fusion: models.fusion,
            head,
            image_stats: models.image_stats,
            ts_stats: models.ts_stats,
            window: WindowState::new(start),
        })
    }

    /// Freshly initialized weights; useful for throughput measurements.
    pub fn untrained(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            mask: inference_mask(cfg)?,
            mae: MaskedAutoencoder::new(&cfg.vision, seed, false)?,
            ts: TsEncoder::new(&cfg.ts, seed)?,
            fusion: FusionNet::new(&cfg.fusion, cfg.ts.d_m, cfg.vision.d_e, seed)?,
            head: GaitRegressor::new(cfg.d_v(), seed),
            image_stats: ImageStats::default(),
            ts_stats: TsStats::default(),
            window: WindowState::new(default_start()),
        })
    }

    /// Raw regressor output for one (frame, window) pair.
    pub fn target(&self, image: &RawImage, window: &TimeSeriesWindow) -> Result<GaitParams> {
        let patches = patchify(&crop_bottom_center(
            image,
            self.cfg.vision.n_i,
            &self.image_stats,
        )?);
        let mut tape = Tape::<f32>::inference();
        let p = tape.constant(patches);
        let z_img = self.mae.encode_visible(&mut tape, p, &self.mask)?;
        let x = tape.constant(window.normalized(&self.ts_stats));
        let z_ts = self.ts.forward(&mut tape, x)?;
        let fused = self.fusion.forward(&mut tape, z_ts, z_img)?;
        let out = self.head.forward(&mut tape, fused.z_comb)?;
        let v = tape.value(out).data();
        Ok(GaitParams::new(v[0] as f64, v[1] as f64))
    }

    /// Target, then one dynamic-window step.
    pub fn tick(
        &mut self,
        image: &RawImage,
        window: &TimeSeriesWindow,
    ) -> Result<(GaitParams, GaitParams)> {
        let target = self.target(image, window)?;
        Ok((target, apply_dynamic_window(&mut self.window, target)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub t: f64,
    pub image: RawImage,
}

/// Sensor streams and camera frames, each sorted by time.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordedLog {
    pub imu: Vec<ImuSample>,
    pub joints: Vec<JointSample>,
    pub frames: Vec<Frame>,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn parse_rows(path: &Path, cols: usize) -> Result<Vec<Vec<f64>>> {
    let text = io(path, fs::read_to_string(path))?;
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    text.lines()
        .skip(1)
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, line)| {
            let vals = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| corrupt(format!("row {k}: not numeric")))?;
            if vals.len() != cols {
                return Err(corrupt(format!(
                    "row {k}: {} columns, expected {cols}",
                    vals.len()
                )));
            }
            Ok(vals)
        })
        .collect()
}

impl RecordedLog {
    /// `imu.csv`, `joints.csv`, `frames.csv` and `frames/NNNNNN.ppm`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let fdir = dir.join("frames");
        io(&fdir, fs::create_dir_all(&fdir))?;
        let mut s = String::from("t,acc_x,acc_y,acc_z,gyro_x,gyro_y,gyro_z\n");
        for m in &self.imu {
            let v: Vec<String> = std::iter::once(m.t)
                .chain(m.acc)
                .chain(m.gyro)
                .map(|x| x.to_string())
                .collect();
            s.push_str(&v.join(","));
            s.push('\n');
        }
        let p = dir.join("imu.csv");
        io(&p, fs::write(&p, s))?;
        let mut s = String::from("t");
        for j in 0..12 {
            s.push_str(&format!(",effort_{j}"));
        }
        s.push('\n');
        for m in &self.joints {
            let v: Vec<String> = std::iter::once(m.t)
                .chain(m.effort)
                .map(|x| x.to_string())
                .collect();
            s.push_str(&v.join(","));
            s.push('\n');
        }
        let p = dir.join("joints.csv");
        io(&p, fs::write(&p, s))?;
        let mut s = String::from("t,file\n");
        for (i, f) in self.frames.iter().enumerate() {
            let name = format!("frames/{i:06}.ppm");
            let p = dir.join(&name);
            io(&p, fs::write(&p, encode_ppm(&f.image)))?;
            s.push_str(&format!("{},{name}\n", f.t));
        }
        let p = dir.join("frames.csv");
        io(&p, fs::write(&p, s))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let imu = parse_rows(&dir.join("imu.csv"), 7)?
            .into_iter()
            .map(|r| ImuSample {
                t: r[0],
                acc: [r[1], r[2], r[3]],
                gyro: [r[4], r[5], r[6]],
            })
            .collect();
        let joints = parse_rows(&dir.join("joints.csv"), 13)?
            .into_iter()
            .map(|r| JointSample {
                t: r[0],
                effort: std::array::from_fn(|j| r[j + 1]),
            })
            .collect();
        let fpath = dir.join("frames.csv");
        let text = io(&fpath, fs::read_to_string(&fpath))?;
        let mut frames = Vec::new();
        for (k, line) in text
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .enumerate()
        {
            let (t, file) = line.split_once(',').ok_or_else(|| Error::Corrupt {
                path: fpath.clone(),
                reason: format!("row {k}: expected t,file"),
            })?;
            let t: f64 = t.trim().parse().map_err(|_| Error::Corrupt {
                path: fpath.clone(),
                reason: format!("row {k}: bad timestamp"),
            })?;
            let p = dir.join(file.trim());
            let bytes = io(&p, fs::read(&p))?;
            frames.push(Frame {
                t,
                image: decode_ppm(&bytes, &p)?,
            });
        }
        let log = Self {
            imu,
            joints,
            frames,
        };
        log.validate()?;
        Ok(log)
    }

    pub fn validate(&self) -> Result<()> {
        let sorted = |ts: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = ts.collect();
            v.windows(2).all(|w| w[0] <= w[1])
        };
        if self.imu.is_empty() || self.joints.is_empty() || self.frames.is_empty() {
            return Err(Error::Input("log needs IMU, joint and camera data".into()));
        }
        if !sorted(&mut self.imu.iter().map(|s| s.t))
            || !sorted(&mut self.joints.iter().map(|s| s.t))
            || !sorted(&mut self.frames.iter().map(|s| s.t))
        {
            return Err(Error::Input("log streams must be sorted by time".into()));
        }
        Ok(())
    }

    /// First time at which a full window and a frame exist.
    pub fn start_time(&self) -> f64 {
        let span = (D_TS - 1) as f64 / RATE_HZ;
        (self.imu[0].t + span)
            .max(self.joints[0].t + span)
            .max(self.frames[0].t)
    }

    pub fn end_time(&self) -> f64 {
        self.imu[self.imu.len() - 1]
            .t
            .min(self.joints[self.joints.len() - 1].t)
    }
}

/// Render a traversal into a log with frames of `height × width`.
pub fn traverse_log(
    specs: &[TerrainSpec],
    legs: &[Leg],
    seed: u64,
    height: usize,
    width: usize,
) -> Result<RecordedLog> {
    let tr = gen_traverse(specs, legs, seed)?;
    let spec = |t: Terrain| {
        specs
            .iter()
            .find(|s| s.terrain == t)
            .ok_or_else(|| Error::Input(format!("no parameters for terrain {}", t.name())))
    };
    let frames = tr
        .frames
        .iter()
        .map(|&(t, terrain, s)| {
            Ok(Frame {
                t,
                image: gen_image(spec(terrain)?, height, width, s),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RecordedLog {
        imu: tr.imu,
        joints: tr.joints,
        frames,
    })
}

/// Every terrain in turn, `seconds` each, at the middle gait.
pub fn default_legs(seconds: f64) -> Vec<Leg> {
    Terrain::ALL
        .into_iter()
        .map(|terrain| Leg {
            terrain,
            gait: default_start(),
            duration_s: seconds,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub target: GaitParams,
    pub gait: GaitParams,
}

pub fn trace_tsv(rows: &[TraceRow]) -> String {
    let mut s = String::from("t\ttarget_step_height\ttarget_hip_splay\tstep_height\thip_splay\n");
    for r in rows {
        s.push_str(&format!(
            "{:.4}\t{:.5}\t{:.5}\t{:.5}\t{:.5}\n",
            r.t, r.target.step_height, r.target.hip_splay, r.gait.step_height, r.gait.hip_splay
        ));
    }
    s
}

/// Stream samples no older than the window span (plus hold slack) before `t`.
fn recent<T>(stream: &[T], time: impl Fn(&T) -> f64, t: f64) -> &[T] {
    let from = t - (D_TS as f64 / RATE_HZ + 0.5);
    let lo = stream.partition_point(|s| time(s) < from);
    let hi = stream.partition_point(|s| time(s) <= t + 1e-9);
    &stream[lo..hi]
}

fn latest_frame(frames: &[Frame], t: f64) -> Option<usize> {
    frames.partition_point(|f| f.t <= t + 1e-9).checked_sub(1)
}

/// Replay a log at 60 Hz. Windows are re-assembled only when a new sensor
/// sample has arrived and the networks run only when the frame or window
/// changed; the dynamic window steps every tick.
pub fn run_log(p: &mut Pipeline, log: &RecordedLog) -> Result<Vec<TraceRow>> {
    log.validate()?;
    let (start, end) = (log.start_time(), log.end_time());
    let mut rows = Vec::new();
    let mut seen: Option<(usize, usize, usize)> = None;
    let mut window: Option<TimeSeriesWindow> = None;
    let mut target = p.window.current;
    let mut k = 0usize;
    loop {
        let t = start + k as f64 / TICK_HZ;
        if t > end + 1e-9 {
            break;
        }
        k += 1;
        let imu = recent(&log.imu, |s| s.t, t);
        let joints = recent(&log.joints, |s| s.t, t);
        let frame = latest_frame(&log.frames, t)
            .ok_or_else(|| Error::Input("no frame before tick".into()))?;
        let key = (
            log.imu.partition_point(|s| s.t <= t + 1e-9),
            log.joints.partition_point(|s| s.t <= t + 1e-9),
            frame,
        );
        if seen.map(|s| (s.0, s.1)) != Some((key.0, key.1)) {
            window = Some(assemble_window(imu, joints, t)?);
        }
        if seen != Some(key) {
            target = p.target(
                &log.frames[frame].image,
                window.as_ref().expect("assembled above"),
            )?;
            seen = Some(key);
        }
        let gait = apply_dynamic_window(&mut p.window, target);
        rows.push(TraceRow { t, target, gait });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub iterations: usize,
    pub seconds: f64,
    pub per_second: f64,
}

/// Full loop per iteration, no caching: window assembly, both encoders,
/// fusion, regressor, dynamic window.
pub fn measure_throughput(
    p: &mut Pipeline,
    log: &RecordedLog,
    iterations: usize,
) -> Result<Throughput> {
    log.validate()?;
    let (start, end) = (log.start_time(), log.end_time());
    let span = (end - start).max(0.0);
    let began = Instant::now();
    for i in 0..iterations {
        let t = start + (i as f64 / TICK_HZ) % (span + 1e-9);
        let imu = recent(&log.imu, |s| s.t, t);
        let joints = recent(&log.joints, |s| s.t, t);
        let frame = latest_frame(&log.frames, t)
            .ok_or_else(|| Error::Input("no frame before tick".into()))?;
        let w = assemble_window(imu, joints, t)?;
        p.tick(&log.frames[frame].image, &w)?;
    }
    let seconds = began.elapsed().as_secs_f64();
    Ok(Throughput {
        iterations,
        seconds,
        per_second: iterations as f64 / seconds.max(1e-12),
    })
}

/// A short traversal sized for `cfg`'s crop.
pub fn bench_log(cfg: &PipelineConfig, seed: u64) -> Result<RecordedLog> {
    let n = cfg.vision.n_i;
    traverse_log(
        &TerrainSpec::defaults(),
        &default_legs(1.5),
        seed,
        n + n / 4,
        n + n / 2,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gait::MAX_DELTA;

    fn tiny() -> PipelineConfig {
        let mut cfg = PipelineConfig::desk();
        cfg.vision.n_i = 32;
        cfg
    }

    #[test]
    fn log_round_trip() {
        let log = traverse_log(&TerrainSpec::defaults(), &default_legs(0.5), 3, 40, 48).unwrap();
        let dir = tempfile::tempdir().unwrap();
        log.save(dir.path()).unwrap();
        assert_eq!(RecordedLog::load(dir.path()).unwrap(), log);
    }

    #[test]
    fn trace_respects_the_window() {
        let cfg = tiny();
        let mut p = Pipeline::untrained(&cfg, 5).unwrap();
        let log = bench_log(&cfg, 2).unwrap();
        let rows = run_log(&mut p, &log).unwrap();
        assert!(rows.len() > 100);
        let mut prev = default_start();
        for r in &rows {
            assert!((r.gait.step_height - prev.step_height).abs() <= MAX_DELTA + 1e-12);
            assert!((r.gait.hip_splay - prev.hip_splay).abs() <= MAX_DELTA + 1e-12);
            assert!(r.gait.in_bounds());
            prev = r.gait;
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let cfg = tiny();
        let log = bench_log(&cfg, 2).unwrap();
        let a = run_log(&mut Pipeline::untrained(&cfg, 5).unwrap(), &log).unwrap();
        let b = run_log(&mut Pipeline::untrained(&cfg, 5).unwrap(), &log).unwrap();
        assert_eq!(a, b);
    }
}
