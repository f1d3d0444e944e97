use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Channels: 3 linear acceleration, 3 angular velocity, 12 joint efforts.
pub const N_CH: usize = 18;
/// Samples per window.
pub const D_TS: usize = 100;
pub const RATE_HZ: f64 = 25.0;
/// Largest allowed zero-order-hold age.
pub const MAX_HOLD_S: f64 = 0.2;
const TIME_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    /// m/s², x y z
    pub acc: [f64; 3],
    /// rad/s, x y z
    pub gyro: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSample {
    pub t: f64,
    /// Nm, one per motor
    pub effort: [f64; 12],
}

/// `18 × 100` proprioceptive window sampled at 25 Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesWindow {
    data: Tensor,
    /// Timestamp of the last column, seconds.
    pub t_end: f64,
}

impl TimeSeriesWindow {
    pub fn new(data: Tensor, t_end: f64) -> Result<Self> {
        if data.shape() != [N_CH, D_TS] {
            return Err(Error::shape(
                "TimeSeriesWindow",
                data.shape(),
                &[N_CH, D_TS],
            ));
        }
        Ok(Self { data, t_end })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        self.data.row(c)
    }

    /// z-score every channel; the result feeds the encoder.
    pub fn normalized(&self, stats: &TsStats) -> Tensor {
        let mut out = self.data.clone();
        let d = out.data_mut();
        for c in 0..N_CH {
            for v in &mut d[c * D_TS..(c + 1) * D_TS] {
                *v = (*v - stats.mean[c]) / stats.std[c];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for TsStats {
    fn default() -> Self {
        Self {
            mean: vec![0.0; N_CH],
            std: vec![1.0; N_CH],
        }
    }
}

/// Index of the latest sample at or before `t`, given sorted timestamps.
fn latest_at(times: &[f64], t: f64) -> Option<usize> {
    let n = times.partition_point(|&s| s <= t + TIME_TOL);
    n.checked_sub(1)
}

fn hold(times: &[f64], stream: &'static str, t: f64) -> Result<usize> {
    let i = latest_at(times, t).ok_or(Error::InsufficientHistory { stream, needed: t })?;
    let age = t - times[i];
    if age > MAX_HOLD_S + TIME_TOL {
        return Err(Error::Staleness {
            stream,
            age_ms: age * 1e3,
            at: t,
        });
    }
    Ok(i)
}

/// Resample both streams onto the 25 Hz grid ending at `t` by zero-order
/// hold. Streams must be sorted by time.
pub fn assemble_window(
    imu: &[ImuSample],
    joints: &[JointSample],
    t: f64,
) -> Result<TimeSeriesWindow> {
    let imu_t: Vec<f64> = imu.iter().map(|s| s.t).collect();
    let joint_t: Vec<f64> = joints.iter().map(|s| s.t).collect();
    let mut data = vec![0.0f32; N_CH * D_TS];
    for k in 0..D_TS {
        let tk = t - (D_TS - 1 - k) as f64 / RATE_HZ;
        let i = hold(&imu_t, "imu", tk)?;
        let j = hold(&joint_t, "joint", tk)?;
        let s = &imu[i];
        for c in 0..3 {
            data[c * D_TS + k] = s.acc[c] as f32;
            data[(3 + c) * D_TS + k] = s.gyro[c] as f32;
        }
        for m in 0..12 {
            data[(6 + m) * D_TS + k] = joints[j].effort[m] as f32;
        }
    }
    TimeSeriesWindow::new(Tensor::new(&[N_CH, D_TS], data)?, t)
}
