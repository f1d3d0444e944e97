//! Traversal quality metrics over recorded sensor streams.

use serde::{Deserialize, Serialize};

use crate::gait::GRAVITY;
use crate::ts::{ImuSample, JointSample};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NavMetrics {
    /// Σ over samples and joints of |τ|, Nm·samples.
    pub cumulative_joint_effort: f64,
    /// sqrt(mean(e²)) with e the gravity-corrected squared IMU magnitude.
    pub rms_imu_energy_density: f64,
}

pub fn imu_energy(s: &ImuSample) -> f64 {
    let [ax, ay, az] = s.acc;
    let [gx, gy, gz] = s.gyro;
    ax * ax + ay * ay + (az - GRAVITY).powi(2) + gx * gx + gy * gy + gz * gz
}

pub fn eval_navigation_metrics(imu: &[ImuSample], joints: &[JointSample]) -> NavMetrics {
    let effort = joints
        .iter()
        .flat_map(|j| j.effort.iter())
        .map(|e| e.abs())
        .sum();
    let energy = if imu.is_empty() {
        0.0
    } else {
        let ms = imu.iter().map(|s| imu_energy(s).powi(2)).sum::<f64>() / imu.len() as f64;
        ms.sqrt()
    };
    NavMetrics {
        cumulative_joint_effort: effort,
        rms_imu_energy_density: energy,
    }
}
