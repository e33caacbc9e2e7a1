//! Deterministic, seedable sensor simulation.
//!
//! Everything here is a pure function of (spec, noise, seed): running the
//! same generation twice produces bit-identical streams. Noise generators
//! draw from per-sensor ChaCha streams derived from the one configured seed,
//! so adding a sensor never perturbs the others.

mod sensors;
mod trajectory;

pub use sensors::{
    gen_landmarks, inject_uwb_into_trajectory, synth_features, synth_imu, synth_uwb,
    CameraIntrinsics, GRAVITY,
};
pub use trajectory::{gen_trajectory, Kinematics, OrientationMode, SampledTrajectory, TrajectoryShape, TrajectorySpec};

use serde::{Deserialize, Serialize};

use crate::geom::Vec3;

/// One IMU reading: specific force and angular rate in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub accel: Vec3,
    pub gyro: Vec3,
}

/// One UWB two-way range to a peer (anchor or robot).
#[derive(Debug, Clone, PartialEq)]
pub struct RangeMeasurement {
    pub t: f64,
    pub peer_id: String,
    pub distance: f64,
}

/// Pixel track of one simulated landmark.
///
/// `true_position` is simulation ground truth; the estimator never sees it.
#[derive(Debug, Clone)]
pub struct FeatureTrack {
    pub landmark_id: u64,
    /// (camera frame index, pixel u, pixel v)
    pub observations: Vec<(usize, f64, f64)>,
    pub true_position: Vec3,
}

/// Sensor noise and bias configuration.
///
/// Sigmas are continuous-time densities for the IMU (`m/s²/√Hz`,
/// `rad/s/√Hz`) and per-sample standard deviations for pixels and ranges.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub accel_noise_density: f64,
    pub gyro_noise_density: f64,
    pub accel_bias: [f64; 3],
    pub gyro_bias: [f64; 3],
    /// Random-walk densities for the biases; zero keeps them constant.
    pub accel_bias_rw: f64,
    pub gyro_bias_rw: f64,
    /// Multiplicative gyro scale factor left unmodeled by the estimator.
    pub gyro_scale: f64,
    pub pixel_sigma: f64,
    pub uwb_sigma: f64,
    /// Piecewise-linear distance→bias table; empty means unbiased ranging.
    pub uwb_bias_table: Vec<(f64, f64)>,
    pub rng_seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            accel_noise_density: 0.0,
            gyro_noise_density: 0.0,
            accel_bias: [0.0; 3],
            gyro_bias: [0.0; 3],
            accel_bias_rw: 0.0,
            gyro_bias_rw: 0.0,
            gyro_scale: 1.0,
            pixel_sigma: 0.0,
            uwb_sigma: 0.0,
            uwb_bias_table: Vec::new(),
            rng_seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn accel_bias_vec(&self) -> Vec3 {
        Vec3::from(self.accel_bias)
    }

    pub fn gyro_bias_vec(&self) -> Vec3 {
        Vec3::from(self.gyro_bias)
    }

    /// Interpolate the distance-dependent ranging bias.
    pub fn uwb_bias_at(&self, distance: f64) -> f64 {
        let table = &self.uwb_bias_table;
        if table.is_empty() {
            return 0.0;
        }
        if distance <= table[0].0 {
            return table[0].1;
        }
        for w in table.windows(2) {
            let (d0, b0) = w[0];
            let (d1, b1) = w[1];
            if distance <= d1 {
                let a = (distance - d0) / (d1 - d0);
                return b0 + a * (b1 - b0);
            }
        }
        table.last().unwrap().1
    }
}
