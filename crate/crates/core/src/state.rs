//! Full per-keyframe robot state.

use nalgebra::SVector;

use crate::geom::{quat_boxplus, Pose, Quat, Vec3};

/// Position, velocity, orientation (world-from-body) and IMU biases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    pub p: Vec3,
    pub v: Vec3,
    pub q: Quat,
    pub ba: Vec3,
    pub bw: Vec3,
    pub stamp: f64,
}

impl RobotState {
    pub fn at_rest(stamp: f64) -> Self {
        Self {
            p: Vec3::zeros(),
            v: Vec3::zeros(),
            q: Quat::identity(),
            ba: Vec3::zeros(),
            bw: Vec3::zeros(),
            stamp,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.q, self.p)
    }

    /// Apply a 15-dof tangent increment `[δp, δv, δθ, δba, δbw]`.
    ///
    /// The rotation update is multiplicative on the right tangent.
    pub fn boxplus(&self, delta: &SVector<f64, 15>) -> Self {
        let d = |i: usize| Vec3::new(delta[i], delta[i + 1], delta[i + 2]);
        Self {
            p: self.p + d(0),
            v: self.v + d(3),
            q: quat_boxplus(&self.q, &d(6)),
            ba: self.ba + d(9),
            bw: self.bw + d(12),
            stamp: self.stamp,
        }
    }
}
