//! UWB ranging residual and the virtual relative-transformation link that
//! protects the locally accurate odometry shape from the absolute ranges.

use nalgebra::{Matrix3, RowVector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Weights and link horizon of the ranging layer.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct UwbFactorSpec {
    /// Ranging residual weight (1/m²).
    pub gamma_r: f64,
    /// Relative-link residual weight (1/m²).
    pub gamma_s: f64,
    /// Each ranged pose links forward to this many successors.
    pub link_horizon: usize,
}

impl Default for UwbFactorSpec {
    fn default() -> Self {
        Self {
            gamma_r: 400.0, // 1/σ² for σ = 0.05 m
            gamma_s: 100.0,
            link_horizon: 3,
        }
    }
}

/// Anchor position estimate; once fixed it never moves again.
#[derive(Debug, Clone, Copy)]
pub struct AnchorEstimate {
    pub position: Vec3,
    pub fixed: bool,
    pub covariance: Matrix3<f64>,
}

impl AnchorEstimate {
    pub fn new(position: Vec3) -> Self {
        Self {
            position,
            fixed: false,
            covariance: Matrix3::identity(),
        }
    }
}

/// Scalar ranging residual `‖p − anchor‖ − d̂` with Jacobians w.r.t. the
/// position and (when free) the anchor.
///
/// Fails when the position coincides with the anchor: the residual's
/// direction, and with it the Jacobian, is undefined there.
pub fn uwb_range_residual(
    p: &Vec3,
    anchor: &Vec3,
    measured: f64,
) -> Result<(f64, RowVector3<f64>, RowVector3<f64>)> {
    let diff = p - anchor;
    let dist = diff.norm();
    if dist < 1e-6 {
        return Err(Error::SingularRangeJacobian);
    }
    let dir = (diff / dist).transpose();
    Ok((dist - measured, dir, -dir))
}

/// Link residual `(p_j − p_t) − z̃` preserving the odometry-estimated
/// relative translation between two ranged poses.
pub fn relative_link_residual(p_t: &Vec3, p_j: &Vec3, vio_delta: &Vec3) -> Vec3 {
    (p_j - p_t) - vio_delta
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_four_five_residuals() {
        let p = Vec3::new(3.0, 4.0, 0.0);
        let (r, _, _) = uwb_range_residual(&p, &Vec3::zeros(), 5.0).unwrap();
        assert_abs_diff_eq!(r, 0.0, epsilon = 1e-12);
        let (r, _, _) = uwb_range_residual(&p, &Vec3::zeros(), 4.9).unwrap();
        assert_abs_diff_eq!(r, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn coincident_point_is_singular() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert!(matches!(
            uwb_range_residual(&p, &p, 0.0),
            Err(Error::SingularRangeJacobian)
        ));
    }

    #[test]
    fn range_jacobian_is_unit_direction_and_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-7;
        for _ in 0..100 {
            let p = Vec3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            );
            let a = Vec3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            );
            if (p - a).norm() < 0.1 {
                continue;
            }
            let d = rng.random_range(0.0..20.0);
            let (_, jp, ja) = uwb_range_residual(&p, &a, d).unwrap();
            assert_abs_diff_eq!(
                jp.transpose(),
                (p - a).normalize(),
                epsilon = 1e-12
            );
            for i in 0..3 {
                let mut dp = Vec3::zeros();
                dp[i] = h;
                let rp = uwb_range_residual(&(p + dp), &a, d).unwrap().0;
                let rm = uwb_range_residual(&(p - dp), &a, d).unwrap().0;
                assert!((jp[i] - (rp - rm) / (2.0 * h)).abs() < 1e-7);
                let rp = uwb_range_residual(&p, &(a + dp), d).unwrap().0;
                let rm = uwb_range_residual(&p, &(a - dp), d).unwrap().0;
                assert!((ja[i] - (rp - rm) / (2.0 * h)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn link_residual_basics() {
        let z = Vec3::new(1.0, 0.0, 0.0);
        assert_eq!(
            relative_link_residual(&Vec3::zeros(), &Vec3::new(1.0, 0.0, 0.0), &z),
            Vec3::zeros()
        );
        assert_abs_diff_eq!(
            relative_link_residual(
                &Vec3::zeros(),
                &Vec3::new(1.0, 0.0, 0.0),
                &Vec3::new(0.9, 0.0, 0.0)
            ),
            Vec3::new(0.1, 0.0, 0.0),
            epsilon = 1e-12
        );
    }
}
