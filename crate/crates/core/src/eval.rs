//! Trajectory metrics: ATE after rigid alignment, start-to-end error,
//! improvement percentage.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Pose, Vec3};

/// Time-ordered sequence of stamped poses.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    data: Vec<(f64, Pose)>,
}

impl Trajectory {
    /// Build from (stamp, pose) pairs; stamps must be strictly increasing.
    pub fn new(data: Vec<(f64, Pose)>) -> Self {
        debug_assert!(data.windows(2).all(|w| w[0].0 < w[1].0));
        Self { data }
    }

    pub fn push(&mut self, t: f64, pose: Pose) {
        debug_assert!(self.data.last().map_or(true, |&(prev, _)| t > prev));
        self.data.push((t, pose));
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(f64, Pose)> {
        self.data.iter()
    }

    pub fn first(&self) -> Option<&(f64, Pose)> {
        self.data.first()
    }

    pub fn last(&self) -> Option<&(f64, Pose)> {
        self.data.last()
    }

    pub fn positions(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.data.iter().map(|(_, p)| p.translation)
    }

    /// Map every pose by a rigid transform (left-composition).
    pub fn transformed(&self, t: &Pose) -> Trajectory {
        Trajectory {
            data: self
                .data
                .iter()
                .map(|(s, p)| (*s, t.compose(p)))
                .collect(),
        }
    }
}

/// Metrics produced by a scenario run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub ate_rmse: f64,
    pub start_to_end_2d: f64,
    pub start_to_end_3d: f64,
    pub endpoint_error: [f64; 3],
    pub improvement_vs_baseline: Option<f64>,
}

/// Associate poses by nearest stamp within `max_dt` seconds.
fn associate<'a>(
    est: &'a Trajectory,
    truth: &'a Trajectory,
    max_dt: f64,
) -> Vec<(Vec3, Vec3)> {
    let mut pairs = Vec::new();
    let truth_data: Vec<&(f64, Pose)> = truth.iter().collect();
    let mut j = 0usize;
    for (t, pose) in est.iter() {
        while j + 1 < truth_data.len()
            && (truth_data[j + 1].0 - t).abs() <= (truth_data[j].0 - t).abs()
        {
            j += 1;
        }
        if (truth_data[j].0 - t).abs() <= max_dt {
            pairs.push((pose.translation, truth_data[j].1.translation));
        }
    }
    pairs
}

/// Closed-form rigid (no scale) alignment of `src` onto `dst`,
/// minimizing `Σ ‖R src + t − dst‖²`.
fn rigid_align(pairs: &[(Vec3, Vec3)]) -> Pose {
    let n = pairs.len() as f64;
    let mu_src: Vec3 = pairs.iter().map(|p| p.0).sum::<Vec3>() / n;
    let mu_dst: Vec3 = pairs.iter().map(|p| p.1).sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in pairs {
        cov += (d - mu_dst) * (s - mu_src).transpose();
    }
    let svd = cov.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let t = mu_dst - r * mu_src;
    Pose::new(rot, t)
}

/// ATE RMSE in meters after SE(3) alignment of the estimate onto the truth.
///
/// Association is nearest-stamp within 20 ms; at least 3 associated pairs
/// are required.
pub fn compute_ate(estimate: &Trajectory, truth: &Trajectory) -> Result<f64> {
    let pairs = associate(estimate, truth, 0.02);
    if pairs.len() < 3 {
        return Err(Error::Other(format!(
            "too few associated pose pairs for ATE: {}",
            pairs.len()
        )));
    }
    let align = rigid_align(&pairs);
    let sq_sum: f64 = pairs
        .iter()
        .map(|(s, d)| (align.transform(s) - d).norm_squared())
        .sum();
    Ok((sq_sum / pairs.len() as f64).sqrt())
}

/// Raw (unaligned) gap between the first and last positions.
///
/// Returns (2-D xy error, 3-D error, endpoint vector last − first).
pub fn start_to_end_error(traj: &Trajectory) -> Result<(f64, f64, Vec3)> {
    if traj.len() < 2 {
        return Err(Error::Other("trajectory too short for start-to-end".into()));
    }
    let first = traj.first().unwrap().1.translation;
    let last = traj.last().unwrap().1.translation;
    let e = last - first;
    Ok((e.xy().norm(), e.norm(), e))
}

/// Percent ATE reduction of `method` relative to `baseline`.
pub fn improvement_pct(baseline_ate: f64, method_ate: f64) -> Result<f64> {
    if baseline_ate <= 0.0 {
        return Err(Error::Other("baseline ATE must be positive".into()));
    }
    Ok(100.0 * (baseline_ate - method_ate) / baseline_ate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{exp_quat, Quat};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn line_traj(n: usize) -> Trajectory {
        let mut t = Trajectory::default();
        for i in 0..n {
            t.push(
                i as f64 * 0.1,
                Pose::new(
                    Quat::identity(),
                    Vec3::new(i as f64 * 0.3, (i as f64 * 0.05).sin(), 0.1 * i as f64),
                ),
            );
        }
        t
    }

    #[test]
    fn ate_identical_is_zero() {
        let t = line_traj(50);
        assert!(compute_ate(&t, &t).unwrap() < 1e-9);
    }

    #[test]
    fn ate_invariant_under_rigid_transform() {
        let t = line_traj(80);
        let m = Pose::new(
            exp_quat(&Vec3::new(0.3, -0.2, 1.1)),
            Vec3::new(5.0, -2.0, 0.7),
        );
        let moved = t.transformed(&m);
        assert!(compute_ate(&moved, &t).unwrap() < 1e-9);
        // common transform applied to both inputs changes nothing
        let a = compute_ate(&moved, &moved.transformed(&m)).unwrap();
        assert!(a < 1e-9);
    }

    #[test]
    fn ate_of_gaussian_noise_approaches_sigma_sqrt3() {
        let truth = line_traj(4000);
        let sigma = 0.2;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(0.0, sigma).unwrap();
        let noisy = Trajectory::new(
            truth
                .iter()
                .map(|(t, p)| {
                    let n = Vec3::new(
                        normal.sample(&mut rng),
                        normal.sample(&mut rng),
                        normal.sample(&mut rng),
                    );
                    (*t, Pose::new(p.rotation, p.translation + n))
                })
                .collect(),
        );
        let ate = compute_ate(&noisy, &truth).unwrap();
        let expected = sigma * 3.0_f64.sqrt();
        assert!(
            (ate - expected).abs() / expected < 0.05,
            "ate {ate} vs expected {expected}"
        );
    }

    #[test]
    fn ate_too_few_pairs_errors() {
        let t = line_traj(2);
        assert!(compute_ate(&t, &t).is_err());
    }

    #[test]
    fn start_to_end_matches_reported_endpoints() {
        // endpoints from published comparisons; agreement within 0.01 m
        let cases = [
            ((4.29, 3.35, 0.52), 5.439, 5.465),
            ((-0.04, 0.14, 0.84), 0.148, 0.853),
        ];
        for ((x, y, z), e2d, e3d) in cases {
            let mut t = Trajectory::default();
            t.push(0.0, Pose::identity());
            t.push(1.0, Pose::new(Quat::identity(), Vec3::new(x, y, z)));
            let (d2, d3, _) = start_to_end_error(&t).unwrap();
            assert!((d2 - e2d).abs() < 0.01, "2d {d2} vs {e2d}");
            assert!((d3 - e3d).abs() < 0.01, "3d {d3} vs {e3d}");
        }
    }

    #[test]
    fn start_to_end_closed_loop_is_zero() {
        let mut t = Trajectory::default();
        t.push(0.0, Pose::identity());
        t.push(1.0, Pose::new(Quat::identity(), Vec3::new(1.0, 1.0, 0.0)));
        t.push(2.0, Pose::identity());
        let (d2, d3, e) = start_to_end_error(&t).unwrap();
        assert_eq!((d2, d3), (0.0, 0.0));
        assert_eq!(e, Vec3::zeros());
    }

    #[test]
    fn improvement_pct_table_rows() {
        assert!((improvement_pct(0.388, 0.291).unwrap() - 24.84).abs() < 0.5);
        assert!((improvement_pct(0.240, 0.188).unwrap() - 21.76).abs() < 0.5);
        assert_eq!(improvement_pct(0.5, 0.5).unwrap(), 0.0);
        assert!(improvement_pct(0.0, 0.1).is_err());
    }

    #[test]
    fn association_skips_far_stamps() {
        let a = line_traj(10);
        let mut b = Trajectory::default();
        for i in 0..10 {
            b.push(100.0 + i as f64, Pose::identity());
        }
        assert!(compute_ate(&a, &b).is_err());
    }

    #[test]
    fn random_rigid_alignment_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let t = line_traj(30);
            let m = Pose::new(
                exp_quat(&Vec3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                )),
                Vec3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                ),
            );
            assert!(compute_ate(&t.transformed(&m), &t).unwrap() < 1e-9);
        }
    }
}
