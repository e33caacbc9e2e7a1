//! Inverse-depth reprojection residual between a landmark's first
//! observing frame and a later frame.

use nalgebra::{Matrix2x3, SMatrix, Vector2};

use crate::geom::{skew, Pose};
use crate::sim::CameraIntrinsics;

/// Reprojection residual (pixels) and Jacobians.
///
/// The landmark is parameterized by its inverse depth along the ray of its
/// first observation `first_obs_uv` in frame `i`; the residual compares the
/// prediction in frame `j` against `cur_obs_uv`. Pose tangents are
/// `[δp, δθ]` with right-multiplicative rotation updates.
///
/// Returns `None` when the point lands at or behind camera `j`; the caller
/// excludes the block for that iteration.
#[allow(clippy::type_complexity)]
pub fn vision_residual(
    pose_i: &Pose,
    pose_j: &Pose,
    inv_depth: f64,
    first_obs_uv: (f64, f64),
    cur_obs_uv: (f64, f64),
    intrinsics: &CameraIntrinsics,
) -> Option<(
    Vector2<f64>,
    SMatrix<f64, 2, 6>,
    SMatrix<f64, 2, 6>,
    Vector2<f64>,
)> {
    if inv_depth <= 0.0 {
        return None;
    }
    let p_ci = intrinsics.back_project(first_obs_uv.0, first_obs_uv.1) / inv_depth;
    let p_w = pose_i.transform(&p_ci);
    let r_j = pose_j.rotation.to_rotation_matrix().into_inner();
    let r_jt = r_j.transpose();
    let p_cj = r_jt * (p_w - pose_j.translation);
    if p_cj.z < 1e-3 {
        return None;
    }

    let (u, v) = intrinsics.project(&p_cj)?;
    let r = Vector2::new(u - cur_obs_uv.0, v - cur_obs_uv.1);

    let z = p_cj.z;
    let j_proj = Matrix2x3::new(
        intrinsics.fx / z,
        0.0,
        -intrinsics.fx * p_cj.x / (z * z),
        0.0,
        intrinsics.fy / z,
        -intrinsics.fy * p_cj.y / (z * z),
    );

    let r_i = pose_i.rotation.to_rotation_matrix().into_inner();
    let mut j_pose_i = SMatrix::<f64, 2, 6>::zeros();
    j_pose_i
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(j_proj * r_jt));
    j_pose_i
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(-j_proj * r_jt * r_i * skew(&p_ci)));

    let mut j_pose_j = SMatrix::<f64, 2, 6>::zeros();
    j_pose_j
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(-j_proj * r_jt));
    j_pose_j
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(j_proj * skew(&p_cj)));

    let dp_dl = r_jt * r_i * (-p_ci / inv_depth);
    let j_inv_depth = j_proj * dp_dl;

    Some((r, j_pose_i, j_pose_j, j_inv_depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{exp_quat, quat_boxplus, Quat, Vec3};
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::default()
    }

    #[test]
    fn consistent_observation_zero_residual() {
        let pp = (intr().cx, intr().cy);
        let (r, _, _, _) = vision_residual(
            &Pose::identity(),
            &Pose::identity(),
            1.0 / 5.0,
            pp,
            pp,
            &intr(),
        )
        .unwrap();
        assert_abs_diff_eq!(r, Vector2::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn translation_produces_analytic_parallax() {
        let intr = intr();
        let pp = (intr.cx, intr.cy);
        let pose_j = Pose::new(Quat::identity(), Vec3::new(0.1, 0.0, 0.0));
        let (r, _, _, _) =
            vision_residual(&Pose::identity(), &pose_j, 1.0 / 5.0, pp, pp, &intr).unwrap();
        // landmark at 5 m, camera shifted 0.1 m: parallax f·0.1/5 px
        let expected = intr.fx * 0.1 / 5.0;
        assert_abs_diff_eq!(r.x.abs(), expected, epsilon = 1e-9);
        assert_abs_diff_eq!(r.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn point_behind_camera_is_rejected() {
        let intr = intr();
        let pp = (intr.cx, intr.cy);
        // frame j looks the other way
        let pose_j = Pose::new(exp_quat(&Vec3::new(0.0, std::f64::consts::PI, 0.0)), Vec3::zeros());
        assert!(vision_residual(&Pose::identity(), &pose_j, 0.2, pp, pp, &intr).is_none());
        // non-positive inverse depth
        assert!(vision_residual(&Pose::identity(), &Pose::identity(), 0.0, pp, pp, &intr).is_none());
    }

    fn pose_boxplus(p: &Pose, d: &Vector6<f64>) -> Pose {
        Pose::new(
            quat_boxplus(&p.rotation, &Vec3::new(d[3], d[4], d[5])),
            p.translation + Vec3::new(d[0], d[1], d[2]),
        )
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let intr = intr();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let h = 1e-6;
        let mut tested = 0;
        while tested < 100 {
            let pose_i = Pose::new(
                exp_quat(&Vec3::new(
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                )),
                Vec3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ),
            );
            let pose_j = Pose::new(
                exp_quat(&Vec3::new(
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                )),
                pose_i.translation
                    + Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ),
            );
            let l = rng.random_range(0.05..0.8);
            let first = (
                rng.random_range(100.0..540.0),
                rng.random_range(100.0..380.0),
            );
            let cur = (
                rng.random_range(0.0..640.0),
                rng.random_range(0.0..480.0),
            );
            let Some((_, ji, jj, jl)) =
                vision_residual(&pose_i, &pose_j, l, first, cur, &intr)
            else {
                continue;
            };
            let scale = ji.norm().max(jj.norm()).max(jl.norm());

            let eval = |pi: &Pose, pj: &Pose, l: f64| {
                vision_residual(pi, pj, l, first, cur, &intr).map(|x| x.0)
            };

            let mut ok = true;
            for col in 0..6 {
                let mut d = Vector6::zeros();
                d[col] = h;
                let (Some(rp), Some(rm)) = (
                    eval(&pose_boxplus(&pose_i, &d), &pose_j, l),
                    eval(&pose_boxplus(&pose_i, &(-d)), &pose_j, l),
                ) else {
                    ok = false;
                    break;
                };
                let fd = (rp - rm) / (2.0 * h);
                assert!(
                    (fd - ji.column(col)).norm() / scale < 1e-5,
                    "pose_i col {col}: {}",
                    (fd - ji.column(col)).norm() / scale
                );

                let (Some(rp), Some(rm)) = (
                    eval(&pose_i, &pose_boxplus(&pose_j, &d), l),
                    eval(&pose_i, &pose_boxplus(&pose_j, &(-d)), l),
                ) else {
                    ok = false;
                    break;
                };
                let fd = (rp - rm) / (2.0 * h);
                assert!(
                    (fd - jj.column(col)).norm() / scale < 1e-5,
                    "pose_j col {col}: {}",
                    (fd - jj.column(col)).norm() / scale
                );
            }
            if !ok {
                continue;
            }
            let (Some(rp), Some(rm)) = (eval(&pose_i, &pose_j, l + h), eval(&pose_i, &pose_j, l - h))
            else {
                continue;
            };
            let fd = (rp - rm) / (2.0 * h);
            assert!((fd - jl).norm() / scale < 1e-5);
            tested += 1;
        }
    }
}
