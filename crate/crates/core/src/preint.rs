//! IMU preintegration between consecutive camera frames.
//!
//! Midpoint integration of the relative motion terms (α, β, γ) expressed in
//! the body frame of the earlier camera frame, with 15x15 covariance
//! propagation and first-order bias Jacobians so small bias updates never
//! force a reintegration.
//!
//! Error-state and residual ordering throughout: `[δα, δβ, δθ, δba, δbw]`.

use nalgebra::{Matrix3, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{exp_quat, skew, Quat, Vec3};
use crate::sim::ImuSample;
use crate::state::RobotState;

/// IMU noise model used for covariance propagation (continuous densities).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuNoise {
    pub accel_density: f64,
    pub gyro_density: f64,
    pub accel_bias_rw: f64,
    pub gyro_bias_rw: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            accel_density: 0.02,
            gyro_density: 0.002,
            accel_bias_rw: 1e-4,
            gyro_bias_rw: 1e-5,
        }
    }
}

/// Preintegrated relative motion over one inter-frame interval.
#[derive(Debug, Clone)]
pub struct PreintegratedImu {
    /// Relative position term (m), frame of the earlier keyframe.
    pub alpha: Vec3,
    /// Relative velocity term (m/s).
    pub beta: Vec3,
    /// Relative rotation.
    pub gamma: Quat,
    pub dt_total: f64,
    /// Bias linearization point.
    pub accel_bias_ref: Vec3,
    pub gyro_bias_ref: Vec3,
    pub covariance: SMatrix<f64, 15, 15>,
    /// `d[α, β, θ] / d[ba, bw]` at the linearization point.
    pub bias_jacobian: SMatrix<f64, 9, 6>,
    noise: ImuNoise,
    /// Raw samples kept for reintegration and interval merging.
    samples: Vec<ImuSample>,
}

/// First-order correction is trusted up to this bias change; beyond it the
/// stored samples are reintegrated.
pub const BIAS_REPROPAGATE_THRESHOLD: f64 = 1e-2;

impl PreintegratedImu {
    pub fn samples(&self) -> &[ImuSample] {
        &self.samples
    }

    pub fn noise(&self) -> &ImuNoise {
        &self.noise
    }

    /// Blocks of the stored bias Jacobian.
    fn j_alpha_ba(&self) -> Matrix3<f64> {
        self.bias_jacobian.fixed_view::<3, 3>(0, 0).into_owned()
    }
    fn j_alpha_bw(&self) -> Matrix3<f64> {
        self.bias_jacobian.fixed_view::<3, 3>(0, 3).into_owned()
    }
    fn j_beta_ba(&self) -> Matrix3<f64> {
        self.bias_jacobian.fixed_view::<3, 3>(3, 0).into_owned()
    }
    fn j_beta_bw(&self) -> Matrix3<f64> {
        self.bias_jacobian.fixed_view::<3, 3>(3, 3).into_owned()
    }
    fn j_theta_bw(&self) -> Matrix3<f64> {
        self.bias_jacobian.fixed_view::<3, 3>(6, 3).into_owned()
    }

    /// α, β, γ corrected to the given biases, first order.
    pub fn corrected_terms(&self, ba: &Vec3, bw: &Vec3) -> (Vec3, Vec3, Quat) {
        let dba = ba - self.accel_bias_ref;
        let dbw = bw - self.gyro_bias_ref;
        let alpha = self.alpha + self.j_alpha_ba() * dba + self.j_alpha_bw() * dbw;
        let beta = self.beta + self.j_beta_ba() * dba + self.j_beta_bw() * dbw;
        let gamma = self.gamma * exp_quat(&(self.j_theta_bw() * dbw));
        (alpha, beta, gamma)
    }

    /// Return a preintegration valid at the new bias point.
    ///
    /// Uses the stored first-order Jacobians; reintegrates the raw samples
    /// when the bias moved more than [`BIAS_REPROPAGATE_THRESHOLD`].
    pub fn bias_correct(&self, new_ba: &Vec3, new_bw: &Vec3) -> PreintegratedImu {
        let dba = new_ba - self.accel_bias_ref;
        let dbw = new_bw - self.gyro_bias_ref;
        if dba.norm() > BIAS_REPROPAGATE_THRESHOLD || dbw.norm() > BIAS_REPROPAGATE_THRESHOLD {
            if let Ok(re) = preintegrate(&self.samples, new_ba, new_bw, &self.noise) {
                return re;
            }
        }
        let (alpha, beta, gamma) = self.corrected_terms(new_ba, new_bw);
        PreintegratedImu {
            alpha,
            beta,
            gamma,
            accel_bias_ref: *new_ba,
            gyro_bias_ref: *new_bw,
            ..self.clone()
        }
    }

    /// Square root of the information matrix (upper triangular), used to
    /// whiten the residual. Falls back to identity when the covariance is
    /// not yet invertible (zero-duration intervals).
    pub fn sqrt_info(&self) -> SMatrix<f64, 15, 15> {
        let inv = self
            .covariance
            .try_inverse()
            .and_then(|m| nalgebra::Cholesky::new(m).map(|c| c.l().transpose()));
        inv.unwrap_or_else(SMatrix::identity)
    }
}

/// Midpoint-rule preintegration of an IMU interval at fixed biases.
///
/// Gravity is not removed here; it enters only in the residual.
pub fn preintegrate(
    samples: &[ImuSample],
    bias_a: &Vec3,
    bias_w: &Vec3,
    noise: &ImuNoise,
) -> Result<PreintegratedImu> {
    if samples.is_empty() {
        return Err(Error::EmptyStream);
    }
    for w in samples.windows(2) {
        if w[1].t <= w[0].t {
            return Err(Error::NonMonotoneTime(w[1].t));
        }
    }

    let mut alpha = Vec3::zeros();
    let mut beta = Vec3::zeros();
    let mut gamma = Quat::identity();
    let mut cov = SMatrix::<f64, 15, 15>::zeros();
    let mut jac = SMatrix::<f64, 15, 15>::identity();
    let mut dt_total = 0.0;

    for w in samples.windows(2) {
        let dt = w[1].t - w[0].t;
        let a0_body = w[0].accel - bias_a;
        let a1_body = w[1].accel - bias_a;
        let w_mid = (w[0].gyro + w[1].gyro) * 0.5 - bias_w;

        let dq = exp_quat(&(w_mid * dt));
        let gamma_next = gamma * dq;
        let r0 = gamma.to_rotation_matrix().into_inner();
        let r1 = gamma_next.to_rotation_matrix().into_inner();
        let a_mid = (r0 * a0_body + r1 * a1_body) * 0.5;

        // error-state transition for [δα, δβ, δθ, δba, δbw]
        let a_rot = dq.to_rotation_matrix().into_inner().transpose();
        let da_dtheta = -0.5 * (r0 * skew(&a0_body) + r1 * skew(&a1_body) * a_rot);
        let da_dba = -0.5 * (r0 + r1);
        let da_dbw = 0.5 * r1 * skew(&a1_body) * dt;

        let mut f = SMatrix::<f64, 15, 15>::identity();
        f.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(Matrix3::identity() * dt));
        f.fixed_view_mut::<3, 3>(0, 6)
            .copy_from(&(da_dtheta * (0.5 * dt * dt)));
        f.fixed_view_mut::<3, 3>(0, 9)
            .copy_from(&(da_dba * (0.5 * dt * dt)));
        f.fixed_view_mut::<3, 3>(0, 12)
            .copy_from(&(da_dbw * (0.5 * dt * dt)));
        f.fixed_view_mut::<3, 3>(3, 6).copy_from(&(da_dtheta * dt));
        f.fixed_view_mut::<3, 3>(3, 9).copy_from(&(da_dba * dt));
        f.fixed_view_mut::<3, 3>(3, 12).copy_from(&(da_dbw * dt));
        f.fixed_view_mut::<3, 3>(6, 6).copy_from(&a_rot);
        f.fixed_view_mut::<3, 3>(6, 12)
            .copy_from(&(-Matrix3::identity() * dt));

        // noise input [n_a0, n_w0, n_a1, n_w1, n_ba, n_bw]
        let mut g = SMatrix::<f64, 15, 18>::zeros();
        let dth_dnw = Matrix3::identity() * (0.5 * dt);
        let da_dnw = -0.25 * r1 * skew(&a1_body) * dt;
        g.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(0.5 * r0 * (0.5 * dt * dt)));
        g.fixed_view_mut::<3, 3>(0, 6)
            .copy_from(&(0.5 * r1 * (0.5 * dt * dt)));
        g.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(da_dnw * (0.5 * dt * dt)));
        g.fixed_view_mut::<3, 3>(0, 9)
            .copy_from(&(da_dnw * (0.5 * dt * dt)));
        g.fixed_view_mut::<3, 3>(3, 0).copy_from(&(0.5 * r0 * dt));
        g.fixed_view_mut::<3, 3>(3, 6).copy_from(&(0.5 * r1 * dt));
        g.fixed_view_mut::<3, 3>(3, 3).copy_from(&(da_dnw * dt));
        g.fixed_view_mut::<3, 3>(3, 9).copy_from(&(da_dnw * dt));
        g.fixed_view_mut::<3, 3>(6, 3).copy_from(&dth_dnw);
        g.fixed_view_mut::<3, 3>(6, 9).copy_from(&dth_dnw);
        g.fixed_view_mut::<3, 3>(9, 12)
            .copy_from(&Matrix3::identity());
        g.fixed_view_mut::<3, 3>(12, 15)
            .copy_from(&Matrix3::identity());

        // discrete per-step variances from the continuous densities
        let va = noise.accel_density * noise.accel_density / dt;
        let vw = noise.gyro_density * noise.gyro_density / dt;
        let vba = noise.accel_bias_rw * noise.accel_bias_rw * dt;
        let vbw = noise.gyro_bias_rw * noise.gyro_bias_rw * dt;
        let mut q = SMatrix::<f64, 18, 18>::zeros();
        for i in 0..3 {
            q[(i, i)] = va;
            q[(i + 3, i + 3)] = vw;
            q[(i + 6, i + 6)] = va;
            q[(i + 9, i + 9)] = vw;
            q[(i + 12, i + 12)] = vba;
            q[(i + 15, i + 15)] = vbw;
        }

        cov = f * cov * f.transpose() + g * q * g.transpose();
        jac = f * jac;

        alpha += beta * dt + a_mid * (0.5 * dt * dt);
        beta += a_mid * dt;
        gamma = Quat::new_normalize(gamma_next.into_inner());
        dt_total += dt;
    }

    // keep the covariance exactly symmetric
    cov = (cov + cov.transpose()) * 0.5;

    Ok(PreintegratedImu {
        alpha,
        beta,
        gamma,
        dt_total,
        accel_bias_ref: *bias_a,
        gyro_bias_ref: *bias_w,
        covariance: cov,
        bias_jacobian: jac.fixed_view::<9, 6>(0, 9).into_owned(),
        noise: *noise,
        samples: samples.to_vec(),
    })
}

/// 2 · vector part of a near-identity quaternion, hemisphere-corrected.
fn small_angle(q: &Quat) -> Vec3 {
    let s = if q.w < 0.0 { -2.0 } else { 2.0 };
    Vec3::new(q.i * s, q.j * s, q.k * s)
}

/// Unwhitened 15-dim IMU residual and its Jacobians w.r.t. the tangents
/// of the two bounding states.
pub fn imu_residual_raw(
    state_k: &RobotState,
    state_k1: &RobotState,
    pre: &PreintegratedImu,
    gravity: &Vec3,
) -> (
    SVector<f64, 15>,
    SMatrix<f64, 15, 15>,
    SMatrix<f64, 15, 15>,
) {
    let dt = pre.dt_total;
    let r_wk = state_k.q.to_rotation_matrix().into_inner().transpose();

    let (alpha_c, beta_c, gamma_c) = pre.corrected_terms(&state_k.ba, &state_k.bw);

    let u_p = state_k1.p - state_k.p - gravity * (0.5 * dt * dt) - state_k.v * dt;
    let u_v = state_k1.v - gravity * dt - state_k.v;
    let q_err = gamma_c.inverse() * state_k.q.inverse() * state_k1.q;

    let mut r = SVector::<f64, 15>::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&(r_wk * u_p - alpha_c));
    r.fixed_rows_mut::<3>(3).copy_from(&(r_wk * u_v - beta_c));
    r.fixed_rows_mut::<3>(6).copy_from(&small_angle(&q_err));
    r.fixed_rows_mut::<3>(9)
        .copy_from(&(state_k1.ba - state_k.ba));
    r.fixed_rows_mut::<3>(12)
        .copy_from(&(state_k1.bw - state_k.bw));

    // attitude error terms; hemisphere sign folds into (w_e, v_e)
    let sgn = if q_err.w < 0.0 { -1.0 } else { 1.0 };
    let w_e = sgn * q_err.w;
    let v_e = sgn * Vec3::new(q_err.i, q_err.j, q_err.k);
    let r_gc = gamma_c.to_rotation_matrix().into_inner();
    let dtheta_left = w_e * Matrix3::identity() - skew(&v_e);

    let mut jk = SMatrix::<f64, 15, 15>::zeros();
    // δα rows
    jk.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r_wk));
    jk.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r_wk * dt));
    jk.fixed_view_mut::<3, 3>(0, 6)
        .copy_from(&skew(&(r_wk * u_p)));
    jk.fixed_view_mut::<3, 3>(0, 9)
        .copy_from(&(-pre.j_alpha_ba()));
    jk.fixed_view_mut::<3, 3>(0, 12)
        .copy_from(&(-pre.j_alpha_bw()));
    // δβ rows
    jk.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-r_wk));
    jk.fixed_view_mut::<3, 3>(3, 6)
        .copy_from(&skew(&(r_wk * u_v)));
    jk.fixed_view_mut::<3, 3>(3, 9)
        .copy_from(&(-pre.j_beta_ba()));
    jk.fixed_view_mut::<3, 3>(3, 12)
        .copy_from(&(-pre.j_beta_bw()));
    // δθ rows
    jk.fixed_view_mut::<3, 3>(6, 6)
        .copy_from(&(-dtheta_left * r_gc.transpose()));
    jk.fixed_view_mut::<3, 3>(6, 12)
        .copy_from(&(-dtheta_left * pre.j_theta_bw()));
    // bias rows
    jk.fixed_view_mut::<3, 3>(9, 9)
        .copy_from(&(-Matrix3::identity()));
    jk.fixed_view_mut::<3, 3>(12, 12)
        .copy_from(&(-Matrix3::identity()));

    let mut jk1 = SMatrix::<f64, 15, 15>::zeros();
    jk1.fixed_view_mut::<3, 3>(0, 0).copy_from(&r_wk);
    jk1.fixed_view_mut::<3, 3>(3, 3).copy_from(&r_wk);
    jk1.fixed_view_mut::<3, 3>(6, 6)
        .copy_from(&(w_e * Matrix3::identity() + skew(&v_e)));
    jk1.fixed_view_mut::<3, 3>(9, 9)
        .copy_from(&Matrix3::identity());
    jk1.fixed_view_mut::<3, 3>(12, 12)
        .copy_from(&Matrix3::identity());

    (r, jk, jk1)
}

/// Whitened IMU residual: `sqrt_info · r` with matching Jacobians.
pub fn imu_residual(
    state_k: &RobotState,
    state_k1: &RobotState,
    pre: &PreintegratedImu,
    gravity: &Vec3,
) -> (
    SVector<f64, 15>,
    SMatrix<f64, 15, 15>,
    SMatrix<f64, 15, 15>,
) {
    let (r, jk, jk1) = imu_residual_raw(state_k, state_k1, pre, gravity);
    let w = pre.sqrt_info();
    (w * r, w * jk, w * jk1)
}
