//! Shared 3-D rotation and pose algebra.
//!
//! Conventions used throughout the crate:
//! - Hamilton quaternions, stored world-from-body (`q` rotates body-frame
//!   vectors into the world frame).
//! - Small-angle tangent vectors act on the right: `q ⊞ θ = q ⊗ exp(θ)`.
//! - Every composition renormalizes, so long integration chains stay unit.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Hamilton product with renormalization.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    UnitQuaternion::new_normalize(a.into_inner() * b.into_inner())
}

/// Cross-product matrix `⌊w⌋×` such that `skew(w) * v == w × v`.
pub fn skew(w: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// The 4x4 matrix `Ω(w)` driving quaternion kinematics `q̇ = ½ Ω(w) q`.
///
/// Acts on quaternions laid out as `[x, y, z, w]` (vector part first).
pub fn omega_matrix(w: &Vec3) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(w)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(w);
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-w.transpose()));
    m
}

/// Right tangent increment: `q ⊗ exp(θ)`.
pub fn quat_boxplus(q: &Quat, theta: &Vec3) -> Quat {
    quat_mul(q, &exp_quat(theta))
}

/// Small-angle difference `a ⊟ b`, the rotation vector of `b⁻¹ ⊗ a`.
///
/// For near rotations this is `2 · vec(b⁻¹ ⊗ a)`; the exact log is used so
/// the round trip `b ⊞ (a ⊟ b) == a` holds for any pair.
pub fn quat_boxminus(a: &Quat, b: &Quat) -> Vec3 {
    let e = b.inverse() * a;
    log_quat(&e)
}

/// Exponential map: rotation vector to unit quaternion.
pub fn exp_quat(theta: &Vec3) -> Quat {
    let angle = theta.norm();
    if angle < 1e-12 {
        UnitQuaternion::new_normalize(Quaternion::from_parts(1.0, *theta * 0.5))
    } else {
        UnitQuaternion::from_scaled_axis(*theta)
    }
}

/// Logarithm map: unit quaternion to rotation vector, shortest arc.
pub fn log_quat(q: &Quat) -> Vec3 {
    // Pick the hemisphere with positive scalar part.
    let q = if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        *q
    };
    q.scaled_axis()
}

/// Rigid transform: rotation (world-from-body) plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Quat::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Apply to a point: `R p + t`.
    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`, applying `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: quat_mul(&self.rotation, &other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }
}
