//! Analytic ground-truth trajectories: closed-form position, velocity,
//! acceleration and body angular rate, sampled at the IMU rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{exp_quat, Pose, Quat, Vec3};

/// Trajectory family, each C²-smooth in position.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum TrajectoryShape {
    /// Planar circle around `center`, `laps` full turns over the duration.
    Circle {
        center: [f64; 3],
        radius: f64,
        #[serde(default = "default_laps")]
        laps: f64,
    },
    /// Per-axis sinusoids `amp · sin(2π freq t + phase)`.
    Lissajous {
        amp: [f64; 3],
        freq: [f64; 3],
        #[serde(default)]
        phase: [f64; 3],
    },
    /// Natural cubic spline through waypoints, uniformly spaced in time.
    WaypointSpline { points: Vec<[f64; 3]> },
}

fn default_laps() -> f64 {
    1.0
}

/// How the body frame is oriented along the path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrientationMode {
    /// Body axes equal world axes everywhere.
    #[default]
    Identity,
    /// Camera-style frame with the optical (body z) axis tracking the
    /// horizontal velocity direction; body x points down.
    FacingVelocity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectorySpec {
    #[serde(flatten)]
    pub shape: TrajectoryShape,
    pub duration: f64,
    pub imu_rate: f64,
    pub cam_rate: f64,
    pub uwb_rate: f64,
    #[serde(default)]
    pub orientation: OrientationMode,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.duration <= 0.0 {
            return Err(Error::Config("duration must be positive".into()));
        }
        if !(self.imu_rate >= self.cam_rate && self.cam_rate >= self.uwb_rate && self.uwb_rate > 0.0)
        {
            return Err(Error::Config(
                "rates must satisfy imu_rate >= cam_rate >= uwb_rate > 0".into(),
            ));
        }
        if let TrajectoryShape::WaypointSpline { points } = &self.shape {
            if points.len() < 2 {
                return Err(Error::Config("waypoint spline needs >= 2 points".into()));
            }
        }
        Ok(())
    }

    /// Closed-form kinematics at time `t` (position derivatives only).
    pub fn eval_position(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        match &self.shape {
            TrajectoryShape::Circle {
                center,
                radius,
                laps,
            } => {
                let w = 2.0 * std::f64::consts::PI * laps / self.duration;
                let (s, c) = (w * t).sin_cos();
                let pos = Vec3::from(*center) + Vec3::new(radius * c, radius * s, 0.0);
                let vel = Vec3::new(-radius * w * s, radius * w * c, 0.0);
                let acc = Vec3::new(-radius * w * w * c, -radius * w * w * s, 0.0);
                (pos, vel, acc)
            }
            TrajectoryShape::Lissajous { amp, freq, phase } => {
                let mut pos = Vec3::zeros();
                let mut vel = Vec3::zeros();
                let mut acc = Vec3::zeros();
                for i in 0..3 {
                    let w = 2.0 * std::f64::consts::PI * freq[i];
                    let arg = w * t + phase[i];
                    pos[i] = amp[i] * arg.sin();
                    vel[i] = amp[i] * w * arg.cos();
                    acc[i] = -amp[i] * w * w * arg.sin();
                }
                (pos, vel, acc)
            }
            TrajectoryShape::WaypointSpline { points } => {
                let spline = NaturalSpline::fit(points, self.duration);
                spline.eval(t)
            }
        }
    }

    /// Full kinematics including orientation and body angular rate.
    pub fn eval(&self, t: f64) -> Kinematics {
        let (pos, vel, acc) = self.eval_position(t);
        let (quat, omega_body) = match self.orientation {
            OrientationMode::Identity => (Quat::identity(), Vec3::zeros()),
            OrientationMode::FacingVelocity => {
                let speed_sq = vel.x * vel.x + vel.y * vel.y;
                // Hold heading when (nearly) stationary.
                let (yaw, yaw_rate) = if speed_sq < 1e-8 {
                    (0.0, 0.0)
                } else {
                    (
                        vel.y.atan2(vel.x),
                        (vel.x * acc.y - vel.y * acc.x) / speed_sq,
                    )
                };
                let q = exp_quat(&Vec3::new(0.0, 0.0, yaw))
                    * exp_quat(&Vec3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0));
                let omega_world = Vec3::new(0.0, 0.0, yaw_rate);
                (q, q.inverse() * omega_world)
            }
        };
        Kinematics {
            t,
            pos,
            vel,
            acc,
            quat,
            omega_body,
        }
    }
}

/// Ground-truth state of the body at one instant.
#[derive(Debug, Clone, Copy)]
pub struct Kinematics {
    pub t: f64,
    pub pos: Vec3,
    pub vel: Vec3,
    pub acc: Vec3,
    /// World-from-body rotation.
    pub quat: Quat,
    /// Angular rate expressed in the body frame.
    pub omega_body: Vec3,
}

impl Kinematics {
    pub fn pose(&self) -> Pose {
        Pose::new(self.quat, self.pos)
    }
}

/// Trajectory sampled at the IMU rate, plus the generating spec for
/// resampling at other rates.
#[derive(Debug, Clone)]
pub struct SampledTrajectory {
    pub spec: TrajectorySpec,
    pub samples: Vec<Kinematics>,
}

impl SampledTrajectory {
    pub fn dt(&self) -> f64 {
        1.0 / self.spec.imu_rate
    }

    /// Timestamps of camera frames (cam_rate, starting at t=0).
    pub fn camera_stamps(&self) -> Vec<f64> {
        stamps(self.spec.duration, self.spec.cam_rate)
    }

    pub fn uwb_stamps(&self) -> Vec<f64> {
        stamps(self.spec.duration, self.spec.uwb_rate)
    }
}

fn stamps(duration: f64, rate: f64) -> Vec<f64> {
    let n = (duration * rate).round() as usize;
    (0..=n).map(|i| i as f64 / rate).collect()
}

/// Sample the ground truth at the IMU rate.
pub fn gen_trajectory(spec: &TrajectorySpec) -> Result<SampledTrajectory> {
    spec.validate()?;
    let ts = stamps(spec.duration, spec.imu_rate);
    // Fit the spline once rather than per-eval.
    let samples = match &spec.shape {
        TrajectoryShape::WaypointSpline { points } => {
            let spline = NaturalSpline::fit(points, spec.duration);
            ts.iter()
                .map(|&t| {
                    let (pos, vel, acc) = spline.eval(t);
                    kin_with_orientation(spec, t, pos, vel, acc)
                })
                .collect()
        }
        _ => ts.iter().map(|&t| spec.eval(t)).collect(),
    };
    Ok(SampledTrajectory {
        spec: spec.clone(),
        samples,
    })
}

fn kin_with_orientation(spec: &TrajectorySpec, t: f64, pos: Vec3, vel: Vec3, acc: Vec3) -> Kinematics {
    // Reuse the orientation logic in eval() by substituting position terms.
    let mut k = spec.eval(t);
    k.pos = pos;
    k.vel = vel;
    k.acc = acc;
    k
}

/// Natural cubic spline per axis, knots uniform over [0, duration].
struct NaturalSpline {
    knots_t: Vec<f64>,
    points: Vec<Vec3>,
    /// Second derivatives at the knots, per axis.
    m: Vec<Vec3>,
}

impl NaturalSpline {
    fn fit(points: &[[f64; 3]], duration: f64) -> Self {
        let n = points.len();
        let pts: Vec<Vec3> = points.iter().map(|p| Vec3::from(*p)).collect();
        let h = duration / (n - 1) as f64;
        let knots_t: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();

        // Tridiagonal solve for second derivatives (natural boundary: m0 = mn = 0).
        let mut m = vec![Vec3::zeros(); n];
        if n > 2 {
            let dim = n - 2;
            let mut diag = vec![4.0 * h; dim];
            let mut rhs: Vec<Vec3> = (0..dim)
                .map(|i| (pts[i + 2] - 2.0 * pts[i + 1] + pts[i]) * (6.0 / h))
                .collect();
            // Thomas algorithm, off-diagonals all equal to h.
            for i in 1..dim {
                let w = h / diag[i - 1];
                diag[i] -= w * h;
                let prev = rhs[i - 1];
                rhs[i] -= w * prev;
            }
            m[dim] = rhs[dim - 1] / diag[dim - 1];
            for i in (1..dim).rev() {
                m[i] = (rhs[i - 1] - h * m[i + 1]) / diag[i - 1];
            }
        }
        Self {
            knots_t,
            points: pts,
            m,
        }
    }

    fn eval(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        let n = self.points.len();
        let h = self.knots_t[1] - self.knots_t[0];
        let t = t.clamp(0.0, *self.knots_t.last().unwrap());
        let i = ((t / h) as usize).min(n - 2);
        let a = self.knots_t[i];
        let x = t - a;
        let (p0, p1) = (self.points[i], self.points[i + 1]);
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let pos = m0 * (h - x).powi(3) / (6.0 * h)
            + m1 * x.powi(3) / (6.0 * h)
            + (p1 / h - m1 * h / 6.0) * x
            + (p0 / h - m0 * h / 6.0) * (h - x);
        let vel = -m0 * (h - x).powi(2) / (2.0 * h)
            + m1 * x.powi(2) / (2.0 * h)
            + (p1 - p0) / h
            - (m1 - m0) * h / 6.0;
        let acc = m0 * (h - x) / h + m1 * x / h;
        (pos, vel, acc)
    }
}
