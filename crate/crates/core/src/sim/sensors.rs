//! Synthetic IMU, UWB and feature-track measurement generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::Trajectory;
use crate::geom::Vec3;
use crate::sim::{
    FeatureTrack, ImuSample, Kinematics, NoiseSpec, RangeMeasurement, SampledTrajectory,
};

/// World gravity; z is aligned with the opposite of gravity.
pub const GRAVITY: Vec3 = Vec3::new(0.0, 0.0, -9.81);

/// Domain separation for the per-sensor noise streams.
mod stream {
    pub const IMU: u64 = 1;
    pub const UWB: u64 = 2;
    pub const FEATURES: u64 = 3;
    pub const LANDMARKS: u64 = 4;
}

fn rng_for(seed: u64, domain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain);
    rng
}

fn normal3(dist: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(dist.sample(rng), dist.sample(rng), dist.sample(rng))
}

/// Generate an IMU stream along the trajectory.
///
/// The accelerometer reports specific force in the body frame:
/// `R_wb^T (a_world − g) + bias + noise`; the gyro reports body angular
/// rate with optional scale error, bias and noise.
pub fn synth_imu(traj: &SampledTrajectory, noise: &NoiseSpec) -> Vec<ImuSample> {
    let mut rng = rng_for(noise.rng_seed, stream::IMU);
    let rate = traj.spec.imu_rate;
    let accel_sigma = noise.accel_noise_density * rate.sqrt();
    let gyro_sigma = noise.gyro_noise_density * rate.sqrt();
    let accel_dist = Normal::new(0.0, accel_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let gyro_dist = Normal::new(0.0, gyro_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let rw_dt = 1.0 / rate;
    let accel_rw = Normal::new(0.0, (noise.accel_bias_rw * rw_dt.sqrt()).max(f64::MIN_POSITIVE))
        .unwrap();
    let gyro_rw =
        Normal::new(0.0, (noise.gyro_bias_rw * rw_dt.sqrt()).max(f64::MIN_POSITIVE)).unwrap();

    let mut ba = noise.accel_bias_vec();
    let mut bw = noise.gyro_bias_vec();
    let mut out = Vec::with_capacity(traj.samples.len());
    for k in &traj.samples {
        let specific_force = k.quat.inverse() * (k.acc - GRAVITY);
        let accel = if accel_sigma > 0.0 {
            specific_force + ba + normal3(&accel_dist, &mut rng)
        } else {
            specific_force + ba
        };
        let gyro_true = k.omega_body * noise.gyro_scale;
        let gyro = if gyro_sigma > 0.0 {
            gyro_true + bw + normal3(&gyro_dist, &mut rng)
        } else {
            gyro_true + bw
        };
        out.push(ImuSample {
            t: k.t,
            accel,
            gyro,
        });
        if noise.accel_bias_rw > 0.0 {
            ba += normal3(&accel_rw, &mut rng);
        }
        if noise.gyro_bias_rw > 0.0 {
            bw += normal3(&gyro_rw, &mut rng);
        }
    }
    out
}

fn range_of(pos: &Vec3, anchor: &Vec3, noise: &NoiseSpec, rng: &mut ChaCha8Rng) -> f64 {
    let d = (pos - anchor).norm();
    let mut measured = d + noise.uwb_bias_at(d);
    if noise.uwb_sigma > 0.0 {
        let dist = Normal::new(0.0, noise.uwb_sigma).unwrap();
        measured += dist.sample(rng);
    }
    measured.max(0.0)
}

/// Range measurements to a static anchor at the trajectory's UWB rate.
pub fn synth_uwb(
    traj: &SampledTrajectory,
    anchor: &Vec3,
    noise: &NoiseSpec,
    peer_id: &str,
) -> Vec<RangeMeasurement> {
    let mut rng = rng_for(noise.rng_seed, stream::UWB);
    let imu_rate = traj.spec.imu_rate;
    traj.uwb_stamps()
        .iter()
        .map(|&t| {
            let idx = ((t * imu_rate).round() as usize).min(traj.samples.len() - 1);
            let pos = traj.samples[idx].pos;
            RangeMeasurement {
                t,
                peer_id: peer_id.to_string(),
                distance: range_of(&pos, anchor, noise, &mut rng),
            }
        })
        .collect()
}

/// Simulate anchor ranges for an externally supplied ground-truth
/// trajectory, one range per retained sample at `uwb_rate`.
pub fn inject_uwb_into_trajectory(
    gt: &Trajectory,
    anchor: &Vec3,
    noise: &NoiseSpec,
    uwb_rate: f64,
    peer_id: &str,
) -> Vec<RangeMeasurement> {
    let mut rng = rng_for(noise.rng_seed, stream::UWB);
    let mut out = Vec::new();
    let mut next_t = f64::NEG_INFINITY;
    for (t, pose) in gt.iter() {
        if *t + 1e-12 < next_t {
            continue;
        }
        out.push(RangeMeasurement {
            t: *t,
            peer_id: peer_id.to_string(),
            distance: range_of(&pose.translation, anchor, noise, &mut rng),
        });
        next_t = *t + 1.0 / uwb_rate;
    }
    out
}

/// Pinhole camera model (no distortion).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 460.0,
            fy: 460.0,
            cx: 320.0,
            cy: 240.0,
            width: 640.0,
            height: 480.0,
        }
    }
}

impl CameraIntrinsics {
    /// Project a camera-frame point; `None` when at or behind the camera.
    pub fn project(&self, p_cam: &Vec3) -> Option<(f64, f64)> {
        if p_cam.z < 1e-3 {
            return None;
        }
        Some((
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    pub fn in_bounds(&self, uv: (f64, f64)) -> bool {
        uv.0 >= 0.0 && uv.0 < self.width && uv.1 >= 0.0 && uv.1 < self.height
    }

    /// Back-project a pixel to a unit-depth camera-frame point.
    pub fn back_project(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Scatter landmarks on an annulus around `center`, heights in `z_range`.
pub fn gen_landmarks(
    center: &Vec3,
    r_min: f64,
    r_max: f64,
    z_range: (f64, f64),
    count: usize,
    seed: u64,
) -> Vec<Vec3> {
    use rand::Rng;
    let mut rng = rng_for(seed, stream::LANDMARKS);
    (0..count)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let r = rng.random_range(r_min..r_max);
            let z = rng.random_range(z_range.0..z_range.1);
            center + Vec3::new(r * angle.cos(), r * angle.sin(), z)
        })
        .collect()
}

/// Project landmarks into every camera frame and assemble pixel tracks.
///
/// Tracks are truncated when the landmark leaves the frustum; only tracks
/// with at least two observations are returned.
pub fn synth_features(
    traj: &SampledTrajectory,
    landmarks: &[Vec3],
    intrinsics: &CameraIntrinsics,
    noise: &NoiseSpec,
) -> Result<Vec<FeatureTrack>> {
    let mut rng = rng_for(noise.rng_seed, stream::FEATURES);
    let pixel_dist = Normal::new(0.0, noise.pixel_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let imu_rate = traj.spec.imu_rate;
    let cam_frames: Vec<&Kinematics> = traj
        .camera_stamps()
        .iter()
        .map(|&t| {
            let idx = ((t * imu_rate).round() as usize).min(traj.samples.len() - 1);
            &traj.samples[idx]
        })
        .collect();

    let mut tracks: Vec<FeatureTrack> = landmarks
        .iter()
        .enumerate()
        .map(|(i, lm)| FeatureTrack {
            landmark_id: i as u64,
            observations: Vec::new(),
            true_position: *lm,
        })
        .collect();

    for (frame_idx, k) in cam_frames.iter().enumerate() {
        for track in tracks.iter_mut() {
            let p_cam = k.quat.inverse() * (track.true_position - k.pos);
            let Some(mut uv) = intrinsics.project(&p_cam) else {
                continue;
            };
            if !intrinsics.in_bounds(uv) {
                continue;
            }
            if noise.pixel_sigma > 0.0 {
                uv.0 += pixel_dist.sample(&mut rng);
                uv.1 += pixel_dist.sample(&mut rng);
            }
            track.observations.push((frame_idx, uv.0, uv.1));
        }
    }
    tracks.retain(|t| t.observations.len() >= 2);
    Ok(tracks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{quat_boxplus, Quat};
    use crate::sim::{gen_trajectory, OrientationMode, TrajectoryShape, TrajectorySpec};
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix3;

    fn circle_spec(radius: f64, duration: f64, imu_rate: f64) -> TrajectorySpec {
        TrajectorySpec {
            shape: TrajectoryShape::Circle {
                center: [0.0; 3],
                radius,
                laps: 1.0,
            },
            duration,
            imu_rate,
            cam_rate: 10.0,
            uwb_rate: 5.0,
            orientation: OrientationMode::Identity,
        }
    }

    #[test]
    fn hover_measures_gravity_reaction() {
        let traj = gen_trajectory(&circle_spec(0.0, 2.0, 100.0)).unwrap();
        let imu = synth_imu(&traj, &NoiseSpec::default());
        for s in &imu {
            assert_abs_diff_eq!(s.accel, Vec3::new(0.0, 0.0, 9.81), epsilon = 1e-12);
            assert_eq!(s.gyro, Vec3::zeros());
        }
    }

    #[test]
    fn zero_noise_imu_reintegrates_to_trajectory() {
        // naive midpoint re-integration of the clean stream should track
        // the analytic circle closely
        let spec = TrajectorySpec {
            orientation: OrientationMode::FacingVelocity,
            ..circle_spec(5.0, 10.0, 200.0)
        };
        let traj = gen_trajectory(&spec).unwrap();
        let imu = synth_imu(&traj, &NoiseSpec::default());

        let k0 = &traj.samples[0];
        let mut p = k0.pos;
        let mut v = k0.vel;
        let mut q: Quat = k0.quat;
        for w in imu.windows(2) {
            let dt = w[1].t - w[0].t;
            let wm = (w[0].gyro + w[1].gyro) * 0.5;
            let q_next = quat_boxplus(&q, &(wm * dt));
            let a0 = q * w[0].accel + GRAVITY;
            let a1 = q_next * w[1].accel + GRAVITY;
            let am = (a0 + a1) * 0.5;
            p += v * dt + 0.5 * am * dt * dt;
            v += am * dt;
            q = q_next;
        }
        let k_end = traj.samples.last().unwrap();
        assert!(
            (p - k_end.pos).norm() < 1e-3,
            "endpoint error {}",
            (p - k_end.pos).norm()
        );
    }

    #[test]
    fn imu_stream_is_seed_deterministic() {
        let traj = gen_trajectory(&circle_spec(3.0, 5.0, 100.0)).unwrap();
        let noise = NoiseSpec {
            accel_noise_density: 0.01,
            gyro_noise_density: 0.001,
            rng_seed: 42,
            ..NoiseSpec::default()
        };
        let a = synth_imu(&traj, &noise);
        let b = synth_imu(&traj, &noise);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.accel.x.to_bits(), y.accel.x.to_bits());
            assert_eq!(x.gyro.z.to_bits(), y.gyro.z.to_bits());
        }
    }

    #[test]
    fn uwb_three_four_five() {
        let spec = TrajectorySpec {
            shape: TrajectoryShape::Circle {
                center: [3.0, 4.0, 0.0],
                radius: 0.0,
                laps: 1.0,
            },
            ..circle_spec(0.0, 2.0, 100.0)
        };
        let traj = gen_trajectory(&spec).unwrap();
        let ranges = synth_uwb(&traj, &Vec3::zeros(), &NoiseSpec::default(), "anchor");
        for r in &ranges {
            assert_abs_diff_eq!(r.distance, 5.0, epsilon = 1e-12);
        }
        // zero distance, zero noise
        let ranges = synth_uwb(
            &traj,
            &Vec3::new(3.0, 4.0, 0.0),
            &NoiseSpec::default(),
            "anchor",
        );
        for r in &ranges {
            assert_eq!(r.distance, 0.0);
        }
    }

    #[test]
    fn uwb_noise_statistics() {
        let spec = TrajectorySpec {
            uwb_rate: 100.0,
            cam_rate: 100.0,
            ..circle_spec(0.0, 100.0, 100.0)
        };
        let traj = gen_trajectory(&spec).unwrap();
        let noise = NoiseSpec {
            uwb_sigma: 0.05,
            rng_seed: 9,
            ..NoiseSpec::default()
        };
        let ranges = synth_uwb(&traj, &Vec3::new(10.0, 0.0, 0.0), &noise, "anchor");
        assert!(ranges.len() >= 10_000);
        let n = ranges.len() as f64;
        let mean: f64 = ranges.iter().map(|r| r.distance).sum::<f64>() / n;
        let var: f64 = ranges
            .iter()
            .map(|r| (r.distance - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        let std = var.sqrt();
        assert!(std > 0.045 && std < 0.055, "std {std}");
    }

    #[test]
    fn uwb_bias_table_interpolates() {
        let noise = NoiseSpec {
            uwb_bias_table: vec![(0.0, 0.1), (10.0, 0.3)],
            ..NoiseSpec::default()
        };
        assert_abs_diff_eq!(noise.uwb_bias_at(5.0), 0.2, epsilon = 1e-12);
        assert_eq!(noise.uwb_bias_at(20.0), 0.3);
        assert_eq!(noise.uwb_bias_at(-1.0), 0.1);
    }

    #[test]
    fn landmark_on_optical_axis_projects_to_principal_point() {
        let intr = CameraIntrinsics::default();
        let uv = intr.project(&Vec3::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!(uv, (intr.cx, intr.cy));
        // behind the camera: nothing
        assert!(intr.project(&Vec3::new(0.0, 0.0, -5.0)).is_none());
    }

    #[test]
    fn feature_tracks_triangulate_back_to_landmarks() {
        let spec = TrajectorySpec {
            orientation: OrientationMode::FacingVelocity,
            ..circle_spec(5.0, 20.0, 100.0)
        };
        let traj = gen_trajectory(&spec).unwrap();
        let landmarks = gen_landmarks(&Vec3::zeros(), 8.0, 15.0, (-2.0, 2.0), 30, 5);
        let intr = CameraIntrinsics::default();
        let tracks = synth_features(&traj, &landmarks, &intr, &NoiseSpec::default()).unwrap();
        assert!(!tracks.is_empty());

        let cam_stamps = traj.camera_stamps();
        let imu_rate = traj.spec.imu_rate;
        let mut checked = 0;
        for track in &tracks {
            if track.observations.len() < 3 {
                continue;
            }
            // DLT triangulation from ground-truth poses
            let mut ata = Matrix3::zeros();
            let mut atb = Vec3::zeros();
            for &(frame, u, v) in &track.observations {
                let t = cam_stamps[frame];
                let idx = ((t * imu_rate).round() as usize).min(traj.samples.len() - 1);
                let k = &traj.samples[idx];
                let ray_world = (k.quat * intr.back_project(u, v)).normalize();
                // point-to-line: (I - d dᵀ)(L - p) = 0
                let proj = Matrix3::identity() - ray_world * ray_world.transpose();
                ata += proj;
                atb += proj * k.pos;
            }
            let lm = ata.lu().solve(&atb).unwrap();
            assert!(
                (lm - track.true_position).norm() < 1e-6,
                "triangulation error {}",
                (lm - track.true_position).norm()
            );
            checked += 1;
        }
        assert!(checked > 5);
    }

    #[test]
    fn inject_uwb_matches_position_norms() {
        let mut traj = Trajectory::default();
        traj.push(0.0, crate::geom::Pose::identity());
        traj.push(
            1.0,
            crate::geom::Pose::new(Quat::identity(), Vec3::new(3.0, 4.0, 0.0)),
        );
        traj.push(
            2.0,
            crate::geom::Pose::new(Quat::identity(), Vec3::new(0.0, 0.0, 2.0)),
        );
        let ranges = inject_uwb_into_trajectory(
            &traj,
            &Vec3::zeros(),
            &NoiseSpec::default(),
            10.0,
            "anchor",
        );
        assert_eq!(ranges.len(), 3);
        assert_eq!(ranges[0].distance, 0.0);
        assert_abs_diff_eq!(ranges[1].distance, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ranges[2].distance, 2.0, epsilon = 1e-12);
    }
}
