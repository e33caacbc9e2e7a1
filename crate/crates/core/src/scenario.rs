//! End-to-end scenario runner: simulate sensors, estimate with and without
//! ranging, evaluate against ground truth, and write deterministic outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{Estimator, EstimatorConfig};
use crate::eval::{compute_ate, improvement_pct, start_to_end_error, EvalReport, Trajectory};
use crate::geom::Vec3;
use crate::io::{fmt_f64, write_tum};
use crate::rendezvous::{estimate_transform, FrameTransform, RendezvousObservation};
use crate::sim::{
    gen_landmarks, gen_trajectory, synth_features, synth_imu, synth_uwb, FeatureTrack, NoiseSpec,
    SampledTrajectory, TrajectorySpec,
};
use crate::state::RobotState;

/// Annulus of landmarks around a center, heights drawn from `z_range`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkField {
    pub center: [f64; 3],
    pub r_min: f64,
    pub r_max: f64,
    pub z_range: [f64; 2],
    pub count: usize,
}

impl Default for LandmarkField {
    fn default() -> Self {
        Self {
            center: [0.0, 0.0, 1.0],
            r_min: 4.0,
            r_max: 9.0,
            z_range: [-1.0, 3.0],
            count: 160,
        }
    }
}

fn default_true() -> bool {
    true
}

/// Single-robot scenario: trajectory, sensor noise, one anchor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub anchor: [f64; 3],
    /// Skip self-localization and hand the estimator the true anchor.
    #[serde(default)]
    pub anchor_known: bool,
    #[serde(default)]
    pub landmarks: LandmarkField,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    /// Also run the identical pipeline with ranging disabled as a baseline.
    #[serde(default = "default_true")]
    pub compare_vio_only: bool,
}

fn default_name() -> String {
    "scenario".into()
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("scenario config: {e}")))?;
        cfg.trajectory.validate()?;
        cfg.estimator.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub eval: EvalReport,
    pub anchor_estimate: Option<[f64; 3]>,
    pub anchor_error: Option<f64>,
    pub anchor_fixed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub anchor_true: [f64; 3],
    pub ranging: MethodReport,
    pub vio_only: Option<EvalReport>,
}

fn eval_against(est: &Trajectory, truth: &Trajectory, baseline_ate: Option<f64>) -> Result<EvalReport> {
    let ate = compute_ate(est, truth)?;
    let (d2, d3, endpoint) = start_to_end_error(est)?;
    Ok(EvalReport {
        ate_rmse: ate,
        start_to_end_2d: d2,
        start_to_end_3d: d3,
        endpoint_error: [endpoint.x, endpoint.y, endpoint.z],
        improvement_vs_baseline: match baseline_ate {
            Some(b) => Some(improvement_pct(b, ate)?),
            None => None,
        },
    })
}

/// Feeds presimulated sensors through one estimator instance.
fn run_estimator(
    traj: &SampledTrajectory,
    tracks: &[FeatureTrack],
    imu: &[crate::sim::ImuSample],
    ranges: &[crate::sim::RangeMeasurement],
    cfg: EstimatorConfig,
    known_anchor: Option<Vec3>,
) -> Result<Estimator> {
    let cam_stamps = traj.camera_stamps();
    let mut obs: Vec<Vec<(u64, f64, f64)>> = vec![Vec::new(); cam_stamps.len()];
    for tr in tracks {
        for &(fi, u, v) in &tr.observations {
            obs[fi].push((tr.landmark_id, u, v));
        }
    }

    let k0 = &traj.samples[0];
    let initial = RobotState {
        p: k0.pos,
        v: k0.vel,
        q: k0.quat,
        ba: Vec3::zeros(),
        bw: Vec3::zeros(),
        stamp: 0.0,
    };
    let mut est = Estimator::new(cfg, initial)?;
    if let Some(a) = known_anchor {
        est.set_known_anchor(a);
    }

    let mut imu_iter = imu.iter().peekable();
    let mut range_iter = ranges.iter().peekable();
    for (fi, &t) in cam_stamps.iter().enumerate() {
        while imu_iter.peek().is_some_and(|s| s.t <= t + 1e-9) {
            est.add_imu(*imu_iter.next().unwrap());
        }
        let mut range = None;
        while range_iter.peek().is_some_and(|r| r.t <= t + 1e-9) {
            range = Some(range_iter.next().unwrap().distance);
        }
        est.add_frame(t, &obs[fi], range)?;
    }
    Ok(est)
}

/// Runs a scenario end to end. With `out_dir` set, writes ground truth and
/// estimate trajectories, a per-frame error table, and the JSON report; all
/// files are byte-identical across runs with the same configuration.
pub fn run_scenario(cfg: &ScenarioConfig, out_dir: Option<&Path>) -> Result<ScenarioReport> {
    let mut noise = cfg.noise.clone();
    noise.rng_seed = cfg.seed;
    let anchor = Vec3::from(cfg.anchor);

    let traj = gen_trajectory(&cfg.trajectory)?;
    let landmarks = gen_landmarks(
        &Vec3::from(cfg.landmarks.center),
        cfg.landmarks.r_min,
        cfg.landmarks.r_max,
        (cfg.landmarks.z_range[0], cfg.landmarks.z_range[1]),
        cfg.landmarks.count,
        noise.rng_seed,
    );
    let tracks = synth_features(&traj, &landmarks, &cfg.estimator.intrinsics, &noise)?;
    let imu = synth_imu(&traj, &noise);
    let ranges = synth_uwb(&traj, &anchor, &noise, "anchor");

    let truth = Trajectory::new(
        traj.camera_stamps()
            .iter()
            .map(|&t| (t, cfg.trajectory.eval(t).pose()))
            .collect(),
    );

    let mut ranging_cfg = cfg.estimator.clone();
    ranging_cfg.use_uwb = true;
    let known = cfg.anchor_known.then_some(anchor);
    let ranging_est = run_estimator(&traj, &tracks, &imu, &ranges, ranging_cfg, known)?;
    let ranging_traj = ranging_est.trajectory();

    let (vio_only, vio_traj) = if cfg.compare_vio_only {
        let mut vio_cfg = cfg.estimator.clone();
        vio_cfg.use_uwb = false;
        let est = run_estimator(&traj, &tracks, &imu, &ranges, vio_cfg, None)?;
        let t = est.trajectory();
        (Some(eval_against(&t, &truth, None)?), Some(t))
    } else {
        (None, None)
    };

    let ranging_eval = eval_against(
        &ranging_traj,
        &truth,
        vio_only.as_ref().map(|e| e.ate_rmse),
    )?;
    let anchor_est = ranging_est.anchor_estimate();
    let report = ScenarioReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        anchor_true: cfg.anchor,
        ranging: MethodReport {
            eval: ranging_eval,
            anchor_estimate: anchor_est.map(|a| [a.position.x, a.position.y, a.position.z]),
            anchor_error: anchor_est.map(|a| (a.position - anchor).norm()),
            anchor_fixed: anchor_est.map_or(false, |a| a.fixed),
        },
        vio_only,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_tum(dir.join("groundtruth.tum"), &truth)?;
        write_tum(dir.join("estimate_ranging.tum"), &ranging_traj)?;
        if let Some(t) = &vio_traj {
            write_tum(dir.join("estimate_vio_only.tum"), t)?;
        }
        write_error_table(&dir.join("errors.csv"), &truth, &ranging_traj, vio_traj.as_ref())?;
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Other(format!("report serialization: {e}")))?;
        std::fs::write(dir.join("report.json"), json + "\n")?;
    }
    Ok(report)
}

/// Per-frame position error of each method, `stamp,err_ranging[,err_vio]`.
fn write_error_table(
    path: &Path,
    truth: &Trajectory,
    ranging: &Trajectory,
    vio: Option<&Trajectory>,
) -> Result<()> {
    let mut out = String::from(if vio.is_some() {
        "stamp,err_ranging,err_vio\n"
    } else {
        "stamp,err_ranging\n"
    });
    let lookup = |traj: &Trajectory, t: f64| -> Option<Vec3> {
        traj.iter()
            .find(|(s, _)| (s - t).abs() < 1e-9)
            .map(|(_, p)| p.translation)
    };
    for (t, gt) in truth.iter() {
        let Some(pr) = lookup(ranging, *t) else {
            continue;
        };
        let mut line = format!("{},{}", fmt_f64(*t), fmt_f64((pr - gt.translation).norm()));
        if let Some(v) = vio {
            let Some(pv) = lookup(v, *t) else { continue };
            line.push(',');
            line.push_str(&fmt_f64((pv - gt.translation).norm()));
        }
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Two-robot rendezvous scenario: both robots range the same anchor in the
/// world frame, robot B estimates in its own frame offset by `frame_b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RendezvousScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub trajectory_a: TrajectorySpec,
    pub trajectory_b: TrajectorySpec,
    /// Shared anchor, world frame.
    pub anchor: [f64; 3],
    /// Ground-truth transform from robot B's frame into the world frame.
    pub frame_b_yaw: f64,
    pub frame_b_translation: [f64; 3],
    /// The two stamps at which the robots exchange ranges.
    pub stamps: [f64; 2],
    #[serde(default)]
    pub range_sigma: f64,
}

impl RendezvousScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("rendezvous config: {e}")))?;
        cfg.trajectory_a.validate()?;
        cfg.trajectory_b.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RendezvousReport {
    pub name: String,
    pub yaw_estimate: f64,
    pub yaw_error: f64,
    pub translation_estimate: [f64; 3],
    pub translation_error: f64,
}

/// Simulates the two-robot rendezvous and solves the frame transform.
///
/// Ground-truth positions are used for both robots; the point under test is
/// the transform solver, not the odometry.
pub fn run_rendezvous_scenario(cfg: &RendezvousScenarioConfig) -> Result<RendezvousReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);

    let gt = FrameTransform {
        yaw: cfg.frame_b_yaw,
        translation: Vec3::from(cfg.frame_b_translation),
    };
    let world_to_b = |p: &Vec3| -> Vec3 {
        let d = p - gt.translation;
        let (s, c) = (-gt.yaw).sin_cos();
        Vec3::new(c * d.x - s * d.y, s * d.x + c * d.y, d.z)
    };
    let anchor_world = Vec3::from(cfg.anchor);
    let anchor_b = world_to_b(&anchor_world);

    let mut obs = Vec::new();
    for &t in &cfg.stamps {
        let pa = cfg.trajectory_a.eval(t).pos;
        let pb_world = cfg.trajectory_b.eval(t).pos;
        let mut d = (pa - pb_world).norm();
        if cfg.range_sigma > 0.0 {
            d += rng.random_range(-cfg.range_sigma..cfg.range_sigma);
        }
        obs.push(RendezvousObservation {
            stamp: t,
            own_pos: pa,
            peer_pos: world_to_b(&pb_world),
            inter_range: d,
        });
    }

    let t = estimate_transform(&anchor_world, &anchor_b, &obs[0], &obs[1], cfg.range_sigma)?;
    let mut yaw_err = (t.yaw - gt.yaw) % (2.0 * std::f64::consts::PI);
    if yaw_err > std::f64::consts::PI {
        yaw_err -= 2.0 * std::f64::consts::PI;
    }
    if yaw_err < -std::f64::consts::PI {
        yaw_err += 2.0 * std::f64::consts::PI;
    }
    Ok(RendezvousReport {
        name: cfg.name.clone(),
        yaw_estimate: t.yaw,
        yaw_error: yaw_err.abs(),
        translation_estimate: [t.translation.x, t.translation.y, t.translation.z],
        translation_error: (t.translation - gt.translation).norm(),
    })
}
