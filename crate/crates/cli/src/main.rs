use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use uvio_core::estimator::Estimator;
use uvio_core::eval::{compute_ate, improvement_pct, start_to_end_error, EvalReport, Trajectory};
use uvio_core::geom::Vec3;
use uvio_core::io::{
    load_features, load_imu, load_ranges, load_tum, write_features, write_imu, write_ranges,
    write_tum, FeatureObs,
};
use uvio_core::scenario::{
    run_rendezvous_scenario, run_scenario, RendezvousScenarioConfig, ScenarioConfig,
};
use uvio_core::sim::{gen_landmarks, gen_trajectory, synth_features, synth_imu, synth_uwb};
use uvio_core::state::RobotState;

/// Ranging-aided visual-inertial estimation toolkit.
#[derive(Parser)]
#[command(name = "uvio", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate sensor data for a scenario and write it to a directory.
    Simulate(SimulateArgs),
    /// Run the estimator on previously simulated sensor files.
    Estimate(EstimateArgs),
    /// Compare an estimated trajectory against ground truth.
    Evaluate(EvaluateArgs),
    /// Simulate, estimate and evaluate a scenario in one step.
    Scenario(ScenarioArgs),
    /// Run a scenario across many seeds and print per-seed results.
    Sweep(SweepArgs),
    /// Solve the two-robot frame transform for a rendezvous scenario.
    Rendezvous(RendezvousArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario TOML.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Scenario TOML (estimator settings are taken from it).
    #[arg(long)]
    config: PathBuf,
    /// Directory produced by `simulate`.
    #[arg(long)]
    data: PathBuf,
    /// Output trajectory (TUM format).
    #[arg(long)]
    out: PathBuf,
    /// Ignore range measurements and run visual-inertial odometry only.
    #[arg(long)]
    disable_uwb: bool,
    /// Known anchor position as `x,y,z`; skips self-localization.
    #[arg(long)]
    anchor: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Estimated trajectory (TUM).
    #[arg(long)]
    estimate: PathBuf,
    /// Ground-truth trajectory (TUM).
    #[arg(long)]
    groundtruth: PathBuf,
    /// Optional baseline trajectory for an improvement percentage.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    config: PathBuf,
    /// Optional directory for trajectories, error table and report.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Number of seeds, starting from `--seed-base`.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed_base: u64,
}

#[derive(Args)]
struct RendezvousArgs {
    /// Rendezvous scenario TOML.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_anchor(s: &str) -> anyhow::Result<Vec3> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("invalid anchor {s:?}, expected x,y,z"))?;
    if parts.len() != 3 {
        bail!("invalid anchor {s:?}, expected exactly three components");
    }
    Ok(Vec3::new(parts[0], parts[1], parts[2]))
}

fn simulate(args: &SimulateArgs) -> anyhow::Result<()> {
    let mut cfg = ScenarioConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
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

    let cam_stamps = traj.camera_stamps();
    let truth = Trajectory::new(
        cam_stamps
            .iter()
            .map(|&t| (t, cfg.trajectory.eval(t).pose()))
            .collect(),
    );
    let mut features = Vec::new();
    for tr in &tracks {
        for &(fi, u, v) in &tr.observations {
            features.push(FeatureObs {
                frame_t: cam_stamps[fi],
                landmark_id: tr.landmark_id,
                u,
                v,
            });
        }
    }
    features.sort_by(|a, b| {
        a.frame_t
            .total_cmp(&b.frame_t)
            .then(a.landmark_id.cmp(&b.landmark_id))
    });

    std::fs::create_dir_all(&args.out)?;
    write_tum(args.out.join("groundtruth.tum"), &truth)?;
    write_imu(args.out.join("imu.csv"), &imu)?;
    write_ranges(args.out.join("ranges.csv"), &ranges)?;
    write_features(args.out.join("features.csv"), &features)?;
    println!(
        "wrote {} frames, {} imu samples, {} ranges to {}",
        truth.len(),
        imu.len(),
        ranges.len(),
        args.out.display()
    );
    Ok(())
}

fn estimate(args: &EstimateArgs) -> anyhow::Result<()> {
    let cfg = ScenarioConfig::load(&args.config)?;
    let imu = load_imu(args.data.join("imu.csv"))?;
    let ranges = load_ranges(args.data.join("ranges.csv"))?;
    let features = load_features(args.data.join("features.csv"))?;
    let truth = load_tum(args.data.join("groundtruth.tum"))?;

    // camera stamps and per-frame observation lists from the feature file
    let mut stamps: Vec<f64> = truth.iter().map(|(t, _)| *t).collect();
    stamps.sort_by(f64::total_cmp);
    let mut obs: Vec<Vec<(u64, f64, f64)>> = vec![Vec::new(); stamps.len()];
    for f in &features {
        if let Some(i) = stamps.iter().position(|&t| (t - f.frame_t).abs() < 1e-9) {
            obs[i].push((f.landmark_id, f.u, f.v));
        }
    }

    let (t0, first_pose) = truth.first().context("empty ground truth")?;
    let initial_v = truth
        .iter()
        .nth(1)
        .map(|(t1, p1)| (p1.translation - first_pose.translation) / (t1 - t0))
        .unwrap_or_else(Vec3::zeros);
    let initial = RobotState {
        p: first_pose.translation,
        v: initial_v,
        q: first_pose.rotation,
        ba: Vec3::zeros(),
        bw: Vec3::zeros(),
        stamp: *t0,
    };

    let mut est_cfg = cfg.estimator.clone();
    est_cfg.use_uwb = !args.disable_uwb;
    let mut est = Estimator::new(est_cfg, initial)?;
    if let Some(anchor) = &args.anchor {
        est.set_known_anchor(parse_anchor(anchor)?);
    }

    let mut imu_iter = imu.iter().peekable();
    let mut range_iter = ranges.iter().peekable();
    for (i, &t) in stamps.iter().enumerate() {
        while imu_iter.peek().is_some_and(|s| s.t <= t + 1e-9) {
            est.add_imu(*imu_iter.next().unwrap());
        }
        let mut range = None;
        while range_iter.peek().is_some_and(|r| r.t <= t + 1e-9) {
            range = Some(range_iter.next().unwrap().distance);
        }
        est.add_frame(t, &obs[i], range)?;
    }

    write_tum(&args.out, &est.trajectory())?;
    println!("wrote {}", args.out.display());
    if let Some(a) = est.anchor_estimate() {
        println!(
            "anchor estimate: [{:.4}, {:.4}, {:.4}] fixed={}",
            a.position.x, a.position.y, a.position.z, a.fixed
        );
    }
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let est = load_tum(&args.estimate)?;
    let truth = load_tum(&args.groundtruth)?;
    let ate = compute_ate(&est, &truth)?;
    let (d2, d3, endpoint) = start_to_end_error(&est)?;
    let improvement = match &args.baseline {
        Some(b) => {
            let baseline = load_tum(b)?;
            Some(improvement_pct(compute_ate(&baseline, &truth)?, ate)?)
        }
        None => None,
    };
    let report = EvalReport {
        ate_rmse: ate,
        start_to_end_2d: d2,
        start_to_end_3d: d3,
        endpoint_error: [endpoint.x, endpoint.y, endpoint.z],
        improvement_vs_baseline: improvement,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn scenario(args: &ScenarioArgs) -> anyhow::Result<()> {
    let mut cfg = ScenarioConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let report = run_scenario(&cfg, args.out.as_deref())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let mut cfg = ScenarioConfig::load(&args.config)?;
    let mut ranging = Vec::new();
    let mut vio = Vec::new();
    println!("seed,ate_ranging,ate_vio_only,improvement_pct");
    for seed in args.seed_base..args.seed_base + args.seeds {
        cfg.seed = seed;
        let report = run_scenario(&cfg, None)?;
        let r = report.ranging.eval.ate_rmse;
        ranging.push(r);
        match &report.vio_only {
            Some(v) => {
                vio.push(v.ate_rmse);
                println!(
                    "{seed},{r:.6},{:.6},{:.2}",
                    v.ate_rmse,
                    report.ranging.eval.improvement_vs_baseline.unwrap_or(0.0)
                );
            }
            None => println!("{seed},{r:.6},,"),
        }
    }
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    if !ranging.is_empty() {
        println!("# median ate_ranging: {:.6}", median(ranging));
    }
    if !vio.is_empty() {
        println!("# median ate_vio_only: {:.6}", median(vio));
    }
    Ok(())
}

fn rendezvous(args: &RendezvousArgs) -> anyhow::Result<()> {
    let mut cfg = RendezvousScenarioConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let report = run_rendezvous_scenario(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Estimate(a) => estimate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Scenario(a) => scenario(a),
        Command::Sweep(a) => sweep(a),
        Command::Rendezvous(a) => rendezvous(a),
    }
}
