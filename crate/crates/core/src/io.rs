//! File formats shared between the simulator, the estimator and the CLI.
//!
//! - TUM trajectory: text lines `timestamp tx ty tz qx qy qz qw`, `#` comments.
//! - Range file: CSV `timestamp,peer_id,distance_m`.
//! - IMU file: CSV `timestamp,ax,ay,az,gx,gy,gz`.
//! - Feature file: CSV `frame_timestamp,landmark_id,u,v`.
//! - Rendezvous message: CSV `stamp,px,py,pz,ax,ay,az`.
//!
//! All writers format floats with enough digits to round-trip `f64`
//! bit-exactly, so a re-run with the same seed produces byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::UnitQuaternion;

use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::geom::{Pose, Quat, Vec3};
use crate::sim::{ImuSample, RangeMeasurement};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Format a float so the exact bit pattern survives a parse round trip.
pub(crate) fn fmt_f64(x: f64) -> String {
    let mut s = format!("{x:.9}");
    if s.parse::<f64>() != Ok(x) {
        s = format!("{x:.17}");
    }
    s
}

pub fn load_tum(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_tum(&text, path)
}

pub fn parse_tum(text: &str, path: &Path) -> Result<Trajectory> {
    let mut traj = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 8 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 8 columns, got {}", cols.len()),
            ));
        }
        let mut vals = [0.0_f64; 8];
        for (i, c) in cols.iter().enumerate() {
            vals[i] = c
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad number {c:?}")))?;
        }
        let [t, tx, ty, tz, qx, qy, qz, qw] = vals;
        let raw_q = nalgebra::Quaternion::new(qw, qx, qy, qz);
        let norm = raw_q.norm();
        if norm < 0.9 {
            return Err(parse_err(
                path,
                lineno,
                format!("quaternion norm {norm:.4} too far from 1"),
            ));
        }
        if (norm - 1.0).abs() > 1e-3 {
            eprintln!(
                "warning: {}:{lineno}: renormalizing quaternion with norm {norm:.6}",
                path.display()
            );
        }
        let q: Quat = UnitQuaternion::new_normalize(raw_q);
        if let Some(&(prev, _)) = traj.last() {
            if t <= prev {
                return Err(Error::NonMonotoneTime(t));
            }
        }
        traj.push((t, Pose::new(q, Vec3::new(tx, ty, tz))));
    }
    Ok(Trajectory::new(traj))
}

pub fn write_tum(path: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (t, pose) in traj.iter() {
        let p = pose.translation;
        let q = pose.rotation;
        writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            fmt_f64(*t),
            fmt_f64(p.x),
            fmt_f64(p.y),
            fmt_f64(p.z),
            fmt_f64(q.i),
            fmt_f64(q.j),
            fmt_f64(q.k),
            fmt_f64(q.w)
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_ranges(path: impl AsRef<Path>, ranges: &[RangeMeasurement]) -> Result<()> {
    let mut out = String::from("timestamp,peer_id,distance_m\n");
    for r in ranges {
        writeln!(out, "{},{},{}", fmt_f64(r.t), r.peer_id, fmt_f64(r.distance)).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_ranges(path: impl AsRef<Path>) -> Result<Vec<RangeMeasurement>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("timestamp") {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(parse_err(path, idx + 1, "expected 3 columns"));
        }
        let t: f64 = cols[0]
            .parse()
            .map_err(|_| parse_err(path, idx + 1, "bad timestamp"))?;
        let d: f64 = cols[2]
            .parse()
            .map_err(|_| parse_err(path, idx + 1, "bad distance"))?;
        out.push(RangeMeasurement {
            t,
            peer_id: cols[1].to_string(),
            distance: d,
        });
    }
    Ok(out)
}

pub fn write_imu(path: impl AsRef<Path>, samples: &[ImuSample]) -> Result<()> {
    let mut out = String::from("timestamp,ax,ay,az,gx,gy,gz\n");
    for s in samples {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            fmt_f64(s.t),
            fmt_f64(s.accel.x),
            fmt_f64(s.accel.y),
            fmt_f64(s.accel.z),
            fmt_f64(s.gyro.x),
            fmt_f64(s.gyro.y),
            fmt_f64(s.gyro.z)
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_imu(path: impl AsRef<Path>) -> Result<Vec<ImuSample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut out: Vec<ImuSample> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("timestamp") {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(parse_err(path, idx + 1, "expected 7 columns"));
        }
        let mut v = [0.0_f64; 7];
        for (i, c) in cols.iter().enumerate() {
            v[i] = c
                .parse()
                .map_err(|_| parse_err(path, idx + 1, format!("bad number {c:?}")))?;
        }
        if let Some(prev) = out.last() {
            if v[0] <= prev.t {
                return Err(Error::NonMonotoneTime(v[0]));
            }
        }
        out.push(ImuSample {
            t: v[0],
            accel: Vec3::new(v[1], v[2], v[3]),
            gyro: Vec3::new(v[4], v[5], v[6]),
        });
    }
    Ok(out)
}

/// One pixel observation of a landmark in one camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureObs {
    pub frame_t: f64,
    pub landmark_id: u64,
    pub u: f64,
    pub v: f64,
}

pub fn write_features(path: impl AsRef<Path>, obs: &[FeatureObs]) -> Result<()> {
    let mut out = String::from("frame_timestamp,landmark_id,u,v\n");
    for o in obs {
        writeln!(
            out,
            "{},{},{},{}",
            fmt_f64(o.frame_t),
            o.landmark_id,
            fmt_f64(o.u),
            fmt_f64(o.v)
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<FeatureObs>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("frame_timestamp") {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(parse_err(path, idx + 1, "expected 4 columns"));
        }
        out.push(FeatureObs {
            frame_t: cols[0]
                .parse()
                .map_err(|_| parse_err(path, idx + 1, "bad timestamp"))?,
            landmark_id: cols[1]
                .parse()
                .map_err(|_| parse_err(path, idx + 1, "bad landmark id"))?,
            u: cols[2]
                .parse()
                .map_err(|_| parse_err(path, idx + 1, "bad u"))?,
            v: cols[3]
                .parse()
                .map_err(|_| parse_err(path, idx + 1, "bad v"))?,
        });
    }
    Ok(out)
}
