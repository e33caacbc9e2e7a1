//! Relative frame alignment between two robots that localized the same
//! static anchor and exchanged two distance measurements.
//!
//! Each robot estimates its trajectory and the shared anchor position in
//! its own gravity-aligned world frame, so the frames differ by a yaw
//! rotation and a translation only. Identifying the anchor pins the
//! translation as a function of yaw; one inter-robot range then constrains
//! the yaw to at most two values and a second range picks between them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{exp_quat, Quat, Vec3};
use crate::io::fmt_f64;

/// Yaw-plus-translation mapping of peer-frame coordinates into own-frame
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTransform {
    pub yaw: f64,
    pub translation: Vec3,
}

impl FrameTransform {
    pub fn rotation(&self) -> Quat {
        exp_quat(&Vec3::new(0.0, 0.0, self.yaw))
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        rot_z(self.yaw, p) + self.translation
    }
}

/// One rendezvous event: both robots' current position estimates (each in
/// its own frame) and the measured distance between them.
#[derive(Debug, Clone, Copy)]
pub struct RendezvousObservation {
    pub stamp: f64,
    pub own_pos: Vec3,
    pub peer_pos: Vec3,
    pub inter_range: f64,
}

fn rot_z(yaw: f64, p: &Vec3) -> Vec3 {
    let (s, c) = yaw.sin_cos();
    Vec3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z)
}

/// Translation completing a candidate yaw so the two anchor estimates
/// coincide.
fn translation_for(yaw: f64, own_anchor: &Vec3, peer_anchor: &Vec3) -> Vec3 {
    own_anchor - rot_z(yaw, peer_anchor)
}

fn range_residual(
    t: &FrameTransform,
    own_anchor: &Vec3,
    peer_anchor: &Vec3,
    obs: &RendezvousObservation,
) -> f64 {
    let v = obs.own_pos - own_anchor;
    let u = obs.peer_pos - peer_anchor;
    (v - rot_z(t.yaw, &u)).norm() - obs.inter_range
}

/// Solves the own-from-peer transform from the shared anchor and two
/// inter-robot ranges.
///
/// The first range admits at most two yaw solutions; the second selects
/// the one it is consistent with (tolerance `max(3·range_sigma, 0.05 m)`).
/// When both candidates fit, the geometry genuinely cannot be resolved and
/// [`Error::AmbiguousGeometry`] is raised; when neither fits,
/// [`Error::InconsistentMeasurements`]. With `range_sigma > 0` the closed
/// form is followed by a joint Gauss-Newton refinement of yaw and planar
/// translation over both ranges and the anchor identity.
pub fn estimate_transform(
    own_anchor: &Vec3,
    peer_anchor: &Vec3,
    obs1: &RendezvousObservation,
    obs2: &RendezvousObservation,
    range_sigma: f64,
) -> Result<FrameTransform> {
    let v = obs1.own_pos - own_anchor;
    let u = obs1.peer_pos - peer_anchor;
    let dz = v.z - u.z;
    let d_xy_sq = obs1.inter_range * obs1.inter_range - dz * dz;
    if d_xy_sq < -(3.0 * range_sigma).max(0.05).powi(2) {
        return Err(Error::InconsistentMeasurements);
    }
    let d_xy_sq = d_xy_sq.max(0.0);

    // ‖v − Rz(θ)u‖² = d² reduces in the plane to a·cosθ + b·sinθ = c
    let a = v.x * u.x + v.y * u.y;
    let b = v.y * u.x - v.x * u.y;
    let c = (u.x * u.x + u.y * u.y + v.x * v.x + v.y * v.y - d_xy_sq) / 2.0;
    let amp = (a * a + b * b).sqrt();
    if amp < 1e-9 {
        return Err(Error::DegenerateMotion);
    }
    let ratio = c / amp;
    let slack = (3.0 * range_sigma).max(0.05);
    if ratio.abs() > 1.0 + slack / amp.max(1e-9) {
        return Err(Error::InconsistentMeasurements);
    }
    let phi = b.atan2(a);
    let half = ratio.clamp(-1.0, 1.0).acos();
    let candidates = [phi + half, phi - half];

    let tol = (3.0 * range_sigma).max(0.05);
    let score = |yaw: f64| -> f64 {
        let t = FrameTransform {
            yaw,
            translation: translation_for(yaw, own_anchor, peer_anchor),
        };
        range_residual(&t, own_anchor, peer_anchor, obs2).abs()
    };
    let r0 = score(candidates[0]);
    let r1 = score(candidates[1]);
    let distinct = angle_diff(candidates[0], candidates[1]).abs() > 1e-6;
    let yaw = match (r0 <= tol, r1 <= tol) {
        (true, true) if distinct => return Err(Error::AmbiguousGeometry),
        (true, _) => candidates[0],
        (false, true) => candidates[1],
        (false, false) => return Err(Error::InconsistentMeasurements),
    };

    let mut t = FrameTransform {
        yaw,
        translation: translation_for(yaw, own_anchor, peer_anchor),
    };
    if range_sigma > 0.0 {
        t = refine(t, own_anchor, peer_anchor, &[*obs1, *obs2], range_sigma);
    }
    Ok(t)
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let mut d = a - b;
    while d > std::f64::consts::PI {
        d -= 2.0 * std::f64::consts::PI;
    }
    while d < -std::f64::consts::PI {
        d += 2.0 * std::f64::consts::PI;
    }
    d
}

/// Gauss-Newton over `(yaw, t_x, t_y)`: planar anchor identity plus the
/// inter-robot ranges; `t_z` stays pinned by the anchor heights.
fn refine(
    init: FrameTransform,
    own_anchor: &Vec3,
    peer_anchor: &Vec3,
    obs: &[RendezvousObservation],
    range_sigma: f64,
) -> FrameTransform {
    let anchor_sigma = 0.05;
    let mut x = [init.yaw, init.translation.x, init.translation.y];
    let tz = init.translation.z;

    let residuals = |x: &[f64; 3]| -> Vec<f64> {
        let t = FrameTransform {
            yaw: x[0],
            translation: Vec3::new(x[1], x[2], tz),
        };
        let ra = (t.apply(peer_anchor) - own_anchor) / anchor_sigma;
        let mut r = vec![ra.x, ra.y];
        for o in obs {
            let mapped = t.apply(&o.peer_pos);
            r.push(((o.own_pos - mapped).norm() - o.inter_range) / range_sigma);
        }
        r
    };

    let mut cost: f64 = residuals(&x).iter().map(|r| r * r).sum();
    for _ in 0..30 {
        let h = 1e-7;
        let r0 = residuals(&x);
        let n = r0.len();
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        let mut jac = vec![[0.0; 3]; n];
        for col in 0..3 {
            let mut xp = x;
            xp[col] += h;
            let rp = residuals(&xp);
            for (i, row) in jac.iter_mut().enumerate() {
                row[col] = (rp[i] - r0[i]) / h;
            }
        }
        for (i, row) in jac.iter().enumerate() {
            for p in 0..3 {
                jtr[p] += row[p] * r0[i];
                for q in 0..3 {
                    jtj[p][q] += row[p] * row[q];
                }
            }
        }
        let m = nalgebra::Matrix3::from_fn(|i, j| jtj[i][j])
            + nalgebra::Matrix3::identity() * 1e-9;
        let Some(inv) = m.try_inverse() else { break };
        let step = inv * nalgebra::Vector3::new(-jtr[0], -jtr[1], -jtr[2]);
        let trial = [x[0] + step[0], x[1] + step[1], x[2] + step[2]];
        let trial_cost: f64 = residuals(&trial).iter().map(|r| r * r).sum();
        if trial_cost < cost {
            let rel = (cost - trial_cost) / cost.max(1e-300);
            x = trial;
            cost = trial_cost;
            if rel < 1e-12 {
                break;
            }
        } else {
            break;
        }
    }
    FrameTransform {
        yaw: x[0],
        translation: Vec3::new(x[1], x[2], tz),
    }
}

/// Rendezvous payload a robot shares with a peer: its current position and
/// its anchor estimate, both in its own frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RendezvousMsg {
    pub stamp: f64,
    pub position: Vec3,
    pub anchor: Vec3,
}

/// Writes rendezvous messages as `stamp,px,py,pz,ax,ay,az` CSV.
pub fn write_rendezvous_msgs(path: &Path, msgs: &[RendezvousMsg]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# stamp,px,py,pz,ax,ay,az")?;
    for m in msgs {
        let f = [
            m.stamp, m.position.x, m.position.y, m.position.z, m.anchor.x, m.anchor.y, m.anchor.z,
        ];
        let line: Vec<String> = f.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn load_rendezvous_msgs(path: &Path) -> Result<Vec<RendezvousMsg>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("bad float {s:?}"),
            })
        };
        let cols: Vec<&str> = trimmed.split(',').collect();
        if cols.len() != 7 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("expected 7 columns, got {}", cols.len()),
            });
        }
        let v: Vec<f64> = cols.iter().map(|c| parse(c)).collect::<Result<_>>()?;
        out.push(RendezvousMsg {
            stamp: v[0],
            position: Vec3::new(v[1], v[2], v[3]),
            anchor: Vec3::new(v[4], v[5], v[6]),
        });
    }
    Ok(out)
}
