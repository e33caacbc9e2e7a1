//! Double-layer sliding-window estimator.
//!
//! A short window holds full inertial keyframe states (position, velocity,
//! orientation, IMU biases) plus inverse-depth landmarks and is bounded by
//! marginalizing its oldest frame into a dense prior. Keyframes that carried
//! a range to the anchor outlive the short window as position-only poses in
//! a much longer window, chained to their neighbours by the relative
//! translations the odometry estimated for them. Once the anchor position
//! is localized and frozen, those ranges pull the whole chain, and through
//! it the live window, back toward the anchor-consistent trajectory.

use std::collections::{BTreeMap, HashMap, VecDeque};

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::factors::{
    schur_marginalize, uwb_range_residual, vision_residual, AnchorEstimate, PriorFactor,
    RobustLossSpec, UwbFactorSpec,
};
use crate::geom::{quat_boxminus, Pose, Vec3};
use crate::preint::{imu_residual, preintegrate, ImuNoise, PreintegratedImu};
use crate::sim::{CameraIntrinsics, ImuSample, GRAVITY};
use crate::state::RobotState;

/// Anchor localization and freezing thresholds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorPolicy {
    /// Ranged poses required before attempting localization.
    pub min_ranges: usize,
    /// Trajectory extent over mean range required to trust the geometry.
    pub min_extent_ratio: f64,
    /// Smallest acceptable eigenvalue ratio of the direction Gram matrix;
    /// collinear motion stays below this forever and the anchor never
    /// initializes, let alone freezes.
    pub min_observability: f64,
    /// Estimate movement (m) below which a window update counts as stable.
    pub fix_delta: f64,
    /// Consecutive stable updates before the anchor is frozen.
    pub fix_checks: usize,
}

impl Default for AnchorPolicy {
    fn default() -> Self {
        Self {
            min_ranges: 25,
            min_extent_ratio: 0.5,
            min_observability: 1e-3,
            fix_delta: 0.01,
            fix_checks: 10,
        }
    }
}

/// Estimator configuration; loadable from TOML with all fields optional.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Keyframes kept with full states and landmarks.
    pub short_window: usize,
    /// Position-only ranged poses kept after leaving the short window.
    pub long_window: usize,
    /// Disable to run the same pipeline as pure visual-inertial odometry.
    pub use_uwb: bool,
    pub uwb: UwbFactorSpec,
    /// Robust scale for the ranging residual (m).
    pub range_loss_delta: f64,
    /// Robust scale for the reprojection residual (px).
    pub vision_loss_delta: f64,
    /// Pixel measurement standard deviation used for whitening.
    pub pixel_sigma: f64,
    pub imu_noise: ImuNoise,
    pub intrinsics: CameraIntrinsics,
    /// Depth floor (m) below which triangulations are rejected.
    pub min_depth: f64,
    /// Accepted Levenberg-Marquardt steps per window update.
    pub max_iterations: usize,
    pub anchor: AnchorPolicy,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            short_window: 10,
            long_window: 100,
            use_uwb: true,
            uwb: UwbFactorSpec::default(),
            range_loss_delta: 0.5,
            vision_loss_delta: 5.0,
            pixel_sigma: 1.0,
            imu_noise: ImuNoise::default(),
            intrinsics: CameraIntrinsics::default(),
            min_depth: 0.05,
            max_iterations: 8,
            anchor: AnchorPolicy::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("estimator config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.short_window < 2 {
            return Err(Error::Config("short_window must be at least 2".into()));
        }
        if self.long_window == 0 {
            return Err(Error::Config("long_window must be positive".into()));
        }
        if self.pixel_sigma <= 0.0 || self.range_loss_delta <= 0.0 || self.vision_loss_delta <= 0.0
        {
            return Err(Error::Config("sigmas and loss scales must be positive".into()));
        }
        Ok(())
    }
}

struct Frame {
    id: u64,
    state: RobotState,
    /// Integrated IMU from the previous keyframe; `None` on the first frame.
    preint: Option<PreintegratedImu>,
    obs: Vec<(u64, f64, f64)>,
    range: Option<f64>,
}

struct Landmark {
    anchor_frame: u64,
    first_uv: (f64, f64),
    inv_depth: f64,
    initialized: bool,
}

/// A pose that carried an anchor range. While its keyframe is in the short
/// window the position lives there; afterwards `pos` is its own variable.
struct RangedNode {
    frame_id: u64,
    range: f64,
    /// Odometry position snapshot taken when the range was attached; the
    /// link measurements are differences of these snapshots and never move.
    vio_pos: Vec3,
    pos: Vec3,
    in_short_window: bool,
    /// `(earlier frame_id, snapshot position difference)`.
    links: Vec<(u64, Vec3)>,
}

struct Prior {
    factor: PriorFactor,
    /// Linearization states parallel to `factor.keys`.
    lin: Vec<RobotState>,
}

struct Layout {
    frame_ids: Vec<u64>,
    lm_ids: Vec<u64>,
    node_ids: Vec<u64>,
    frame_index: HashMap<u64, usize>,
    lm_index: HashMap<u64, usize>,
    node_index: HashMap<u64, usize>,
    anchor_off: Option<usize>,
    dim: usize,
}

impl Layout {
    fn frame_off(&self, idx: usize) -> usize {
        15 * idx
    }
    fn lm_off(&self, idx: usize) -> usize {
        15 * self.frame_ids.len() + idx
    }
    fn node_off(&self, idx: usize) -> usize {
        15 * self.frame_ids.len() + self.lm_ids.len() + 3 * idx
    }
}

#[derive(Clone)]
struct Vars {
    frames: Vec<RobotState>,
    depths: Vec<f64>,
    nodes: Vec<Vec3>,
    anchor: Vec3,
}

pub struct Estimator {
    cfg: EstimatorConfig,
    frames: VecDeque<Frame>,
    landmarks: BTreeMap<u64, Landmark>,
    nodes: VecDeque<RangedNode>,
    anchor: Option<AnchorEstimate>,
    prior: Option<Prior>,
    imu_buf: Vec<ImuSample>,
    history: Vec<(f64, Pose)>,
    next_frame_id: u64,
    initial: RobotState,
    fix_ref: Option<Vec3>,
    fix_streak: usize,
}

fn state_boxminus(a: &RobotState, b: &RobotState) -> SVector<f64, 15> {
    let mut d = SVector::<f64, 15>::zeros();
    d.fixed_rows_mut::<3>(0).copy_from(&(a.p - b.p));
    d.fixed_rows_mut::<3>(3).copy_from(&(a.v - b.v));
    d.fixed_rows_mut::<3>(6).copy_from(&quat_boxminus(&a.q, &b.q));
    d.fixed_rows_mut::<3>(9).copy_from(&(a.ba - b.ba));
    d.fixed_rows_mut::<3>(12).copy_from(&(a.bw - b.bw));
    d
}

fn dyn_mat<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_fn(R, C, |i, j| m[(i, j)])
}

/// Sqrt-information of the gauge prior on the first keyframe, tangent order
/// `[δp, δv, δθ, δba, δbw]`. Position and yaw are otherwise unobservable;
/// the soft bias terms keep the early window well conditioned.
const INITIAL_PRIOR_SQRT_INFO: [f64; 5] = [1e3, 1e1, 1e3, 1e1, 1e1];

impl Estimator {
    pub fn new(cfg: EstimatorConfig, initial: RobotState) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            frames: VecDeque::new(),
            landmarks: BTreeMap::new(),
            nodes: VecDeque::new(),
            anchor: None,
            prior: None,
            imu_buf: Vec::new(),
            history: Vec::new(),
            next_frame_id: 0,
            initial,
            fix_ref: None,
            fix_streak: 0,
        })
    }

    /// Declares the anchor position known ahead of time; it is frozen
    /// immediately and never re-estimated.
    pub fn set_known_anchor(&mut self, position: Vec3) {
        let mut a = AnchorEstimate::new(position);
        a.fixed = true;
        a.covariance = Matrix3::zeros();
        self.anchor = Some(a);
    }

    pub fn anchor_estimate(&self) -> Option<&AnchorEstimate> {
        self.anchor.as_ref()
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn current_state(&self) -> Option<&RobotState> {
        self.frames.back().map(|f| &f.state)
    }

    /// Marginalized keyframe poses followed by the live window.
    pub fn trajectory(&self) -> Trajectory {
        let mut data = self.history.clone();
        data.extend(self.frames.iter().map(|f| (f.state.stamp, f.state.pose())));
        Trajectory::new(data)
    }

    pub fn add_imu(&mut self, sample: ImuSample) {
        self.imu_buf.push(sample);
    }

    /// Ingests one camera keyframe: feature observations `(landmark id, u,
    /// v)` and optionally a range to the anchor taken near the same stamp.
    pub fn add_frame(
        &mut self,
        stamp: f64,
        obs: &[(u64, f64, f64)],
        range: Option<f64>,
    ) -> Result<()> {
        let range = if self.cfg.use_uwb { range } else { None };
        let id = self.next_frame_id;
        self.next_frame_id += 1;

        if let Some(last) = self.frames.back() {
            if stamp <= last.state.stamp {
                return Err(Error::NonMonotoneTime(stamp));
            }
            let prev = last.state;
            let samples: Vec<ImuSample> = self
                .imu_buf
                .iter()
                .filter(|s| s.t >= prev.stamp - 1e-9 && s.t <= stamp + 1e-9)
                .copied()
                .collect();
            self.imu_buf.retain(|s| s.t > stamp - 1e-9);
            let pre = preintegrate(&samples, &prev.ba, &prev.bw, &self.cfg.imu_noise)?;
            let state = predict(&prev, &pre, stamp);
            self.frames.push_back(Frame {
                id,
                state,
                preint: Some(pre),
                obs: obs.to_vec(),
                range,
            });
        } else {
            let mut state = self.initial;
            state.stamp = stamp;
            self.imu_buf.retain(|s| s.t > stamp - 1e-9);
            self.frames.push_back(Frame {
                id,
                state,
                preint: None,
                obs: obs.to_vec(),
                range,
            });
            self.init_gauge_prior(id, &self.frames[0].state.clone());
        }

        self.track_landmarks(id);
        self.optimize()?;
        if range.is_some() {
            self.spawn_ranged_node(id);
        }
        if self.frames.len() > self.cfg.short_window {
            self.marginalize()?;
        }
        self.try_init_anchor();
        self.track_anchor_fixing();
        Ok(())
    }

    fn init_gauge_prior(&mut self, key: u64, state: &RobotState) {
        let mut j0 = DMatrix::zeros(15, 15);
        for axis in 0..3 {
            for (blk, w) in INITIAL_PRIOR_SQRT_INFO.iter().enumerate() {
                let i = 3 * blk + axis;
                j0[(i, i)] = *w;
            }
        }
        self.prior = Some(Prior {
            factor: PriorFactor {
                keys: vec![key],
                j0,
                r0: DVector::zeros(15),
            },
            lin: vec![*state],
        });
    }

    /// Registers this frame's observations and triangulates landmarks that
    /// just gained a second viewpoint.
    fn track_landmarks(&mut self, frame_id: u64) {
        let frame_idx = self.frames.len() - 1;
        let obs: Vec<(u64, f64, f64)> = self.frames[frame_idx].obs.clone();
        for (lm_id, u, v) in obs {
            match self.landmarks.get_mut(&lm_id) {
                None => {
                    self.landmarks.insert(
                        lm_id,
                        Landmark {
                            anchor_frame: frame_id,
                            first_uv: (u, v),
                            inv_depth: 0.0,
                            initialized: false,
                        },
                    );
                }
                Some(lm) if !lm.initialized => {
                    let anchor_frame = lm.anchor_frame;
                    let first_uv = lm.first_uv;
                    if let Some(pose_i) = self.frame_pose(anchor_frame) {
                        let pose_j = self.frames[frame_idx].state.pose();
                        if let Some(depth) = triangulate_depth(
                            &pose_i,
                            &pose_j,
                            first_uv,
                            (u, v),
                            &self.cfg.intrinsics,
                            self.cfg.min_depth,
                        ) {
                            let lm = self.landmarks.get_mut(&lm_id).unwrap();
                            lm.inv_depth = 1.0 / depth;
                            lm.initialized = true;
                        }
                    }
                }
                Some(_) => {}
            }
        }
    }

    fn frame_pose(&self, id: u64) -> Option<Pose> {
        self.frames
            .iter()
            .find(|f| f.id == id)
            .map(|f| f.state.pose())
    }

    fn spawn_ranged_node(&mut self, frame_id: u64) {
        let frame = self.frames.iter().find(|f| f.id == frame_id).unwrap();
        let range = frame.range.unwrap();
        let vio_pos = frame.state.p;
        let links: Vec<(u64, Vec3)> = self
            .nodes
            .iter()
            .rev()
            .take(self.cfg.uwb.link_horizon)
            .map(|n| (n.frame_id, vio_pos - n.vio_pos))
            .collect();
        self.nodes.push_back(RangedNode {
            frame_id,
            range,
            vio_pos,
            pos: vio_pos,
            in_short_window: true,
            links,
        });
    }

    fn anchor_ready(&self) -> bool {
        self.cfg.use_uwb && self.anchor.is_some()
    }

    fn anchor_free(&self) -> bool {
        self.cfg.use_uwb && self.anchor.map_or(false, |a| !a.fixed)
    }

    fn build_layout(&self) -> Layout {
        let frame_ids: Vec<u64> = self.frames.iter().map(|f| f.id).collect();
        let frame_index: HashMap<u64, usize> =
            frame_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

        let mut obs_count: HashMap<u64, usize> = HashMap::new();
        for f in &self.frames {
            for &(lm_id, _, _) in &f.obs {
                if let Some(lm) = self.landmarks.get(&lm_id) {
                    if f.id != lm.anchor_frame {
                        *obs_count.entry(lm_id).or_insert(0) += 1;
                    }
                }
            }
        }
        let lm_ids: Vec<u64> = self
            .landmarks
            .iter()
            .filter(|(id, lm)| {
                lm.initialized
                    && frame_index.contains_key(&lm.anchor_frame)
                    && obs_count.get(id).copied().unwrap_or(0) >= 1
            })
            .map(|(&id, _)| id)
            .collect();
        let lm_index: HashMap<u64, usize> =
            lm_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

        let node_ids: Vec<u64> = if self.anchor_ready() {
            self.nodes
                .iter()
                .filter(|n| !n.in_short_window)
                .map(|n| n.frame_id)
                .collect()
        } else {
            Vec::new()
        };
        let node_index: HashMap<u64, usize> =
            node_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

        let base = 15 * frame_ids.len() + lm_ids.len() + 3 * node_ids.len();
        let (anchor_off, dim) = if self.anchor_free() {
            (Some(base), base + 3)
        } else {
            (None, base)
        };
        Layout {
            frame_ids,
            lm_ids,
            node_ids,
            frame_index,
            lm_index,
            node_index,
            anchor_off,
            dim,
        }
    }

    fn gather(&self, layout: &Layout) -> Vars {
        Vars {
            frames: self.frames.iter().map(|f| f.state).collect(),
            depths: layout
                .lm_ids
                .iter()
                .map(|id| self.landmarks[id].inv_depth)
                .collect(),
            nodes: layout
                .node_ids
                .iter()
                .map(|id| {
                    self.nodes
                        .iter()
                        .find(|n| n.frame_id == *id)
                        .unwrap()
                        .pos
                })
                .collect(),
            anchor: self.anchor.map_or(Vec3::zeros(), |a| a.position),
        }
    }

    fn scatter(&mut self, layout: &Layout, vars: &Vars) {
        for (f, s) in self.frames.iter_mut().zip(&vars.frames) {
            f.state = *s;
        }
        for (id, &d) in layout.lm_ids.iter().zip(&vars.depths) {
            self.landmarks.get_mut(id).unwrap().inv_depth = d;
        }
        for (id, &p) in layout.node_ids.iter().zip(&vars.nodes) {
            self.nodes
                .iter_mut()
                .find(|n| n.frame_id == *id)
                .unwrap()
                .pos = p;
        }
        if layout.anchor_off.is_some() {
            self.anchor.as_mut().unwrap().position = vars.anchor;
        }
    }

    fn apply(&self, layout: &Layout, vars: &Vars, dx: &DVector<f64>) -> Vars {
        let mut out = vars.clone();
        for (i, s) in out.frames.iter_mut().enumerate() {
            let d = dx.rows(layout.frame_off(i), 15);
            *s = s.boxplus(&SVector::<f64, 15>::from_iterator(d.iter().copied()));
        }
        for (i, d) in out.depths.iter_mut().enumerate() {
            *d = (*d + dx[layout.lm_off(i)]).max(1e-4);
        }
        for (i, p) in out.nodes.iter_mut().enumerate() {
            let o = layout.node_off(i);
            *p += Vec3::new(dx[o], dx[o + 1], dx[o + 2]);
        }
        if let Some(o) = layout.anchor_off {
            out.anchor += Vec3::new(dx[o], dx[o + 1], dx[o + 2]);
        }
        out
    }

    /// Resolved position and tangent offset (if it is a variable) of a
    /// ranged node during evaluation.
    fn node_position(
        &self,
        frame_id: u64,
        layout: &Layout,
        vars: &Vars,
    ) -> Option<(Vec3, Option<usize>)> {
        if let Some(&fi) = layout.frame_index.get(&frame_id) {
            return Some((vars.frames[fi].p, Some(layout.frame_off(fi))));
        }
        if let Some(&ni) = layout.node_index.get(&frame_id) {
            return Some((vars.nodes[ni], Some(layout.node_off(ni))));
        }
        self.nodes
            .iter()
            .find(|n| n.frame_id == frame_id)
            .map(|n| (n.pos, None))
    }

    fn evaluate(
        &self,
        layout: &Layout,
        vars: &Vars,
        with_jacobian: bool,
    ) -> (f64, DMatrix<f64>, DVector<f64>) {
        let dim = if with_jacobian { layout.dim } else { 0 };
        let mut h = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        let mut cost = 0.0;

        let add = |c: &mut f64,
                       h: &mut DMatrix<f64>,
                       g: &mut DVector<f64>,
                       r: &DVector<f64>,
                       blocks: &[(usize, DMatrix<f64>)]| {
            *c += r.norm_squared();
            if !with_jacobian {
                return;
            }
            for (o1, j1) in blocks {
                g.rows_mut(*o1, j1.ncols()).gemv_tr(1.0, j1, r, 1.0);
                for (o2, j2) in blocks {
                    h.view_mut((*o1, *o2), (j1.ncols(), j2.ncols()))
                        .gemm_tr(1.0, j1, j2, 1.0);
                }
            }
        };

        if let Some(prior) = &self.prior {
            let n = prior.factor.keys.len();
            let mut dx = DVector::zeros(15 * n);
            for (i, key) in prior.factor.keys.iter().enumerate() {
                let fi = layout.frame_index[key];
                dx.rows_mut(15 * i, 15)
                    .copy_from(&state_boxminus(&vars.frames[fi], &prior.lin[i]));
            }
            let r = prior.factor.residual(&dx);
            let blocks: Vec<(usize, DMatrix<f64>)> = prior
                .factor
                .keys
                .iter()
                .enumerate()
                .map(|(i, key)| {
                    (
                        layout.frame_off(layout.frame_index[key]),
                        prior.factor.j0.columns(15 * i, 15).into_owned(),
                    )
                })
                .collect();
            add(&mut cost, &mut h, &mut g, &r, &blocks);
        }

        for (i, f) in self.frames.iter().enumerate().skip(1) {
            let pre = f.preint.as_ref().unwrap();
            let (r, jk, jk1) = imu_residual(&vars.frames[i - 1], &vars.frames[i], pre, &GRAVITY);
            let r = DVector::from_iterator(15, r.iter().copied());
            add(
                &mut cost,
                &mut h,
                &mut g,
                &r,
                &[
                    (layout.frame_off(i - 1), dyn_mat(&jk)),
                    (layout.frame_off(i), dyn_mat(&jk1)),
                ],
            );
        }

        let vision_loss = RobustLossSpec::new(self.cfg.vision_loss_delta);
        for (fi, f) in self.frames.iter().enumerate() {
            for &(lm_id, u, v) in &f.obs {
                let Some(&li) = layout.lm_index.get(&lm_id) else {
                    continue;
                };
                let lm = &self.landmarks[&lm_id];
                if lm.anchor_frame == f.id {
                    continue;
                }
                let ai = layout.frame_index[&lm.anchor_frame];
                let Some((r, ji, jj, jl)) = vision_residual(
                    &vars.frames[ai].pose(),
                    &vars.frames[fi].pose(),
                    vars.depths[li],
                    lm.first_uv,
                    (u, v),
                    &self.cfg.intrinsics,
                ) else {
                    continue;
                };
                let s = vision_loss.weight(r.norm()).sqrt() / self.cfg.pixel_sigma;
                let rw = DVector::from_iterator(2, r.iter().map(|x| x * s));
                let map_pose = |j: &SMatrix<f64, 2, 6>| {
                    // camera pose tangent [δp, δθ] into the 15-dof frame
                    // tangent columns [0..3) and [6..9)
                    let mut m = DMatrix::zeros(2, 15);
                    for row in 0..2 {
                        for c in 0..3 {
                            m[(row, c)] = s * j[(row, c)];
                            m[(row, 6 + c)] = s * j[(row, 3 + c)];
                        }
                    }
                    m
                };
                let jl = DMatrix::from_iterator(2, 1, jl.iter().map(|x| x * s));
                add(
                    &mut cost,
                    &mut h,
                    &mut g,
                    &rw,
                    &[
                        (layout.frame_off(ai), map_pose(&ji)),
                        (layout.frame_off(fi), map_pose(&jj)),
                        (layout.lm_off(li), jl),
                    ],
                );
            }
        }

        if self.anchor_ready() {
            let range_loss = RobustLossSpec::new(self.cfg.range_loss_delta);
            let s_link = self.cfg.uwb.gamma_s.sqrt();
            for node in &self.nodes {
                let Some((p, off)) = self.node_position(node.frame_id, layout, vars) else {
                    continue;
                };
                if let Ok((r, jp, ja)) = uwb_range_residual(&p, &vars.anchor, node.range) {
                    let s = (self.cfg.uwb.gamma_r * range_loss.weight(r)).sqrt();
                    let rw = DVector::from_element(1, s * r);
                    let mut blocks = Vec::new();
                    if let Some(o) = off {
                        blocks.push((o, DMatrix::from_iterator(1, 3, jp.iter().map(|x| x * s))));
                    }
                    if let Some(o) = layout.anchor_off {
                        blocks.push((o, DMatrix::from_iterator(1, 3, ja.iter().map(|x| x * s))));
                    }
                    add(&mut cost, &mut h, &mut g, &rw, &blocks);
                }
                for (other_id, z) in &node.links {
                    let Some((p_other, off_other)) = self.node_position(*other_id, layout, vars)
                    else {
                        continue;
                    };
                    let r = (p - p_other) - z;
                    let rw = DVector::from_iterator(3, r.iter().map(|x| x * s_link));
                    let mut blocks = Vec::new();
                    let eye = DMatrix::from_diagonal_element(3, 3, s_link);
                    if let Some(o) = off {
                        blocks.push((o, eye.clone()));
                    }
                    if let Some(o) = off_other {
                        blocks.push((o, -eye));
                    }
                    add(&mut cost, &mut h, &mut g, &rw, &blocks);
                }
            }
        }

        (cost, h, g)
    }

    fn optimize(&mut self) -> Result<()> {
        if self.frames.len() < 2 {
            return Ok(());
        }
        // refresh preintegrations whose bias linearization drifted too far
        for i in 1..self.frames.len() {
            let bias = {
                let prev = &self.frames[i - 1].state;
                (prev.ba, prev.bw)
            };
            let f = &mut self.frames[i];
            let pre = f.preint.take().unwrap();
            f.preint = Some(pre.bias_correct(&bias.0, &bias.1));
        }

        let layout = self.build_layout();
        let mut vars = self.gather(&layout);
        let (mut cost, mut h, mut g) = self.evaluate(&layout, &vars, true);
        let mut lambda = 1e-4;
        let mut accepted = 0;
        while accepted < self.cfg.max_iterations {
            let mut damped = h.clone();
            for i in 0..layout.dim {
                let d = damped[(i, i)];
                damped[(i, i)] = d + lambda * d.max(1e-6) + 1e-9;
            }
            let step = match damped.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    lambda *= 10.0;
                    if lambda > 1e8 {
                        break;
                    }
                    continue;
                }
            };
            let trial = self.apply(&layout, &vars, &step);
            let (trial_cost, _, _) = self.evaluate(&layout, &trial, false);
            if trial_cost.is_finite() && trial_cost < cost {
                let rel = (cost - trial_cost) / cost.max(1e-300);
                vars = trial;
                accepted += 1;
                lambda = (lambda / 10.0).max(1e-9);
                if rel < 1e-9 {
                    break;
                }
                let (c, nh, ng) = self.evaluate(&layout, &vars, true);
                cost = c;
                h = nh;
                g = ng;
            } else {
                // cannot improve: either converged or the damping cap was
                // hit; keep the best estimate either way
                lambda *= 10.0;
                if lambda > 1e8 {
                    break;
                }
            }
        }
        self.scatter(&layout, &vars);
        Ok(())
    }

    /// Folds the oldest keyframe's constraints into a new prior over the
    /// frames it touched, then drops the frame. The prior absorbs the old
    /// prior, the inertial link to the next frame and the reprojection
    /// residuals of every landmark anchored to the departing frame, whose
    /// inverse depths are marginalized along with the frame. Those landmark
    /// ids start over from their next observation, so their information is
    /// never counted twice. The frame's range, if any, survives as a
    /// long-window node.
    fn marginalize(&mut self) -> Result<()> {
        let f0_id = self.frames[0].id;
        let f1_id = self.frames[1].id;

        let lm_marg: Vec<u64> = self
            .landmarks
            .iter()
            .filter(|(id, lm)| {
                lm.anchor_frame == f0_id
                    && lm.initialized
                    && self
                        .frames
                        .iter()
                        .skip(1)
                        .any(|f| f.obs.iter().any(|o| o.0 == **id))
            })
            .map(|(&id, _)| id)
            .collect();
        let lm_off: HashMap<u64, usize> = lm_marg
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, 15 + i))
            .collect();
        let drop_dim = 15 + lm_marg.len();

        let mut keys: Vec<u64> = self
            .prior
            .as_ref()
            .map(|p| p.factor.keys.clone())
            .unwrap_or_default();
        if !keys.contains(&f1_id) {
            keys.push(f1_id);
        }
        for f in self.frames.iter().skip(1) {
            if !keys.contains(&f.id) && f.obs.iter().any(|o| lm_off.contains_key(&o.0)) {
                keys.push(f.id);
            }
        }
        keys.retain(|&k| k != f0_id);
        keys.sort_unstable();

        let offset_of = |id: u64| -> usize {
            if id == f0_id {
                0
            } else {
                drop_dim + 15 * keys.iter().position(|&k| k == id).unwrap()
            }
        };
        let state_of = |id: u64| -> &RobotState {
            &self.frames.iter().find(|f| f.id == id).unwrap().state
        };

        let dim = drop_dim + 15 * keys.len();
        let mut h = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        let add = |h: &mut DMatrix<f64>,
                       g: &mut DVector<f64>,
                       r: &DVector<f64>,
                       blocks: &[(usize, DMatrix<f64>)]| {
            for (o1, j1) in blocks {
                g.rows_mut(*o1, j1.ncols()).gemv_tr(1.0, j1, r, 1.0);
                for (o2, j2) in blocks {
                    h.view_mut((*o1, *o2), (j1.ncols(), j2.ncols()))
                        .gemm_tr(1.0, j1, j2, 1.0);
                }
            }
        };

        if let Some(prior) = &self.prior {
            let n = prior.factor.keys.len();
            let mut dx = DVector::zeros(15 * n);
            for (i, key) in prior.factor.keys.iter().enumerate() {
                dx.rows_mut(15 * i, 15)
                    .copy_from(&state_boxminus(state_of(*key), &prior.lin[i]));
            }
            let r = prior.factor.residual(&dx);
            let blocks: Vec<(usize, DMatrix<f64>)> = prior
                .factor
                .keys
                .iter()
                .enumerate()
                .map(|(i, key)| (offset_of(*key), prior.factor.j0.columns(15 * i, 15).into_owned()))
                .collect();
            add(&mut h, &mut g, &r, &blocks);
        }

        {
            let pre = self.frames[1].preint.as_ref().unwrap();
            let (r, jk, jk1) = imu_residual(state_of(f0_id), state_of(f1_id), pre, &GRAVITY);
            let r = DVector::from_iterator(15, r.iter().copied());
            add(
                &mut h,
                &mut g,
                &r,
                &[(0, dyn_mat(&jk)), (offset_of(f1_id), dyn_mat(&jk1))],
            );
        }

        let vision_loss = RobustLossSpec::new(self.cfg.vision_loss_delta);
        let f0_pose = self.frames[0].state.pose();
        for f in self.frames.iter().skip(1) {
            for &(lm_id, u, v) in &f.obs {
                let Some(&lo) = lm_off.get(&lm_id) else {
                    continue;
                };
                let lm = &self.landmarks[&lm_id];
                let Some((r, ji, jj, jl)) = vision_residual(
                    &f0_pose,
                    &f.state.pose(),
                    lm.inv_depth,
                    lm.first_uv,
                    (u, v),
                    &self.cfg.intrinsics,
                ) else {
                    continue;
                };
                let s = vision_loss.weight(r.norm()).sqrt() / self.cfg.pixel_sigma;
                let rw = DVector::from_iterator(2, r.iter().map(|x| x * s));
                let map_pose = |j: &SMatrix<f64, 2, 6>| {
                    // camera pose tangent [δp, δθ] into the 15-dof frame
                    // tangent columns [0..3) and [6..9)
                    let mut m = DMatrix::zeros(2, 15);
                    for row in 0..2 {
                        for c in 0..3 {
                            m[(row, c)] = s * j[(row, c)];
                            m[(row, 6 + c)] = s * j[(row, 3 + c)];
                        }
                    }
                    m
                };
                let jl = DMatrix::from_iterator(2, 1, jl.iter().map(|x| x * s));
                add(
                    &mut h,
                    &mut g,
                    &rw,
                    &[
                        (0, map_pose(&ji)),
                        (offset_of(f.id), map_pose(&jj)),
                        (lo, jl),
                    ],
                );
            }
        }

        let b = -g;
        let (h_red, b_red) = schur_marginalize(&h, &b, drop_dim)?;
        let lin: Vec<RobotState> = keys.iter().map(|&k| *state_of(k)).collect();
        self.prior = Some(Prior {
            factor: PriorFactor::from_normal_equations(keys, &h_red, &b_red)?,
            lin,
        });

        // landmarks anchored here are gone: the marginalized ones live on in
        // the prior, and a re-observed id starts a fresh track. Observations
        // already folded into the prior are stripped so they are never reused.
        self.landmarks.retain(|_, lm| lm.anchor_frame != f0_id);
        for f in self.frames.iter_mut() {
            f.obs.retain(|o| !lm_off.contains_key(&o.0));
        }

        let f0 = self.frames.pop_front().unwrap();
        self.history.push((f0.state.stamp, f0.state.pose()));
        if let Some(node) = self.nodes.iter_mut().find(|n| n.frame_id == f0_id) {
            node.in_short_window = false;
            node.pos = f0.state.p;
        }
        while self
            .nodes
            .iter()
            .filter(|n| !n.in_short_window)
            .count()
            > self.cfg.long_window
        {
            self.nodes.pop_front();
        }
        Ok(())
    }

    fn ranged_points(&self) -> Vec<(Vec3, f64)> {
        self.nodes
            .iter()
            .map(|n| {
                let p = if n.in_short_window {
                    self.frames
                        .iter()
                        .find(|f| f.id == n.frame_id)
                        .map_or(n.pos, |f| f.state.p)
                } else {
                    n.pos
                };
                (p, n.range)
            })
            .collect()
    }

    fn try_init_anchor(&mut self) {
        if !self.cfg.use_uwb || self.anchor.is_some() {
            return;
        }
        let data = self.ranged_points();
        if data.len() < self.cfg.anchor.min_ranges {
            return;
        }
        if extent_ratio(&data) < self.cfg.anchor.min_extent_ratio {
            return;
        }
        if let Ok(pos) = localize_anchor(&data, self.cfg.anchor.min_observability) {
            let mut a = AnchorEstimate::new(pos);
            a.covariance = Matrix3::identity() * 0.01;
            self.anchor = Some(a);
            self.fix_ref = None;
            self.fix_streak = 0;
        }
    }

    /// Freezes the anchor after it has stayed put for enough consecutive
    /// window updates with healthy geometry behind it.
    fn track_anchor_fixing(&mut self) {
        if !self.anchor_free() {
            return;
        }
        let pos = self.anchor.unwrap().position;
        match self.fix_ref {
            Some(prev) if (pos - prev).norm() < self.cfg.anchor.fix_delta => {
                self.fix_streak += 1;
            }
            _ => self.fix_streak = 0,
        }
        self.fix_ref = Some(pos);
        if self.fix_streak < self.cfg.anchor.fix_checks {
            return;
        }
        let data = self.ranged_points();
        if extent_ratio(&data) < self.cfg.anchor.min_extent_ratio {
            return;
        }
        if direction_observability(&data, &pos) < self.cfg.anchor.min_observability {
            return;
        }
        self.anchor.as_mut().unwrap().fixed = true;
    }
}

fn predict(prev: &RobotState, pre: &PreintegratedImu, stamp: f64) -> RobotState {
    let (alpha, beta, gamma) = pre.corrected_terms(&prev.ba, &prev.bw);
    let dt = pre.dt_total;
    let r0 = prev.q.to_rotation_matrix().into_inner();
    RobotState {
        p: prev.p + prev.v * dt + GRAVITY * (0.5 * dt * dt) + r0 * alpha,
        v: prev.v + GRAVITY * dt + r0 * beta,
        q: prev.q * gamma,
        ba: prev.ba,
        bw: prev.bw,
        stamp,
    }
}

/// Depth of the pixel ray from `pose_i` triangulated against a second view;
/// `None` when the rays are near parallel or the depth is implausible.
fn triangulate_depth(
    pose_i: &Pose,
    pose_j: &Pose,
    uv_i: (f64, f64),
    uv_j: (f64, f64),
    intrinsics: &CameraIntrinsics,
    min_depth: f64,
) -> Option<f64> {
    let r_i = pose_i.rotation * intrinsics.back_project(uv_i.0, uv_i.1);
    let r_j = pose_j.rotation * intrinsics.back_project(uv_j.0, uv_j.1);
    let dp = pose_j.translation - pose_i.translation;
    if dp.norm() < 1e-4 {
        return None;
    }
    // least-squares ray intersection: min over (s, t) of |p_i + s r_i - p_j - t r_j|
    let a11 = r_i.dot(&r_i);
    let a12 = -r_i.dot(&r_j);
    let a22 = r_j.dot(&r_j);
    let b1 = r_i.dot(&dp);
    let b2 = -r_j.dot(&dp);
    let det = a11 * a22 - a12 * a12;
    if det.abs() < 1e-9 {
        return None;
    }
    let s = (b1 * a22 - b2 * a12) / det;
    (s > min_depth && s < 1e4).then_some(s)
}

fn extent_ratio(data: &[(Vec3, f64)]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut lo = data[0].0;
    let mut hi = data[0].0;
    let mut mean_range = 0.0;
    for (p, d) in data {
        lo = lo.inf(p);
        hi = hi.sup(p);
        mean_range += d;
    }
    mean_range /= data.len() as f64;
    if mean_range < 1e-9 {
        return 0.0;
    }
    (hi - lo).norm() / mean_range
}

fn direction_observability(data: &[(Vec3, f64)], anchor: &Vec3) -> f64 {
    let mut gram = Matrix3::<f64>::zeros();
    let mut n = 0.0;
    for (p, _) in data {
        let d = p - anchor;
        let norm = d.norm();
        if norm < 1e-9 {
            continue;
        }
        let u = d / norm;
        gram += u * u.transpose();
        n += 1.0;
    }
    if n < 3.0 {
        return 0.0;
    }
    gram /= n;
    let eig = gram.symmetric_eigenvalues();
    let max = eig.amax();
    if max <= 0.0 {
        return 0.0;
    }
    eig.min() / max
}

/// Least-squares anchor position from ranged positions, multi-start
/// Gauss-Newton over `Σ (‖p_i − a‖ − d_i)²`.
///
/// Fails with [`Error::DegenerateGeometry`] when the solution geometry is
/// unobservable, as it is for collinear motion where a whole circle of
/// anchor positions fits the ranges equally well.
pub fn localize_anchor(data: &[(Vec3, f64)], min_observability: f64) -> Result<Vec3> {
    if data.len() < 4 {
        return Err(Error::EmptyStream);
    }
    let centroid: Vec3 = data.iter().map(|(p, _)| p).sum::<Vec3>() / data.len() as f64;
    let mean_range: f64 = data.iter().map(|(_, d)| d).sum::<f64>() / data.len() as f64;
    let scale = mean_range.max(1e-3);
    let starts = [
        centroid,
        centroid + Vec3::new(scale, 0.0, 0.0),
        centroid - Vec3::new(scale, 0.0, 0.0),
        centroid + Vec3::new(0.0, scale, 0.0),
        centroid - Vec3::new(0.0, scale, 0.0),
        centroid + Vec3::new(0.0, 0.0, scale),
        centroid - Vec3::new(0.0, 0.0, scale),
    ];

    let cost = |a: &Vec3| -> f64 {
        data.iter()
            .map(|(p, d)| {
                let r = (p - a).norm() - d;
                r * r
            })
            .sum()
    };

    let mut best: Option<(f64, Vec3)> = None;
    for start in starts {
        let mut a = start;
        let mut lambda = 1e-6;
        let mut c = cost(&a);
        for _ in 0..60 {
            let mut jtj = Matrix3::<f64>::zeros();
            let mut jtr = Vec3::zeros();
            for (p, d) in data {
                let diff = p - a;
                let norm = diff.norm();
                if norm < 1e-9 {
                    continue;
                }
                // d residual / d anchor = -(p - a)/‖p - a‖
                let j = -diff / norm;
                let r = norm - d;
                jtj += j * j.transpose();
                jtr += j * r;
            }
            let mut damped = jtj;
            for i in 0..3 {
                damped[(i, i)] += lambda * damped[(i, i)].max(1e-9);
            }
            let Some(step) = damped.try_inverse().map(|inv| inv * (-jtr)) else {
                break;
            };
            let trial = a + step;
            let tc = cost(&trial);
            if tc < c {
                a = trial;
                lambda = (lambda / 10.0).max(1e-12);
                if (c - tc) / c.max(1e-300) < 1e-12 {
                    c = tc;
                    break;
                }
                c = tc;
            } else {
                lambda *= 10.0;
                if lambda > 1e10 {
                    break;
                }
            }
        }
        if best.map_or(true, |(bc, _)| c < bc) {
            best = Some((c, a));
        }
    }
    let (_, a) = best.unwrap();
    if direction_observability(data, &a) < min_observability {
        return Err(Error::DegenerateGeometry(
            "ranged positions do not constrain the anchor".into(),
        ));
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{
        gen_landmarks, gen_trajectory, synth_features, synth_imu, synth_uwb, NoiseSpec,
        OrientationMode, TrajectoryShape, TrajectorySpec,
    };

    fn zero_noise() -> NoiseSpec {
        NoiseSpec {
            accel_noise_density: 0.0,
            gyro_noise_density: 0.0,
            pixel_sigma: 0.0,
            uwb_sigma: 0.0,
            ..NoiseSpec::default()
        }
    }

    fn circle_spec(duration: f64) -> TrajectorySpec {
        TrajectorySpec {
            shape: TrajectoryShape::Circle {
                center: [0.0, 0.0, 1.0],
                radius: 2.0,
                laps: 1.0,
            },
            duration,
            imu_rate: 500.0,
            cam_rate: 10.0,
            uwb_rate: 5.0,
            orientation: OrientationMode::FacingVelocity,
        }
    }

    /// Per-camera-frame observation lists from the simulator's tracks.
    fn obs_by_frame(
        tracks: &[crate::sim::FeatureTrack],
        n_frames: usize,
    ) -> Vec<Vec<(u64, f64, f64)>> {
        let mut out = vec![Vec::new(); n_frames];
        for tr in tracks {
            for &(fi, u, v) in &tr.observations {
                out[fi].push((tr.landmark_id, u, v));
            }
        }
        out
    }

    fn run_vio(
        spec: &TrajectorySpec,
        noise: &NoiseSpec,
        cfg: EstimatorConfig,
        anchor: Option<Vec3>,
    ) -> Estimator {
        let traj = gen_trajectory(spec).unwrap();
        let landmarks = gen_landmarks(
            &Vec3::new(0.0, 0.0, 1.0),
            4.0,
            9.0,
            (-1.0, 3.0),
            160,
            noise.rng_seed,
        );
        let intr = cfg.intrinsics;
        let tracks = synth_features(&traj, &landmarks, &intr, noise).unwrap();
        let imu = synth_imu(&traj, noise);
        let ranges = anchor.map(|a| synth_uwb(&traj, &a, noise, "anchor"));

        let k0 = &traj.samples[0];
        let initial = RobotState {
            p: k0.pos,
            v: k0.vel,
            q: k0.quat,
            ba: Vec3::zeros(),
            bw: Vec3::zeros(),
            stamp: 0.0,
        };
        let mut est = Estimator::new(cfg, initial).unwrap();
        if let Some(a) = anchor {
            est.set_known_anchor(a);
        }

        let cam_stamps = traj.camera_stamps();
        let obs = obs_by_frame(&tracks, cam_stamps.len());
        let mut imu_iter = imu.into_iter().peekable();
        let mut range_iter = ranges.map(|r| r.into_iter().peekable());
        for (fi, &t) in cam_stamps.iter().enumerate() {
            while let Some(s) = imu_iter.peek() {
                if s.t <= t + 1e-9 {
                    est.add_imu(*s);
                    imu_iter.next();
                } else {
                    break;
                }
            }
            let mut range = None;
            if let Some(it) = range_iter.as_mut() {
                while let Some(r) = it.peek() {
                    if r.t <= t + 1e-9 {
                        range = Some(r.distance);
                        it.next();
                    } else {
                        break;
                    }
                }
            }
            est.add_frame(t, &obs[fi], range).unwrap();
        }
        est
    }

    fn max_position_error(est: &Estimator, spec: &TrajectorySpec) -> f64 {
        est.trajectory()
            .iter()
            .map(|(t, pose)| {
                let (gt, _, _) = spec.eval_position(*t);
                (pose.translation - gt).norm()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_noise_circle_tracks_ground_truth() {
        let spec = circle_spec(6.0);
        let cfg = EstimatorConfig {
            use_uwb: false,
            ..EstimatorConfig::default()
        };
        let est = run_vio(&spec, &zero_noise(), cfg, None);
        let err = max_position_error(&est, &spec);
        assert!(err < 1e-3, "max position error {err}");
        assert_eq!(est.trajectory().len(), 61);
    }

    #[test]
    fn zero_noise_circle_with_known_anchor() {
        let spec = circle_spec(6.0);
        let est = run_vio(
            &spec,
            &zero_noise(),
            EstimatorConfig::default(),
            Some(Vec3::new(4.0, -2.0, 0.5)),
        );
        let err = max_position_error(&est, &spec);
        assert!(err < 1e-3, "max position error {err}");
        assert!(est.anchor_estimate().unwrap().fixed);
    }

    #[test]
    fn anchor_self_localizes_on_varied_motion() {
        let spec = TrajectorySpec {
            shape: TrajectoryShape::Lissajous {
                amp: [2.0, 1.5, 0.6],
                freq: [0.25, 0.17, 0.31],
                phase: [0.0, 1.0, 0.5],
            },
            duration: 10.0,
            imu_rate: 500.0,
            cam_rate: 10.0,
            uwb_rate: 5.0,
            orientation: OrientationMode::Identity,
        };
        let anchor = Vec3::new(3.0, 2.0, -1.0);
        let traj = gen_trajectory(&spec).unwrap();
        let noise = zero_noise();
        let ranges = synth_uwb(&traj, &anchor, &noise, "anchor");
        // estimator-independent check of the localization routine on exact
        // positions and ranges
        let data: Vec<(Vec3, f64)> = ranges
            .iter()
            .map(|r| {
                let (p, _, _) = spec.eval_position(r.t);
                (p, r.distance)
            })
            .collect();
        let a = localize_anchor(&data, 1e-3).unwrap();
        assert!((a - anchor).norm() < 1e-6, "anchor error {}", (a - anchor).norm());
    }

    #[test]
    fn collinear_motion_never_localizes_anchor() {
        let data: Vec<(Vec3, f64)> = (0..50)
            .map(|i| {
                let p = Vec3::new(i as f64 * 0.1, 0.0, 0.0);
                ((p), (p - Vec3::new(2.0, 3.0, 1.0)).norm())
            })
            .collect();
        assert!(matches!(
            localize_anchor(&data, 1e-3),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn triangulation_recovers_depth() {
        let intr = CameraIntrinsics::default();
        let p_w = Vec3::new(0.4, -0.2, 6.0);
        let pose_i = Pose::identity();
        let pose_j = Pose::new(crate::geom::Quat::identity(), Vec3::new(0.5, 0.0, 0.0));
        let uv_i = intr.project(&p_w).unwrap();
        let uv_j = intr.project(&pose_j.inverse().transform(&p_w)).unwrap();
        let d = triangulate_depth(&pose_i, &pose_j, uv_i, uv_j, &intr, 0.05).unwrap();
        assert!((d - 6.0).abs() < 1e-9);
        // no baseline: rejected
        assert!(triangulate_depth(&pose_i, &pose_i, uv_i, uv_i, &intr, 0.05).is_none());
    }

    #[test]
    fn non_monotone_frame_stamp_rejected() {
        let mut est = Estimator::new(EstimatorConfig::default(), RobotState::at_rest(0.0)).unwrap();
        est.add_frame(0.0, &[], None).unwrap();
        assert!(matches!(
            est.add_frame(0.0, &[], None),
            Err(Error::NonMonotoneTime(_))
        ));
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let cfg = EstimatorConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back = EstimatorConfig::from_toml(&text).unwrap();
        assert_eq!(back.short_window, cfg.short_window);
        assert_eq!(back.uwb.link_horizon, cfg.uwb.link_horizon);

        let partial = EstimatorConfig::from_toml("short_window = 5\n").unwrap();
        assert_eq!(partial.short_window, 5);
        assert_eq!(partial.long_window, cfg.long_window);

        assert!(EstimatorConfig::from_toml("short_window = 1\n").is_err());
        assert!(EstimatorConfig::from_toml("not toml ===").is_err());
    }
}
