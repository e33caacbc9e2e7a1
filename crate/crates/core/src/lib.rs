//! Ranging-aided visual-inertial estimation.
//!
//! The crate combines a sliding-window visual-inertial back-end with
//! ultra-wideband ranging to a single static anchor. A short window carries
//! full states (pose, velocity, IMU biases) and landmark inverse depths; a
//! much longer position-only window keeps every pose that observed an anchor
//! range, tying the trajectory to the anchor and correcting accumulated
//! odometry drift. A rendezvous module recovers the 4-DOF transform between
//! two robots sharing the anchor from just two inter-robot ranges.
//!
//! Top-level layout:
//! - [`geom`]: quaternion/pose algebra and conventions
//! - [`sim`]: deterministic trajectory and sensor simulation
//! - [`preint`]: IMU preintegration between camera frames
//! - [`factors`]: residual blocks (ranging, relative links, vision,
//!   IMU, marginalization prior) and the robust loss
//! - [`estimator`]: the double-window sliding estimator
//! - [`rendezvous`]: inter-robot transform estimation
//! - [`eval`]: trajectory metrics (ATE, start-to-end error)
//! - [`io`]: trajectory and measurement file formats
//! - [`scenario`]: end-to-end simulation/estimation/evaluation runs

pub mod error;
pub mod estimator;
pub mod eval;
pub mod factors;
pub mod geom;
pub mod io;
pub mod preint;
pub mod rendezvous;
pub mod scenario;
pub mod sim;
pub mod state;

pub use error::{Error, Result};
