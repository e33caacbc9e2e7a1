//! Residual blocks of the sliding-window cost: UWB ranging, virtual
//! relative-transformation links, vision reprojection, the IMU residual
//! (in [`crate::preint`]) and the marginalization prior, plus the robust
//! loss applied to the ranging and vision blocks.

mod loss;
mod marginal;
mod uwb;
mod vision;

pub use loss::{pseudo_huber, RobustLossSpec};
pub use marginal::{schur_marginalize, PriorFactor};
pub use uwb::{relative_link_residual, uwb_range_residual, AnchorEstimate, UwbFactorSpec};
pub use vision::vision_residual;
