//! Pseudo-Huber robust loss: quadratic near zero, linear in the tails.

use serde::{Deserialize, Serialize};

/// Scale parameter δ of the pseudo-Huber loss, in the residual's units
/// (meters for ranging, pixels for vision).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RobustLossSpec {
    pub delta: f64,
}

impl RobustLossSpec {
    pub fn new(delta: f64) -> Self {
        assert!(delta > 0.0, "loss scale must be positive");
        Self { delta }
    }

    /// IRLS weight `ρ'(q)/q`, smooth and equal to 1 at q = 0.
    ///
    /// Residual and Jacobian scaled by `sqrt(weight)` reproduce the robust
    /// cost to first order.
    pub fn weight(&self, q: f64) -> f64 {
        let r = q / self.delta;
        1.0 / (1.0 + r * r).sqrt()
    }

    pub fn cost(&self, q: f64) -> f64 {
        pseudo_huber(q, self.delta).0
    }
}

/// `ρ(q) = δ²(√(1+(q/δ)²) − 1)` and its derivative.
pub fn pseudo_huber(q: f64, delta: f64) -> (f64, f64) {
    debug_assert!(delta > 0.0);
    let r = q / delta;
    let root = (1.0 + r * r).sqrt();
    (delta * delta * (root - 1.0), q / root)
}
