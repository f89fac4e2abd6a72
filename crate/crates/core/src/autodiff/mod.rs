//! Minimal reverse-mode differentiation engine.
//!
//! The engine is define-by-run: [`Graph`] records one op per node as values
//! are computed, and [`Graph::backward`] replays the tape in reverse to
//! accumulate gradients. Only the operators the encoder/classifier model
//! needs are provided; each has an analytic backward that is checked
//! against central finite differences (see [`gradcheck`]).

mod gradcheck;
mod graph;

pub use gradcheck::{
    fd_gradient, grad_check, relative_error, standard_op_checks, GradCheckReport, ParamCheck,
};
pub use graph::{Graph, NodeId, RunningStats};

use crate::error::{Error, Result};

/// Batch-normalization epsilon. The value is fixed here so every caller
/// (training, eval, gradient checks) normalizes identically.
pub const BN_EPS: f64 = 1e-5;

/// Momentum of the exponential moving average tracking batch statistics.
pub const BN_MOMENTUM: f64 = 0.99;

/// Finite-difference step used by gradient checks.
pub const FD_STEP: f64 = 1e-6;

/// Configuration of the gradient reversal layer: identity forward,
/// `-beta`-scaled backward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrlConfig {
    beta: f64,
}

impl GrlConfig {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::Config(alloc::format!(
                "gradient reversal scale must be a finite nonnegative real, got {beta}"
            )));
        }
        Ok(GrlConfig { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Train/eval switch for ops whose behaviour differs between the two
/// (dropout, batch normalization).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}
