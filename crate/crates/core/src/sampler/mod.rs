//! Metropolis-Hastings updates for the free block of the cointegration
//! matrix, and the maximum-likelihood starting point they use.
//!
//! All samplers act on `β̃` vectorized column-major, the same ordering as
//! [`ThinBeta::to_vec`](crate::ecm::ThinBeta::to_vec), the running proposal
//! covariance and the numerical Hessian.

mod alg1;
mod alg2;
mod ml;
mod target;

pub use alg1::{
    alg1_log_ratio, alg1_step, mixture_log_density, pretune_local_sd, Alg1Config, PretuneSettings, PRETUNE_BAND,
};
pub use alg2::{alg2_step, Alg2Config, ADAPTIVE_SCALE, FIXED_SCALE};
pub use ml::{johansen, ml_estimate, numeric_hessian, JohansenFit, MlEstimate, FALLBACK_SD};
pub use target::{CollapsedTarget, FnTarget, JointTarget, LogTarget};

use nalgebra::DVector;
use rand::Rng;

use crate::error::Result;
use crate::scalar::Real;

/// Which proposal produced a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MoveKind {
    Local,
    Global,
    Adaptive,
    FixedRw,
}

impl MoveKind {
    pub const ALL: [MoveKind; 4] = [MoveKind::Local, MoveKind::Global, MoveKind::Adaptive, MoveKind::FixedRw];

    pub fn as_str(self) -> &'static str {
        match self {
            MoveKind::Local => "local",
            MoveKind::Global => "global",
            MoveKind::Adaptive => "adaptive",
            MoveKind::FixedRw => "fixed-rw",
        }
    }
}

impl std::fmt::Display for MoveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaStepReport<F: Real> {
    pub accepted: bool,
    pub move_kind: MoveKind,
    /// `min(0, log α)`; `-inf` when the proposal had zero target density.
    pub log_accept_prob: F,
}

/// State after one MH step together with its cached log target.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<F: Real> {
    pub state: DVector<F>,
    pub log_target: F,
    pub report: BetaStepReport<F>,
}

/// Evaluates a proposal, mapping numerical failures (non-SPD `S⋆`,
/// non-finite values) to zero density so the move is rejected.
pub(crate) fn eval_proposal<F: Real, T: LogTarget<F> + ?Sized>(target: &T, theta: &DVector<F>) -> Result<F> {
    use crate::error::Error;
    match target.log_density(theta) {
        Ok(v) if v.as_f64().is_nan() => Ok(F::lit(f64::NEG_INFINITY)),
        Ok(v) => Ok(v),
        Err(Error::NotPositiveDefinite { .. }) | Err(Error::NonFinite(_)) => Ok(F::lit(f64::NEG_INFINITY)),
        Err(e) => Err(e),
    }
}

/// Accept/reject with log ratio `log_ratio`; consumes exactly one uniform.
pub(crate) fn mh_decide<F: Real, R: Rng + ?Sized>(log_ratio: F, rng: &mut R) -> (bool, F) {
    let lr = log_ratio.as_f64();
    let log_alpha = if lr.is_nan() { f64::NEG_INFINITY } else { lr.min(0.0) };
    let u: f64 = rng.random();
    (u.ln() < log_alpha, F::lit(log_alpha))
}

pub(crate) fn uniform<F: Real, R: Rng + ?Sized>(rng: &mut R) -> F {
    F::lit(rng.random::<f64>())
}
