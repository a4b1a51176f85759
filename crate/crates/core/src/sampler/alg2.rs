use nalgebra::DVector;
use rand::Rng;

use super::alg1::null_step;
use super::target::LogTarget;
use super::{eval_proposal, mh_decide, uniform, BetaStepReport, MoveKind, StepOutcome};
use crate::error::{Error, Result};
use crate::matrix_stats::{standard_normal_vector, Chol, RunningCovariance};
use crate::scalar::Real;

/// Scale of the adaptive component, `2.38²/d · Σ_j`.
pub const ADAPTIVE_SCALE: f64 = 2.38;
/// Scale of the fixed component, `0.1²/d · I`.
pub const FIXED_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alg2Config<F: Real> {
    /// Probability of the adaptive component once warm.
    pub w1: F,
    /// Adaptation engages only after more than this many recorded states.
    pub warmup_min: usize,
    pub d: usize,
}

impl<F: Real> Alg2Config<F> {
    pub const DEFAULT_W1: f64 = 0.95;

    /// `w1 = 0.95`, `warmup_min = max(100, 2d)`.
    pub fn for_dim(d: usize) -> Self {
        Self {
            w1: F::lit(Self::DEFAULT_W1),
            warmup_min: (2 * d).max(100),
            d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w1 > F::zero() && self.w1 < F::one()) {
            return Err(Error::Parameter(format!(
                "adaptive weight w1 = {} must lie in (0, 1)",
                self.w1
            )));
        }
        Ok(())
    }
}

/// One adaptive-Metropolis step. The caller records the returned state in
/// `adapt` afterwards, whether or not it was accepted.
pub fn alg2_step<F: Real, T: LogTarget<F> + ?Sized, R: Rng + ?Sized>(
    x: &DVector<F>,
    log_px: F,
    target: &T,
    cfg: &Alg2Config<F>,
    adapt: &RunningCovariance<F>,
    rng: &mut R,
) -> Result<StepOutcome<F>> {
    let d = x.len();
    if cfg.d != d || adapt.dim() != d || target.dim() != d {
        return Err(Error::dim(
            "alg2 dimensions",
            d,
            format!("cfg {}, adapt {}, target {}", cfg.d, adapt.dim(), target.dim()),
        ));
    }
    if d == 0 {
        return Ok(null_step(x, log_px, MoveKind::FixedRw));
    }
    let df = F::from_usize_lossy(d);
    let u: F = uniform(rng);
    let adaptive_chol = if u < cfg.w1 && adapt.count() > cfg.warmup_min {
        adapt.covariance().and_then(|c| Chol::factor(&c).ok())
    } else {
        None
    };
    let z = standard_normal_vector::<F, _>(d, rng);
    let (y, kind) = match adaptive_chol {
        Some(c) => (x + c.l() * z * (F::lit(ADAPTIVE_SCALE) / df.sqrt()), MoveKind::Adaptive),
        None => (x + z * (F::lit(FIXED_SCALE) / df.sqrt()), MoveKind::FixedRw),
    };
    let log_py = eval_proposal(target, &y)?;
    let (accepted, log_accept_prob) = mh_decide(log_py - log_px, rng);
    let report = BetaStepReport {
        accepted,
        move_kind: kind,
        log_accept_prob,
    };
    Ok(if accepted {
        StepOutcome {
            state: y,
            log_target: log_py,
            report,
        }
    } else {
        StepOutcome {
            state: x.clone(),
            log_target: log_px,
            report,
        }
    })
}
