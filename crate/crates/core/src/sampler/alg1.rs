use nalgebra::DVector;
use rand::Rng;

use super::ml::MlEstimate;
use super::target::LogTarget;
use super::{eval_proposal, mh_decide, uniform, BetaStepReport, MoveKind, StepOutcome};
use crate::error::{Error, Result};
use crate::matrix_stats::{mvn_log_density, standard_normal, standard_normal_vector};
use crate::scalar::Real;

/// Acceptance band the local scales are tuned into.
pub const PRETUNE_BAND: (f64, f64) = (0.3, 0.5);

/// Local/global mixture proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Alg1Config<F: Real> {
    /// Probability of a global move drawn from `N(β̃_ML, fisher_cov)`.
    pub w1: F,
    /// Per-entry local standard deviations, column-major over `β̃`.
    pub local_sd: DVector<F>,
    /// Per-entry acceptance rates of the last tuning batch.
    pub tuned_rates: DVector<F>,
    /// False when tuning ran out of budget before every rate entered the band.
    pub in_band: bool,
    pub tuning_iterations: usize,
}

impl<F: Real> Alg1Config<F> {
    pub const DEFAULT_W1: f64 = 0.1;

    /// Untuned configuration with the given scales.
    pub fn with_scales(local_sd: DVector<F>) -> Result<Self> {
        if local_sd.iter().any(|s| !(*s > F::zero())) {
            return Err(Error::Parameter("local proposal scales must be positive".into()));
        }
        let d = local_sd.len();
        Ok(Self {
            w1: F::lit(Self::DEFAULT_W1),
            local_sd,
            tuned_rates: DVector::zeros(d),
            in_band: false,
            tuning_iterations: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.local_sd.len()
    }
}

/// Log density of the full mixture kernel `q(from → to)`.
///
/// Only meaningful with `d = 1`, where both components have a density
/// with respect to the same measure.
pub fn mixture_log_density<F: Real>(from: &DVector<F>, to: &DVector<F>, cfg: &Alg1Config<F>, ml: &MlEstimate<F>) -> F {
    let global = mvn_log_density(to, &ml.beta_ml.to_vec(), ml.fisher_cov.chol());
    let sd = cfg.local_sd[0];
    let z = (to[0] - from[0]) / sd;
    let local = -F::lit(0.5) * (z * z + F::two_pi().ln()) - sd.ln();
    let a = cfg.w1.ln() + global;
    let b = (F::one() - cfg.w1).ln() + local;
    let m = if a > b { a } else { b };
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log MH ratio for a move `x → y` of the given kind.
///
/// For `d > 1` a local proposal differs from the current point in exactly
/// one coordinate, a set the global Gaussian component gives measure zero,
/// so the reverse move can only come from the same symmetric local
/// component and the ratio is target-only. A global proposal moves every
/// coordinate, so only the independence component contributes in both
/// directions. For `d = 1` both components are continuous and the full
/// mixture density is used in both directions.
pub fn alg1_log_ratio<F: Real>(
    x: &DVector<F>,
    y: &DVector<F>,
    log_px: F,
    log_py: F,
    kind: MoveKind,
    cfg: &Alg1Config<F>,
    ml: &MlEstimate<F>,
) -> F {
    let target = log_py - log_px;
    if x.len() == 1 {
        return target + mixture_log_density(y, x, cfg, ml) - mixture_log_density(x, y, cfg, ml);
    }
    match kind {
        MoveKind::Global => {
            let mean = ml.beta_ml.to_vec();
            let c = ml.fisher_cov.chol();
            target + mvn_log_density(x, &mean, c) - mvn_log_density(y, &mean, c)
        }
        _ => target,
    }
}

/// One mixture-proposal MH step on the flat `β̃` vector.
pub fn alg1_step<F: Real, T: LogTarget<F> + ?Sized, R: Rng + ?Sized>(
    x: &DVector<F>,
    log_px: F,
    target: &T,
    cfg: &Alg1Config<F>,
    ml: &MlEstimate<F>,
    rng: &mut R,
) -> Result<StepOutcome<F>> {
    let d = x.len();
    if cfg.dim() != d || ml.dim() != d || target.dim() != d {
        return Err(Error::dim(
            "alg1 dimensions",
            d,
            format!("cfg {}, ml {}, target {}", cfg.dim(), ml.dim(), target.dim()),
        ));
    }
    if d == 0 {
        return Ok(null_step(x, log_px, MoveKind::Local));
    }
    let global = uniform::<F, _>(rng) < cfg.w1;
    let (y, kind) = if global {
        let z = standard_normal_vector::<F, _>(d, rng);
        (ml.beta_ml.to_vec() + ml.fisher_cov.chol().l() * z, MoveKind::Global)
    } else {
        let m = rng.random_range(0..d);
        let mut y = x.clone();
        y[m] += cfg.local_sd[m] * standard_normal::<F, _>(rng);
        (y, MoveKind::Local)
    };
    let log_py = eval_proposal(target, &y)?;
    let ratio = if log_py.as_f64() == f64::NEG_INFINITY {
        log_py
    } else {
        alg1_log_ratio(x, &y, log_px, log_py, kind, cfg, ml)
    };
    let (accepted, log_accept_prob) = mh_decide(ratio, rng);
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

pub(super) fn null_step<F: Real>(x: &DVector<F>, log_px: F, kind: MoveKind) -> StepOutcome<F> {
    StepOutcome {
        state: x.clone(),
        log_target: log_px,
        report: BetaStepReport {
            accepted: true,
            move_kind: kind,
            log_accept_prob: F::zero(),
        },
    }
}

/// Budget and batch size for the local-scale tuning loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretuneSettings {
    /// Single-entry moves per coordinate in each batch.
    pub batch: usize,
    /// Maximum single-entry moves per coordinate.
    pub budget: usize,
    pub w1: f64,
}

impl Default for PretuneSettings {
    fn default() -> Self {
        Self {
            batch: 200,
            budget: 20_000,
            w1: Alg1Config::<f64>::DEFAULT_W1,
        }
    }
}

fn band_miss(rates: &DVector<f64>) -> f64 {
    rates
        .iter()
        .map(|&a| (PRETUNE_BAND.0 - a).max(a - PRETUNE_BAND.1).max(0.0))
        .fold(0.0, f64::max)
}

/// Tunes the local scales by stochastic approximation: batches of
/// single-entry Metropolis moves per coordinate, each scale multiplied by
/// `exp(0.5·(rate − 0.4))` after its batch, until every batch rate lies in
/// `[0.3, 0.5]` or the per-coordinate budget is spent. The chain state is
/// carried across batches.
pub fn pretune_local_sd<F: Real, T: LogTarget<F> + ?Sized, R: Rng + ?Sized>(
    target: &T,
    start: &DVector<F>,
    initial_sd: &DVector<F>,
    settings: PretuneSettings,
    rng: &mut R,
) -> Result<Alg1Config<F>> {
    let d = start.len();
    if initial_sd.len() != d || target.dim() != d {
        return Err(Error::dim("pretune dimensions", d, initial_sd.len()));
    }
    if settings.batch == 0 {
        return Err(Error::Parameter("pretune batch must be positive".into()));
    }
    let mut cfg = Alg1Config::with_scales(initial_sd.clone())?;
    cfg.w1 = F::lit(settings.w1);
    if d == 0 {
        cfg.in_band = true;
        return Ok(cfg);
    }
    let mut x = start.clone();
    let mut lx = target.log_density(&x)?;
    let mut sd: Vec<f64> = initial_sd.iter().map(|s| s.as_f64()).collect();
    let mut best: Option<(f64, Vec<f64>, DVector<f64>)> = None;
    let mut used = 0usize;
    while used < settings.budget {
        let batch = settings.batch.min(settings.budget - used);
        let mut rates = DVector::<f64>::zeros(d);
        let batch_sd = sd.clone();
        for m in 0..d {
            let mut acc = 0usize;
            for _ in 0..batch {
                let mut y = x.clone();
                y[m] += F::lit(sd[m]) * standard_normal::<F, _>(rng);
                let ly = eval_proposal(target, &y)?;
                let (accepted, _) = mh_decide(ly - lx, rng);
                if accepted {
                    x = y;
                    lx = ly;
                    acc += 1;
                }
            }
            rates[m] = acc as f64 / batch as f64;
            sd[m] *= (0.5 * (rates[m] - 0.4)).exp();
        }
        used += batch;
        let miss = band_miss(&rates);
        if best.as_ref().is_none_or(|b| miss < b.0) {
            best = Some((miss, batch_sd, rates.clone()));
        }
        if miss == 0.0 {
            break;
        }
    }
    let (miss, sd_best, rates) = best.expect("at least one batch runs");
    cfg.local_sd = DVector::from_iterator(d, sd_best.into_iter().map(F::lit));
    cfg.tuned_rates = DVector::from_iterator(d, rates.iter().map(|&r| F::lit(r)));
    cfg.in_band = miss == 0.0;
    cfg.tuning_iterations = used;
    Ok(cfg)
}
