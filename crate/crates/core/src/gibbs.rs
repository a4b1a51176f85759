//! Three-block sampler: β by Metropolis-Hastings, then Σ and B exactly
//! from their conjugate conditionals.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::ecm::{EcmDesign, MarginalKernel, PriorSpec, ThinBeta};
use crate::error::{Error, Result};
use crate::matrix_stats::{sample_inverse_wishart, sample_matrix_normal, RunningCovariance, SpdMatrix};
use crate::rng::RngStream;
use crate::sampler::{
    alg1_step, alg2_step, ml_estimate, pretune_local_sd, Alg1Config, Alg2Config, BetaStepReport, CollapsedTarget,
    JointTarget, LogTarget, MlEstimate, MoveKind, PretuneSettings, StepOutcome, FALLBACK_SD,
};
use crate::scalar::Real;

/// Threshold on `‖α‖_∞` below which a state counts as stuck at `α = 0`.
pub const ALPHA_WATCHDOG_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    /// Pretuned local moves mixed with global ML-centred moves.
    Alg1,
    /// Adaptive Metropolis.
    Alg2,
}

/// Density used in the β acceptance ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaTarget {
    /// `p(β | Y)` with `(B, Σ)` integrated out.
    Collapsed,
    /// `p(β | B, Σ, Y)` at the current `(B, Σ)`.
    Joint,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitMode<F: Real> {
    /// β at the Johansen estimate.
    Ml,
    /// β drawn from its prior.
    Prior,
    Explicit(ThinBeta<F>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig<F: Real> {
    pub sampler: SamplerKind,
    pub target: BetaTarget,
    /// Total sweeps `J`, burn-in included.
    pub iterations: usize,
    pub burnin: usize,
    /// Keep every `thin`-th sweep.
    pub thin: usize,
    pub init: InitMode<F>,
    pub alg1_w1: f64,
    pub alg2_w1: f64,
    /// Overrides `max(100, 2d)`.
    pub warmup_min: Option<usize>,
    pub pretune: PretuneSettings,
}

impl<F: Real> Default for ChainConfig<F> {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Alg2,
            target: BetaTarget::Collapsed,
            iterations: 20_000,
            burnin: 10_000,
            thin: 1,
            init: InitMode::Ml,
            alg1_w1: Alg1Config::<f64>::DEFAULT_W1,
            alg2_w1: Alg2Config::<f64>::DEFAULT_W1,
            warmup_min: None,
            pretune: PretuneSettings::default(),
        }
    }
}

impl<F: Real> ChainConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burnin {
            return Err(Error::Parameter(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.iterations, self.burnin
            )));
        }
        if self.thin == 0 {
            return Err(Error::Parameter("thinning interval must be positive".into()));
        }
        for (name, w) in [("alg1 w1", self.alg1_w1), ("alg2 w1", self.alg2_w1)] {
            if !(w > 0.0 && w < 1.0) {
                return Err(Error::Parameter(format!("{name} = {w} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// One draw of `(β, B, Σ)`. `B` stacks `[μ'; Ψ_1'; …; Ψ_{p−1}'; α']`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState<F: Real> {
    pub beta: ThinBeta<F>,
    pub b: DMatrix<F>,
    pub sigma: SpdMatrix<F>,
}

impl<F: Real> ChainState<F> {
    /// `α` as an `n×r` matrix (the last `r` rows of `B`, transposed).
    pub fn alpha(&self) -> DMatrix<F> {
        let r = self.beta.r();
        let k = self.b.nrows();
        self.b.rows(k - r, r).transpose()
    }

    /// `Γ` rows of `B`: intercept and lagged-difference coefficients.
    pub fn gamma(&self) -> DMatrix<F> {
        let r = self.beta.r();
        self.b.rows(0, self.b.nrows() - r).into_owned()
    }

    pub fn check(&self, design: &EcmDesign<F>) -> Result<()> {
        if self.beta.n() != design.n()
            || self.beta.r() != design.r()
            || self.b.shape() != (design.k(), design.n())
            || self.sigma.dim() != design.n()
        {
            return Err(Error::dim(
                "chain state",
                format!("n={}, r={}, k={}", design.n(), design.r(), design.k()),
                format!(
                    "n={}, r={}, B {}x{}",
                    self.beta.n(),
                    self.beta.r(),
                    self.b.nrows(),
                    self.b.ncols()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KindStats {
    pub proposed: usize,
    pub accepted: usize,
    /// Sum of `min(1, α)` over proposals.
    pub sum_accept_prob: f64,
}

/// Acceptance counts by proposal kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AcceptanceSummary {
    pub by_kind: BTreeMap<MoveKind, KindStats>,
}

impl AcceptanceSummary {
    pub fn record<F: Real>(&mut self, report: &BetaStepReport<F>) {
        let s = self.by_kind.entry(report.move_kind).or_default();
        s.proposed += 1;
        s.accepted += usize::from(report.accepted);
        s.sum_accept_prob += report.log_accept_prob.as_f64().exp();
    }

    pub fn proposed(&self) -> usize {
        self.by_kind.values().map(|s| s.proposed).sum()
    }

    /// Fraction of accepted proposals; `None` when nothing was proposed.
    pub fn rate(&self) -> Option<f64> {
        let p = self.proposed();
        (p > 0).then(|| self.by_kind.values().map(|s| s.accepted).sum::<usize>() as f64 / p as f64)
    }

    /// Average of `min(1, α)`.
    pub fn mean_accept_prob(&self) -> Option<f64> {
        let p = self.proposed();
        (p > 0).then(|| self.by_kind.values().map(|s| s.sum_accept_prob).sum::<f64>() / p as f64)
    }

    pub fn kind_rate(&self, kind: MoveKind) -> Option<f64> {
        self.by_kind
            .get(&kind)
            .filter(|s| s.proposed > 0)
            .map(|s| s.accepted as f64 / s.proposed as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace<F: Real> {
    pub states: Vec<ChainState<F>>,
    /// Sweep index (0-based) of each stored state.
    pub sweeps: Vec<usize>,
    /// β-step report of the sweep that produced each stored state.
    pub reports: Vec<BetaStepReport<F>>,
    /// Number of stored states inside the burn-in.
    pub burnin: usize,
    /// Acceptance over every post-burn-in sweep (not thinned).
    pub acceptance: AcceptanceSummary,
    pub acceptance_burnin: AcceptanceSummary,
    pub seed: u64,
    pub stream: u64,
    pub ml: Option<MlEstimate<F>>,
    pub alg1: Option<Alg1Config<F>>,
}

impl<F: Real> ChainTrace<F> {
    /// Trace of independent draws with no burn-in and no β-step history,
    /// e.g. exact rank-zero posterior draws.
    pub fn from_states(states: Vec<ChainState<F>>, seed: u64, stream: u64) -> Self {
        Self {
            sweeps: (0..states.len()).collect(),
            states,
            reports: Vec::new(),
            burnin: 0,
            acceptance: AcceptanceSummary::default(),
            acceptance_burnin: AcceptanceSummary::default(),
            seed,
            stream,
            ml: None,
            alg1: None,
        }
    }

    pub fn retained(&self) -> &[ChainState<F>] {
        &self.states[self.burnin..]
    }
}

/// Draws `Σ ~ IW(S⋆, t+h)` then `B ~ MN(B⋆, A⋆^{-1}, Σ)` given β.
pub fn draw_sigma_b<F: Real, R: Rng + ?Sized>(
    kernel: &MarginalKernel<'_, F>,
    beta: &ThinBeta<F>,
    rng: &mut R,
) -> Result<(SpdMatrix<F>, DMatrix<F>)> {
    let cond = kernel.conditional(beta)?;
    let dof = kernel.design().t() as f64 + kernel.prior().h.as_f64();
    let sigma = sample_inverse_wishart(&cond.s_star, dof, rng)?;
    let b = sample_matrix_normal(&cond.b_star, &cond.a_star, &sigma, rng)?;
    Ok((sigma, b))
}

/// Mutable sampler state threaded through successive sweeps.
pub struct Sweeper<'a, F: Real> {
    target: CollapsedTarget<'a, F>,
    mode: BetaTarget,
    sampler: SamplerKind,
    ml: Option<MlEstimate<F>>,
    alg1: Option<Alg1Config<F>>,
    alg2: Alg2Config<F>,
    adapt: RunningCovariance<F>,
    theta: DVector<F>,
    log_target: F,
    state: ChainState<F>,
}

impl<'a, F: Real> Sweeper<'a, F> {
    /// Initialises β, pretunes the mixture sampler if selected, and draws `(Σ, B)`
    /// from their conditionals.
    pub fn new<R: Rng + ?Sized>(
        design: &'a EcmDesign<F>,
        prior: &'a PriorSpec<F>,
        cfg: &ChainConfig<F>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let target = CollapsedTarget::new(design, prior)?;
        let d = design.free_dim();
        let need_ml = d > 0 && (cfg.sampler == SamplerKind::Alg1 || cfg.init == InitMode::Ml);
        let ml = if need_ml {
            Some(ml_estimate(design, prior)?)
        } else {
            None
        };
        let beta = match &cfg.init {
            _ if d == 0 => ThinBeta::zeros(design.n(), design.r()),
            InitMode::Ml => ml.as_ref().expect("computed above").beta_ml.clone(),
            InitMode::Prior => {
                let free =
                    sample_matrix_normal(&prior.free_mean(), &spd_inverse(prior.free_row_cov())?, &prior.q, rng)?;
                ThinBeta::new(design.n(), design.r(), free)?
            }
            InitMode::Explicit(b) => {
                if b.n() != design.n() || b.r() != design.r() {
                    return Err(Error::dim(
                        "initial beta",
                        format!("{}x{}", design.n(), design.r()),
                        format!("{}x{}", b.n(), b.r()),
                    ));
                }
                b.clone()
            }
        };
        let theta = beta.to_vec();
        let log_target = target.log_density(&theta)?;
        let alg1 = match (cfg.sampler, &ml) {
            (SamplerKind::Alg1, Some(ml)) => {
                let sd0 = if ml.hessian_fallback {
                    DVector::from_element(d, F::lit(FALLBACK_SD))
                } else {
                    ml.fisher_cov.values().diagonal().map(|v| v.sqrt())
                };
                let mut settings = cfg.pretune;
                settings.w1 = cfg.alg1_w1;
                Some(pretune_local_sd(&target, &theta, &sd0, settings, rng)?)
            }
            _ => None,
        };
        let mut alg2 = Alg2Config::for_dim(d);
        alg2.w1 = F::lit(cfg.alg2_w1);
        if let Some(w) = cfg.warmup_min {
            alg2.warmup_min = w;
        }
        let (sigma, b) = draw_sigma_b(target.kernel(), &beta, rng)?;
        Ok(Self {
            target,
            mode: cfg.target,
            sampler: cfg.sampler,
            ml,
            alg1,
            alg2,
            adapt: RunningCovariance::new(d),
            theta,
            log_target,
            state: ChainState { beta, b, sigma },
        })
    }

    pub fn state(&self) -> &ChainState<F> {
        &self.state
    }

    pub fn adapt(&self) -> &RunningCovariance<F> {
        &self.adapt
    }

    pub fn ml(&self) -> Option<&MlEstimate<F>> {
        self.ml.as_ref()
    }

    pub fn alg1(&self) -> Option<&Alg1Config<F>> {
        self.alg1.as_ref()
    }

    fn beta_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<BetaStepReport<F>> {
        let d = self.theta.len();
        if d == 0 {
            return Ok(BetaStepReport {
                accepted: true,
                move_kind: MoveKind::FixedRw,
                log_accept_prob: F::zero(),
            });
        }
        let kernel = self.target.kernel();
        let joint;
        let target: &dyn LogTarget<F> = match self.mode {
            BetaTarget::Collapsed => &self.target,
            BetaTarget::Joint => {
                joint = JointTarget::new(kernel, &self.state.b, &self.state.sigma)?;
                &joint
            }
        };
        let current = match self.mode {
            BetaTarget::Collapsed => self.log_target,
            BetaTarget::Joint => target.log_density(&self.theta)?,
        };
        let out: StepOutcome<F> = match self.sampler {
            SamplerKind::Alg1 => {
                let cfg = self.alg1.as_ref().expect("Alg1 pretuned at construction");
                let ml = self.ml.as_ref().expect("ML estimate computed for Alg1");
                alg1_step(&self.theta, current, target, cfg, ml, rng)?
            }
            SamplerKind::Alg2 => alg2_step(&self.theta, current, target, &self.alg2, &self.adapt, rng)?,
        };
        if self.sampler == SamplerKind::Alg2 {
            self.adapt.update(&out.state)?;
        }
        if out.report.accepted {
            self.theta = out.state;
            self.log_target = match self.mode {
                BetaTarget::Collapsed => out.log_target,
                BetaTarget::Joint => self.target.log_density(&self.theta)?,
            };
        }
        Ok(out.report)
    }

    /// One sweep: β, then Σ | β, then B | Σ, β.
    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<BetaStepReport<F>> {
        let report = self.beta_step(rng)?;
        let design = self.target.kernel().design();
        let beta = ThinBeta::from_vec(design.n(), design.r(), &self.theta)?;
        let (sigma, b) = draw_sigma_b(self.target.kernel(), &beta, rng)?;
        self.state = ChainState { beta, b, sigma };
        Ok(report)
    }
}

fn spd_inverse<F: Real>(m: &SpdMatrix<F>) -> Result<SpdMatrix<F>> {
    SpdMatrix::from_symmetric(m.inverse())
}

/// Runs `cfg.iterations` sweeps and records the trace.
pub fn run_chain<F: Real>(
    design: &EcmDesign<F>,
    prior: &PriorSpec<F>,
    cfg: &ChainConfig<F>,
    rng: &mut RngStream,
) -> Result<ChainTrace<F>> {
    let seed = rng.seed();
    let stream = rng.stream_id();
    let mut sweeper = Sweeper::new(design, prior, cfg, rng)?;
    let mut trace = ChainTrace {
        states: Vec::with_capacity(cfg.iterations / cfg.thin + 1),
        sweeps: Vec::new(),
        reports: Vec::new(),
        burnin: 0,
        acceptance: AcceptanceSummary::default(),
        acceptance_burnin: AcceptanceSummary::default(),
        seed,
        stream,
        ml: sweeper.ml.clone(),
        alg1: sweeper.alg1.clone(),
    };
    for j in 0..cfg.iterations {
        let report = sweeper.sweep(rng).map_err(|e| Error::Sweep {
            iteration: j,
            beta_snapshot: format!("{:?}", sweeper.theta.as_slice()),
            source: Box::new(e),
        })?;
        let in_burnin = j < cfg.burnin;
        if in_burnin {
            trace.acceptance_burnin.record(&report);
        } else {
            trace.acceptance.record(&report);
        }
        if (j + 1) % cfg.thin == 0 || j + 1 == cfg.iterations {
            if in_burnin {
                trace.burnin += 1;
            }
            trace.states.push(sweeper.state.clone());
            trace.sweeps.push(j);
            trace.reports.push(report);
        }
    }
    Ok(trace)
}

/// Posterior means and standard deviations over the retained states.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEstimates<F: Real> {
    pub beta_mmse: ThinBeta<F>,
    pub beta_sd: DMatrix<F>,
    pub b_mmse: DMatrix<F>,
    pub b_sd: DMatrix<F>,
    pub sigma_mmse: SpdMatrix<F>,
    pub sigma_sd: DMatrix<F>,
    pub trace_sigma: F,
    pub trace_sigma_sd: F,
    pub retained: usize,
}

fn mean_sd<F: Real>(items: &[DMatrix<F>]) -> (DMatrix<F>, DMatrix<F>) {
    // shifted by the first item so a constant trace gives sd exactly 0
    let origin = &items[0];
    let (r, c) = origin.shape();
    let n = F::from_usize_lossy(items.len());
    let mut shift = DMatrix::<F>::zeros(r, c);
    for m in items {
        shift += m - origin;
    }
    shift /= n;
    let mut var = DMatrix::<F>::zeros(r, c);
    for m in items {
        let d = m - origin - &shift;
        var += d.component_mul(&d);
    }
    let sd = if items.len() > 1 {
        (var / (n - F::one())).map(|v| v.sqrt())
    } else {
        DMatrix::zeros(r, c)
    };
    (origin + shift, sd)
}

pub fn point_estimates<F: Real>(trace: &ChainTrace<F>) -> Result<PointEstimates<F>> {
    let kept = trace.retained();
    if kept.is_empty() {
        return Err(Error::Empty("no retained states after burn-in"));
    }
    let first = &kept[0];
    let betas: Vec<_> = kept.iter().map(|s| s.beta.free().clone()).collect();
    let bs: Vec<_> = kept.iter().map(|s| s.b.clone()).collect();
    let sigmas: Vec<_> = kept.iter().map(|s| s.sigma.values().clone()).collect();
    let traces: Vec<_> = kept
        .iter()
        .map(|s| DMatrix::from_element(1, 1, s.sigma.trace()))
        .collect();
    let (beta_mean, beta_sd) = mean_sd(&betas);
    let (b_mmse, b_sd) = mean_sd(&bs);
    let (sigma_mean, sigma_sd) = mean_sd(&sigmas);
    let (tr_mean, tr_sd) = mean_sd(&traces);
    Ok(PointEstimates {
        beta_mmse: ThinBeta::new(first.beta.n(), first.beta.r(), beta_mean)?,
        beta_sd,
        b_mmse,
        b_sd,
        sigma_mmse: SpdMatrix::from_symmetric(sigma_mean)?,
        sigma_sd,
        trace_sigma: tr_mean[(0, 0)],
        trace_sigma_sd: tr_sd[(0, 0)],
        retained: kept.len(),
    })
}

/// Integrated autocorrelation time and effective sample size of a series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssEstimate {
    pub iact: f64,
    pub ess: f64,
    /// Series is constant; `ess` is reported as 1.
    pub degenerate: bool,
}

/// Geyer's initial monotone positive sequence estimator, with
/// autocovariances computed by FFT.
pub fn effective_sample_size(series: &[f64]) -> EssEstimate {
    let n = series.len();
    if n < 2 {
        return EssEstimate {
            iact: 1.0,
            ess: n as f64,
            degenerate: true,
        };
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var0 = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    let scale = series
        .iter()
        .map(|x| x.abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    if var0 <= (1e-14 * scale).powi(2) {
        return EssEstimate {
            iact: n as f64,
            ess: 1.0,
            degenerate: true,
        };
    }
    let len = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = series
        .iter()
        .map(|x| Complex::new(x - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(len)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for v in buf.iter_mut() {
        *v = Complex::new(v.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let acov0 = buf[0].re;
    let rho = |k: usize| buf[k].re / acov0;

    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = rho(2 * m) + rho(2 * m + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        m += 1;
    }
    let iact = (2.0 * sum - 1.0).max(1.0 / n as f64);
    EssEstimate {
        iact,
        ess: n as f64 / iact,
        degenerate: false,
    }
}

/// Mixing and health summary of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    /// `(parameter name, estimate)` for every traced scalar.
    pub ess: Vec<(String, EssEstimate)>,
    pub min_ess: f64,
    pub degenerate: Vec<String>,
    pub acceptance: AcceptanceSummary,
    /// Fraction of retained states with `‖α‖_∞ < 1e-6`.
    pub alpha_watchdog: f64,
    pub retained: usize,
}

impl Diagnostics {
    pub fn watchdog_fired(&self) -> bool {
        self.alpha_watchdog >= 0.01
    }
}

pub fn diagnostics<F: Real>(trace: &ChainTrace<F>) -> Diagnostics {
    let kept = trace.retained();
    let mut ess = Vec::new();
    let mut degenerate = Vec::new();
    if let Some(first) = kept.first() {
        let names = state_column_names(first);
        let rows: Vec<Vec<f64>> = kept.iter().map(flatten_state).collect();
        for (c, name) in names.into_iter().enumerate() {
            let series: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            let e = effective_sample_size(&series);
            if e.degenerate {
                degenerate.push(name.clone());
            }
            ess.push((name, e));
        }
    }
    let stuck = kept
        .iter()
        .filter(|s| s.beta.r() > 0 && s.alpha().amax().as_f64() < ALPHA_WATCHDOG_TOL)
        .count();
    Diagnostics {
        min_ess: ess.iter().map(|(_, e)| e.ess).fold(f64::INFINITY, f64::min),
        ess,
        degenerate,
        acceptance: trace.acceptance.clone(),
        alpha_watchdog: if kept.is_empty() {
            0.0
        } else {
            stuck as f64 / kept.len() as f64
        },
        retained: kept.len(),
    }
}

/// Column names of [`flatten_state`]: free β entries `beta_i_j` (1-based
/// row of the full β), then `B_i_j`, then `Sigma_i_j`.
pub fn state_column_names<F: Real>(s: &ChainState<F>) -> Vec<String> {
    let n = s.beta.n();
    let r = s.beta.r();
    let mut names = Vec::new();
    for j in 0..r {
        for i in r..n {
            names.push(format!("beta_{}_{}", i + 1, j + 1));
        }
    }
    let (k, _) = s.b.shape();
    for j in 0..n {
        for i in 0..k {
            names.push(format!("B_{}_{}", i + 1, j + 1));
        }
    }
    for j in 0..n {
        for i in 0..n {
            names.push(format!("Sigma_{}_{}", i + 1, j + 1));
        }
    }
    names
}

/// Column-major flattening matching [`state_column_names`].
pub fn flatten_state<F: Real>(s: &ChainState<F>) -> Vec<f64> {
    s.beta
        .free()
        .iter()
        .chain(s.b.iter())
        .chain(s.sigma.values().iter())
        .map(|v| v.as_f64())
        .collect()
}
