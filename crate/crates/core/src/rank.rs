//! Posterior probabilities of the cointegration rank from Bayes factors
//! against the rank-zero model, estimated from per-rank chains.
//!
//! The posterior density at `α = 0` is Rao-Blackwellised over the rank-`r`
//! chain. Two numerators are available: the nested-model correction
//! averaged over exact rank-zero posterior draws (default), and
//! `p(α=0)·C_r` with `C_r` averaging the conditional prior density of the
//! α block over the rank-`r` chain.

use nalgebra::DMatrix;
use rand::Rng;

use crate::ecm::{EcmDesign, MarginalKernel, PriorSpec, ThinBeta};
use crate::error::{Error, Result};
use crate::gibbs::{effective_sample_size, ChainState, ChainTrace};
use crate::matrix_stats::{
    log_multigamma_ratio, log_sum_exp, sample_inverse_wishart, sample_matrix_normal, symmetrize, Chol, SpdMatrix,
};
use crate::scalar::Real;

/// Largest fraction of non-finite terms an estimator may drop.
pub const MAX_DROP_FRACTION: f64 = 0.01;

/// Row split of a `k`-row matrix into the Γ block (first `k − r` rows) and
/// the α block (last `r` rows).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPartition {
    pub k: usize,
    pub r: usize,
}

/// Blocks of a symmetric `k×k` matrix under a [`BlockPartition`].
#[derive(Debug, Clone, PartialEq)]
pub struct SplitMatrix<F: Real> {
    pub a11: DMatrix<F>,
    pub a12: DMatrix<F>,
    pub a22: DMatrix<F>,
}

impl BlockPartition {
    pub fn new(k: usize, r: usize) -> Result<Self> {
        if r > k {
            return Err(Error::Parameter(format!("alpha block of {r} rows exceeds k = {k}")));
        }
        Ok(Self { k, r })
    }

    pub fn gamma_rows(&self) -> usize {
        self.k - self.r
    }

    pub fn split<F: Real>(&self, a: &DMatrix<F>) -> Result<SplitMatrix<F>> {
        if a.shape() != (self.k, self.k) {
            return Err(Error::dim("partitioned matrix", self.k, a.nrows()));
        }
        let g = self.gamma_rows();
        Ok(SplitMatrix {
            a11: a.view((0, 0), (g, g)).into_owned(),
            a12: a.view((0, g), (g, self.r)).into_owned(),
            a22: a.view((g, g), (self.r, self.r)).into_owned(),
        })
    }

    /// `A₂₂.₁ = A₂₂ − A₂₁ A₁₁^{-1} A₁₂`.
    pub fn schur_22_1<F: Real>(&self, a: &DMatrix<F>) -> Result<SpdMatrix<F>> {
        let s = self.split(a)?;
        if self.gamma_rows() == 0 {
            return SpdMatrix::from_symmetric(s.a22);
        }
        let c11 = Chol::factor(&s.a11)?;
        let m = c11.solve_lower(&s.a12);
        SpdMatrix::from_symmetric(symmetrize(&(s.a22 - m.transpose() * m)))
    }

    /// Last `r` rows of a `k`-row matrix.
    pub fn alpha_rows<F: Real>(&self, b: &DMatrix<F>) -> DMatrix<F> {
        b.rows(self.gamma_rows(), self.r).into_owned()
    }

    pub fn gamma_block<F: Real>(&self, b: &DMatrix<F>) -> DMatrix<F> {
        b.rows(0, self.gamma_rows()).into_owned()
    }
}

/// Density at zero of the matrix-t obtained by integrating
/// `X | Σ ~ MN(M, Λ^{-1}, Σ)` against `Σ ~ IW(S, ν)`, where `Λ` is the row
/// precision:
///
/// `−(nr/2) log π + (n/2) log|Λ| + log Γ_n((ν+r)/2) − log Γ_n(ν/2)
///  + (ν/2) log|S| − ((ν+e)/2) log|S + M'ΛM|`
///
/// with `e = r` for the exact density. `exponent_shift` overrides `ν + r`
/// in the last term.
fn log_matrix_t_at_zero<F: Real>(
    mean: &DMatrix<F>,
    row_prec: &SpdMatrix<F>,
    scale: &SpdMatrix<F>,
    dof: f64,
    last_exponent: f64,
) -> Result<f64> {
    let (r, n) = mean.shape();
    let nf = n as f64;
    let rf = r as f64;
    let quad = mean.transpose() * row_prec.values() * mean;
    let shifted = SpdMatrix::from_symmetric(scale.values() + symmetrize(&quad))?;
    Ok(-0.5 * nf * rf * std::f64::consts::PI.ln()
        + 0.5 * nf * row_prec.chol().log_det().as_f64()
        + log_multigamma_ratio::<f64>(n, 0.5 * (dof + rf), 0.5 * dof)?
        + 0.5 * dof * scale.chol().log_det().as_f64()
        - 0.5 * last_exponent * shifted.chol().log_det().as_f64())
}

/// Which normalisation of the α-prior density at zero to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaPriorForm {
    /// Matrix-t density of the α block at zero, including its prior mean.
    MatrixT,
    /// Closed form that assumes a zero prior mean for the α block
    /// (the two `|S|` terms combine to `−(r/2) log|S|`).
    ZeroMean,
}

/// `log p(α = 0)` under the conjugate prior of `B | Σ` and `Σ`.
pub fn log_prior_alpha_zero<F: Real>(prior: &PriorSpec<F>, r: usize, form: AlphaPriorForm) -> Result<f64> {
    let n = prior.n();
    let h = prior.h.as_f64();
    if !(h > n as f64 - 1.0) {
        return Err(Error::Domain {
            arg: h - (n as f64 - 1.0),
        });
    }
    if r == 0 {
        return Ok(0.0);
    }
    let part = BlockPartition::new(prior.k(), r)?;
    let a221 = part.schur_22_1(prior.a.values())?;
    let p2 = match form {
        AlphaPriorForm::MatrixT => part.alpha_rows(&prior.p_mean),
        AlphaPriorForm::ZeroMean => DMatrix::zeros(r, n),
    };
    log_matrix_t_at_zero(&p2, &a221, &prior.s, h, h + r as f64)
}

/// Exponent on `|S⋆ + B⋆₂'A⋆₂₂.₁B⋆₂|` in the Rao-Blackwellised posterior
/// density of `α = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L1Exponent {
    /// `(t + h + r)/2`, the exact matrix-t normalisation.
    MatrixT,
    /// `(t + r)/2`.
    Short,
}

/// Log-domain Monte Carlo mean `log((1/N) Σ exp(ℓ_i))` with diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMeanEstimate {
    pub log_mean: f64,
    /// Terms used.
    pub n: usize,
    /// Non-finite terms dropped.
    pub dropped: usize,
    /// Largest term, the shift used for stability.
    pub log_max: f64,
    /// Delta-method standard error of `log_mean`, using the effective
    /// sample size of the weights.
    pub mc_se: f64,
}

/// Drops non-finite terms (at most 1%) and forms the shifted log mean.
pub fn log_mean_estimate(terms: &[f64]) -> Result<LogMeanEstimate> {
    if terms.is_empty() {
        return Err(Error::Empty("no terms to average"));
    }
    let kept: Vec<f64> = terms.iter().copied().filter(|v| v.is_finite()).collect();
    let dropped = terms.len() - kept.len();
    if dropped as f64 > MAX_DROP_FRACTION * terms.len() as f64 || kept.is_empty() {
        return Err(Error::TooManyDropped {
            dropped,
            total: terms.len(),
        });
    }
    let log_max = kept.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = log_sum_exp(&kept)?;
    let nk = kept.len() as f64;
    let log_mean = log_sum - nk.ln();
    let w: Vec<f64> = kept.iter().map(|l| (l - log_max).exp()).collect();
    let mean_w = (log_mean - log_max).exp();
    let var_w = if kept.len() > 1 {
        w.iter().map(|x| (x - mean_w) * (x - mean_w)).sum::<f64>() / (nk - 1.0)
    } else {
        0.0
    };
    let ess = effective_sample_size(&w);
    let n_eff = if ess.degenerate { nk } else { ess.ess.clamp(1.0, nk) };
    Ok(LogMeanEstimate {
        log_mean,
        n: kept.len(),
        dropped,
        log_max,
        mc_se: var_w.sqrt() / (n_eff.sqrt() * mean_w),
    })
}

/// `log p(α = 0 | β, Y)`: the matrix-t of the α block of `B` under the
/// conditional posterior `B | Σ, β ~ MN(B⋆, A⋆^{-1}, Σ)`, `Σ | β ~ IW(S⋆, t+h)`.
pub fn log_l1<F: Real>(kernel: &MarginalKernel<'_, F>, beta: &ThinBeta<F>, exponent: L1Exponent) -> Result<f64> {
    let design = kernel.design();
    let r = design.r();
    let cond = kernel.conditional(beta)?;
    let part = BlockPartition::new(design.k(), r)?;
    let a221 = part.schur_22_1(cond.a_star.values())?;
    let b2 = part.alpha_rows(&cond.b_star);
    let nu = design.t() as f64 + kernel.prior().h.as_f64();
    let last = match exponent {
        L1Exponent::MatrixT => nu + r as f64,
        L1Exponent::Short => design.t() as f64 + r as f64,
    };
    log_matrix_t_at_zero(&b2, &a221, &cond.s_star, nu, last)
}

/// Rao-Blackwellised `log p(α = 0 | Y)` averaged over retained states.
pub fn log_posterior_alpha_zero<F: Real>(
    trace: &ChainTrace<F>,
    design: &EcmDesign<F>,
    prior: &PriorSpec<F>,
    exponent: L1Exponent,
) -> Result<LogMeanEstimate> {
    let kernel = MarginalKernel::new(design, prior)?;
    let terms: Vec<f64> = trace
        .retained()
        .iter()
        .map(|s| log_l1(&kernel, &s.beta, exponent).unwrap_or(f64::NAN))
        .collect();
    log_mean_estimate(&terms)
}

/// `log p(α = 0 | Γ, Σ)` under the prior `B | Σ ~ MN(P, A^{-1}, Σ)`: the α
/// rows given the Γ rows are `MN(P₂ − A₂₂^{-1}A₂₁(Γ − P₁), A₂₂^{-1}, Σ)`.
pub fn log_l2<F: Real>(prior: &PriorSpec<F>, r: usize, gamma: &DMatrix<F>, sigma: &SpdMatrix<F>) -> Result<f64> {
    let part = BlockPartition::new(prior.k(), r)?;
    let s = part.split(prior.a.values())?;
    let a22 = SpdMatrix::from_symmetric(s.a22)?;
    let p1 = part.gamma_block(&prior.p_mean);
    let p2 = part.alpha_rows(&prior.p_mean);
    if gamma.shape() != p1.shape() {
        return Err(Error::dim("gamma block", p1.nrows(), gamma.nrows()));
    }
    let mean = p2 - a22.chol().solve(&(s.a12.transpose() * (gamma - p1)));
    let n = prior.n() as f64;
    let rf = r as f64;
    // tr(Σ^{-1} m' A₂₂ m) with m = 0 − mean
    let lm = a22.chol().l().transpose() * &mean;
    let quad = sigma.chol().solve(&(lm.transpose() * &lm)).trace().as_f64();
    Ok(
        -0.5 * n * rf * std::f64::consts::TAU.ln() + 0.5 * n * a22.chol().log_det().as_f64()
            - 0.5 * rf * sigma.chol().log_det().as_f64()
            - 0.5 * quad,
    )
}

/// `log C_r`: log mean of [`log_l2`] over the retained states of the
/// rank-`r` chain.
pub fn log_correction_cr<F: Real>(trace: &ChainTrace<F>, prior: &PriorSpec<F>) -> Result<LogMeanEstimate> {
    let r = prior.r();
    let part = BlockPartition::new(prior.k(), r)?;
    let terms: Vec<f64> = trace
        .retained()
        .iter()
        .map(|s| log_l2(prior, r, &part.gamma_block(&s.b), &s.sigma).unwrap_or(f64::NAN))
        .collect();
    log_mean_estimate(&terms)
}

/// Log density of `X ~ MN(M, Λ^{-1}, Σ)` with row precision `Λ`.
fn log_mn_density<F: Real>(x: &DMatrix<F>, mean: &DMatrix<F>, row_prec: &SpdMatrix<F>, col_cov: &SpdMatrix<F>) -> f64 {
    let (k, n) = x.shape();
    let l = row_prec.chol().l().transpose() * (x - mean);
    let quad = col_cov.chol().solve(&(l.transpose() * &l)).trace().as_f64();
    -0.5 * (k * n) as f64 * std::f64::consts::TAU.ln() + 0.5 * n as f64 * row_prec.chol().log_det().as_f64()
        - 0.5 * k as f64 * col_cov.chol().log_det().as_f64()
        - 0.5 * quad
}

/// Exact posterior draws `(Γ, Σ)` of the rank-zero model (`W = X`).
pub fn rank_zero_draws<F: Real, R: Rng + ?Sized>(
    design0: &EcmDesign<F>,
    prior0: &PriorSpec<F>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<ChainState<F>>> {
    if design0.r() != 0 {
        return Err(Error::Parameter("rank-zero draws need a rank-zero design".into()));
    }
    let kernel = MarginalKernel::new(design0, prior0)?;
    let beta = ThinBeta::zeros(design0.n(), 0);
    let cond = kernel.conditional(&beta)?;
    let dof = design0.t() as f64 + prior0.h.as_f64();
    (0..count)
        .map(|_| {
            let sigma = sample_inverse_wishart(&cond.s_star, dof, rng)?;
            let b = sample_matrix_normal(&cond.b_star, &cond.a_star, &sigma, rng)?;
            Ok(ChainState {
                beta: beta.clone(),
                b,
                sigma,
            })
        })
        .collect()
}

/// Correction for differing Γ priors between the rank-`r` and rank-zero
/// models, averaged over rank-zero posterior draws:
/// `E₀[p_r(α=0 | Γ, Σ) p_r(Γ | Σ) / p₀(Γ | Σ)]`.
///
/// Divided by `p(α=0 | Y)` this gives the Bayes factor without a separate
/// prior-density term.
pub fn log_correction_nested<F: Real>(
    draws0: &[ChainState<F>],
    prior_r: &PriorSpec<F>,
    prior0: &PriorSpec<F>,
) -> Result<LogMeanEstimate> {
    let r = prior_r.r();
    let part = BlockPartition::new(prior_r.k(), r)?;
    // marginal of the Γ rows under the rank-r prior: row precision A₁₁.₂
    let gamma_prec = {
        let s = part.split(prior_r.a.values())?;
        if r == 0 {
            prior_r.a.clone()
        } else {
            let c22 = Chol::factor(&s.a22)?;
            let m = c22.solve_lower(&s.a12.transpose());
            SpdMatrix::from_symmetric(symmetrize(&(s.a11 - m.transpose() * m)))?
        }
    };
    let p1 = part.gamma_block(&prior_r.p_mean);
    let terms: Vec<f64> = draws0
        .iter()
        .map(|s| {
            let g = &s.b;
            let l2 = log_l2(prior_r, r, g, &s.sigma).unwrap_or(f64::NAN);
            let pr = log_mn_density(g, &p1, &gamma_prec, &s.sigma);
            let p0 = log_mn_density(g, &prior0.p_mean, &prior0.a, &s.sigma);
            l2 + pr - p0
        })
        .collect();
    log_mean_estimate(&terms)
}

/// How the Bayes factor combines its pieces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfEstimator {
    /// `log p(α=0) + log C_r − log p(α=0|Y)` with `C_r` from the rank-`r` chain.
    ChainCorrection,
    /// `log E₀[…] − log p(α=0|Y)` using rank-zero posterior draws
    /// ([`log_correction_nested`]).
    NestedCorrection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankOptions {
    pub estimator: BfEstimator,
    pub alpha_prior: AlphaPriorForm,
    pub l1_exponent: L1Exponent,
    /// Rank-zero posterior draws for [`BfEstimator::NestedCorrection`].
    pub nested_draws: usize,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self {
            estimator: BfEstimator::NestedCorrection,
            alpha_prior: AlphaPriorForm::MatrixT,
            l1_exponent: L1Exponent::MatrixT,
            nested_draws: 10_000,
        }
    }
}

/// Evidence pieces for one rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankEvidence {
    pub r: usize,
    pub log_prior_alpha0: f64,
    pub log_post_alpha0: LogMeanEstimate,
    pub log_correction: LogMeanEstimate,
    pub log_bf: f64,
    /// Combined MC standard error of `log_bf`.
    pub mc_se: f64,
}

/// Bayes factor of rank `r ≥ 1` against rank zero from the rank-`r` chain.
///
/// `draws0` is only used by [`BfEstimator::NestedCorrection`].
pub fn rank_evidence<F: Real>(
    trace: &ChainTrace<F>,
    design: &EcmDesign<F>,
    prior: &PriorSpec<F>,
    prior0: &PriorSpec<F>,
    draws0: &[ChainState<F>],
    opts: &RankOptions,
) -> Result<RankEvidence> {
    let r = design.r();
    if r == 0 {
        return Err(Error::Parameter("rank zero is the reference model".into()));
    }
    let post = log_posterior_alpha_zero(trace, design, prior, opts.l1_exponent)?;
    let (log_prior, corr) = match opts.estimator {
        BfEstimator::ChainCorrection => (
            log_prior_alpha_zero(prior, r, opts.alpha_prior)?,
            log_correction_cr(trace, prior)?,
        ),
        BfEstimator::NestedCorrection => (0.0, log_correction_nested(draws0, prior, prior0)?),
    };
    Ok(RankEvidence {
        r,
        log_prior_alpha0: log_prior,
        log_post_alpha0: post,
        log_correction: corr,
        log_bf: log_prior + corr.log_mean - post.log_mean,
        mc_se: (post.mc_se.powi(2) + corr.mc_se.powi(2)).sqrt(),
    })
}

/// Normalised rank probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct RankPosterior {
    /// `log BF_{r|0}` for `r = 0..n`; `log_bf[0] = 0`. Excluded ranks hold `NaN`.
    pub log_bf: Vec<f64>,
    pub probs: Vec<f64>,
    pub mc_se: Vec<f64>,
    /// Ranks whose estimator failed; their probability is zero.
    pub excluded: Vec<usize>,
}

impl RankPosterior {
    /// Normalises `log_bf` (entry 0 must be the reference 0) with a max shift.
    /// Non-finite entries are excluded.
    pub fn from_log_bf(log_bf: Vec<f64>, mc_se: Vec<f64>) -> Result<Self> {
        if log_bf.is_empty() || log_bf.len() != mc_se.len() {
            return Err(Error::dim("log Bayes factors", log_bf.len(), mc_se.len()));
        }
        let excluded: Vec<usize> = (0..log_bf.len()).filter(|&i| !log_bf[i].is_finite()).collect();
        let max = log_bf
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NonFinite("every rank's Bayes factor"));
        }
        let shifted: Vec<f64> = log_bf
            .iter()
            .map(|v| if v.is_finite() { (v - max).exp() } else { 0.0 })
            .collect();
        let z: f64 = shifted.iter().sum();
        Ok(Self {
            probs: shifted.iter().map(|w| w / z).collect(),
            log_bf,
            mc_se,
            excluded,
        })
    }

    /// Assembles `r = 0..n` from per-rank results; failed ranks are excluded.
    pub fn from_evidence(n: usize, evidence: &[(usize, Result<RankEvidence>)]) -> Result<Self> {
        let mut log_bf = vec![f64::NAN; n + 1];
        let mut se = vec![f64::NAN; n + 1];
        log_bf[0] = 0.0;
        se[0] = 0.0;
        for (r, e) in evidence {
            if *r == 0 || *r > n {
                return Err(Error::Parameter(format!("rank {r} outside 1..={n}")));
            }
            if let Ok(e) = e {
                log_bf[*r] = e.log_bf;
                se[*r] = e.mc_se;
            }
        }
        Self::from_log_bf(log_bf, se)
    }

    pub fn map_rank(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc },
            )
            .0
    }
}

/// Mixture weights over ranks for model averaging.
pub fn bma_weights(rp: &RankPosterior) -> Vec<f64> {
    rp.probs.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalisation_shift_invariant() {
        let a = RankPosterior::from_log_bf(vec![0.0, 8.09, 2.91, -26.03], vec![0.0; 4]).unwrap();
        let b = RankPosterior::from_log_bf(vec![1000.0, 1008.09, 1002.91, 973.97], vec![0.0; 4]).unwrap();
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.probs[1] - 0.9944).abs() < 1e-3, "{:?}", a.probs);
        assert_eq!(a.map_rank(), 1);
        assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_evidence_is_uniform() {
        let p = RankPosterior::from_log_bf(vec![0.0; 5], vec![0.0; 5]).unwrap();
        assert!(p.probs.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn excluded_rank_renormalises() {
        let ev = vec![
            (
                1,
                Ok(RankEvidence {
                    r: 1,
                    log_prior_alpha0: 0.0,
                    log_post_alpha0: log_mean_estimate(&[0.0]).unwrap(),
                    log_correction: log_mean_estimate(&[0.0]).unwrap(),
                    log_bf: 0.0,
                    mc_se: 0.0,
                }),
            ),
            (2, Err(Error::Empty("x"))),
        ];
        let p = RankPosterior::from_evidence(2, &ev).unwrap();
        assert_eq!(p.excluded, vec![2]);
        assert_eq!(p.probs, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn drop_rule() {
        let mut terms = vec![1.0; 200];
        terms[3] = f64::NAN;
        terms[7] = f64::INFINITY;
        let e = log_mean_estimate(&terms).unwrap();
        assert_eq!(e.dropped, 2);
        assert!((e.log_mean - 1.0).abs() < 1e-14);
        terms[9] = f64::NAN;
        assert!(matches!(log_mean_estimate(&terms), Err(Error::TooManyDropped { .. })));
        assert_eq!(log_mean_estimate(&[2.5]).unwrap().log_mean, 2.5);
    }

    #[test]
    fn schur_complement() {
        let a = DMatrix::<f64>::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let part = BlockPartition::new(3, 1).unwrap();
        let s = part.schur_22_1(&a).unwrap();
        // (A^{-1})_{22} inverted
        let inv = a.clone().try_inverse().unwrap();
        assert!((s.values()[(0, 0)] - 1.0 / inv[(2, 2)]).abs() < 1e-12);
    }
}
