use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::target::{CollapsedTarget, LogTarget};
use crate::ecm::{posterior_summary, ridge_solve, EcmDesign, PriorSpec, ThinBeta};
use crate::error::{Error, Result};
use crate::matrix_stats::{symmetrize, Chol, SpdMatrix};
use crate::scalar::Real;

/// Proposal standard deviation used when the Hessian is unusable.
pub const FALLBACK_SD: f64 = 0.1;

/// Reduced-rank regression output.
#[derive(Debug, Clone, PartialEq)]
pub struct JohansenFit<F: Real> {
    pub beta: ThinBeta<F>,
    /// Squared canonical correlations, descending.
    pub eigenvalues: DVector<F>,
    /// Generalized eigenvectors `V` (columns), same order as `eigenvalues`.
    pub vectors: DMatrix<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlEstimate<F: Real> {
    pub beta_ml: ThinBeta<F>,
    /// Inverse negative Hessian of the collapsed log target at `beta_ml`.
    pub fisher_cov: SpdMatrix<F>,
    pub sigma_ml: SpdMatrix<F>,
    pub eigenvalues: DVector<F>,
    /// Set when the Hessian was not negative definite and `0.1²·I` was used.
    pub hessian_fallback: bool,
}

impl<F: Real> MlEstimate<F> {
    pub fn dim(&self) -> usize {
        self.beta_ml.dim()
    }
}

/// Johansen reduced-rank regression of `ΔY` on `Z` after partialling out `X`.
pub fn johansen<F: Real>(design: &EcmDesign<F>) -> Result<JohansenFit<F>> {
    let n = design.n();
    let r = design.r();
    let m = design.moments();
    let t = F::from_usize_lossy(design.t());
    let (xtx_inv_xty, _) = ridge_solve(&m.xtx, &m.xty, true)?;
    let (xtx_inv_xtz, _) = ridge_solve(&m.xtx, &m.xtz, true)?;
    let s00 = symmetrize(&((&m.yty - m.xty.transpose() * &xtx_inv_xty) / t));
    let s11 = symmetrize(&((&m.ztz - m.xtz.transpose() * &xtx_inv_xtz) / t));
    let s01 = (m.zty.transpose() - m.xty.transpose() * &xtx_inv_xtz) / t;

    let c11 = Chol::factor(&s11)?;
    let c00 = Chol::factor(&s00)?;
    // L^{-1} S10 S00^{-1} S01 L^{-T}
    let g = c11.solve_lower(&s01.transpose());
    let h = c00.solve_lower(&g.transpose());
    let m_sym = symmetrize(&(h.transpose() * &h));
    let eig = SymmetricEigen::new(m_sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut u = DMatrix::<F>::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        u.set_column(c, &eig.eigenvectors.column(i));
    }
    let vectors = c11.solve_upper_t(&u);

    if r == 0 {
        return Ok(JohansenFit {
            beta: ThinBeta::zeros(n, 0),
            eigenvalues,
            vectors,
        });
    }
    let vr = vectors.columns(0, r).into_owned();
    let top = vr.rows(0, r).into_owned();
    let scale = top.amax();
    let det = top.clone().lu().determinant();
    if !(scale > F::zero()) || det.abs() <= F::lit(1e-12) * scale.powi(r as i32) {
        return Err(Error::Normalisation { rank: r });
    }
    let top_inv = top.try_inverse().ok_or(Error::Normalisation { rank: r })?;
    let beta_full = vr * top_inv;
    if beta_full.iter().any(|v| !v.is_finite_val()) {
        return Err(Error::Normalisation { rank: r });
    }
    let free = beta_full.rows(r, n - r).into_owned();
    Ok(JohansenFit {
        beta: ThinBeta::new(n, r, free)?,
        eigenvalues,
        vectors,
    })
}

/// Central-difference Hessian with step `1e-4·(1+|θ_i|)`.
pub fn numeric_hessian<F: Real, T: LogTarget<F> + ?Sized>(target: &T, theta: &DVector<F>) -> Result<DMatrix<F>> {
    let d = theta.len();
    let steps: Vec<F> = theta.iter().map(|v| F::lit(1e-4) * (F::one() + v.abs())).collect();
    let f0 = target.log_density(theta)?;
    let eval = |shifts: &[(usize, F)]| -> Result<F> {
        let mut x = theta.clone();
        for &(i, s) in shifts {
            x[i] += s;
        }
        target.log_density(&x)
    };
    let mut h = DMatrix::<F>::zeros(d, d);
    for i in 0..d {
        let hi = steps[i];
        let fp = eval(&[(i, hi)])?;
        let fm = eval(&[(i, -hi)])?;
        h[(i, i)] = (fp - f0 - f0 + fm) / (hi * hi);
        for j in 0..i {
            let hj = steps[j];
            let fpp = eval(&[(i, hi), (j, hj)])?;
            let fpm = eval(&[(i, hi), (j, -hj)])?;
            let fmp = eval(&[(i, -hi), (j, hj)])?;
            let fmm = eval(&[(i, -hi), (j, -hj)])?;
            let v = (fpp - fpm - fmp + fmm) / (F::lit(4.0) * hi * hj);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(h)
}

/// ML cointegration vectors plus the curvature-based global proposal.
pub fn ml_estimate<F: Real>(design: &EcmDesign<F>, prior: &PriorSpec<F>) -> Result<MlEstimate<F>> {
    let fit = johansen(design)?;
    let target = CollapsedTarget::new(design, prior)?;
    let theta = fit.beta.to_vec();
    let d = theta.len();

    let mut hessian_fallback = false;
    let fisher_cov = if d == 0 {
        SpdMatrix::identity(0)
    } else {
        let h = numeric_hessian(&target, &theta);
        let neg = h.ok().map(|h| symmetrize(&(-h)));
        let strict = neg
            .as_ref()
            .and_then(|m| Chol::factor(m).ok().filter(|c| !c.jittered()));
        match strict.and_then(|c| SpdMatrix::from_symmetric(c.inverse()).ok()) {
            Some(cov) => cov,
            None => {
                hessian_fallback = true;
                SpdMatrix::scaled_identity(d, F::lit(FALLBACK_SD * FALLBACK_SD))?
            }
        }
    };
    let ps = posterior_summary(design, &fit.beta, prior)?;
    let sigma_ml = SpdMatrix::from_symmetric(&ps.s_hat / F::from_usize_lossy(design.t()))?;
    Ok(MlEstimate {
        beta_ml: fit.beta,
        fisher_cov,
        sigma_ml,
        eigenvalues: fit.eigenvalues,
        hessian_fallback,
    })
}
