//! Error-correction regression form of a cointegrated VAR and the conjugate
//! posterior summaries conditional on the cointegration vectors.
//!
//! Levels `x_0, …, x_T` are stored one row per time step. For lag `p` the
//! regression `Y = W B + E` with `W = [X | Zβ]` has `t = T − p + 1` rows:
//!
//! * `Y` row `i` is `Δx_{p+i}`,
//! * `X` row `i` is `[1, Δx_{p+i-1}', …, Δx_{i+1}']`,
//! * `Z` row `i` is `x_{p+i-1}'`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matrix_stats::{symmetrize, Chol, SpdMatrix};
use crate::scalar::Real;

/// Raw level observations, one row per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesPanel<F: Real> {
    levels: DMatrix<F>,
    labels: Vec<String>,
    timestamps: Option<Vec<String>>,
}

impl<F: Real> TimeSeriesPanel<F> {
    pub fn new(levels: DMatrix<F>, labels: Vec<String>) -> Result<Self> {
        if labels.len() != levels.ncols() {
            return Err(Error::dim("panel labels", levels.ncols(), labels.len()));
        }
        if levels.ncols() == 0 {
            return Err(Error::Empty("panel has no series"));
        }
        if levels.iter().any(|v| !v.is_finite_val()) {
            return Err(Error::NonFinite("panel levels"));
        }
        Ok(Self {
            levels,
            labels,
            timestamps: None,
        })
    }

    /// Labels `x1..xn`.
    pub fn unlabelled(levels: DMatrix<F>) -> Result<Self> {
        let labels = (1..=levels.ncols()).map(|i| format!("x{i}")).collect();
        Self::new(levels, labels)
    }

    pub fn with_timestamps(mut self, stamps: Vec<String>) -> Result<Self> {
        if stamps.len() != self.rows() {
            return Err(Error::dim("panel timestamps", self.rows(), stamps.len()));
        }
        self.timestamps = Some(stamps);
        Ok(self)
    }

    /// Number of level rows (`T + 1`).
    pub fn rows(&self) -> usize {
        self.levels.nrows()
    }

    /// Index `T` of the last observation, i.e. `rows() - 1`.
    pub fn last_index(&self) -> usize {
        self.rows().saturating_sub(1)
    }

    pub fn n(&self) -> usize {
        self.levels.ncols()
    }

    pub fn levels(&self) -> &DMatrix<F> {
        &self.levels
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    /// Contiguous sub-panel of `len` rows starting at `start`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows() || len == 0 {
            return Err(Error::Parameter(format!(
                "window [{start}, {}) outside panel of {} rows",
                start + len,
                self.rows()
            )));
        }
        Ok(Self {
            levels: self.levels.rows(start, len).into_owned(),
            labels: self.labels.clone(),
            timestamps: self.timestamps.as_ref().map(|s| s[start..start + len].to_vec()),
        })
    }

    /// Last `count` level rows.
    pub fn tail(&self, count: usize) -> Result<DMatrix<F>> {
        if count > self.rows() {
            return Err(Error::InsufficientData {
                found: self.rows(),
                required: count,
                lag: count,
            });
        }
        Ok(self.levels.rows(self.rows() - count, count).into_owned())
    }
}

/// Sufficient cross-products of the regression blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossMoments<F: Real> {
    pub xtx: DMatrix<F>,
    pub xtz: DMatrix<F>,
    pub ztz: DMatrix<F>,
    pub xty: DMatrix<F>,
    pub zty: DMatrix<F>,
    pub yty: DMatrix<F>,
}

/// Regression matrices `Y`, `X`, `Z` for a given lag and rank.
#[derive(Debug, Clone, PartialEq)]
pub struct EcmDesign<F: Real> {
    y: DMatrix<F>,
    x: DMatrix<F>,
    z: DMatrix<F>,
    n: usize,
    p: usize,
    r: usize,
    moments: CrossMoments<F>,
}

impl<F: Real> EcmDesign<F> {
    pub fn y(&self) -> &DMatrix<F> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<F> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<F> {
        &self.z
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn r(&self) -> usize {
        self.r
    }

    /// Regression rows `t = T − p + 1`.
    pub fn t(&self) -> usize {
        self.y.nrows()
    }

    /// Observation count `T` of the source panel.
    pub fn big_t(&self) -> usize {
        self.t() + self.p - 1
    }

    /// Columns of `X`: `1 + n(p−1)`.
    pub fn kx(&self) -> usize {
        self.x.ncols()
    }

    /// Columns of `W`: `1 + n(p−1) + r`.
    pub fn k(&self) -> usize {
        self.kx() + self.r
    }

    /// Free entries of β: `(n − r)·r`.
    pub fn free_dim(&self) -> usize {
        (self.n - self.r) * self.r
    }

    pub fn moments(&self) -> &CrossMoments<F> {
        &self.moments
    }

    /// Same data, different cointegration rank.
    pub fn with_rank(&self, r: usize) -> Result<Self> {
        if r > self.n {
            return Err(Error::Parameter(format!("rank {r} exceeds dimension {}", self.n)));
        }
        let mut d = self.clone();
        d.r = r;
        Ok(d)
    }
}

/// Builds `Y`, `X`, `Z` from levels `x_0..x_T` (panel rows).
pub fn build_ecm_design<F: Real>(panel: &TimeSeriesPanel<F>, p: usize, r: usize) -> Result<EcmDesign<F>> {
    let n = panel.n();
    if p == 0 {
        return Err(Error::Parameter("lag p must be at least 1".into()));
    }
    if r > n {
        return Err(Error::Parameter(format!("rank {r} exceeds dimension {n}")));
    }
    let rows = panel.rows();
    if rows < p + 2 {
        return Err(Error::InsufficientData {
            found: rows,
            required: p + 2,
            lag: p,
        });
    }
    let lv = panel.levels();
    let big_t = rows - 1;
    let t = big_t + 1 - p;
    let kx = 1 + n * (p - 1);
    let diff = |s: usize, j: usize| lv[(s, j)] - lv[(s - 1, j)];

    let mut y = DMatrix::<F>::zeros(t, n);
    let mut x = DMatrix::<F>::zeros(t, kx);
    let mut z = DMatrix::<F>::zeros(t, n);
    for i in 0..t {
        let s = p + i;
        x[(i, 0)] = F::one();
        for j in 0..n {
            y[(i, j)] = diff(s, j);
            z[(i, j)] = lv[(s - 1, j)];
        }
        for lag in 1..p {
            for j in 0..n {
                x[(i, 1 + n * (lag - 1) + j)] = diff(s - lag, j);
            }
        }
    }
    let xt = x.transpose();
    let zt = z.transpose();
    let moments = CrossMoments {
        xtx: symmetrize(&(&xt * &x)),
        xtz: &xt * &z,
        ztz: symmetrize(&(&zt * &z)),
        xty: &xt * &y,
        zty: &zt * &y,
        yty: symmetrize(&(y.transpose() * &y)),
    };
    Ok(EcmDesign {
        y,
        x,
        z,
        n,
        p,
        r,
        moments,
    })
}

/// Cointegration matrix in identified form `β = [I_r ; β̃]`; only the
/// `(n−r)×r` block `β̃` is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinBeta<F: Real> {
    n: usize,
    r: usize,
    free: DMatrix<F>,
}

impl<F: Real> ThinBeta<F> {
    pub fn new(n: usize, r: usize, free: DMatrix<F>) -> Result<Self> {
        if r > n || free.shape() != (n - r, r) {
            return Err(Error::dim(
                "thin beta",
                format!("{}x{}", n.saturating_sub(r), r),
                format!("{}x{}", free.nrows(), free.ncols()),
            ));
        }
        Ok(Self { n, r, free })
    }

    pub fn zeros(n: usize, r: usize) -> Self {
        Self {
            n,
            r,
            free: DMatrix::zeros(n - r, r),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn dim(&self) -> usize {
        (self.n - self.r) * self.r
    }

    pub fn free(&self) -> &DMatrix<F> {
        &self.free
    }

    /// Full `n×r` matrix with the identity top block.
    pub fn full(&self) -> DMatrix<F> {
        let mut b = DMatrix::<F>::zeros(self.n, self.r);
        for j in 0..self.r {
            b[(j, j)] = F::one();
        }
        b.view_mut((self.r, 0), (self.n - self.r, self.r)).copy_from(&self.free);
        b
    }

    /// Column-major vectorization of `β̃`.
    pub fn to_vec(&self) -> DVector<F> {
        DVector::from_column_slice(self.free.as_slice())
    }

    pub fn from_vec(n: usize, r: usize, v: &DVector<F>) -> Result<Self> {
        if r > n || v.len() != (n - r) * r {
            return Err(Error::dim("thin beta vector", (n.saturating_sub(r)) * r, v.len()));
        }
        Ok(Self {
            n,
            r,
            free: DMatrix::from_column_slice(n - r, r, v.as_slice()),
        })
    }
}

/// `W = [X | Zβ]`.
pub fn assemble_w<F: Real>(design: &EcmDesign<F>, beta: &ThinBeta<F>) -> Result<DMatrix<F>> {
    check_beta(design, beta)?;
    let zb = design.z() * beta.full();
    let (t, kx) = design.x().shape();
    let mut w = DMatrix::<F>::zeros(t, kx + beta.r());
    w.view_mut((0, 0), (t, kx)).copy_from(design.x());
    w.view_mut((0, kx), (t, beta.r())).copy_from(&zb);
    Ok(w)
}

fn check_beta<F: Real>(design: &EcmDesign<F>, beta: &ThinBeta<F>) -> Result<()> {
    if beta.n() != design.n() || beta.r() != design.r() {
        return Err(Error::dim(
            "beta vs design",
            format!("n={}, r={}", design.n(), design.r()),
            format!("n={}, r={}", beta.n(), beta.r()),
        ));
    }
    Ok(())
}

/// Scalars used by the default hyperparameter construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSettings {
    /// Scale of `A = λ Ŵ'Ŵ / T`.
    pub lambda: f64,
    /// Scale of `H = τ Z'Z` and `S = τ Y'Y`; `None` means `1/T`.
    pub tau: Option<f64>,
    /// Inverse-Wishart degrees of freedom; `None` means `n + 1`.
    pub dof: Option<f64>,
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            tau: None,
            dof: None,
        }
    }
}

/// Conjugate hierarchical prior:
/// `β ~ N(β̄, Q ⊗ H^{-1})`, `Σ ~ IW(S, h)`, `B | Σ ~ N(P, Σ ⊗ A^{-1})`.
///
/// Only the free rows of β are random. Their prior is the marginal of the
/// matrix normal on rows `r+1..n`: mean `β̄₂`, row covariance `(H^{-1})₂₂`,
/// column covariance `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec<F: Real> {
    pub beta_mean: DMatrix<F>,
    pub q: SpdMatrix<F>,
    pub h_mat: SpdMatrix<F>,
    pub s: SpdMatrix<F>,
    pub h: F,
    pub p_mean: DMatrix<F>,
    pub a: SpdMatrix<F>,
    pub lambda: F,
    pub tau: F,
    free_row_cov: SpdMatrix<F>,
}

impl<F: Real> PriorSpec<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        beta_mean: DMatrix<F>,
        q: SpdMatrix<F>,
        h_mat: SpdMatrix<F>,
        s: SpdMatrix<F>,
        h: F,
        p_mean: DMatrix<F>,
        a: SpdMatrix<F>,
        lambda: F,
        tau: F,
    ) -> Result<Self> {
        let (n, r) = beta_mean.shape();
        if q.dim() != r || h_mat.dim() != n || s.dim() != n || p_mean.ncols() != n || a.dim() != p_mean.nrows() {
            return Err(Error::dim(
                "prior",
                format!("beta_mean {n}x{r}: Q {r}, H {n}, S {n}, P kx{n}, A k"),
                format!(
                    "Q {}, H {}, S {}, P {}x{}, A {}",
                    q.dim(),
                    h_mat.dim(),
                    s.dim(),
                    p_mean.nrows(),
                    p_mean.ncols(),
                    a.dim()
                ),
            ));
        }
        if !(h.as_f64() > n as f64 - 1.0) {
            return Err(Error::Parameter(format!(
                "prior dof h = {h} must exceed n - 1 = {}",
                n - 1
            )));
        }
        let h_inv = h_mat.inverse();
        let free_row_cov = SpdMatrix::from_symmetric(h_inv.view((r, r), (n - r, n - r)).into_owned())?;
        Ok(Self {
            beta_mean,
            q,
            h_mat,
            s,
            h,
            p_mean,
            a,
            lambda,
            tau,
            free_row_cov,
        })
    }

    /// Default construction: `β̂ = [I_r; 0]`, `Ŵ = [X | Zβ̂]`,
    /// `P = (Ŵ'Ŵ)^{-1}Ŵ'Y`, `A = λ Ŵ'Ŵ/T`, `E[β] = β̂`, `Q = I_r`,
    /// `H = τ Z'Z`, `S = τ Y'Y`, `h = n + 1`, `τ = 1/T`.
    pub fn default_for(design: &EcmDesign<F>, settings: PriorSettings) -> Result<Self> {
        let n = design.n();
        let r = design.r();
        let big_t = design.big_t() as f64;
        let tau = F::lit(settings.tau.unwrap_or(1.0 / big_t));
        let lambda = F::lit(settings.lambda);
        let h = F::lit(settings.dof.unwrap_or(n as f64 + 1.0));
        let beta_hat = ThinBeta::zeros(n, r);
        let w_hat = assemble_w(design, &beta_hat)?;
        let wtw = symmetrize(&(w_hat.transpose() * &w_hat));
        let wty = w_hat.transpose() * design.y();
        let (p_mean, _) = ridge_solve(&wtw, &wty, true)?;
        let a = SpdMatrix::from_symmetric(&wtw * (lambda / F::lit(big_t)))?;
        let q = SpdMatrix::identity(r);
        let h_mat = SpdMatrix::from_symmetric(&design.moments().ztz * tau)?;
        let s = SpdMatrix::from_symmetric(&design.moments().yty * tau)?;
        Self::new(beta_hat.full(), q, h_mat, s, h, p_mean, a, lambda, tau)
    }

    pub fn n(&self) -> usize {
        self.beta_mean.nrows()
    }

    pub fn r(&self) -> usize {
        self.beta_mean.ncols()
    }

    pub fn k(&self) -> usize {
        self.a.dim()
    }

    /// Row covariance `(H^{-1})₂₂` of the free block.
    pub fn free_row_cov(&self) -> &SpdMatrix<F> {
        &self.free_row_cov
    }

    pub fn free_mean(&self) -> DMatrix<F> {
        let (n, r) = self.beta_mean.shape();
        self.beta_mean.view((r, 0), (n - r, r)).into_owned()
    }

    /// Normalised log density of `β̃` under its matrix-normal prior.
    pub fn log_prior_beta(&self, beta: &ThinBeta<F>) -> F {
        let (n, r) = self.beta_mean.shape();
        if beta.dim() == 0 {
            return F::zero();
        }
        let half = F::lit(0.5);
        let d = beta.free() - self.free_mean();
        let m = self.free_row_cov.chol().solve_lower(&d);
        let nm = self.q.chol().solve_lower(&m.transpose());
        let quad = nm.norm_squared();
        let dim = F::from_usize_lossy((n - r) * r);
        -half * quad
            - half * dim * F::two_pi().ln()
            - half * F::from_usize_lossy(r) * self.free_row_cov.chol().log_det()
            - half * F::from_usize_lossy(n - r) * self.q.chol().log_det()
    }
}

/// Solves `G X = R` by Cholesky, falling back to a ridge of
/// `1e-10·tr(G)/k` when `G` is singular and `allow_ridge` is set.
pub fn ridge_solve<F: Real>(g: &DMatrix<F>, rhs: &DMatrix<F>, allow_ridge: bool) -> Result<(DMatrix<F>, Option<F>)> {
    match Chol::factor(g) {
        Ok(c) if !c.jittered() => Ok((c.solve(rhs), None)),
        other => {
            let pivot = match other {
                Err(Error::NotPositiveDefinite { pivot, .. }) => Some(pivot),
                _ => None,
            };
            if !allow_ridge {
                return Err(Error::RankDeficient {
                    columns: pivot.into_iter().collect(),
                });
            }
            let k = g.nrows().max(1);
            let eps = F::lit(1e-10) * g.trace() / F::from_usize_lossy(k);
            let eps = if eps > F::zero() { eps } else { F::lit(1e-10) };
            let c = Chol::factor(&(g + DMatrix::identity(g.nrows(), g.nrows()) * eps))?;
            Ok((c.solve(rhs), Some(eps)))
        }
    }
}

/// Conditional posterior quantities given β.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary<F: Real> {
    pub a_star: SpdMatrix<F>,
    pub b_star: DMatrix<F>,
    pub s_star: SpdMatrix<F>,
    pub b_hat: DMatrix<F>,
    pub s_hat: DMatrix<F>,
    pub w: DMatrix<F>,
    /// Ridge added to `W'W` when computing `B̂`, if it was singular.
    pub ridge: Option<F>,
}

impl<F: Real> PosteriorSummary<F> {
    /// `R = (B − B̂)' W'W (B − B̂)`.
    pub fn residual_quadratic(&self, b: &DMatrix<F>) -> DMatrix<F> {
        let d = b - &self.b_hat;
        d.transpose() * (self.w.transpose() * &self.w) * d
    }
}

/// `A⋆ = A + W'W`, `B⋆ = A⋆^{-1}(AP + W'W B̂)`,
/// `S⋆ = S + Ŝ + (P − B̂)'[A^{-1} + (W'W)^{-1}]^{-1}(P − B̂)`.
pub fn posterior_summary<F: Real>(
    design: &EcmDesign<F>,
    beta: &ThinBeta<F>,
    prior: &PriorSpec<F>,
) -> Result<PosteriorSummary<F>> {
    posterior_summary_with(design, beta, prior, true)
}

pub fn posterior_summary_with<F: Real>(
    design: &EcmDesign<F>,
    beta: &ThinBeta<F>,
    prior: &PriorSpec<F>,
    allow_ridge: bool,
) -> Result<PosteriorSummary<F>> {
    if design.t() == 0 {
        return Err(Error::Empty("design has no rows"));
    }
    if prior.k() != design.k() || prior.n() != design.n() {
        return Err(Error::dim(
            "prior vs design",
            format!("k={}, n={}", design.k(), design.n()),
            format!("k={}, n={}", prior.k(), prior.n()),
        ));
    }
    let w = assemble_w(design, beta)?;
    let wt = w.transpose();
    let wtw = symmetrize(&(&wt * &w));
    let wty = &wt * design.y();
    let (b_hat, ridge) = ridge_solve(&wtw, &wty, allow_ridge)?;
    let resid = design.y() - &w * &b_hat;
    let s_hat = symmetrize(&(resid.transpose() * &resid));

    let a = prior.a.values();
    let a_star = SpdMatrix::from_symmetric(a + &wtw)?;
    let b_star = a_star.chol().solve(&(a * &prior.p_mean + &wtw * &b_hat));
    // [A^{-1} + (W'W)^{-1}]^{-1} = A − A (A + W'W)^{-1} A
    let middle = a - a * a_star.chol().solve(a);
    let dp = &prior.p_mean - &b_hat;
    let s_star = SpdMatrix::from_symmetric(prior.s.values() + &s_hat + dp.transpose() * middle * &dp)?;
    Ok(PosteriorSummary {
        a_star,
        b_star,
        s_star,
        b_hat,
        s_hat,
        w,
        ridge,
    })
}

/// Exponent multiplying `log|S⋆|` in the collapsed β target: `(t + h + 1)/2`.
pub fn sigma_exponent<F: Real>(design: &EcmDesign<F>, prior: &PriorSpec<F>) -> F {
    (F::from_usize_lossy(design.t()) + prior.h + F::one()) * F::lit(0.5)
}

/// Unnormalised `log p(β|Y) = log p(β̃) − (t+h+1)/2 log|S⋆| − n/2 log|A⋆|`,
/// evaluated through [`posterior_summary`].
pub fn log_marginal_beta<F: Real>(design: &EcmDesign<F>, beta: &ThinBeta<F>, prior: &PriorSpec<F>) -> Result<F> {
    let ps = posterior_summary(design, beta, prior)?;
    let half_n = F::from_usize_lossy(design.n()) * F::lit(0.5);
    Ok(prior.log_prior_beta(beta)
        - sigma_exponent(design, prior) * ps.s_star.chol().log_det()
        - half_n * ps.a_star.chol().log_det())
}

/// Conditional posterior of `(B, Σ)` given β, from cross-moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional<F: Real> {
    pub a_star: SpdMatrix<F>,
    pub b_star: DMatrix<F>,
    pub s_star: SpdMatrix<F>,
    pub wtw: DMatrix<F>,
    pub wty: DMatrix<F>,
}

/// Moment-based evaluator of the β target and of the `(B, Σ)` conditionals.
///
/// Works entirely with `k×k` and `n×n` cross products, using the completed
/// square `S⋆ = S + Y'Y + P'AP − B⋆'A⋆B⋆`, so it never forms `W` or inverts
/// `W'W`.
#[derive(Debug, Clone)]
pub struct MarginalKernel<'a, F: Real> {
    design: &'a EcmDesign<F>,
    prior: &'a PriorSpec<F>,
    ap: DMatrix<F>,
    s_base: DMatrix<F>,
    sigma_exp: F,
}

impl<'a, F: Real> MarginalKernel<'a, F> {
    pub fn new(design: &'a EcmDesign<F>, prior: &'a PriorSpec<F>) -> Result<Self> {
        if prior.k() != design.k() || prior.n() != design.n() || prior.r() != design.r() {
            return Err(Error::dim(
                "prior vs design",
                format!("k={}, n={}, r={}", design.k(), design.n(), design.r()),
                format!("k={}, n={}, r={}", prior.k(), prior.n(), prior.r()),
            ));
        }
        if design.t() == 0 {
            return Err(Error::Empty("design has no rows"));
        }
        let ap = prior.a.values() * &prior.p_mean;
        let s_base = prior.s.values() + &design.moments().yty + prior.p_mean.transpose() * &ap;
        Ok(Self {
            design,
            prior,
            ap,
            s_base,
            sigma_exp: sigma_exponent(design, prior),
        })
    }

    pub fn design(&self) -> &'a EcmDesign<F> {
        self.design
    }

    pub fn prior(&self) -> &'a PriorSpec<F> {
        self.prior
    }

    /// `(W'W, W'Y)` for `W = [X | Zβ]`.
    pub fn cross_products(&self, beta: &ThinBeta<F>) -> Result<(DMatrix<F>, DMatrix<F>)> {
        check_beta(self.design, beta)?;
        let m = self.design.moments();
        let kx = self.design.kx();
        let r = beta.r();
        let k = kx + r;
        let b = beta.full();
        let xtzb = &m.xtz * &b;
        let btztzb = b.transpose() * &m.ztz * &b;
        let mut wtw = DMatrix::<F>::zeros(k, k);
        wtw.view_mut((0, 0), (kx, kx)).copy_from(&m.xtx);
        wtw.view_mut((0, kx), (kx, r)).copy_from(&xtzb);
        wtw.view_mut((kx, 0), (r, kx)).copy_from(&xtzb.transpose());
        wtw.view_mut((kx, kx), (r, r)).copy_from(&symmetrize(&btztzb));
        let mut wty = DMatrix::<F>::zeros(k, self.design.n());
        wty.view_mut((0, 0), (kx, self.design.n())).copy_from(&m.xty);
        wty.view_mut((kx, 0), (r, self.design.n()))
            .copy_from(&(b.transpose() * &m.zty));
        Ok((wtw, wty))
    }

    pub fn conditional(&self, beta: &ThinBeta<F>) -> Result<Conditional<F>> {
        let (wtw, wty) = self.cross_products(beta)?;
        let a_star = SpdMatrix::from_symmetric(self.prior.a.values() + &wtw)?;
        let rhs = &self.ap + &wty;
        let b_star = a_star.chol().solve(&rhs);
        let s_star = SpdMatrix::from_symmetric(&self.s_base - rhs.transpose() * &b_star)?;
        Ok(Conditional {
            a_star,
            b_star,
            s_star,
            wtw,
            wty,
        })
    }

    pub fn log_density_given(&self, beta: &ThinBeta<F>, cond: &Conditional<F>) -> F {
        let half_n = F::from_usize_lossy(self.design.n()) * F::lit(0.5);
        self.prior.log_prior_beta(beta)
            - self.sigma_exp * cond.s_star.chol().log_det()
            - half_n * cond.a_star.chol().log_det()
    }

    /// Unnormalised collapsed target `log p(β|Y)`.
    pub fn log_density(&self, beta: &ThinBeta<F>) -> Result<F> {
        let cond = self.conditional(beta)?;
        Ok(self.log_density_given(beta, &cond))
    }

    /// β-dependent part of `log p(B, Σ, β | Y)` at fixed `(B, Σ)`:
    /// `log p(β̃) − ½ tr(Σ^{-1}(Y − WB)'(Y − WB))`.
    pub fn log_joint(&self, beta: &ThinBeta<F>, b: &DMatrix<F>, sigma: &SpdMatrix<F>) -> Result<F> {
        let (wtw, wty) = self.cross_products(beta)?;
        let m = self.design.moments();
        let btwty = b.transpose() * &wty;
        let rss = &m.yty - &btwty - btwty.transpose() + b.transpose() * &wtw * b;
        let quad = sigma.chol().solve(&symmetrize(&rss)).trace();
        Ok(self.prior.log_prior_beta(beta) - F::lit(0.5) * quad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix_stats::standard_normal_matrix;
    use crate::rng::RngStream;

    fn random_walk_panel(rows: usize, n: usize, seed: u64) -> TimeSeriesPanel<f64> {
        let mut rng = RngStream::new(seed, 0);
        let e: DMatrix<f64> = standard_normal_matrix(rows, n, &mut rng);
        let mut lv = DMatrix::zeros(rows, n);
        for i in 0..rows {
            for j in 0..n {
                lv[(i, j)] = if i == 0 {
                    5.0 + e[(i, j)]
                } else {
                    lv[(i - 1, j)] + e[(i, j)] + 0.05
                };
            }
        }
        TimeSeriesPanel::unlabelled(lv).unwrap()
    }

    #[test]
    fn design_dimensions() {
        let panel = random_walk_panel(101, 3, 1);
        let d = build_ecm_design(&panel, 2, 1).unwrap();
        assert_eq!(d.t(), 99);
        assert_eq!(d.x().shape(), (99, 4));
        assert_eq!(d.k(), 5);
        assert_eq!(d.big_t(), 100);
    }

    #[test]
    fn no_lag_design_is_intercept_only() {
        let panel = random_walk_panel(11, 2, 2);
        let d = build_ecm_design(&panel, 1, 0).unwrap();
        assert_eq!(d.t(), 10);
        assert_eq!(d.x(), &DMatrix::from_element(10, 1, 1.0));
        assert_eq!(d.k(), 1);
    }

    #[test]
    fn constant_series_has_zero_response() {
        let panel = TimeSeriesPanel::unlabelled(DMatrix::from_element(12, 2, 3.0)).unwrap();
        let d = build_ecm_design(&panel, 2, 1).unwrap();
        assert!(d.y().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_rebuild_levels() {
        let panel = random_walk_panel(40, 3, 3);
        let p = 3;
        let d = build_ecm_design(&panel, p, 2).unwrap();
        for i in 0..d.t() {
            for j in 0..3 {
                assert!((d.y()[(i, j)] + d.z()[(i, j)] - panel.levels()[(p + i, j)]).abs() < 1e-12);
                assert_eq!(d.z()[(i, j)], panel.levels()[(p + i - 1, j)]);
            }
            assert_eq!(d.x()[(i, 0)], 1.0);
            // first lagged difference block is Δx_{p+i-1}
            for j in 0..3 {
                let expect = panel.levels()[(p + i - 1, j)] - panel.levels()[(p + i - 2, j)];
                assert_eq!(d.x()[(i, 1 + j)], expect);
            }
        }
    }

    #[test]
    fn insufficient_data() {
        let panel = random_walk_panel(3, 2, 4);
        match build_ecm_design(&panel, 2, 1) {
            Err(Error::InsufficientData { required, .. }) => assert_eq!(required, 4),
            other => panic!("{other:?}"),
        }
        assert!(build_ecm_design(&panel, 0, 1).is_err());
        assert!(build_ecm_design(&random_walk_panel(10, 2, 4), 1, 3).is_err());
    }

    #[test]
    fn w_blocks() {
        let panel = random_walk_panel(30, 3, 5);
        let d0 = build_ecm_design(&panel, 2, 0).unwrap();
        assert_eq!(&assemble_w(&d0, &ThinBeta::zeros(3, 0)).unwrap(), d0.x());
        let d2 = build_ecm_design(&panel, 2, 2).unwrap();
        let w = assemble_w(&d2, &ThinBeta::zeros(3, 2)).unwrap();
        assert_eq!(w.columns(d2.kx(), 2), d2.z().columns(0, 2));
        assert!(assemble_w(&d2, &ThinBeta::zeros(3, 1)).is_err());
    }

    #[test]
    fn thin_beta_layout() {
        let free = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let b = ThinBeta::new(4, 2, free).unwrap();
        let full = b.full();
        assert_eq!(full.view((0, 0), (2, 2)), DMatrix::<f64>::identity(2, 2));
        assert_eq!(b.to_vec().as_slice(), &[0.1, 0.3, 0.2, 0.4]);
        assert_eq!(ThinBeta::from_vec(4, 2, &b.to_vec()).unwrap(), b);
        assert!(ThinBeta::new(4, 2, DMatrix::<f64>::zeros(3, 2)).is_err());
    }

    #[test]
    fn moment_kernel_matches_direct_summary() {
        let panel = random_walk_panel(60, 3, 6);
        let d = build_ecm_design(&panel, 2, 1).unwrap();
        let prior = PriorSpec::default_for(&d, PriorSettings::default()).unwrap();
        let beta = ThinBeta::new(3, 1, DMatrix::from_column_slice(2, 1, &[-0.7, 0.4])).unwrap();
        let ps = posterior_summary(&d, &beta, &prior).unwrap();
        let k = MarginalKernel::new(&d, &prior).unwrap();
        let c = k.conditional(&beta).unwrap();
        assert!((ps.a_star.values() - c.a_star.values()).amax() < 1e-8);
        assert!((&ps.b_star - &c.b_star).amax() < 1e-9);
        let rel = (ps.s_star.values() - c.s_star.values()).amax() / ps.s_star.values().amax();
        assert!(rel < 1e-10, "{rel}");
        let l1 = log_marginal_beta(&d, &beta, &prior).unwrap();
        let l2 = k.log_density(&beta).unwrap();
        assert!((l1 - l2).abs() < 1e-8, "{l1} vs {l2}");
    }

    #[test]
    fn a_star_minus_wtw_is_prior() {
        let panel = random_walk_panel(50, 2, 7);
        let d = build_ecm_design(&panel, 1, 1).unwrap();
        let prior = PriorSpec::default_for(&d, PriorSettings::default()).unwrap();
        let beta = ThinBeta::new(2, 1, DMatrix::from_element(1, 1, -1.2)).unwrap();
        let ps = posterior_summary(&d, &beta, &prior).unwrap();
        let wtw = ps.w.transpose() * &ps.w;
        assert!((ps.a_star.values() - wtw - prior.a.values()).amax() < 1e-12 * ps.a_star.values().amax());
    }

    #[test]
    fn residual_quadratic_vanishes_at_ols() {
        let panel = random_walk_panel(50, 2, 8);
        let d = build_ecm_design(&panel, 2, 1).unwrap();
        let prior = PriorSpec::default_for(&d, PriorSettings::default()).unwrap();
        let beta = ThinBeta::zeros(2, 1);
        let ps = posterior_summary(&d, &beta, &prior).unwrap();
        let r = ps.residual_quadratic(&ps.b_hat.clone());
        assert!(r.amax() < 1e-10);
        // tr[Σ^{-1}(Ŝ + R)] at B = B̂ equals tr[Σ^{-1} Ŝ]
        let sigma = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.8])).unwrap();
        let lhs = sigma.chol().solve(&(&ps.s_hat + r)).trace();
        let rhs = sigma.chol().solve(&ps.s_hat).trace();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn empty_design_rejected() {
        // two level rows with p = 1 would give t = 1; zero-row designs cannot be built
        let panel = random_walk_panel(2, 2, 9);
        assert!(build_ecm_design(&panel, 1, 1).is_err());
    }

    #[test]
    fn prior_dimensions_validated() {
        let panel = random_walk_panel(30, 3, 10);
        let d = build_ecm_design(&panel, 1, 1).unwrap();
        let p = PriorSpec::default_for(&d, PriorSettings::default()).unwrap();
        assert_eq!(p.k(), d.k());
        assert_eq!(p.q.dim(), 1);
        assert_eq!(p.h, 4.0);
        let bad = PriorSpec::new(
            p.beta_mean.clone(),
            p.q.clone(),
            p.h_mat.clone(),
            p.s.clone(),
            1.5,
            p.p_mean.clone(),
            p.a.clone(),
            1.0,
            p.tau,
        );
        assert!(bad.is_err());
        let d2 = d.with_rank(2).unwrap();
        assert!(MarginalKernel::new(&d2, &p).is_err());
    }
}
