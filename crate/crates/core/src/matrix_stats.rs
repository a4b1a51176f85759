//! Dense-matrix statistical primitives: Cholesky-backed SPD matrices,
//! log-determinants, multivariate gamma, Wishart-family and matrix-normal
//! samplers, running covariance and log-mean-exp.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Absolute tolerance on asymmetry accepted by [`SpdMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Relative jitter added to the diagonal on the single Cholesky retry.
pub const CHOLESKY_JITTER: f64 = 1e-10;

/// Returns `(m + m')/2`.
pub fn symmetrize<F: Real>(m: &DMatrix<F>) -> DMatrix<F> {
    let half = F::lit(0.5);
    (m + m.transpose()) * half
}

fn cholesky_lower<F: Real>(a: &DMatrix<F>) -> std::result::Result<DMatrix<F>, (usize, f64)> {
    let n = a.nrows();
    let mut l = DMatrix::<F>::zeros(n, n);
    for j in 0..n {
        let mut s = a[(j, j)];
        for k in 0..j {
            s -= l[(j, k)] * l[(j, k)];
        }
        if !(s > F::zero()) || !s.is_finite_val() {
            return Err((j, s.as_f64()));
        }
        let d = s.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / d;
        }
    }
    Ok(l)
}

/// Lower Cholesky factor `L` with `L L' = M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Chol<F: Real> {
    l: DMatrix<F>,
    jittered: bool,
}

impl<F: Real> Chol<F> {
    /// Factors a symmetric matrix, retrying once with a tiny diagonal jitter.
    pub fn factor(m: &DMatrix<F>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::dim(
                "cholesky",
                "square matrix",
                format!("{}x{}", m.nrows(), m.ncols()),
            ));
        }
        let sym = symmetrize(m);
        match cholesky_lower(&sym) {
            Ok(l) => Ok(Self { l, jittered: false }),
            Err(_) => {
                let n = sym.nrows();
                let mean_diag = if n == 0 {
                    F::zero()
                } else {
                    sym.diagonal().iter().fold(F::zero(), |acc, &x| acc + x.abs()) / F::from_usize_lossy(n)
                };
                let jitter = F::lit(CHOLESKY_JITTER) * mean_diag;
                let bumped = &sym + DMatrix::<F>::identity(n, n) * jitter;
                cholesky_lower(&bumped)
                    .map(|l| Self { l, jittered: true })
                    .map_err(|(pivot, value)| Error::NotPositiveDefinite { pivot, value })
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<F> {
        &self.l
    }

    /// Whether the factorization needed the diagonal jitter retry.
    pub fn jittered(&self) -> bool {
        self.jittered
    }

    pub fn log_det(&self) -> F {
        let two = F::lit(2.0);
        self.l.diagonal().iter().fold(F::zero(), |acc, &d| acc + two * d.ln())
    }

    /// `L^{-1} b`
    pub fn solve_lower(&self, b: &DMatrix<F>) -> DMatrix<F> {
        self.l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `L^{-T} b`
    pub fn solve_upper_t(&self, b: &DMatrix<F>) -> DMatrix<F> {
        self.l
            .tr_solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `M^{-1} b`
    pub fn solve(&self, b: &DMatrix<F>) -> DMatrix<F> {
        self.solve_upper_t(&self.solve_lower(b))
    }

    pub fn solve_vec(&self, b: &DVector<F>) -> DVector<F> {
        let y = self.l.solve_lower_triangular(b).expect("positive diagonal");
        self.l.tr_solve_lower_triangular(&y).expect("positive diagonal")
    }

    pub fn inverse(&self) -> DMatrix<F> {
        let n = self.dim();
        symmetrize(&self.solve(&DMatrix::identity(n, n)))
    }

    /// `x' M^{-1} x`
    pub fn inv_quad_form(&self, x: &DVector<F>) -> F {
        let y = self.l.solve_lower_triangular(x).expect("positive diagonal");
        y.dot(&y)
    }

    /// Reconstructs `L L'`.
    pub fn reconstruct(&self) -> DMatrix<F> {
        &self.l * self.l.transpose()
    }
}

/// Symmetric positive-definite matrix together with its Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix<F: Real> {
    values: DMatrix<F>,
    chol: Chol<F>,
}

impl<F: Real> SpdMatrix<F> {
    /// Validates symmetry (absolute tolerance [`SYMMETRY_TOL`], scaled by the
    /// largest entry), symmetrizes and factors.
    pub fn new(m: DMatrix<F>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::dim(
                "spd matrix",
                "square",
                format!("{}x{}", m.nrows(), m.ncols()),
            ));
        }
        let scale = m.iter().fold(F::one(), |acc, &x| acc.max(x.abs()));
        let tol = F::lit(SYMMETRY_TOL) * scale;
        for i in 0..m.nrows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > tol {
                    return Err(Error::Parameter(format!(
                        "matrix not symmetric at ({i},{j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        Self::from_symmetric(m)
    }

    /// Symmetrizes without validating, then factors. Used for matrices that
    /// are symmetric up to accumulated round-off.
    pub fn from_symmetric(m: DMatrix<F>) -> Result<Self> {
        let values = symmetrize(&m);
        let chol = Chol::factor(&values)?;
        Ok(Self { values, chol })
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_symmetric(DMatrix::identity(dim, dim)).expect("identity is SPD")
    }

    pub fn scaled_identity(dim: usize, s: F) -> Result<Self> {
        Self::from_symmetric(DMatrix::identity(dim, dim) * s)
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<F> {
        &self.values
    }

    pub fn chol(&self) -> &Chol<F> {
        &self.chol
    }

    pub fn into_values(self) -> DMatrix<F> {
        self.values
    }

    pub fn inverse(&self) -> DMatrix<F> {
        self.chol.inverse()
    }

    pub fn trace(&self) -> F {
        self.values.trace()
    }
}

/// `log |m|` computed as twice the sum of log Cholesky pivots.
pub fn log_det<F: Real>(m: &SpdMatrix<F>) -> F {
    m.chol().log_det()
}

/// Natural log of the gamma function for positive arguments.
pub fn ln_gamma<F: Real>(a: F) -> Result<F> {
    let x = a.as_f64();
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain { arg: x });
    }
    Ok(F::lit(libm::lgamma(x)))
}

/// Log multivariate gamma `log Γ_p(a) = p(p-1)/4 log π + Σ_j log Γ(a + (1-j)/2)`.
pub fn log_multigamma<F: Real>(p: usize, a: F) -> Result<F> {
    if p == 0 {
        return Err(Error::Parameter("multivariate gamma dimension must be positive".into()));
    }
    let pf = p as f64;
    let mut acc = pf * (pf - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for j in 1..=p {
        acc += ln_gamma(a.as_f64() + (1.0 - j as f64) / 2.0)?;
    }
    Ok(F::lit(acc))
}

/// `log Γ_p(a_num) - log Γ_p(a_den)` as a sum of univariate log-gamma ratios;
/// the `π` constants cancel.
pub fn log_multigamma_ratio<F: Real>(p: usize, a_num: F, a_den: F) -> Result<F> {
    let mut acc = 0.0;
    for j in 1..=p {
        let shift = (1.0 - j as f64) / 2.0;
        acc += ln_gamma(a_num.as_f64() + shift)? - ln_gamma(a_den.as_f64() + shift)?;
    }
    Ok(F::lit(acc))
}

pub fn standard_normal<F: Real, R: Rng + ?Sized>(rng: &mut R) -> F {
    F::lit(StandardNormal.sample(rng))
}

pub fn standard_normal_matrix<F: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<F> {
    // column-major fill order keeps draws reproducible across nalgebra versions
    let mut z = DMatrix::<F>::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            z[(i, j)] = standard_normal(rng);
        }
    }
    z
}

pub fn standard_normal_vector<F: Real, R: Rng + ?Sized>(len: usize, rng: &mut R) -> DVector<F> {
    DVector::from_fn(len, |_, _| standard_normal(rng))
}

/// Lower-triangular Bartlett factor `A` with `A A' ~ Wishart(I_dim, dof)`.
fn bartlett_factor<F: Real, R: Rng + ?Sized>(dim: usize, dof: f64, rng: &mut R) -> Result<DMatrix<F>> {
    let mut a = DMatrix::<F>::zeros(dim, dim);
    for i in 0..dim {
        let k = dof - i as f64;
        let chi = ChiSquared::new(k).map_err(|e| Error::Parameter(format!("chi-square dof {k}: {e}")))?;
        a[(i, i)] = F::lit(chi.sample(rng).sqrt());
        for j in 0..i {
            a[(i, j)] = standard_normal(rng);
        }
    }
    Ok(a)
}

/// Draws `W ~ Wishart(scale, dof)` with `E[W] = dof · scale`.
pub fn sample_wishart<F: Real, R: Rng + ?Sized>(scale: &SpdMatrix<F>, dof: f64, rng: &mut R) -> Result<SpdMatrix<F>> {
    let d = scale.dim();
    if !(dof > d as f64 - 1.0) {
        return Err(Error::Parameter(format!(
            "Wishart dof {dof} must exceed dim - 1 = {}",
            d as f64 - 1.0
        )));
    }
    let a = bartlett_factor::<F, R>(d, dof, rng)?;
    let la = scale.chol().l() * a;
    SpdMatrix::from_symmetric(&la * la.transpose())
}

/// Draws `Σ ~ IW(scale, dof)`, density ∝ |Σ|^{-(dof+dim+1)/2} exp(-½ tr(Σ^{-1} scale)),
/// so `E[Σ] = scale/(dof-dim-1)`.
///
/// Uses the Bartlett factor of `Wishart(scale^{-1}, dof)`: with `scale = C C'`
/// and `A A' ~ W(I, dof)`, `Σ = (C A^{-T})(C A^{-T})'`.
pub fn sample_inverse_wishart<F: Real, R: Rng + ?Sized>(
    scale: &SpdMatrix<F>,
    dof: f64,
    rng: &mut R,
) -> Result<SpdMatrix<F>> {
    let d = scale.dim();
    if !(dof > d as f64 - 1.0) {
        return Err(Error::Parameter(format!(
            "inverse-Wishart dof {dof} must exceed dim - 1 = {}",
            d as f64 - 1.0
        )));
    }
    let a = bartlett_factor::<F, R>(d, dof, rng)?;
    let a_inv = a
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or(Error::NonFinite("Bartlett factor"))?;
    let m = scale.chol().l() * a_inv.transpose();
    SpdMatrix::from_symmetric(&m * m.transpose())
}

/// Draws `X = mean + L_r^{-T} Z L_c'` where `L_r L_r' = row_cov_inv` and
/// `L_c L_c' = col_cov`; `vec(X)` has covariance `col_cov ⊗ row_cov_inv^{-1}`.
pub fn sample_matrix_normal<F: Real, R: Rng + ?Sized>(
    mean: &DMatrix<F>,
    row_cov_inv: &SpdMatrix<F>,
    col_cov: &SpdMatrix<F>,
    rng: &mut R,
) -> Result<DMatrix<F>> {
    let (k, n) = mean.shape();
    if row_cov_inv.dim() != k || col_cov.dim() != n {
        return Err(Error::dim(
            "matrix normal",
            format!("row {k}, col {n}"),
            format!("row {}, col {}", row_cov_inv.dim(), col_cov.dim()),
        ));
    }
    let z = standard_normal_matrix::<F, R>(k, n, rng);
    let zc = z * col_cov.chol().l().transpose();
    Ok(mean + row_cov_inv.chol().solve_upper_t(&zc))
}

/// Log density of `N(mean, cov)` at `x` given the covariance factor.
pub fn mvn_log_density<F: Real>(x: &DVector<F>, mean: &DVector<F>, cov: &Chol<F>) -> F {
    let d = F::from_usize_lossy(x.len());
    let diff = x - mean;
    let half = F::lit(0.5);
    -half * (d * F::two_pi().ln() + cov.log_det() + cov.inv_quad_form(&diff))
}

/// Single-pass (Welford) running mean and scatter.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningCovariance<F: Real> {
    count: usize,
    mean: DVector<F>,
    scatter: DMatrix<F>,
}

impl<F: Real> RunningCovariance<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(dim),
            scatter: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &DVector<F> {
        &self.mean
    }

    pub fn scatter(&self) -> &DMatrix<F> {
        &self.scatter
    }

    pub fn update(&mut self, x: &DVector<F>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::dim("running covariance", self.dim(), x.len()));
        }
        self.count += 1;
        let delta = x - &self.mean;
        self.mean += &delta / F::from_usize_lossy(self.count);
        let delta2 = x - &self.mean;
        self.scatter += &delta * delta2.transpose();
        Ok(())
    }

    /// Unbiased covariance `scatter/(j-1)`; `None` before two updates.
    pub fn covariance(&self) -> Option<DMatrix<F>> {
        if self.count < 2 {
            return None;
        }
        Some(symmetrize(&self.scatter) / F::from_usize_lossy(self.count - 1))
    }
}

/// Functional form of [`RunningCovariance::update`].
pub fn update_running_cov<F: Real>(mut state: RunningCovariance<F>, x: &DVector<F>) -> Result<RunningCovariance<F>> {
    state.update(x)?;
    Ok(state)
}

/// `log Σ exp(terms)` with max shift; `-∞` when every term is `-∞`.
pub fn log_sum_exp<F: Real>(terms: &[F]) -> Result<F> {
    if terms.is_empty() {
        return Err(Error::Empty("log-sum-exp terms"));
    }
    let mut max = F::lit(f64::NEG_INFINITY);
    for &t in terms {
        let v = t.as_f64();
        if v.is_nan() || v == f64::INFINITY {
            return Err(Error::NonFinite("log-sum-exp terms"));
        }
        if t > max {
            max = t;
        }
    }
    if max.as_f64() == f64::NEG_INFINITY {
        return Ok(max);
    }
    let s = terms.iter().fold(F::zero(), |acc, &t| acc + (t - max).exp());
    Ok(max + s.ln())
}

/// `log((1/N) Σ exp(terms))`.
pub fn log_sum_exp_mean<F: Real>(terms: &[F]) -> Result<F> {
    let lse = log_sum_exp(terms)?;
    Ok(lse - F::from_usize_lossy(terms.len()).ln())
}
