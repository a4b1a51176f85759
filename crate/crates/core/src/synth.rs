//! Synthetic cointegrated systems with known parameters.

use nalgebra::{DMatrix, DVector, Schur};
use rand::Rng;

use crate::ecm::{ThinBeta, TimeSeriesPanel};
use crate::error::{Error, Result};
use crate::matrix_stats::{standard_normal_vector, SpdMatrix};
use crate::rng::RngStream;
use crate::scalar::Real;

/// Coefficient range of randomly generated models.
pub const COEFF_RANGE: f64 = 0.4;
/// Rejection budget of [`random_true_model`].
pub const MAX_ATTEMPTS: usize = 1000;
/// Discarded burn-in steps of [`simulate`].
pub const DEFAULT_WARMUP: usize = 200;
const UNIT_ROOT_TOL: f64 = 1e-6;
const STABLE_MODULUS: f64 = 0.99;

/// Data generating process `Δx_t = μ + αβ'x_{t−1} + Σ Ψ_i Δx_{t−i} + ε_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueModel<F: Real> {
    pub n: usize,
    pub p: usize,
    pub r: usize,
    pub mu: DVector<F>,
    pub alpha: DMatrix<F>,
    pub beta: ThinBeta<F>,
    /// `Ψ_1..Ψ_{p−1}`.
    pub psi: Vec<DMatrix<F>>,
    pub sigma: SpdMatrix<F>,
}

/// Named models shipped with the library.
pub const PRESETS: [&str; 3] = ["sugita-n4r2", "sugita-n4r1", "hd-n10r5"];

/// Burn-in used when simulating a named preset.
///
/// The Sugita presets start from zero initial conditions: the default
/// β prior `H = τZ'Z` is not centred, so the level offset accumulated over
/// a long drifting burn-in tightens it and pulls β̃ towards zero.
pub fn preset_warmup(name: &str) -> usize {
    if name.starts_with("sugita-") {
        0
    } else {
        DEFAULT_WARMUP
    }
}

/// Seed used to draw the coefficients of the `hd-n10r5` preset.
pub const HD_PRESET_SEED: u64 = 1;

impl<F: Real> TrueModel<F> {
    pub fn new(
        mu: DVector<F>,
        alpha: DMatrix<F>,
        beta: ThinBeta<F>,
        psi: Vec<DMatrix<F>>,
        sigma: SpdMatrix<F>,
    ) -> Result<Self> {
        let n = mu.len();
        let r = beta.r();
        if alpha.shape() != (n, r) || beta.n() != n || sigma.dim() != n || psi.iter().any(|m| m.shape() != (n, n)) {
            return Err(Error::dim("true model", format!("n={n}, r={r}"), "inconsistent blocks"));
        }
        Ok(Self {
            n,
            p: psi.len() + 1,
            r,
            mu,
            alpha,
            beta,
            psi,
            sigma,
        })
    }

    /// Named preset.
    ///
    /// * `sugita-n4r2`: `n=4, p=1, r=2`, `β₁ = (1,0,0,0)'`, `β₂ = (0,1,−1,−1)'`,
    ///   `μ = 0.1·1`, `Σ = I`, `α` with first row `(−0.2, 0.2)` and
    ///   `α_{2,2} = −0.2`, other entries zero.
    /// * `sugita-n4r1`: single relation `(1,0,−1,−1)'`, `α = (−0.2, 0.2, 0, 0)'`.
    /// * `hd-n10r5`: `n=10, p=2, r=5` drawn by [`random_true_model`] from a fixed seed.
    pub fn preset(name: &str) -> Result<Self> {
        let lit = |v: &[f64]| v.iter().map(|&x| F::lit(x)).collect::<Vec<F>>();
        match name {
            "sugita-n4r2" => Self::new(
                DVector::from_element(4, F::lit(0.1)),
                DMatrix::from_row_slice(4, 2, &lit(&[-0.2, 0.2, 0.0, -0.2, 0.0, 0.0, 0.0, 0.0])),
                ThinBeta::new(4, 2, DMatrix::from_row_slice(2, 2, &lit(&[0.0, -1.0, 0.0, -1.0])))?,
                vec![],
                SpdMatrix::identity(4),
            ),
            "sugita-n4r1" => Self::new(
                DVector::from_element(4, F::lit(0.1)),
                DMatrix::from_column_slice(4, 1, &lit(&[-0.2, 0.2, 0.0, 0.0])),
                ThinBeta::new(4, 1, DMatrix::from_column_slice(3, 1, &lit(&[0.0, -1.0, -1.0])))?,
                vec![],
                SpdMatrix::identity(4),
            ),
            "hd-n10r5" => random_true_model(10, 2, 5, &mut RngStream::new(HD_PRESET_SEED, 0)),
            other => Err(Error::Parameter(format!(
                "unknown preset '{other}' (available: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// `B = [μ'; Ψ_1'; …; Ψ_{p−1}'; α']`, the regression coefficients in
    /// the column layout of the design.
    pub fn b_matrix(&self) -> DMatrix<F> {
        let k = 1 + self.n * (self.p - 1) + self.r;
        let mut b = DMatrix::<F>::zeros(k, self.n);
        b.set_row(0, &self.mu.transpose());
        for (i, psi) in self.psi.iter().enumerate() {
            b.view_mut((1 + self.n * i, 0), (self.n, self.n))
                .copy_from(&psi.transpose());
        }
        b.view_mut((k - self.r, 0), (self.r, self.n))
            .copy_from(&self.alpha.transpose());
        b
    }

    /// `Π = αβ'`.
    pub fn pi(&self) -> DMatrix<F> {
        &self.alpha * self.beta.full().transpose()
    }

    /// Companion matrix of the levels VAR(p).
    pub fn companion(&self) -> DMatrix<F> {
        let n = self.n;
        let p = self.p;
        let mut levels: Vec<DMatrix<F>> = vec![DMatrix::zeros(n, n); p];
        levels[0] = DMatrix::identity(n, n) + self.pi();
        for (i, psi) in self.psi.iter().enumerate() {
            levels[i] += psi;
            levels[i + 1] -= psi;
        }
        let mut c = DMatrix::<F>::zeros(n * p, n * p);
        for (i, a) in levels.iter().enumerate() {
            c.view_mut((0, n * i), (n, n)).copy_from(a);
        }
        for i in 1..p {
            c.view_mut((n * i, n * (i - 1)), (n, n)).fill_with_identity();
        }
        c
    }

    /// Transition matrix of the stationary state
    /// `(β'x_t, Δx_t, …, Δx_{t−p+2})`, of dimension `r + n(p−1)`.
    ///
    /// The characteristic polynomial of [`companion`](Self::companion)
    /// factors as `(λ − 1)^{n−r}` times that of this matrix, so its
    /// eigenvalues are the non-unit companion roots.
    pub fn stationary_transition(&self) -> DMatrix<F> {
        let n = self.n;
        let r = self.r;
        let m = r + n * (self.p - 1);
        let bt = self.beta.full().transpose();
        let mut c = DMatrix::<F>::zeros(m, m);
        if r > 0 {
            let zz = DMatrix::<F>::identity(r, r) + &bt * &self.alpha;
            c.view_mut((0, 0), (r, r)).copy_from(&zz);
        }
        for (i, psi) in self.psi.iter().enumerate() {
            let col = r + n * i;
            c.view_mut((0, col), (r, n)).copy_from(&(&bt * psi));
            c.view_mut((r, col), (n, n)).copy_from(psi);
        }
        if self.p > 1 {
            c.view_mut((r, 0), (n, r)).copy_from(&self.alpha);
            for i in 1..self.p - 1 {
                c.view_mut((r + n * i, r + n * (i - 1)), (n, n)).fill_with_identity();
            }
        }
        c
    }

    /// Moduli of the companion eigenvalues, descending: `n − r` unit roots
    /// and the roots of [`stationary_transition`](Self::stationary_transition).
    /// A `NaN` entry signals a failed eigen-decomposition.
    pub fn companion_moduli(&self) -> Vec<f64> {
        let mut m = vec![1.0; self.n - self.r];
        m.extend(eigen_moduli(&self.stationary_transition().map(|v| v.as_f64())));
        m.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        m
    }

    /// Exactly `n − r` unit roots (within 1e-6) and every other root of
    /// modulus below 0.99.
    pub fn is_valid_cointegrated(&self) -> bool {
        let moduli = self.companion_moduli();
        if moduli.iter().any(|m| !m.is_finite()) {
            return false;
        }
        let units = moduli.iter().filter(|m| (*m - 1.0).abs() < UNIT_ROOT_TOL).count();
        // an extra unit root in the stationary block means I(2) or a lost relation
        let others_ok = moduli
            .iter()
            .filter(|m| (*m - 1.0).abs() >= UNIT_ROOT_TOL)
            .all(|m| *m < STABLE_MODULUS);
        units == self.n - self.r && others_ok
    }
}

/// Eigenvalue moduli of a general square matrix.
pub fn eigen_moduli(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    // bounded iteration count: the unbounded Schur loop may not terminate
    match Schur::try_new(m.clone(), 1e-14, 100_000) {
        Some(s) => s.complex_eigenvalues().iter().map(|z| z.norm()).collect(),
        None => vec![f64::NAN],
    }
}

fn uniform_matrix<F: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<F> {
    let mut m = DMatrix::<F>::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = F::lit(rng.random_range(-COEFF_RANGE..COEFF_RANGE));
        }
    }
    m
}

/// Random model with `μ, α, Ψ ~ U(−0.4, 0.4)`, `Σ = I` and a free β block
/// of zeros except its last row, which is −1. Redraws until the system is
/// a valid cointegrated process, at most [`MAX_ATTEMPTS`] times.
///
/// For larger systems most draws are explosive (well under 1% are valid at
/// `n = 10, p = 2, r = 5`), so the default budget can run out; see
/// [`random_true_model_with_budget`].
pub fn random_true_model<F: Real, R: Rng + ?Sized>(n: usize, p: usize, r: usize, rng: &mut R) -> Result<TrueModel<F>> {
    random_true_model_with_budget(n, p, r, MAX_ATTEMPTS, rng)
}

pub fn random_true_model_with_budget<F: Real, R: Rng + ?Sized>(
    n: usize,
    p: usize,
    r: usize,
    max_attempts: usize,
    rng: &mut R,
) -> Result<TrueModel<F>> {
    if r > n || p == 0 || n == 0 {
        return Err(Error::Parameter(format!("invalid model shape n={n}, p={p}, r={r}")));
    }
    let mut free = DMatrix::<F>::zeros(n - r, r);
    if n > r {
        free.row_mut(n - r - 1).fill(-F::one());
    }
    let beta = ThinBeta::new(n, r, free)?;
    for _ in 0..max_attempts {
        let mu = uniform_matrix::<F, _>(n, 1, rng).column(0).into_owned();
        let alpha = uniform_matrix(n, r, rng);
        let psi = (1..p).map(|_| uniform_matrix(n, n, rng)).collect();
        let model = TrueModel::new(mu, alpha, beta.clone(), psi, SpdMatrix::identity(n))?;
        if model.is_valid_cointegrated() {
            return Ok(model);
        }
    }
    Err(Error::RejectionBudget { attempts: max_attempts })
}

/// Simulates `T + 1` level rows `x_0..x_T` after discarding `warmup` steps
/// started from zero initial conditions.
pub fn simulate<F: Real, R: Rng + ?Sized>(
    model: &TrueModel<F>,
    big_t: usize,
    warmup: usize,
    rng: &mut R,
) -> Result<TimeSeriesPanel<F>> {
    let n = model.n;
    let p = model.p;
    if big_t < p + 1 {
        return Err(Error::InsufficientData {
            found: big_t + 1,
            required: p + 2,
            lag: p,
        });
    }
    let pi = model.pi();
    let chol_l = model.sigma.chol().l().clone();
    let total = warmup + big_t + 1;
    let mut x = DVector::<F>::zeros(n);
    // most recent first
    let mut diffs: Vec<DVector<F>> = vec![DVector::zeros(n); p.saturating_sub(1)];
    let mut out = DMatrix::<F>::zeros(big_t + 1, n);
    for step in 0..total {
        let mut dx = &model.mu + &pi * &x;
        for (psi, d) in model.psi.iter().zip(diffs.iter()) {
            dx += psi * d;
        }
        dx += &chol_l * standard_normal_vector::<F, _>(n, rng);
        x += &dx;
        if !diffs.is_empty() {
            diffs.pop();
            diffs.insert(0, dx);
        }
        if x.iter().any(|v| !v.is_finite_val()) {
            return Err(Error::NonFinite("simulated levels"));
        }
        if step >= warmup {
            out.set_row(step - warmup, &x.transpose());
        }
    }
    TimeSeriesPanel::unlabelled(out)
}
