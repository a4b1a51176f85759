//! Predictive paths under a fixed rank (BMOS) or averaged over ranks (BMA).

use nalgebra::{DMatrix, RowDVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gibbs::{ChainState, ChainTrace};
use crate::matrix_stats::standard_normal_vector;
use crate::rank::RankPosterior;
use crate::scalar::Real;

/// Fraction of excluded paths above which a result is flagged.
pub const EXCLUDED_FLAG_FRACTION: f64 = 0.01;

pub const DEFAULT_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForecastMode {
    Bmos,
    Bma,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRequest {
    pub horizon: usize,
    /// Sampled noise paths per retained draw; 0 gives mean paths only.
    pub noise_paths: usize,
    pub quantiles: Vec<f64>,
}

impl Default for ForecastRequest {
    fn default() -> Self {
        Self {
            horizon: 5,
            noise_paths: 0,
            quantiles: DEFAULT_QUANTILES.to_vec(),
        }
    }
}

impl ForecastRequest {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Parameter("forecast horizon must be at least 1".into()));
        }
        if let Some(q) = self.quantiles.iter().find(|q| !(**q >= 0.0 && **q <= 1.0)) {
            return Err(Error::Parameter(format!("quantile {q} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Per-rank component of a BMA forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct RankComponent {
    pub r: usize,
    pub weight: f64,
    pub mean_path: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResult {
    /// `h×n` MMSE forecast of the levels.
    pub mean_path: DMatrix<f64>,
    /// Last observed levels `x_T`.
    pub origin: RowDVector<f64>,
    /// `(q, h×n)` bands from the sampled paths; empty without noise paths.
    pub quantiles: Vec<(f64, DMatrix<f64>)>,
    /// Weighted sampled level paths.
    pub samples: Vec<(f64, DMatrix<f64>)>,
    pub components: Vec<RankComponent>,
    /// Draws or paths dropped for non-finite values.
    pub excluded: usize,
    pub total: usize,
}

impl ForecastResult {
    pub fn flagged(&self) -> bool {
        self.total > 0 && self.excluded as f64 > EXCLUDED_FLAG_FRACTION * self.total as f64
    }

    /// Forecast differences: first row relative to `x_T`.
    pub fn mean_differences(&self) -> DMatrix<f64> {
        level_differences(&self.mean_path, &self.origin)
    }

    /// Weighted quantile of the sampled paths at `(step, series)`.
    pub fn sample_quantile(&self, q: f64, step: usize, series: usize) -> Option<f64> {
        let vals: Vec<(f64, f64)> = self.samples.iter().map(|(w, m)| (m[(step, series)], *w)).collect();
        weighted_quantile(vals, q)
    }

    pub fn interquartile_range(&self, step: usize, series: usize) -> Option<f64> {
        Some(self.sample_quantile(0.75, step, series)? - self.sample_quantile(0.25, step, series)?)
    }

    /// Weighted sample variance of the sampled paths, `h×n`.
    pub fn sample_variance(&self) -> Option<DMatrix<f64>> {
        let total: f64 = self.samples.iter().map(|(w, _)| w).sum();
        if self.samples.len() < 2 || !(total > 0.0) {
            return None;
        }
        let (h, n) = self.mean_path.shape();
        let mut mean = DMatrix::zeros(h, n);
        for (w, m) in &self.samples {
            mean += m * (*w / total);
        }
        let mut var = DMatrix::zeros(h, n);
        for (w, m) in &self.samples {
            var += (m - &mean).map(|d| d * d) * (*w / total);
        }
        Some(var)
    }
}

fn level_differences(levels: &DMatrix<f64>, origin: &RowDVector<f64>) -> DMatrix<f64> {
    let mut out = levels.clone();
    for i in (0..levels.nrows()).rev() {
        let prev = if i == 0 {
            origin.clone_owned()
        } else {
            levels.row(i - 1).clone_owned()
        };
        let cur = levels.row(i) - prev;
        out.set_row(i, &cur);
    }
    out
}

/// Inverse-CDF quantile of weighted values.
pub fn weighted_quantile(mut vals: Vec<(f64, f64)>, q: f64) -> Option<f64> {
    vals.retain(|(v, w)| v.is_finite() && *w > 0.0);
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = vals.iter().map(|v| v.1).sum();
    let target = q * total;
    let mut acc = 0.0;
    for (v, w) in &vals {
        acc += w;
        if acc >= target {
            return Some(*v);
        }
    }
    vals.last().map(|v| v.0)
}

/// Forward recursion of one parameter draw from the last `p` levels (`tail`,
/// oldest first). `shocks` holds one `n`-vector per step (rows); `None`
/// gives the mean path. Returns `h×n` levels.
pub fn forecast_draw<F: Real>(
    state: &ChainState<F>,
    p: usize,
    tail: &DMatrix<F>,
    horizon: usize,
    shocks: Option<&DMatrix<F>>,
) -> Result<DMatrix<F>> {
    let n = tail.ncols();
    let r = state.beta.r();
    let k = 1 + n * (p - 1) + r;
    if tail.nrows() != p || state.b.shape() != (k, n) || state.beta.n() != n {
        return Err(Error::dim(
            "forecast draw",
            format!("tail {p}x{n}, B {k}x{n}"),
            format!(
                "tail {}x{}, B {}x{}",
                tail.nrows(),
                tail.ncols(),
                state.b.nrows(),
                state.b.ncols()
            ),
        ));
    }
    if let Some(e) = shocks {
        if e.shape() != (horizon, n) {
            return Err(Error::dim("forecast shocks", horizon, e.nrows()));
        }
    }
    let beta = state.beta.full();
    // levels history, newest last
    let mut levels: Vec<RowDVector<F>> = tail.row_iter().map(|r| r.clone_owned()).collect();
    let mut out = DMatrix::zeros(horizon, n);
    let mut w = RowDVector::<F>::zeros(k);
    for s in 0..horizon {
        let last = levels.len() - 1;
        w[0] = F::one();
        for lag in 1..p {
            let d = &levels[last + 1 - lag] - &levels[last - lag];
            w.columns_mut(1 + (lag - 1) * n, n).copy_from(&d);
        }
        let ect = &levels[last] * &beta;
        w.columns_mut(k - r, r).copy_from(&ect);
        let mut dx = &w * &state.b;
        if let Some(e) = shocks {
            dx += e.row(s);
        }
        let next = &levels[last] + dx;
        out.set_row(s, &next);
        levels.push(next);
    }
    Ok(out)
}

fn to_f64<F: Real>(m: &DMatrix<F>) -> DMatrix<f64> {
    m.map(|v| v.as_f64())
}

/// Mean and sampled paths over the retained draws of one chain; the
/// sample weights sum to `weight`.
fn rank_paths<F: Real, R: Rng + ?Sized>(
    trace: &ChainTrace<F>,
    p: usize,
    tail: &DMatrix<F>,
    req: &ForecastRequest,
    weight: f64,
    rng: &mut R,
) -> Result<(DMatrix<f64>, Vec<(f64, DMatrix<f64>)>, usize, usize)> {
    let n = tail.ncols();
    let draws = trace.retained();
    if draws.is_empty() {
        return Err(Error::Empty("no retained draws to forecast from"));
    }
    let mut mean = DMatrix::zeros(req.horizon, n);
    let mut used = 0usize;
    let mut excluded = 0usize;
    let mut samples = Vec::new();
    for state in draws {
        let path = to_f64(&forecast_draw(state, p, tail, req.horizon, None)?);
        if path.iter().all(|v| v.is_finite()) {
            mean += path;
            used += 1;
        } else {
            excluded += 1;
        }
        if req.noise_paths > 0 {
            let chol = state.sigma.chol();
            for _ in 0..req.noise_paths {
                let mut e = DMatrix::<F>::zeros(req.horizon, n);
                for s in 0..req.horizon {
                    let z = chol.l() * standard_normal_vector::<F, _>(n, rng);
                    e.set_row(s, &z.transpose());
                }
                let path = to_f64(&forecast_draw(state, p, tail, req.horizon, Some(&e))?);
                if path.iter().all(|v| v.is_finite()) {
                    samples.push((1.0, path));
                } else {
                    excluded += 1;
                }
            }
        }
    }
    if used == 0 {
        return Err(Error::NonFinite("every forecast path"));
    }
    mean /= used as f64;
    let each = weight / samples.len().max(1) as f64;
    for s in &mut samples {
        s.0 = each;
    }
    let total = draws.len() * (1 + req.noise_paths);
    Ok((mean, samples, excluded, total))
}

fn finish(
    mean_path: DMatrix<f64>,
    origin: RowDVector<f64>,
    samples: Vec<(f64, DMatrix<f64>)>,
    components: Vec<RankComponent>,
    excluded: usize,
    total: usize,
    req: &ForecastRequest,
) -> ForecastResult {
    let mut res = ForecastResult {
        mean_path,
        origin,
        quantiles: Vec::new(),
        samples,
        components,
        excluded,
        total,
    };
    if !res.samples.is_empty() {
        let (h, n) = res.mean_path.shape();
        res.quantiles = req
            .quantiles
            .iter()
            .map(|&q| {
                let band = DMatrix::from_fn(h, n, |s, j| res.sample_quantile(q, s, j).unwrap_or(f64::NAN));
                (q, band)
            })
            .collect();
    }
    res
}

/// BMOS forecast from the chain of the selected rank. `tail` holds the last
/// `p` observed levels, oldest first.
pub fn predict_fixed_rank<F: Real, R: Rng + ?Sized>(
    trace: &ChainTrace<F>,
    p: usize,
    tail: &DMatrix<F>,
    req: &ForecastRequest,
    rng: &mut R,
) -> Result<ForecastResult> {
    req.validate()?;
    let (mean, samples, excluded, total) = rank_paths(trace, p, tail, req, 1.0, rng)?;
    let origin = to_f64(tail).row(tail.nrows() - 1).clone_owned();
    let r = trace.retained()[0].beta.r();
    let components = vec![RankComponent {
        r,
        weight: 1.0,
        mean_path: mean.clone(),
    }];
    Ok(finish(mean, origin, samples, components, excluded, total, req))
}

/// BMA forecast: rank-probability mixture of per-rank predictive draws.
/// `traces` pairs each rank with its chain; ranks with zero probability are
/// skipped and rank zero, if its weight is positive, must be supplied too.
///
/// `rng_for(r)` supplies the noise generator of rank `r`. Giving rank `r`
/// the generator a BMOS forecast at `r` would use makes the two share their
/// rank-`r` paths.
pub fn predict_bma<F: Real, R: Rng>(
    traces: &[(usize, &ChainTrace<F>)],
    rp: &RankPosterior,
    p: usize,
    tail: &DMatrix<F>,
    req: &ForecastRequest,
    mut rng_for: impl FnMut(usize) -> R,
) -> Result<ForecastResult> {
    req.validate()?;
    let n = tail.ncols();
    let mut mean = DMatrix::zeros(req.horizon, n);
    let mut samples = Vec::new();
    let mut components = Vec::new();
    let (mut excluded, mut total) = (0, 0);
    let mut covered = 0.0;
    for &(r, trace) in traces {
        let w = *rp
            .probs
            .get(r)
            .ok_or_else(|| Error::Parameter(format!("rank {r} outside the rank posterior")))?;
        if w <= 0.0 {
            continue;
        }
        let (m, s, e, t) = rank_paths(trace, p, tail, req, w, &mut rng_for(r))?;
        mean += &m * w;
        samples.extend(s);
        excluded += e;
        total += t;
        covered += w;
        components.push(RankComponent {
            r,
            weight: w,
            mean_path: m,
        });
    }
    if (covered - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "rank traces cover probability {covered}, expected 1"
        )));
    }
    let origin = to_f64(tail).row(tail.nrows() - 1).clone_owned();
    Ok(finish(mean, origin, samples, components, excluded, total, req))
}

/// Squared forecast errors against a realised `h×n` level path, with the
/// per-step total over series.
pub fn squared_errors(forecast: &DMatrix<f64>, realised: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if forecast.shape() != realised.shape() {
        return Err(Error::dim("realised path", forecast.nrows(), realised.nrows()));
    }
    let sq = (forecast - realised).map(|d| d * d);
    let per_step = sq.row_iter().map(|r| r.sum()).collect();
    Ok((sq, per_step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecm::ThinBeta;
    use crate::matrix_stats::SpdMatrix;

    fn state(n: usize, r: usize, p: usize, b: DMatrix<f64>, beta_free: DMatrix<f64>) -> ChainState<f64> {
        let _ = p;
        ChainState {
            beta: ThinBeta::new(n, r, beta_free).unwrap(),
            b,
            sigma: SpdMatrix::identity(n),
        }
    }

    #[test]
    fn one_step_hand_recursion() {
        // n = 2, p = 2, r = 1: B rows are μ', Ψ₁' (2 rows), α'
        let b = DMatrix::from_row_slice(4, 2, &[0.1, -0.2, 0.3, 0.05, -0.1, 0.2, -0.25, 0.15]);
        let s = state(2, 1, 2, b, DMatrix::from_element(1, 1, -0.8));
        let tail = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.5, 1.7]);
        let f = forecast_draw(&s, 2, &tail, 1, None).unwrap();
        let x_t = [1.5, 1.7];
        let dx = [0.5, -0.3];
        let ect = x_t[0] - 0.8 * x_t[1];
        // Δx' = μ' + Δx_T' Ψ₁' + ect α'
        let want0 = x_t[0] + 0.1 + dx[0] * 0.3 + dx[1] * (-0.1) + ect * (-0.25);
        let want1 = x_t[1] - 0.2 + dx[0] * 0.05 + dx[1] * 0.2 + ect * 0.15;
        assert!((f[(0, 0)] - want0).abs() < 1e-14);
        assert!((f[(0, 1)] - want1).abs() < 1e-14);
    }

    #[test]
    fn zero_dynamics_is_flat() {
        let s = state(3, 1, 1, DMatrix::zeros(2, 3), DMatrix::zeros(2, 1));
        let tail = DMatrix::from_row_slice(1, 3, &[0.3, -2.0, 5.0]);
        let f = forecast_draw(&s, 1, &tail, 6, None).unwrap();
        for row in f.row_iter() {
            assert_eq!(row, tail.row(0));
        }
    }

    #[test]
    fn differences_integrate_to_levels() {
        let levels = DMatrix::from_row_slice(3, 2, &[1.1, 2.0, 1.4, 2.5, 0.9, 2.2]);
        let origin = RowDVector::from_row_slice(&[1.0, 1.9]);
        let d = level_differences(&levels, &origin);
        let mut acc = RowDVector::zeros(2);
        for i in 0..3 {
            acc += d.row(i);
            for j in 0..2 {
                assert!((acc[j] - (levels[(i, j)] - origin[j])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn weighted_quantiles() {
        let v = vec![(3.0, 1.0), (1.0, 1.0), (2.0, 1.0), (4.0, 1.0)];
        assert_eq!(weighted_quantile(v.clone(), 0.5), Some(2.0));
        assert_eq!(weighted_quantile(v.clone(), 0.0), Some(1.0));
        assert_eq!(weighted_quantile(v.clone(), 1.0), Some(4.0));
        assert_eq!(weighted_quantile(vec![(1.0, 0.9), (5.0, 0.1)], 0.5), Some(1.0));
        assert_eq!(weighted_quantile(vec![], 0.5), None);
    }

    #[test]
    fn squared_error_rows() {
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let y = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 1.0, 5.0]);
        let (sq, per) = squared_errors(&f, &y).unwrap();
        assert_eq!(sq[(1, 0)], 4.0);
        assert_eq!(per, vec![1.0, 5.0]);
    }
}
