use cvar_core::ecm::*;
use cvar_core::gibbs::*;
use cvar_core::matrix_stats::{mvn_log_density, SpdMatrix};
use cvar_core::rng::RngStream;
use cvar_core::sampler::*;
use cvar_core::synth::{simulate, TrueModel};
use nalgebra::{DMatrix, DVector};

fn toy_design(seed: u64, big_t: usize) -> EcmDesign<f64> {
    let model = TrueModel::new(
        DVector::zeros(2),
        DMatrix::from_column_slice(2, 1, &[-0.3, 0.1]),
        ThinBeta::new(2, 1, DMatrix::from_element(1, 1, -1.0)).unwrap(),
        vec![],
        SpdMatrix::identity(2),
    )
    .unwrap();
    build_ecm_design(&simulate(&model, big_t, 0, &mut RngStream::new(seed, 0)).unwrap(), 1, 1).unwrap()
}

/// Normalised CDF of the collapsed β̃ kernel on a uniform grid.
struct GridCdf {
    knots: Vec<f64>,
    cdf: Vec<f64>,
}

impl GridCdf {
    fn new(kernel: &MarginalKernel<'_, f64>, centre: f64, half_width: f64, count: usize) -> Self {
        let knots: Vec<f64> = (0..count)
            .map(|i| centre - half_width + 2.0 * half_width * i as f64 / (count - 1) as f64)
            .collect();
        let logp: Vec<f64> = knots
            .iter()
            .map(|&v| {
                kernel
                    .log_density(&ThinBeta::new(2, 1, DMatrix::from_element(1, 1, v)).unwrap())
                    .unwrap_or(f64::NEG_INFINITY)
            })
            .collect();
        let m = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dens: Vec<f64> = logp.iter().map(|l| (l - m).exp()).collect();
        assert!(
            dens[0] < 1e-10 && dens[count - 1] < 1e-10,
            "grid does not cover the posterior"
        );
        let mut cdf = vec![0.0; count];
        for i in 1..count {
            cdf[i] = cdf[i - 1] + 0.5 * (dens[i] + dens[i - 1]) * (knots[i] - knots[i - 1]);
        }
        let z = cdf[count - 1];
        cdf.iter_mut().for_each(|c| *c /= z);
        Self { knots, cdf }
    }

    fn at(&self, x: f64) -> f64 {
        if x <= self.knots[0] {
            return 0.0;
        }
        let last = self.knots.len() - 1;
        if x >= self.knots[last] {
            return 1.0;
        }
        let step = self.knots[1] - self.knots[0];
        let i = (((x - self.knots[0]) / step) as usize).min(last - 1);
        let f = (x - self.knots[i]) / step;
        self.cdf[i] + f * (self.cdf[i + 1] - self.cdf[i])
    }

    fn mean(&self) -> f64 {
        let mut m = 0.0;
        for i in 1..self.knots.len() {
            m += 0.5 * (self.knots[i] + self.knots[i - 1]) * (self.cdf[i] - self.cdf[i - 1]);
        }
        m
    }

    fn ks(&self, draws: &[f64]) -> f64 {
        let mut xs = draws.to_vec();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = self.at(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }
}

fn toy_grid(design: &EcmDesign<f64>, prior: &PriorSpec<f64>) -> GridCdf {
    let kernel = MarginalKernel::new(design, prior).unwrap();
    let ml = ml_estimate(design, prior).unwrap();
    let centre = ml.beta_ml.free()[(0, 0)];
    let sd = ml.fisher_cov.values()[(0, 0)].sqrt();
    let at = |v: f64| {
        kernel
            .log_density(&ThinBeta::new(2, 1, DMatrix::from_element(1, 1, v)).unwrap())
            .unwrap()
    };
    // the kernel has polynomial tails; widen until both ends are negligible
    let peak = at(centre);
    let mut half = 12.0 * sd;
    while at(centre - half) > peak - 40.0 || at(centre + half) > peak - 40.0 {
        half *= 1.5;
    }
    GridCdf::new(&kernel, centre, half, 10_000)
}

fn beta_draws(trace: &ChainTrace<f64>) -> Vec<f64> {
    trace.retained().iter().map(|s| s.beta.free()[(0, 0)]).collect()
}

fn ks_run(sampler: SamplerKind) -> f64 {
    let design = toy_design(41, 50);
    let prior = PriorSpec::default_for(&design, PriorSettings::default()).unwrap();
    let grid = toy_grid(&design, &prior);
    let cfg = ChainConfig {
        sampler,
        iterations: 110_000,
        burnin: 10_000,
        ..Default::default()
    };
    let trace = run_chain(&design, &prior, &cfg, &mut RngStream::new(42, 1)).unwrap();
    grid.ks(&beta_draws(&trace))
}

#[test]
fn alg2_marginal_matches_grid() {
    let d = ks_run(SamplerKind::Alg2);
    eprintln!("KS {d}");
    assert!(d < 0.02, "KS {d}");
}

#[test]
fn alg1_marginal_matches_grid() {
    let d = ks_run(SamplerKind::Alg1);
    eprintln!("KS {d}");
    assert!(d < 0.02, "KS {d}");
}

#[test]
fn sigma_marginal_matches_rao_blackwell() {
    let design = toy_design(43, 50);
    let prior = PriorSpec::default_for(&design, PriorSettings::default()).unwrap();
    let kernel = MarginalKernel::new(&design, &prior).unwrap();
    let cfg = ChainConfig {
        iterations: 40_000,
        burnin: 5_000,
        ..Default::default()
    };
    let trace = run_chain(&design, &prior, &cfg, &mut RngStream::new(44, 1)).unwrap();
    let denom = design.t() as f64 + prior.h - design.n() as f64 - 1.0;
    let mut emp = DMatrix::zeros(2, 2);
    let mut rb = DMatrix::zeros(2, 2);
    for s in trace.retained() {
        emp += s.sigma.values();
        rb += kernel.conditional(&s.beta).unwrap().s_star.values() / denom;
    }
    let rel = (&emp - &rb).amax() / rb.amax();
    assert!(rel < 0.02, "empirical {emp} vs Rao-Blackwell {rb}");

    // β-marginal mean against the grid
    let grid = toy_grid(&design, &prior);
    let draws = beta_draws(&trace);
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let ess = effective_sample_size(&draws).ess;
    let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
    assert!((mean - grid.mean()).abs() < 4.0 * sd / ess.sqrt());
}

#[test]
fn ml_recovers_truth_with_strong_signal() {
    let truth = TrueModel::<f64>::preset("sugita-n4r2").unwrap();
    let model = TrueModel::new(
        truth.mu.clone(),
        truth.alpha.clone(),
        truth.beta.clone(),
        vec![],
        SpdMatrix::scaled_identity(4, 0.25).unwrap(),
    )
    .unwrap();
    let panel = simulate(&model, 2000, 0, &mut RngStream::new(45, 0)).unwrap();
    let design = build_ecm_design(&panel, 1, 2).unwrap();
    let prior = PriorSpec::default_for(&design, PriorSettings::default()).unwrap();
    let ml = ml_estimate(&design, &prior).unwrap();
    let err = (ml.beta_ml.free() - truth.beta.free()).amax();
    assert!(err < 0.05, "ML {} vs truth {}", ml.beta_ml.free(), truth.beta.free());
    assert!(!ml.hessian_fallback);
}

/// Orthonormal basis of the column span.
fn span(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().qr().q()
}

#[test]
fn johansen_span_invariant_to_series_order() {
    let truth = TrueModel::<f64>::preset("sugita-n4r1").unwrap();
    let panel = simulate(&truth, 300, 0, &mut RngStream::new(46, 0)).unwrap();
    let perm = [0usize, 3, 1, 2];
    let lv = panel.levels();
    let permuted = TimeSeriesPanel::unlabelled(DMatrix::from_fn(lv.nrows(), 4, |i, j| lv[(i, perm[j])])).unwrap();
    let d1 = build_ecm_design(&panel, 1, 1).unwrap();
    let d2 = build_ecm_design(&permuted, 1, 1).unwrap();
    let b1 = johansen(&d1).unwrap().beta.full();
    let b2p = johansen(&d2).unwrap().beta.full();
    // undo the permutation on the rows of the second β
    let mut b2 = DMatrix::zeros(4, 1);
    for (j, &src) in perm.iter().enumerate() {
        b2[(src, 0)] = b2p[(j, 0)];
    }
    let q1 = span(&b1);
    let q2 = span(&b2);
    let residual = &q2 - &q1 * (q1.transpose() * &q2);
    assert!(residual.amax() < 1e-8, "principal-angle sine {}", residual.amax());
}

#[test]
fn full_rank_johansen() {
    let truth = TrueModel::<f64>::preset("sugita-n4r2").unwrap();
    let panel = simulate(&truth, 200, 0, &mut RngStream::new(47, 0)).unwrap();
    let design = build_ecm_design(&panel, 1, 4).unwrap();
    let fit = johansen(&design).unwrap();
    assert_eq!(fit.beta.full(), DMatrix::identity(4, 4));
    assert!(fit.eigenvalues.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn self_proposal_accepts_every_global_move() {
    let truth = TrueModel::<f64>::preset("sugita-n4r2").unwrap();
    let panel = simulate(&truth, 100, 0, &mut RngStream::new(48, 0)).unwrap();
    let design = build_ecm_design(&panel, 1, 2).unwrap();
    let prior = PriorSpec::default_for(&design, PriorSettings::default()).unwrap();
    let ml = ml_estimate(&design, &prior).unwrap();
    let mean = ml.beta_ml.to_vec();
    let target = FnTarget::new(4, |x: &DVector<f64>| mvn_log_density(x, &mean, ml.fisher_cov.chol()));
    let mut cfg = Alg1Config::with_scales(DVector::from_element(4, 0.1)).unwrap();
    cfg.w1 = 0.5;
    let mut rng = RngStream::new(49, 0);
    let mut x = mean.clone();
    let mut lx = target.log_density(&x).unwrap();
    let (mut global, mut accepted) = (0, 0);
    for _ in 0..20_000 {
        let out = alg1_step(&x, lx, &target, &cfg, &ml, &mut rng).unwrap();
        if out.report.move_kind == MoveKind::Global {
            global += 1;
            accepted += out.report.accepted as usize;
            assert!(out.report.log_accept_prob.abs() < 1e-10);
        }
        x = out.state;
        lx = out.log_target;
    }
    assert!(global > 9_000);
    assert_eq!(accepted, global);
}

#[test]
fn null_move_limit() {
    let design = toy_design(50, 40);
    let prior = PriorSpec::default_for(&design, PriorSettings::default()).unwrap();
    let target = CollapsedTarget::new(&design, &prior).unwrap();
    let ml = ml_estimate(&design, &prior).unwrap();
    let mut cfg = Alg1Config::with_scales(DVector::from_element(1, 1e-12)).unwrap();
    cfg.w1 = 1e-12;
    let x = ml.beta_ml.to_vec();
    let lx = target.log_density(&x).unwrap();
    let mut rng = RngStream::new(51, 0);
    for _ in 0..200 {
        let out = alg1_step(&x, lx, &target, &cfg, &ml, &mut rng).unwrap();
        assert!(out.report.log_accept_prob > -1e-6);
        assert!((out.state[0] - x[0]).abs() < 1e-10);
    }
}

#[test]
fn accept_probability_recomputed() {
    // accepted moves carry y, so the ratio can be rebuilt independently
    let truth = TrueModel::<f64>::preset("sugita-n4r2").unwrap();
    let panel = simulate(&truth, 100, 0, &mut RngStream::new(52, 0)).unwrap();
    let design = build_ecm_design(&panel, 1, 2).unwrap();
    let prior = PriorSpec::default_for(&design, PriorSettings::default()).unwrap();
    let target = CollapsedTarget::new(&design, &prior).unwrap();
    let ml = ml_estimate(&design, &prior).unwrap();
    let cfg = Alg1Config::with_scales(ml.fisher_cov.values().diagonal().map(|v| v.sqrt())).unwrap();
    let cov = ml.fisher_cov.values().clone();
    let c = cov.clone().cholesky().unwrap();
    let q = |v: &DVector<f64>| {
        let z = c.l().solve_lower_triangular(&(v - ml.beta_ml.to_vec())).unwrap();
        -0.5 * z.norm_squared()
    };
    let mut rng = RngStream::new(53, 0);
    let mut x = ml.beta_ml.to_vec();
    let mut lx = target.log_density(&x).unwrap();
    let mut checked = 0;
    for _ in 0..5_000 {
        let out = alg1_step(&x, lx, &target, &cfg, &ml, &mut rng).unwrap();
        if out.report.accepted && out.state != x {
            let y = &out.state;
            let ly = log_marginal_beta(&design, &ThinBeta::from_vec(4, 2, y).unwrap(), &prior).unwrap();
            let lxx = log_marginal_beta(&design, &ThinBeta::from_vec(4, 2, &x).unwrap(), &prior).unwrap();
            let mut ratio = ly - lxx;
            if out.report.move_kind == MoveKind::Global {
                ratio += q(&x) - q(y);
            }
            assert!((ratio.min(0.0) - out.report.log_accept_prob).abs() < 1e-10);
            checked += 1;
        }
        x = out.state;
        lx = out.log_target;
    }
    assert!(checked > 500);
}

#[test]
fn pretune_gaussian_calibration() {
    let sigma_target = 2.0;
    let target = FnTarget::new(1, move |x: &DVector<f64>| -0.5 * (x[0] / sigma_target).powi(2));
    let mut rng = RngStream::new(54, 0);
    for start_sd in [0.01, 1.0, 50.0] {
        let cfg = pretune_local_sd(
            &target,
            &DVector::zeros(1),
            &DVector::from_element(1, start_sd),
            PretuneSettings::default(),
            &mut rng,
        )
        .unwrap();
        let sd = cfg.local_sd[0];
        assert!(cfg.in_band, "start {start_sd}: rates {}", cfg.tuned_rates);
        assert!(
            (sigma_target..=4.0 * sigma_target).contains(&sd),
            "start {start_sd}: sd {sd}"
        );
    }
}

#[test]
fn acceptance_rate_monotone_in_scale() {
    let target = FnTarget::new(1, |x: &DVector<f64>| -0.5 * x[0] * x[0]);
    let settings = PretuneSettings {
        batch: 4_000,
        budget: 4_000,
        w1: 0.1,
    };
    let mut prev: Option<f64> = None;
    for &sd in &[0.25f64, 0.5, 1.0, 2.0, 4.0, 8.0] {
        let mut rng = RngStream::new(55, sd.to_bits());
        let cfg = pretune_local_sd(
            &target,
            &DVector::zeros(1),
            &DVector::from_element(1, sd),
            settings,
            &mut rng,
        )
        .unwrap();
        let rate = cfg.tuned_rates[0];
        if let Some(p) = prev {
            let se = (p * (1.0 - p) / 4_000.0).sqrt() + (rate * (1.0 - rate) / 4_000.0).sqrt();
            assert!(rate <= p + 3.0 * se, "sd {sd}: {rate} > {p}");
        }
        prev = Some(rate);
    }
}

#[test]
fn pretune_zero_dimension() {
    let target = FnTarget::new(0, |_: &DVector<f64>| 0.0);
    let cfg = pretune_local_sd(
        &target,
        &DVector::zeros(0),
        &DVector::zeros(0),
        PretuneSettings::default(),
        &mut RngStream::new(1, 0),
    )
    .unwrap();
    assert_eq!(cfg.dim(), 0);
    assert!(cfg.in_band);
}

#[test]
fn warmup_gate_and_diminishing_adaptation() {
    let truth = TrueModel::<f64>::preset("sugita-n4r2").unwrap();
    let panel = simulate(&truth, 100, 0, &mut RngStream::new(56, 0)).unwrap();
    let design = build_ecm_design(&panel, 1, 2).unwrap();
    let prior = PriorSpec::default_for(&design, PriorSettings::default()).unwrap();
    let cfg = ChainConfig::<f64>::default();
    let mut rng = RngStream::new(57, 0);
    let mut sw = Sweeper::new(&design, &prior, &cfg, &mut rng).unwrap();
    let warm = Alg2Config::<f64>::for_dim(4).warmup_min;
    assert_eq!(warm, 100);
    let mut prev_cov: Option<DMatrix<f64>> = None;
    let mut adaptive = 0;
    for j in 0..5_000 {
        let mean_before = sw.adapt().mean().clone();
        let report = sw.sweep(&mut rng).unwrap();
        if j <= warm {
            assert_eq!(report.move_kind, MoveKind::FixedRw, "sweep {j}");
        } else if report.move_kind == MoveKind::Adaptive {
            adaptive += 1;
        }
        // full β keeps its identity block
        let full = sw.state().beta.full();
        assert_eq!(full.view((0, 0), (2, 2)), DMatrix::<f64>::identity(2, 2));
        let count = sw.adapt().count();
        if let (Some(cov), Some(prev)) = (sw.adapt().covariance(), prev_cov.as_ref()) {
            if count > warm {
                // ‖Σ_{j+1} − Σ_j‖ ≤ (‖δδ'‖ + ‖Σ_j‖)/(j−1) for the Welford update
                let delta = sw.state().beta.to_vec() - mean_before;
                let bound = ((&delta * delta.transpose()).amax() + prev.amax()) / (count - 2) as f64;
                assert!((&cov - prev).amax() <= bound * (1.0 + 1e-9) + 1e-15, "step {count}");
            }
        }
        prev_cov = sw.adapt().covariance();
    }
    assert!(adaptive > 4_000);
}

#[test]
fn samplers_agree() {
    let truth = TrueModel::<f64>::preset("sugita-n4r2").unwrap();
    let panel = simulate(&truth, 100, 0, &mut RngStream::new(58, 0)).unwrap();
    let design = build_ecm_design(&panel, 1, 2).unwrap();
    let prior = PriorSpec::default_for(&design, PriorSettings::default()).unwrap();
    let run = |sampler| {
        let cfg = ChainConfig {
            sampler,
            iterations: 40_000,
            burnin: 10_000,
            ..Default::default()
        };
        run_chain(&design, &prior, &cfg, &mut RngStream::new(59, 1)).unwrap()
    };
    let (t1, t2) = (run(SamplerKind::Alg1), run(SamplerKind::Alg2));
    let stats = |t: &ChainTrace<f64>, i: usize| {
        let xs: Vec<f64> = t.retained().iter().map(|s| s.beta.to_vec()[i]).collect();
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
        (m, sd / effective_sample_size(&xs).ess.sqrt())
    };
    for i in 0..4 {
        let (m1, s1) = stats(&t1, i);
        let (m2, s2) = stats(&t2, i);
        assert!(
            (m1 - m2).abs() < 3.0 * (s1 * s1 + s2 * s2).sqrt(),
            "entry {i}: {m1} ± {s1} vs {m2} ± {s2}"
        );
    }
}
