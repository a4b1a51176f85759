use cvar_core::ecm::*;
use cvar_core::forecast::*;
use cvar_core::gibbs::*;
use cvar_core::matrix_stats::standard_normal_vector;
use cvar_core::rank::{rank_zero_draws, RankPosterior};
use cvar_core::rng::RngStream;
use cvar_core::synth::{preset_warmup, simulate, TrueModel};
use nalgebra::DMatrix;

fn inv(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().unwrap()
}

fn sugita(name: &str, big_t: usize, seed: u64) -> TimeSeriesPanel<f64> {
    let model = TrueModel::<f64>::preset(name).unwrap();
    simulate(&model, big_t, preset_warmup(name), &mut RngStream::new(seed, 0)).unwrap()
}

#[test]
fn conjugate_draws_at_frozen_beta() {
    let panel = sugita("sugita-n4r2", 60, 61);
    let design = build_ecm_design(&panel, 2, 2).unwrap();
    let prior = PriorSpec::default_for(&design, PriorSettings::default()).unwrap();
    let beta = ThinBeta::new(4, 2, DMatrix::from_row_slice(2, 2, &[-0.9, 0.1, 0.2, -1.1])).unwrap();

    // independent route: explicit normal equations
    let w = assemble_w(&design, &beta).unwrap();
    let y = design.y();
    let a = prior.a.values();
    let a_star = a + w.transpose() * &w;
    let b_star = inv(&a_star) * (a * &prior.p_mean + w.transpose() * y);
    let s_star = prior.s.values() + y.transpose() * y + prior.p_mean.transpose() * a * &prior.p_mean
        - b_star.transpose() * &a_star * &b_star;
    let dof = design.t() as f64 + prior.h;
    let sigma_mean = &s_star / (dof - 4.0 - 1.0);

    let kernel = MarginalKernel::new(&design, &prior).unwrap();
    let mut rng = RngStream::new(62, 0);
    let count = 100_000;
    let (k, n) = b_star.shape();
    let (mut sb, mut sb2) = (DMatrix::zeros(k, n), DMatrix::zeros(k, n));
    let (mut ss, mut ss2) = (DMatrix::zeros(n, n), DMatrix::zeros(n, n));
    for _ in 0..count {
        let (sigma, b) = draw_sigma_b(&kernel, &beta, &mut rng).unwrap();
        sb += &b;
        sb2 += b.map(|v| v * v);
        ss += sigma.values();
        ss2 += sigma.values().map(|v| v * v);
    }
    let c = count as f64;
    let check = |s: &DMatrix<f64>, s2: &DMatrix<f64>, truth: &DMatrix<f64>, what: &str| {
        for i in 0..s.nrows() {
            for j in 0..s.ncols() {
                let m = s[(i, j)] / c;
                let se = ((s2[(i, j)] / c - m * m) / c).sqrt();
                assert!(
                    (m - truth[(i, j)]).abs() < 4.0 * se,
                    "{what} ({i},{j}): {m} vs {}",
                    truth[(i, j)]
                );
            }
        }
    };
    check(&sb, &sb2, &b_star, "B");
    check(&ss, &ss2, &sigma_mean, "Σ");
}

#[test]
fn ess_of_known_processes() {
    let mut rng = RngStream::new(63, 0);
    let iid: Vec<f64> = (0..20_000)
        .map(|_| standard_normal_vector::<f64, _>(1, &mut rng)[0])
        .collect();
    let e = effective_sample_size(&iid);
    assert!((e.ess / 20_000.0 - 1.0).abs() < 0.2, "iid ESS {}", e.ess);

    // AR(1): integrated autocorrelation time (1+φ)/(1−φ)
    let phi = 0.8;
    let mut x = 0.0;
    let ar: Vec<f64> = (0..200_000)
        .map(|_| {
            x = phi * x + standard_normal_vector::<f64, _>(1, &mut rng)[0];
            x
        })
        .collect();
    let iact = effective_sample_size(&ar).iact;
    assert!((iact / 9.0 - 1.0).abs() < 0.2, "AR(1) IACT {iact}");

    assert!(effective_sample_size(&[2.0; 50]).degenerate);
}

#[test]
fn healthy_chain_diagnostics() {
    let panel = sugita("sugita-n4r2", 100, 64);
    let design = build_ecm_design(&panel, 1, 2).unwrap();
    let prior = PriorSpec::default_for(&design, PriorSettings::default()).unwrap();
    let cfg = ChainConfig {
        iterations: 6_000,
        burnin: 2_000,
        ..Default::default()
    };
    let trace = run_chain(&design, &prior, &cfg, &mut RngStream::new(65, 1)).unwrap();
    let d = diagnostics(&trace);
    assert!(d.alpha_watchdog < 0.01);
    assert!(!d.watchdog_fired());
    assert!(d.degenerate.is_empty());
    assert_eq!(d.retained, 4_000);
    assert!(d.min_ess > 50.0, "min ESS {}", d.min_ess);
    for s in trace.retained() {
        s.check(&design).unwrap();
    }
}

/// One fixed parameter draw, replicated into a trace.
fn fixed_trace(model: &TrueModel<f64>, copies: usize) -> ChainTrace<f64> {
    let state = ChainState {
        beta: model.beta.clone(),
        b: model.b_matrix(),
        sigma: model.sigma.clone(),
    };
    ChainTrace::from_states(vec![state; copies], 0, 0)
}

#[test]
fn noise_paths_centre_on_mean_path() {
    let model = TrueModel::<f64>::preset("sugita-n4r2").unwrap();
    let panel = sugita("sugita-n4r2", 50, 66);
    let tail = panel.levels().rows(panel.levels().nrows() - 1, 1).into_owned();
    let trace = fixed_trace(&model, 1);
    let req = ForecastRequest {
        horizon: 6,
        noise_paths: 40_000,
        ..Default::default()
    };
    let res = predict_fixed_rank(&trace, 1, &tail, &req, &mut RngStream::new(67, 0)).unwrap();
    let var = res.sample_variance().unwrap();
    let mut mean = DMatrix::zeros(6, 4);
    for (w, m) in &res.samples {
        mean += m * *w;
    }
    let m = res.samples.len() as f64;
    for i in 0..6 {
        for j in 0..4 {
            let se = (var[(i, j)] / m).sqrt();
            assert!((mean[(i, j)] - res.mean_path[(i, j)]).abs() < 3.0 * se, "({i},{j})");
        }
    }
    // the variance of a cointegrated system grows with the horizon
    for j in 0..4 {
        for i in 1..6 {
            assert!(var[(i, j)] >= var[(i - 1, j)], "series {j} step {i}");
        }
    }
    assert!(!res.flagged());
    assert_eq!(res.quantiles.len(), 5);
}

#[test]
fn point_mass_bma_is_bmos() {
    let panel = sugita("sugita-n4r1", 80, 68);
    let design = build_ecm_design(&panel, 1, 1).unwrap();
    let prior = PriorSpec::default_for(&design, PriorSettings::default()).unwrap();
    let cfg = ChainConfig {
        iterations: 600,
        burnin: 200,
        ..Default::default()
    };
    let trace = run_chain(&design, &prior, &cfg, &mut RngStream::new(69, 1)).unwrap();
    let tail = panel.levels().rows(panel.levels().nrows() - 1, 1).into_owned();
    let req = ForecastRequest {
        noise_paths: 5,
        ..Default::default()
    };
    let bmos = predict_fixed_rank(&trace, 1, &tail, &req, &mut RngStream::new(70, 0)).unwrap();
    let rp = RankPosterior::from_log_bf(vec![f64::NAN, 0.0, f64::NAN, f64::NAN, f64::NAN], vec![0.0; 5]).unwrap();
    let bma = predict_bma(&[(1, &trace)], &rp, 1, &tail, &req, |_| RngStream::new(70, 0)).unwrap();
    assert_eq!(bmos.mean_path, bma.mean_path);
    assert_eq!(bmos.samples, bma.samples);
    assert_eq!(bmos.quantiles, bma.quantiles);

    // a missing positive-weight rank is an error
    let half = RankPosterior::from_log_bf(vec![0.0, 0.0, f64::NAN, f64::NAN, f64::NAN], vec![0.0; 5]).unwrap();
    assert!(predict_bma(&[(1, &trace)], &half, 1, &tail, &req, |_| RngStream::new(70, 0)).is_err());
}

#[test]
fn mixture_moments() {
    let panel = sugita("sugita-n4r1", 80, 71);
    let tail = panel.levels().rows(panel.levels().nrows() - 1, 1).into_owned();
    let cfg = ChainConfig {
        iterations: 700,
        burnin: 200,
        ..Default::default()
    };
    let mut traces = Vec::new();
    for r in 1..=2 {
        let design = build_ecm_design(&panel, 1, r).unwrap();
        let prior = PriorSpec::default_for(&design, PriorSettings::default()).unwrap();
        traces.push(run_chain(&design, &prior, &cfg, &mut RngStream::new(72, r as u64)).unwrap());
    }
    let design0 = build_ecm_design(&panel, 1, 0).unwrap();
    let prior0 = PriorSpec::default_for(&design0, PriorSettings::default()).unwrap();
    let zero = ChainTrace::from_states(
        rank_zero_draws(&design0, &prior0, 500, &mut RngStream::new(72, 0)).unwrap(),
        72,
        0,
    );

    let rp = RankPosterior::from_log_bf(vec![0.0, 0.0, 0.0, f64::NAN, f64::NAN], vec![0.0; 5]).unwrap();
    let req = ForecastRequest {
        noise_paths: 4,
        ..Default::default()
    };
    let bma = predict_bma(
        &[(0, &zero), (1, &traces[0]), (2, &traces[1])],
        &rp,
        1,
        &tail,
        &req,
        |r| RngStream::new(73, r as u64),
    )
    .unwrap();
    assert_eq!(bma.components.len(), 3);

    let mut mix = DMatrix::zeros(5, 4);
    for c in &bma.components {
        mix += &c.mean_path * c.weight;
    }
    assert!((&mix - &bma.mean_path).amax() <= 1e-12 * (1.0 + bma.mean_path.amax()));

    // law of total variance on the sampled paths, per component
    let total_var = bma.sample_variance().unwrap();
    let per = 500 * req.noise_paths;
    let mut within = DMatrix::zeros(5, 4);
    let mut means = Vec::new();
    for chunk in bma.samples.chunks(per) {
        let w: f64 = chunk.iter().map(|s| s.0).sum();
        let mut m = DMatrix::zeros(5, 4);
        for (wi, p) in chunk {
            m += p * (*wi / w);
        }
        let mut v = DMatrix::zeros(5, 4);
        for (wi, p) in chunk {
            v += (p - &m).map(|d| d * d) * (*wi / w);
        }
        within += &v * w;
        means.push((w, m, v));
    }
    assert_eq!(means.len(), 3);
    let grand: DMatrix<f64> = means.iter().fold(DMatrix::zeros(5, 4), |acc, (w, m, _)| acc + m * *w);
    let between = means.iter().fold(DMatrix::zeros(5, 4), |acc, (w, m, _)| {
        acc + (m - &grand).map(|d| d * d) * *w
    });
    assert!((&within + &between - &total_var).amax() < 1e-9 * total_var.amax());
    // spread of the mixture is at least the average component spread
    for i in 0..5 {
        for j in 0..4 {
            assert!(total_var[(i, j)] >= within[(i, j)]);
        }
    }
}

fn lag_autocorrelation(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    let m = x.iter().sum::<f64>() / n as f64;
    let var: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    let cov: f64 = (lag..n).map(|i| (x[i] - m) * (x[i - lag] - m)).sum();
    cov / var
}

#[test]
fn cointegrating_combinations_are_stationary() {
    let model = TrueModel::<f64>::preset("sugita-n4r2").unwrap();
    let panel = simulate(&model, 2_000, 500, &mut RngStream::new(74, 0)).unwrap();
    let lv = panel.levels();
    let z = lv * model.beta.full();
    for c in 0..2 {
        let col: Vec<f64> = z.column(c).iter().copied().collect();
        assert!(lag_autocorrelation(&col, 20) < 0.5, "β'x column {c}");
    }
    // the first column of β is e₁, so only the other series carry a unit root
    for j in 1..4 {
        let col: Vec<f64> = lv.column(j).iter().copied().collect();
        assert!(lag_autocorrelation(&col, 20) > 0.5, "series {j}");
    }
}

#[test]
fn simulated_panel_shape_and_reproducibility() {
    let model = TrueModel::<f64>::preset("hd-n10r5").unwrap();
    assert!(model.is_valid_cointegrated());
    let a = simulate(&model, 120, 100, &mut RngStream::new(75, 0)).unwrap();
    let b = simulate(&model, 120, 100, &mut RngStream::new(75, 0)).unwrap();
    assert_eq!(a.levels().shape(), (121, 10));
    assert_eq!(a.levels(), b.levels());
}
