use std::collections::BTreeMap;

use cvar_core::gibbs::{diagnostics, flatten_state, point_estimates, state_column_names, AcceptanceSummary};
use cvar_core::sampler::MoveKind;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::fitting::{fit_rank, stream_id};
use crate::io::{ensure_dir, num, read_panel, rows_of, write_csv, write_json};

#[derive(Debug, Serialize)]
pub struct AcceptanceReport {
    pub rate: Option<f64>,
    pub mean_accept_prob: Option<f64>,
    pub proposed: usize,
    /// Acceptance rate by proposal kind.
    pub by_kind: BTreeMap<String, f64>,
}

impl From<&AcceptanceSummary> for AcceptanceReport {
    fn from(a: &AcceptanceSummary) -> Self {
        Self {
            rate: a.rate(),
            mean_accept_prob: a.mean_accept_prob(),
            proposed: a.proposed(),
            by_kind: MoveKind::ALL
                .iter()
                .filter_map(|&k| a.kind_rate(k).map(|v| (k.to_string(), v)))
                .collect(),
        }
    }
}

#[derive(Debug, Serialize)]
struct MlReport {
    beta: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    hessian_fallback: bool,
}

#[derive(Debug, Serialize)]
struct EstimatesReport {
    n: usize,
    lag: usize,
    rank: usize,
    rows: usize,
    retained: usize,
    /// Full β with its identity block.
    beta_mmse: Vec<Vec<f64>>,
    /// Posterior SD of the free rows of β.
    beta_sd: Vec<Vec<f64>>,
    alpha_mmse: Vec<Vec<f64>>,
    b_mmse: Vec<Vec<f64>>,
    b_sd: Vec<Vec<f64>>,
    sigma_mmse: Vec<Vec<f64>>,
    sigma_sd: Vec<Vec<f64>>,
    trace_sigma: f64,
    trace_sigma_sd: f64,
    acceptance: AcceptanceReport,
    ml: Option<MlReport>,
}

#[derive(Debug, Serialize)]
struct EssEntry {
    name: String,
    ess: f64,
    iact: f64,
    degenerate: bool,
}

#[derive(Debug, Serialize)]
struct DiagnosticsReport {
    retained: usize,
    min_ess: f64,
    degenerate: Vec<String>,
    alpha_watchdog: f64,
    watchdog_fired: bool,
    acceptance: AcceptanceReport,
    acceptance_burnin: AcceptanceReport,
    ess: Vec<EssEntry>,
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    let r = cfg
        .rank
        .fixed()
        .ok_or_else(|| CliError::usage("fit needs a fixed --rank"))?;
    let loaded = read_panel(cfg.data_path()?)?;
    let panel = &loaded.panel;
    cfg.validate_for_panel(panel.n(), panel.rows())?;
    let (design, _prior, trace) = fit_rank(panel, cfg, r, stream_id(0, 0, r))?;
    let out = ensure_dir(&cfg.out)?;

    let kept = trace.retained();
    let mut header = vec!["sweep".to_string()];
    header.extend(state_column_names(&kept[0]));
    let sweeps = &trace.sweeps[trace.burnin..];
    write_csv(
        &out.join("trace.csv"),
        &header,
        kept.iter().zip(sweeps).map(|(s, &sw)| {
            std::iter::once(sw.to_string())
                .chain(flatten_state(s).into_iter().map(num))
                .collect::<Vec<_>>()
        }),
    )?;

    let pe = point_estimates(&trace)?;
    let alpha_rows = pe.b_mmse.rows(design.k() - r, r).transpose();
    let estimates = EstimatesReport {
        n: design.n(),
        lag: cfg.lag,
        rank: r,
        rows: panel.rows(),
        retained: pe.retained,
        beta_mmse: rows_of(&pe.beta_mmse.full()),
        beta_sd: rows_of(&pe.beta_sd),
        alpha_mmse: rows_of(&alpha_rows),
        b_mmse: rows_of(&pe.b_mmse),
        b_sd: rows_of(&pe.b_sd),
        sigma_mmse: rows_of(pe.sigma_mmse.values()),
        sigma_sd: rows_of(&pe.sigma_sd),
        trace_sigma: pe.trace_sigma,
        trace_sigma_sd: pe.trace_sigma_sd,
        acceptance: (&trace.acceptance).into(),
        ml: trace.ml.as_ref().map(|ml| MlReport {
            beta: rows_of(&ml.beta_ml.full()),
            eigenvalues: ml.eigenvalues.iter().copied().collect(),
            hessian_fallback: ml.hessian_fallback,
        }),
    };
    write_json(&out.join("estimates.json"), &estimates)?;

    let d = diagnostics(&trace);
    let report = DiagnosticsReport {
        retained: d.retained,
        min_ess: d.min_ess,
        degenerate: d.degenerate.clone(),
        alpha_watchdog: d.alpha_watchdog,
        watchdog_fired: d.watchdog_fired(),
        acceptance: (&d.acceptance).into(),
        acceptance_burnin: (&trace.acceptance_burnin).into(),
        ess: d
            .ess
            .iter()
            .map(|(name, e)| EssEntry {
                name: name.clone(),
                ess: e.ess,
                iact: e.iact,
                degenerate: e.degenerate,
            })
            .collect(),
    };
    write_json(&out.join("diagnostics.json"), &report)?;
    if d.watchdog_fired() {
        return Err(CliError::Watchdog(format!(
            "{:.1}% of retained draws have ‖α‖∞ < 1e-6",
            100.0 * d.alpha_watchdog
        )));
    }
    Ok(())
}
