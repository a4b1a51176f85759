use cvar_core::rank::RankPosterior;
use cvar_core::Panel;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::fitting::{fit_all_ranks, RankFit};
use crate::io::{ensure_dir, num, read_panel, write_csv, write_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateReport {
    pub replicate: usize,
    /// `log BF_{r|0}`, `r = 0..=n`; excluded ranks are null.
    pub log_bf: Vec<Option<f64>>,
    pub mc_se: Vec<Option<f64>>,
    pub probs: Vec<f64>,
    pub map_rank: usize,
    pub excluded: Vec<usize>,
    /// Messages of excluded ranks, by rank.
    pub failures: Vec<(usize, String)>,
    pub watchdog: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    /// Leading rows of the panel used.
    pub length: usize,
    pub replicates: Vec<ReplicateReport>,
    /// Mean and SD of `log BF_{r|0}` over the replicates where it is finite.
    pub mean_log_bf: Vec<Option<f64>>,
    pub sd_log_bf: Vec<Option<f64>>,
    /// Rank posterior from the mean log Bayes factors.
    pub probs: Vec<f64>,
    pub map_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub n: usize,
    pub lag: usize,
    pub labels: Vec<String>,
    pub windows: Vec<WindowReport>,
}

impl ScanReport {
    /// Rank posterior of the longest window.
    pub fn final_posterior(&self) -> CliResult<RankPosterior> {
        let w = self
            .windows
            .iter()
            .max_by_key(|w| w.length)
            .ok_or_else(|| CliError::usage("rank scan has no windows"))?;
        posterior_from_mean(&w.mean_log_bf)
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn posterior_from_mean(mean: &[Option<f64>]) -> CliResult<RankPosterior> {
    let log_bf: Vec<f64> = mean.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    Ok(RankPosterior::from_log_bf(log_bf, vec![0.0; mean.len()])?)
}

fn replicate_report(replicate: usize, fit: &RankFit) -> ReplicateReport {
    let rp = &fit.posterior;
    ReplicateReport {
        replicate,
        log_bf: rp.log_bf.iter().copied().map(finite).collect(),
        mc_se: rp.mc_se.iter().copied().map(finite).collect(),
        probs: rp.probs.clone(),
        map_rank: rp.map_rank(),
        excluded: rp.excluded.clone(),
        failures: fit
            .evidence
            .iter()
            .filter_map(|(r, e)| e.as_ref().err().map(|e| (*r, e.to_string())))
            .collect(),
        watchdog: fit.watchdog.clone(),
    }
}

/// Aggregates replicate log Bayes factors of one window.
pub fn window_report(length: usize, n: usize, replicates: Vec<ReplicateReport>) -> CliResult<WindowReport> {
    let mut mean = vec![None; n + 1];
    let mut sd = vec![None; n + 1];
    for r in 0..=n {
        let vals: Vec<f64> = replicates.iter().filter_map(|rep| rep.log_bf[r]).collect();
        if vals.is_empty() {
            continue;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        mean[r] = Some(m);
        sd[r] = Some(if vals.len() > 1 {
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
        } else {
            0.0
        });
    }
    let rp = posterior_from_mean(&mean)?;
    Ok(WindowReport {
        length,
        replicates,
        mean_log_bf: mean,
        sd_log_bf: sd,
        map_rank: rp.map_rank(),
        probs: rp.probs,
    })
}

/// Scans every `(window, replicate)` pair; chains of all pairs and ranks run
/// on the current rayon pool.
pub fn scan(panel: &Panel, cfg: &RunConfig) -> CliResult<ScanReport> {
    let lengths = if cfg.window_grid.is_empty() {
        vec![panel.rows()]
    } else {
        cfg.window_grid.clone()
    };
    let n = panel.n();
    let units: Vec<(usize, usize)> = (0..lengths.len())
        .flat_map(|w| (0..cfg.replicates).map(move |rep| (w, rep)))
        .collect();
    let fits: Vec<CliResult<ReplicateReport>> = units
        .par_iter()
        .map(|&(w, rep)| {
            let sub = panel.window(0, lengths[w])?;
            let fit = fit_all_ranks(&sub, cfg, w, rep, false)?;
            Ok(replicate_report(rep, &fit))
        })
        .collect();
    let mut fits = fits.into_iter();
    let mut windows = Vec::with_capacity(lengths.len());
    for &len in &lengths {
        let reps = fits.by_ref().take(cfg.replicates).collect::<CliResult<Vec<_>>>()?;
        windows.push(window_report(len, n, reps)?);
    }
    Ok(ScanReport {
        n,
        lag: cfg.lag,
        labels: panel.labels().to_vec(),
        windows,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_else(|| "NaN".into())
}

/// Ranks down, windows across.
fn write_table(
    path: &std::path::Path,
    report: &ScanReport,
    cell: impl Fn(&WindowReport, usize) -> String,
) -> CliResult<()> {
    let mut header = vec!["rank".to_string()];
    header.extend(report.windows.iter().map(|w| format!("w{}", w.length)));
    write_csv(
        path,
        &header,
        (0..=report.n).map(|r| {
            std::iter::once(r.to_string())
                .chain(report.windows.iter().map(|w| cell(w, r)))
                .collect::<Vec<_>>()
        }),
    )
}

pub fn write_outputs(dir: &std::path::Path, report: &ScanReport) -> CliResult<()> {
    write_json(&dir.join("rank_posterior.json"), report)?;
    write_table(&dir.join("log_bf_mean.csv"), report, |w, r| fmt_opt(w.mean_log_bf[r]))?;
    write_table(&dir.join("log_bf_sd.csv"), report, |w, r| fmt_opt(w.sd_log_bf[r]))?;
    write_table(&dir.join("rank_probs.csv"), report, |w, r| num(w.probs[r]))
}

pub fn watchdog_summary(report: &ScanReport) -> Option<String> {
    let hits: Vec<String> = report
        .windows
        .iter()
        .flat_map(|w| {
            w.replicates.iter().flat_map(move |rep| {
                rep.watchdog
                    .iter()
                    .map(move |r| format!("window {} replicate {} rank {r}", w.length, rep.replicate))
            })
        })
        .collect();
    (!hits.is_empty()).then(|| hits.join("; "))
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    if cfg.rank.fixed().is_some() {
        return Err(CliError::usage("rank scans every rank; drop --rank"));
    }
    let loaded = read_panel(cfg.data_path()?)?;
    let panel = &loaded.panel;
    cfg.validate_for_panel(panel.n(), panel.rows())?;
    let report = scan(panel, cfg)?;
    let out = ensure_dir(&cfg.out)?;
    write_outputs(&out, &report)?;
    match watchdog_summary(&report) {
        Some(msg) => Err(CliError::Watchdog(msg)),
        None => Ok(()),
    }
}
