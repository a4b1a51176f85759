use cvar_core::forecast::{predict_bma, predict_fixed_rank, squared_errors, ForecastRequest, ForecastResult};
use cvar_core::rank::RankPosterior;
use cvar_core::rng::RngStream;
use cvar_core::{Panel, Trace};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::commands::rank::ScanReport;
use crate::config::{ModeName, RunConfig};
use crate::error::{CliError, CliResult};
use crate::fitting::{fit_all_ranks, fit_rank, stream_id, EVAL_STREAM, FORECAST_STREAM};
use crate::io::{ensure_dir, num, read_json, read_panel, write_csv, write_json};

/// Last `p` level rows, oldest first.
pub fn forecast_tail(panel: &Panel, p: usize) -> DMatrix<f64> {
    panel.levels().rows(panel.rows() - p, p).into_owned()
}

pub fn request(cfg: &RunConfig) -> ForecastRequest {
    ForecastRequest {
        horizon: cfg.horizon,
        noise_paths: cfg.noise_paths,
        quantiles: cfg.quantiles.clone(),
    }
}

/// Forecast noise of rank `r` under base stream `stream`.
pub fn noise_rng(seed: u64, stream: u64, r: usize) -> RngStream {
    RngStream::new(seed, FORECAST_STREAM | stream | r as u64)
}

fn present(traces: &[Option<Trace>]) -> Vec<(usize, &Trace)> {
    traces
        .iter()
        .enumerate()
        .filter_map(|(r, t)| t.as_ref().map(|t| (r, t)))
        .collect()
}

/// BMOS at the MAP rank and BMA over every rank with positive probability.
/// `traces[r]` must be present for each of those ranks.
pub fn forecast_both(
    traces: &[Option<Trace>],
    rp: &RankPosterior,
    panel: &Panel,
    cfg: &RunConfig,
    stream: u64,
) -> CliResult<(ForecastResult, ForecastResult)> {
    let tail = forecast_tail(panel, cfg.lag);
    let req = request(cfg);
    let map = rp.map_rank();
    let map_trace = traces[map]
        .as_ref()
        .ok_or_else(|| CliError::usage(format!("no chain for the MAP rank {map}")))?;
    // common random numbers: BMA's MAP-rank paths are exactly the BMOS paths
    let bmos = predict_fixed_rank(map_trace, cfg.lag, &tail, &req, &mut noise_rng(cfg.seed, stream, map))?;
    let bma = predict_bma(&present(traces), rp, cfg.lag, &tail, &req, |r| {
        noise_rng(cfg.seed, stream, r)
    })?;
    Ok((bmos, bma))
}

#[derive(Debug, Serialize)]
struct ForecastReport {
    mode: ModeName,
    horizon: usize,
    labels: Vec<String>,
    /// Rank probabilities used; a point mass under a fixed rank.
    rank_probs: Vec<f64>,
    map_rank: usize,
    /// `(rank, weight)` of the mixture components.
    components: Vec<(usize, f64)>,
    excluded_paths: usize,
    total_paths: usize,
    flagged: bool,
    mean_differences: Vec<Vec<f64>>,
}

fn write_forecast(
    dir: &std::path::Path,
    panel: &Panel,
    res: &ForecastResult,
    mode: ModeName,
    rp: &RankPosterior,
) -> CliResult<()> {
    let labels = panel.labels().to_vec();
    let mut header = vec!["step".to_string()];
    header.extend(labels.iter().cloned());
    write_csv(
        &dir.join("forecast_mean.csv"),
        &header,
        res.mean_path.row_iter().enumerate().map(|(s, row)| {
            std::iter::once((s + 1).to_string())
                .chain(row.iter().map(|v| num(*v)))
                .collect::<Vec<_>>()
        }),
    )?;
    let mut qheader = vec!["quantile".to_string()];
    qheader.extend(header.iter().cloned());
    write_csv(
        &dir.join("forecast_quantiles.csv"),
        &qheader,
        res.quantiles.iter().flat_map(|(q, band)| {
            band.row_iter()
                .enumerate()
                .map(|(s, row)| {
                    [num(*q), (s + 1).to_string()]
                        .into_iter()
                        .chain(row.iter().map(|v| num(*v)))
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        }),
    )?;
    let report = ForecastReport {
        mode,
        horizon: res.mean_path.nrows(),
        labels,
        rank_probs: rp.probs.clone(),
        map_rank: rp.map_rank(),
        components: res.components.iter().map(|c| (c.r, c.weight)).collect(),
        excluded_paths: res.excluded,
        total_paths: res.total,
        flagged: res.flagged(),
        mean_differences: crate::io::rows_of(&res.mean_differences()),
    };
    write_json(&dir.join("forecast.json"), &report)
}

fn point_mass(n: usize, r: usize) -> CliResult<RankPosterior> {
    let log_bf = (0..=n).map(|i| if i == r { 0.0 } else { f64::NAN }).collect();
    Ok(RankPosterior::from_log_bf(log_bf, vec![0.0; n + 1])?)
}

fn forecast_once(panel: &Panel, cfg: &RunConfig) -> CliResult<(ForecastResult, RankPosterior, Vec<usize>)> {
    let n = panel.n();
    if let Some(r) = cfg.rank.fixed() {
        if cfg.mode == ModeName::Bma {
            return Err(CliError::usage("BMA averages over ranks; drop --rank"));
        }
        let (_, _, trace) = fit_rank(panel, cfg, r, stream_id(0, 0, r))?;
        let rp = point_mass(n, r)?;
        let res = predict_fixed_rank(
            &trace,
            cfg.lag,
            &forecast_tail(panel, cfg.lag),
            &request(cfg),
            &mut noise_rng(cfg.seed, 0, r),
        )?;
        let fired = cvar_core::gibbs::diagnostics(&trace).watchdog_fired();
        return Ok((res, rp, if fired { vec![r] } else { vec![] }));
    }
    let (rp, traces, watchdog) = match &cfg.rank_scan {
        Some(path) => {
            let scan: ScanReport = read_json(path)?;
            if scan.n != n {
                return Err(CliError::usage(format!(
                    "rank scan covers {} series, panel has {n}",
                    scan.n
                )));
            }
            let rp = scan.final_posterior()?;
            let needed: Vec<usize> = match cfg.mode {
                ModeName::Bmos => vec![rp.map_rank()],
                ModeName::Bma => (0..=n).filter(|&r| rp.probs[r] > 0.0).collect(),
            };
            let fits: Vec<CliResult<(usize, Trace)>> = needed
                .par_iter()
                .map(|&r| Ok((r, fit_rank(panel, cfg, r, stream_id(0, 0, r))?.2)))
                .collect();
            let mut traces = vec![None; n + 1];
            let mut watchdog = Vec::new();
            for f in fits {
                let (r, t) = f?;
                if r > 0 && cvar_core::gibbs::diagnostics(&t).watchdog_fired() {
                    watchdog.push(r);
                }
                traces[r] = Some(t);
            }
            (rp, traces, watchdog)
        }
        None => {
            let fit = fit_all_ranks(panel, cfg, 0, 0, true)?;
            (fit.posterior, fit.traces, fit.watchdog)
        }
    };
    let tail = forecast_tail(panel, cfg.lag);
    let req = request(cfg);
    let res = match cfg.mode {
        ModeName::Bmos => {
            let map = rp.map_rank();
            let trace = traces[map]
                .as_ref()
                .ok_or_else(|| CliError::usage(format!("no chain for rank {map}")))?;
            predict_fixed_rank(trace, cfg.lag, &tail, &req, &mut noise_rng(cfg.seed, 0, map))?
        }
        ModeName::Bma => predict_bma(&present(&traces), &rp, cfg.lag, &tail, &req, |r| {
            noise_rng(cfg.seed, 0, r)
        })?,
    };
    Ok((res, rp, watchdog))
}

/// Squared errors and terminal spread of one evaluation segment.
#[derive(Debug, Clone)]
pub struct SegmentOutcome {
    pub start: usize,
    pub map_rank: usize,
    pub probs: Vec<f64>,
    /// `(mode, h×n squared errors)`.
    pub errors: Vec<(ModeName, DMatrix<f64>)>,
    /// Terminal-step interquartile range per series, BMOS then BMA.
    pub iqr: Vec<(f64, f64)>,
}

impl SegmentOutcome {
    /// Whether the summed terminal IQR of BMA reaches that of BMOS; `None`
    /// without sampled paths.
    pub fn bma_wider(&self) -> Option<bool> {
        let (a, b) = self.iqr.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        (a.is_finite() && b.is_finite()).then_some(b >= a)
    }
}

/// Fits every rank on `segment_length` rows from `start` and scores both
/// forecasts against the following `horizon` rows.
pub fn evaluate_segment(panel: &Panel, cfg: &RunConfig, index: usize, start: usize) -> CliResult<SegmentOutcome> {
    let len = cfg.segment_length;
    let sub = panel.window(start, len)?;
    let realised = panel.levels().rows(start + len, cfg.horizon).into_owned();
    let fit = fit_all_ranks(&sub, cfg, index, 0, true)?;
    let (bmos, bma) = forecast_both(
        &fit.traces,
        &fit.posterior,
        &sub,
        cfg,
        EVAL_STREAM | stream_id(index, 0, 0),
    )?;
    let last = cfg.horizon - 1;
    let iqr = (0..panel.n())
        .map(|j| {
            (
                bmos.interquartile_range(last, j).unwrap_or(f64::NAN),
                bma.interquartile_range(last, j).unwrap_or(f64::NAN),
            )
        })
        .collect();
    Ok(SegmentOutcome {
        start,
        map_rank: fit.posterior.map_rank(),
        probs: fit.posterior.probs.clone(),
        errors: vec![
            (ModeName::Bmos, squared_errors(&bmos.mean_path, &realised)?.0),
            (ModeName::Bma, squared_errors(&bma.mean_path, &realised)?.0),
        ],
        iqr,
    })
}

/// Segment starts drawn uniformly with replacement.
pub fn segment_starts(panel: &Panel, cfg: &RunConfig) -> CliResult<Vec<usize>> {
    let need = cfg.segment_length + cfg.horizon;
    if panel.rows() < need {
        return Err(CliError::usage(format!(
            "evaluation needs {need} rows (segment {} + horizon {}), panel has {}",
            cfg.segment_length,
            cfg.horizon,
            panel.rows()
        )));
    }
    let mut rng = RngStream::new(cfg.seed, EVAL_STREAM);
    Ok((0..cfg.eval_segments)
        .map(|_| rng.random_range(0..=panel.rows() - need))
        .collect())
}

#[derive(Debug, Serialize)]
struct StepSummary {
    step: usize,
    mean: f64,
    median: f64,
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    segments: usize,
    segment_length: usize,
    horizon: usize,
    bmos: Vec<StepSummary>,
    bma: Vec<StepSummary>,
    /// Share of segments where the BMA terminal IQR, summed over series, is
    /// at least the BMOS one.
    bma_wider_share: Option<f64>,
}

fn step_summary(outcomes: &[SegmentOutcome], mode: ModeName, horizon: usize) -> Vec<StepSummary> {
    (0..horizon)
        .map(|s| {
            let mut totals: Vec<f64> = outcomes
                .iter()
                .flat_map(|o| o.errors.iter().filter(|(m, _)| *m == mode).map(|(_, e)| e.row(s).sum()))
                .collect();
            totals.sort_by(f64::total_cmp);
            let m = totals.len();
            let median = if m % 2 == 1 {
                totals[m / 2]
            } else {
                0.5 * (totals[m / 2 - 1] + totals[m / 2])
            };
            StepSummary {
                step: s + 1,
                mean: totals.iter().sum::<f64>() / m as f64,
                median,
            }
        })
        .collect()
}

fn evaluate(panel: &Panel, cfg: &RunConfig, dir: &std::path::Path) -> CliResult<()> {
    let starts = segment_starts(panel, cfg)?;
    let outcomes: Vec<SegmentOutcome> = starts
        .par_iter()
        .enumerate()
        .map(|(i, &start)| evaluate_segment(panel, cfg, i, start))
        .collect::<CliResult<_>>()?;
    let labels = panel.labels();
    let mut header: Vec<String> = ["segment", "start", "mode", "step", "total"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(labels.iter().cloned());
    let mut rows = Vec::new();
    for (i, o) in outcomes.iter().enumerate() {
        for (mode, e) in &o.errors {
            let name = match mode {
                ModeName::Bmos => "bmos",
                ModeName::Bma => "bma",
            };
            for (s, row) in e.row_iter().enumerate() {
                let mut line = vec![
                    i.to_string(),
                    o.start.to_string(),
                    name.to_string(),
                    (s + 1).to_string(),
                    num(row.sum()),
                ];
                line.extend(row.iter().map(|v| num(*v)));
                rows.push(line);
            }
        }
    }
    write_csv(&dir.join("eval_errors.csv"), &header, rows)?;

    let sheader: Vec<String> = ["segment", "start", "map_rank", "series", "bmos_iqr", "bma_iqr"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_csv(
        &dir.join("eval_spread.csv"),
        &sheader,
        outcomes.iter().enumerate().flat_map(|(i, o)| {
            o.iqr
                .iter()
                .enumerate()
                .map(|(j, (a, b))| {
                    vec![
                        i.to_string(),
                        o.start.to_string(),
                        o.map_rank.to_string(),
                        labels[j].clone(),
                        num(*a),
                        num(*b),
                    ]
                })
                .collect::<Vec<_>>()
        }),
    )?;
    let pairs: Vec<bool> = outcomes.iter().filter_map(SegmentOutcome::bma_wider).collect();
    let summary = EvalSummary {
        segments: outcomes.len(),
        segment_length: cfg.segment_length,
        horizon: cfg.horizon,
        bmos: step_summary(&outcomes, ModeName::Bmos, cfg.horizon),
        bma: step_summary(&outcomes, ModeName::Bma, cfg.horizon),
        bma_wider_share: (!pairs.is_empty()).then(|| pairs.iter().filter(|&&w| w).count() as f64 / pairs.len() as f64),
    };
    write_json(&dir.join("eval_summary.json"), &summary)
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    let loaded = read_panel(cfg.data_path()?)?;
    let panel = &loaded.panel;
    cfg.validate_for_panel(panel.n(), panel.rows())?;
    let out = ensure_dir(&cfg.out)?;
    if cfg.eval_segments > 0 {
        if cfg.rank.fixed().is_some() || cfg.rank_scan.is_some() {
            return Err(CliError::usage(
                "evaluation fits every rank per segment; drop --rank and --rank-scan",
            ));
        }
        return evaluate(panel, cfg, &out);
    }
    let (res, rp, watchdog) = forecast_once(panel, cfg)?;
    write_forecast(&out, panel, &res, cfg.mode, &rp)?;
    if !watchdog.is_empty() {
        return Err(CliError::Watchdog(format!("ranks {watchdog:?}")));
    }
    Ok(())
}
