//! Chains and rank posteriors shared by the workflows.
//!
//! Every unit of work owns an `RngStream` keyed by (window, replicate,
//! rank), so results do not depend on the worker count or completion order.

use cvar_core::ecm::{build_ecm_design, PriorSettings};
use cvar_core::gibbs::{diagnostics, run_chain};
use cvar_core::matrix_stats::SpdMatrix;
use cvar_core::rank::{rank_evidence, rank_zero_draws, RankEvidence, RankPosterior};
use cvar_core::rng::RngStream;
use cvar_core::{Design, Panel, Prior, Trace};
use rayon::prelude::*;

use crate::config::{PriorOverrides, RunConfig};
use crate::error::{CliError, CliResult};
use crate::io::matrix_from_rows;

/// Marks streams that draw forecast noise rather than parameters.
pub const FORECAST_STREAM: u64 = 1 << 63;
/// Marks streams of evaluation segments.
pub const EVAL_STREAM: u64 = 1 << 62;

/// Stream of `(window, replicate, rank)`; rank 0 is the exact rank-zero
/// sampler.
pub fn stream_id(window: usize, replicate: usize, rank: usize) -> u64 {
    ((window as u64) << 40) | ((replicate as u64) << 16) | rank as u64
}

/// Default prior of the design, with any overrides applied.
pub fn make_prior(design: &Design, ov: &PriorOverrides) -> CliResult<Prior> {
    let settings = PriorSettings {
        lambda: ov.lambda.unwrap_or(PriorSettings::default().lambda),
        tau: ov.tau,
        dof: ov.h,
    };
    let base = Prior::default_for(design, settings)?;
    let explicit = ov.s.is_some() || ov.h_mat.is_some() || ov.has_rank_dependent();
    if !explicit {
        return Ok(base);
    }
    let spd = |m: &Option<Vec<Vec<f64>>>, what: &str, fallback: &SpdMatrix<f64>| -> CliResult<SpdMatrix<f64>> {
        match m {
            Some(rows) => Ok(SpdMatrix::new(matrix_from_rows(rows, what)?)?),
            None => Ok(fallback.clone()),
        }
    };
    let plain = |m: &Option<Vec<Vec<f64>>>, what: &str, fallback: &nalgebra::DMatrix<f64>| match m {
        Some(rows) => matrix_from_rows(rows, what),
        None => Ok(fallback.clone()),
    };
    Ok(Prior::new(
        plain(&ov.beta_mean, "prior beta_mean", &base.beta_mean)?,
        spd(&ov.q, "prior q", &base.q)?,
        spd(&ov.h_mat, "prior h_mat", &base.h_mat)?,
        spd(&ov.s, "prior s", &base.s)?,
        base.h,
        plain(&ov.p_mean, "prior p_mean", &base.p_mean)?,
        spd(&ov.a, "prior a", &base.a)?,
        base.lambda,
        base.tau,
    )?)
}

/// Evidence for every rank of one panel, and optionally the traces.
#[derive(Debug, Clone)]
pub struct RankFit {
    pub posterior: RankPosterior,
    pub evidence: Vec<(usize, cvar_core::Result<RankEvidence>)>,
    /// Indexed by rank; `traces[0]` wraps the exact rank-zero draws.
    pub traces: Vec<Option<Trace>>,
    /// Ranks whose chain tripped the α watchdog.
    pub watchdog: Vec<usize>,
}

/// One chain at rank `r`.
pub fn fit_rank(panel: &Panel, cfg: &RunConfig, r: usize, stream: u64) -> CliResult<(Design, Prior, Trace)> {
    let design = build_ecm_design(panel, cfg.lag, r)?;
    let prior = make_prior(&design, &cfg.prior)?;
    let trace = if r == 0 {
        let kept = (cfg.iters - cfg.burnin).div_ceil(cfg.thin);
        let draws = rank_zero_draws(&design, &prior, kept, &mut RngStream::new(cfg.seed, stream))?;
        Trace::from_states(draws, cfg.seed, stream)
    } else {
        run_chain(
            &design,
            &prior,
            &cfg.chain_config(),
            &mut RngStream::new(cfg.seed, stream),
        )?
    };
    Ok((design, prior, trace))
}

/// Runs ranks `1..=n` in parallel on `panel` and assembles the rank
/// posterior. Ranks whose chain or estimator fails are excluded.
pub fn fit_all_ranks(
    panel: &Panel,
    cfg: &RunConfig,
    window: usize,
    replicate: usize,
    keep_traces: bool,
) -> CliResult<RankFit> {
    let n = panel.n();
    let design0 = build_ecm_design(panel, cfg.lag, 0)?;
    let prior0 = make_prior(&design0, &cfg.prior)?;
    let stream0 = stream_id(window, replicate, 0);
    let draws0 = rank_zero_draws(
        &design0,
        &prior0,
        cfg.nested_draws,
        &mut RngStream::new(cfg.seed, stream0),
    )?;
    let opts = cfg.rank_options();
    let per_rank: Vec<(cvar_core::Result<RankEvidence>, Option<Trace>, bool)> = (1..=n)
        .into_par_iter()
        .map(|r| {
            let fit = design0.with_rank(r).and_then(|d| {
                let prior = make_prior(&d, &cfg.prior).map_err(to_core)?;
                let trace = run_chain(
                    &d,
                    &prior,
                    &cfg.chain_config(),
                    &mut RngStream::new(cfg.seed, stream_id(window, replicate, r)),
                )?;
                Ok((d, prior, trace))
            });
            match fit {
                Ok((d, prior, trace)) => {
                    let fired = diagnostics(&trace).watchdog_fired();
                    let ev = rank_evidence(&trace, &d, &prior, &prior0, &draws0, &opts);
                    (ev, keep_traces.then_some(trace), fired)
                }
                Err(e) => (Err(e), None, false),
            }
        })
        .collect();
    let mut evidence = Vec::with_capacity(n);
    let mut traces = vec![None; n + 1];
    let mut watchdog = Vec::new();
    for (i, (ev, trace, fired)) in per_rank.into_iter().enumerate() {
        let r = i + 1;
        evidence.push((r, ev));
        traces[r] = trace;
        if fired {
            watchdog.push(r);
        }
    }
    if keep_traces {
        traces[0] = Some(Trace::from_states(draws0, cfg.seed, stream0));
    }
    let posterior = RankPosterior::from_evidence(n, &evidence)?;
    Ok(RankFit {
        posterior,
        evidence,
        traces,
        watchdog,
    })
}

fn to_core(e: CliError) -> cvar_core::Error {
    match e {
        CliError::Numeric(e) => e,
        other => cvar_core::Error::Parameter(other.to_string()),
    }
}

/// Thread pool of `jobs` workers (0 = all cores).
pub fn pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::usage(format!("cannot start {jobs} workers: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for w in 0..10 {
            for rep in 0..30 {
                for r in 0..12 {
                    assert!(seen.insert(stream_id(w, rep, r)));
                }
            }
        }
        assert_eq!(stream_id(0, 0, 0) & (FORECAST_STREAM | EVAL_STREAM), 0);
    }
}
