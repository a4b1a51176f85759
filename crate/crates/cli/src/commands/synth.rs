use cvar_core::rng::RngStream;
use cvar_core::synth::{preset_warmup, random_true_model, simulate, DEFAULT_WARMUP};
use cvar_core::Model;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{ensure_dir, rows_of, write_json, write_panel, LoadedPanel};

#[derive(Debug, Serialize)]
struct TruthReport {
    preset: Option<String>,
    n: usize,
    p: usize,
    r: usize,
    length: usize,
    warmup: usize,
    mu: Vec<f64>,
    alpha: Vec<Vec<f64>>,
    /// Full `n×r` β with the identity block on top.
    beta: Vec<Vec<f64>>,
    psi: Vec<Vec<Vec<f64>>>,
    sigma: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    companion_moduli: Vec<f64>,
}

/// The model named by `--preset`, or a random one from `--series`, `--lag`
/// and `--rank` (drawn on stream 1 of the seed).
pub fn true_model(cfg: &RunConfig) -> CliResult<(Model, usize)> {
    match (&cfg.preset, cfg.series) {
        (Some(_), Some(_)) => Err(CliError::usage("give either --preset or --series, not both")),
        (Some(name), None) => {
            let model = Model::preset(name).map_err(|e| CliError::usage(e.to_string()))?;
            Ok((model, cfg.warmup.unwrap_or_else(|| preset_warmup(name))))
        }
        (None, Some(n)) => {
            let r = cfg
                .rank
                .fixed()
                .ok_or_else(|| CliError::usage("a random model needs a fixed --rank"))?;
            if r > n {
                return Err(CliError::usage(format!("rank {r} exceeds the {n} series")));
            }
            let model = random_true_model(n, cfg.lag, r, &mut RngStream::new(cfg.seed, 1))?;
            Ok((model, cfg.warmup.unwrap_or(DEFAULT_WARMUP)))
        }
        (None, None) => Err(CliError::usage("synth needs --preset or --series")),
    }
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    let (model, warmup) = true_model(cfg)?;
    if cfg.length < 2 {
        return Err(CliError::usage("--length must be at least 2"));
    }
    // --length counts observed rows, x_0..x_{length-1}
    let panel = simulate(&model, cfg.length - 1, warmup, &mut RngStream::new(cfg.seed, 0))?;
    let out = ensure_dir(&cfg.out)?;
    write_panel(
        &out.join("panel.csv"),
        &LoadedPanel {
            panel,
            stamp_header: None,
        },
    )?;
    let truth = TruthReport {
        preset: cfg.preset.clone(),
        n: model.n,
        p: model.p,
        r: model.r,
        length: cfg.length,
        warmup,
        mu: model.mu.iter().copied().collect(),
        alpha: rows_of(&model.alpha),
        beta: rows_of(&model.beta.full()),
        psi: model.psi.iter().map(rows_of).collect(),
        sigma: rows_of(model.sigma.values()),
        b: rows_of(&model.b_matrix()),
        companion_moduli: model.companion_moduli(),
    };
    write_json(&out.join("truth.json"), &truth)
}
