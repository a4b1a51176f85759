//! Run configuration: defaults, then the `--config` JSON file, then flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use cvar_core::forecast::{ForecastMode, DEFAULT_QUANTILES};
use cvar_core::gibbs::{BetaTarget, ChainConfig, SamplerKind};
use cvar_core::rank::RankOptions;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SamplerName {
    Alg1,
    Alg2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TargetName {
    Collapsed,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Bmos,
    Bma,
}

impl From<ModeName> for ForecastMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Bmos => ForecastMode::Bmos,
            ModeName::Bma => ForecastMode::Bma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanKeyword {
    Scan,
}

/// A fixed cointegration rank, or `"scan"` over `0..=n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RankChoice {
    Fixed(usize),
    Keyword(ScanKeyword),
}

impl RankChoice {
    pub fn fixed(self) -> Option<usize> {
        match self {
            RankChoice::Fixed(r) => Some(r),
            RankChoice::Keyword(_) => None,
        }
    }
}

impl FromStr for RankChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("scan") {
            return Ok(RankChoice::Keyword(ScanKeyword::Scan));
        }
        s.parse()
            .map(RankChoice::Fixed)
            .map_err(|_| format!("rank must be a non-negative integer or 'scan', got '{s}'"))
    }
}

impl fmt::Display for RankChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankChoice::Fixed(r) => write!(f, "{r}"),
            RankChoice::Keyword(_) => f.write_str("scan"),
        }
    }
}

/// Window lengths, either `a,b,c` or an inclusive range `start:end:step`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowGrid(pub Vec<usize>);

impl FromStr for WindowGrid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |_| format!("cannot parse window grid '{s}'");
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            [a, b, c] => {
                let (a, b, c): (usize, usize, usize) = (
                    a.trim().parse().map_err(bad)?,
                    b.trim().parse().map_err(bad)?,
                    c.trim().parse().map_err(bad)?,
                );
                if c == 0 || a > b {
                    return Err(format!("empty window range '{s}'"));
                }
                Ok(WindowGrid((a..=b).step_by(c).collect()))
            }
            [_] => s
                .split(',')
                .map(|v| v.trim().parse().map_err(bad))
                .collect::<Result<_, _>>()
                .map(WindowGrid),
            _ => Err(format!("window grid '{s}' is neither a list nor start:end:step")),
        }
    }
}

/// Overrides of the default prior. Explicit matrices are row-major.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorOverrides {
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
    /// Inverse-Wishart degrees of freedom.
    pub h: Option<f64>,
    pub s: Option<Vec<Vec<f64>>>,
    pub h_mat: Option<Vec<Vec<f64>>>,
    /// Rank-dependent; only valid with a fixed rank.
    pub beta_mean: Option<Vec<Vec<f64>>>,
    pub q: Option<Vec<Vec<f64>>>,
    pub p_mean: Option<Vec<Vec<f64>>>,
    pub a: Option<Vec<Vec<f64>>>,
}

impl PriorOverrides {
    pub fn has_rank_dependent(&self) -> bool {
        self.beta_mean.is_some() || self.q.is_some() || self.p_mean.is_some() || self.a.is_some()
    }
}

/// Fully resolved settings of one command; also the schema of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<String>,
    pub data: Option<PathBuf>,
    pub lag: usize,
    pub rank: RankChoice,
    pub sampler: SamplerName,
    pub target: TargetName,
    pub iters: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    /// Worker threads; 0 uses every core. Never affects results.
    pub jobs: usize,
    pub out: PathBuf,
    pub prior: PriorOverrides,
    /// Leading-window lengths for the rank scan; empty means the whole panel.
    pub window_grid: Vec<usize>,
    pub replicates: usize,
    pub nested_draws: usize,
    pub horizon: usize,
    pub mode: ModeName,
    pub noise_paths: usize,
    pub quantiles: Vec<f64>,
    /// Rank posterior from an earlier `rank` run, reused by `predict`.
    pub rank_scan: Option<PathBuf>,
    /// Random evaluation segments for `predict`; 0 disables evaluation.
    pub eval_segments: usize,
    pub segment_length: usize,
    pub preset: Option<String>,
    pub series: Option<usize>,
    pub length: usize,
    pub warmup: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let chain = ChainConfig::<f64>::default();
        Self {
            command: None,
            data: None,
            lag: 1,
            rank: RankChoice::Keyword(ScanKeyword::Scan),
            sampler: SamplerName::Alg2,
            target: TargetName::Collapsed,
            iters: chain.iterations,
            burnin: chain.burnin,
            thin: chain.thin,
            seed: 1,
            jobs: 0,
            out: PathBuf::from("out"),
            prior: PriorOverrides::default(),
            window_grid: Vec::new(),
            replicates: 1,
            nested_draws: RankOptions::default().nested_draws,
            horizon: 5,
            mode: ModeName::Bmos,
            noise_paths: 20,
            quantiles: DEFAULT_QUANTILES.to_vec(),
            rank_scan: None,
            eval_segments: 0,
            segment_length: 50,
            preset: None,
            series: None,
            length: 100,
            warmup: None,
        }
    }
}

/// Command-line flags shared by every subcommand; unset flags fall back to
/// the config file, then to the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON config file (a previous run.json replays that run)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input panel CSV
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// VAR lag order p
    #[arg(long)]
    pub lag: Option<usize>,
    /// Cointegration rank, or 'scan'
    #[arg(long)]
    pub rank: Option<RankChoice>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerName>,
    /// β target: collapsed marginal or joint conditional
    #[arg(long, value_enum)]
    pub target: Option<TargetName>,
    /// Total Gibbs sweeps per chain
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores)
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Rank-scan window lengths: 'a,b,c' or 'start:end:step'
    #[arg(long)]
    pub window_grid: Option<WindowGrid>,
    /// Independent chains per rank and window
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Rank-zero posterior draws for the Bayes-factor correction
    #[arg(long)]
    pub nested_draws: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeName>,
    /// Noise paths per retained draw for predictive quantiles
    #[arg(long)]
    pub noise_paths: Option<usize>,
    /// Comma-separated predictive quantiles
    #[arg(long, value_delimiter = ',')]
    pub quantiles: Option<Vec<f64>>,
    /// rank_posterior.json from a previous 'rank' run
    #[arg(long)]
    pub rank_scan: Option<PathBuf>,
    /// Random evaluation segments (predict); 0 disables
    #[arg(long)]
    pub eval_segments: Option<usize>,
    #[arg(long)]
    pub segment_length: Option<usize>,
    /// Named synthetic model (synth)
    #[arg(long)]
    pub preset: Option<String>,
    /// Series count of a random synthetic model (synth)
    #[arg(long)]
    pub series: Option<usize>,
    /// Simulated length T (synth)
    #[arg(long)]
    pub length: Option<usize>,
    /// Discarded simulation steps (synth)
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Prior scale λ of A
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Prior scale τ of H and S
    #[arg(long)]
    pub tau: Option<f64>,
    /// Inverse-Wishart degrees of freedom h
    #[arg(long)]
    pub dof: Option<f64>,
}

fn read_config_file(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

impl RunConfig {
    /// Resolves `defaults < file < flags` for `command`.
    pub fn resolve(command: &str, flags: &Flags) -> CliResult<Self> {
        let mut cfg = match &flags.config {
            Some(p) => read_config_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(c) = &cfg.command {
            if c != command {
                return Err(CliError::usage(format!("config was written by '{c}', not '{command}'")));
            }
        }
        cfg.command = Some(command.to_string());
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = flags.$field.clone() {
                    cfg.$field = v;
                }
            )*};
        }
        take!(
            lag,
            rank,
            sampler,
            target,
            iters,
            burnin,
            thin,
            seed,
            jobs,
            out,
            replicates,
            nested_draws,
            horizon,
            mode,
            noise_paths,
            quantiles,
            eval_segments,
            segment_length,
            length
        );
        if let Some(v) = &flags.data {
            cfg.data = Some(v.clone());
        }
        if let Some(v) = &flags.rank_scan {
            cfg.rank_scan = Some(v.clone());
        }
        if let Some(v) = &flags.window_grid {
            cfg.window_grid = v.0.clone();
        }
        if let Some(v) = &flags.preset {
            cfg.preset = Some(v.clone());
        }
        if let Some(v) = flags.series {
            cfg.series = Some(v);
        }
        if let Some(v) = flags.warmup {
            cfg.warmup = Some(v);
        }
        if let Some(v) = flags.lambda {
            cfg.prior.lambda = Some(v);
        }
        if let Some(v) = flags.tau {
            cfg.prior.tau = Some(v);
        }
        if let Some(v) = flags.dof {
            cfg.prior.h = Some(v);
        }
        cfg.validate_static()?;
        Ok(cfg)
    }

    /// Checks that need no data.
    pub fn validate_static(&self) -> CliResult<()> {
        let fail = |m: String| Err(CliError::Usage(m));
        if self.lag == 0 {
            return fail("--lag must be at least 1".into());
        }
        if self.iters <= self.burnin {
            return fail(format!(
                "--iters ({}) must exceed --burnin ({})",
                self.iters, self.burnin
            ));
        }
        if self.thin == 0 || self.replicates == 0 || self.horizon == 0 {
            return fail("--thin, --replicates and --horizon must be positive".into());
        }
        if self.nested_draws == 0 {
            return fail("--nested-draws must be positive".into());
        }
        if let Some(q) = self.quantiles.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
            return fail(format!("quantile {q} outside (0, 1)"));
        }
        if self.window_grid.contains(&0) {
            return fail("window lengths must be positive".into());
        }
        if self.prior.has_rank_dependent() && self.rank.fixed().is_none() {
            return fail("explicit β̄, Q, P or A priors need a fixed --rank".into());
        }
        for (name, v) in [
            ("lambda", self.prior.lambda),
            ("tau", self.prior.tau),
            ("h", self.prior.h),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return fail(format!("prior {name} = {v} must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Checks against the panel dimension `n`, before any sampling.
    pub fn validate_for_panel(&self, n: usize, rows: usize) -> CliResult<()> {
        if let Some(r) = self.rank.fixed() {
            if r > n {
                return Err(CliError::usage(format!("rank {r} exceeds the {n} series")));
            }
        }
        // p lags plus at least one regression row per coefficient
        let min_rows = self.lag + 2;
        if rows < min_rows {
            return Err(CliError::usage(format!(
                "panel has {rows} rows, need at least {min_rows} for lag {}",
                self.lag
            )));
        }
        if let Some(w) = self.window_grid.iter().find(|&&w| w > rows || w < min_rows) {
            return Err(CliError::usage(format!(
                "window length {w} outside [{min_rows}, {rows}]"
            )));
        }
        Ok(())
    }

    pub fn data_path(&self) -> CliResult<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::usage("--data is required"))
    }

    pub fn chain_config(&self) -> ChainConfig<f64> {
        ChainConfig {
            sampler: match self.sampler {
                SamplerName::Alg1 => SamplerKind::Alg1,
                SamplerName::Alg2 => SamplerKind::Alg2,
            },
            target: match self.target {
                TargetName::Collapsed => BetaTarget::Collapsed,
                TargetName::Joint => BetaTarget::Joint,
            },
            iterations: self.iters,
            burnin: self.burnin,
            thin: self.thin,
            ..Default::default()
        }
    }

    pub fn rank_options(&self) -> RankOptions {
        RankOptions {
            nested_draws: self.nested_draws,
            ..Default::default()
        }
    }
}
