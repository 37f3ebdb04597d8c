use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use struprune::admm::lowrank::LowRankConfig;
use struprune::admm::Granularity;
use struprune::allocation::ScoreRule;
use struprune::pipeline::{Method, RunConfig};

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

fn parse_rule(s: &str) -> Result<ScoreRule, String> {
    match s {
        "ratio" => Ok(ScoreRule::Ratio),
        "gain" => Ok(ScoreRule::Gain),
        _ => Err(format!("unknown score rule `{s}` (expected ratio or gain)")),
    }
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    match s {
        "unit" => Ok(Granularity::Unit),
        "head" => Ok(Granularity::Head),
        _ => Err(format!("unknown granularity `{s}` (expected unit or head)")),
    }
}

/// Dense model and calibration set every pruning command reads.
#[derive(Debug, Args)]
pub struct Inputs {
    /// Model directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration blob (its `.json` sidecar sits next to it).
    #[arg(long)]
    pub calib: PathBuf,
}

/// Run configuration. Every flag overrides the matching field of `--config`.
#[derive(Debug, Args)]
pub struct Tuning {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// closed-form, softmax, inverse-weight, magnitude, snip, l0 or wanda-local.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Global target sparsity in (0, 1).
    #[arg(long)]
    pub sparsity: Option<f64>,
    /// Fixed allocation temperature.
    #[arg(long, conflicts_with = "t_grid")]
    pub temperature: Option<f64>,
    /// Comma-separated temperature grid to sweep.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub t_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Outer solver iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Depth decay for inverse weighting.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Attention/MLP importance ratio for inverse weighting.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Closed-form ranking: ratio (default) or gain.
    #[arg(long, value_parser = parse_rule)]
    pub score_rule: Option<ScoreRule>,
    /// Attention mask unit: unit (rows) or head.
    #[arg(long, value_parser = parse_granularity)]
    pub granularity: Option<Granularity>,
    /// Return each block's last solver iterate instead of its best.
    #[arg(long)]
    pub last_iterate: bool,
    /// Rank of the low-rank residual correction (off when absent).
    #[arg(long)]
    pub correction_rank: Option<usize>,
    /// Record wall time in report.json.
    #[arg(long)]
    pub timing: bool,
}

impl Tuning {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(v) = self.sparsity {
            cfg.sparsity = v;
        }
        if let Some(t) = self.temperature {
            cfg.temperature = Some(t);
            cfg.t_grid = None;
        }
        if let Some(g) = &self.t_grid {
            cfg.t_grid = Some(g.clone());
            cfg.temperature = None;
        }
        if let Some(v) = self.alpha {
            cfg.solver.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.solver.beta = v;
        }
        if let Some(v) = self.iters {
            cfg.solver.iters = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.rho {
            cfg.rho = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.threads {
            cfg.solver.threads = v;
        }
        if let Some(v) = self.score_rule {
            cfg.solver.score_rule = v;
        }
        if let Some(v) = self.granularity {
            cfg.solver.granularity = v;
        }
        if self.last_iterate {
            cfg.solver.keep_best = false;
        }
        if let Some(rank) = self.correction_rank {
            let base = cfg.correction.unwrap_or(LowRankConfig {
                rank,
                steps: 50,
                lr: 0.5,
            });
            cfg.correction = Some(LowRankConfig { rank, ..base });
        }
        if self.timing {
            cfg.timing = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
