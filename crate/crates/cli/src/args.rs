use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use drq_core::{EnvironmentSpec, ExperimentConfig, HardMdpParams, InventoryParams, MdpModel, StepsizeSchedule};

use crate::error::{io_err, CliError, CliResult};

pub const OUTPUT_DIR_ENV: &str = "DRQ_OUTPUT_DIR";
pub const FALLBACK_OUTPUT_DIR: &str = "drq-out";

#[derive(Debug, Parser)]
#[command(name = "drq", version, about = "Distributionally robust Q-learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the robust optimal Q-table of a model.
    Qstar(QstarArgs),
    /// Run a batch of trajectories and write error curves.
    Run(ExperimentArgs),
    /// Regress the error against 1 - gamma at fixed iterations.
    GammaSweep(ExperimentArgs),
    /// Repeat a run for each radius in the sweep list.
    DeltaSweep(ExperimentArgs),
    /// Compare geometric parameters at equal sample budgets.
    CompareG(ExperimentArgs),
    /// Check a model file and report its basic statistics.
    ValidateModel(ValidateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EnvKind {
    Hard,
    Inventory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleKind {
    Constant,
    RescaledLinear,
}

/// Every flag mirrors a key of the JSON config and overrides it.
#[derive(Debug, Clone, Default, Args)]
#[command(allow_negative_numbers = true)]
pub struct ExperimentArgs {
    /// JSON experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Builtin environment.
    #[arg(long, value_enum, conflicts_with = "model")]
    pub env: Option<EnvKind>,
    /// Model JSON file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Discount factor.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// KL radius.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Geometric level parameter.
    #[arg(long)]
    pub g: Option<f64>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleKind>,
    /// Constant stepsize.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Numerator of the rescaled-linear schedule.
    #[arg(long)]
    pub a: Option<f64>,
    /// Offset of the rescaled-linear schedule.
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long)]
    pub trajectories: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; falls back to $DRQ_OUTPUT_DIR, then ./drq-out.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Comma-separated discounts for sweeps.
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    /// Comma-separated radii for the delta sweep.
    #[arg(long, value_delimiter = ',')]
    pub deltas: Option<Vec<f64>>,
    /// Comma-separated geometric parameters for compare-g.
    #[arg(long, value_delimiter = ',')]
    pub g_list: Option<Vec<f64>>,
    /// Comma-separated iteration checkpoints for the gamma regression.
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Option<Vec<usize>>,
    /// Tolerance of the ground-truth fixed-point solve.
    #[arg(long)]
    pub oracle_tol: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct QstarArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Q-table output path; defaults to <output-dir>/qstar.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    /// Model JSON file.
    pub model: PathBuf,
    /// Radius at which to report the small-radius condition.
    #[arg(long)]
    pub delta: Option<f64>,
}

/// Fully resolved experiment settings.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub output_dir: PathBuf,
}

fn same_kind(spec: &EnvironmentSpec, kind: EnvKind) -> bool {
    matches!(
        (spec, kind),
        (EnvironmentSpec::Hard(_), EnvKind::Hard) | (EnvironmentSpec::Inventory(_), EnvKind::Inventory)
    )
}

impl ExperimentArgs {
    pub fn resolve(&self) -> CliResult<Resolved> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(io_err(path))?;
                ExperimentConfig::from_json(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => ExperimentConfig::new(EnvironmentSpec::Hard(HardMdpParams::new(0.7))),
        };

        if let Some(path) = &self.model {
            cfg.environment = EnvironmentSpec::File { path: path.clone() };
        } else if let Some(kind) = self.env {
            if !same_kind(&cfg.environment, kind) {
                cfg.environment = match kind {
                    EnvKind::Hard => EnvironmentSpec::Hard(HardMdpParams::new(0.7)),
                    EnvKind::Inventory => EnvironmentSpec::Inventory(InventoryParams::default()),
                };
            }
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if let Some(v) = self.g {
            cfg.g = v;
        }
        cfg.schedule = self.schedule_override(cfg.schedule)?;
        if let Some(v) = self.trajectories {
            cfg.trajectories = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.gammas {
            cfg.gamma_sweep = Some(v.clone());
        }
        if let Some(v) = &self.deltas {
            cfg.delta_sweep = Some(v.clone());
        }
        if let Some(v) = &self.g_list {
            cfg.g_list = Some(v.clone());
        }
        if let Some(v) = &self.checkpoints {
            cfg.checkpoints = Some(v.clone());
        }
        if let Some(v) = self.oracle_tol {
            cfg.oracle_tol = v;
        }

        let output_dir = self
            .output_dir
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(FALLBACK_OUTPUT_DIR));
        cfg.output_dir = Some(output_dir.clone());

        if let Some(gamma) = self.gamma {
            apply_gamma(&mut cfg, gamma, &output_dir)?;
        }
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Resolved { config: cfg, output_dir })
    }

    fn schedule_override(&self, current: StepsizeSchedule) -> CliResult<StepsizeSchedule> {
        let kind = self.schedule.or(if self.alpha.is_some() {
            Some(ScheduleKind::Constant)
        } else if self.a.is_some() || self.b.is_some() {
            Some(ScheduleKind::RescaledLinear)
        } else {
            None
        });
        let schedule = match (kind, current) {
            (None, s) => return Ok(s),
            (Some(ScheduleKind::Constant), StepsizeSchedule::Constant { alpha }) => {
                StepsizeSchedule::Constant { alpha: self.alpha.unwrap_or(alpha) }
            }
            (Some(ScheduleKind::Constant), _) => StepsizeSchedule::Constant { alpha: self.alpha.unwrap_or(0.008) },
            (Some(ScheduleKind::RescaledLinear), StepsizeSchedule::RescaledLinear { a, b }) => {
                StepsizeSchedule::RescaledLinear { a: self.a.unwrap_or(a), b: self.b.unwrap_or(b) }
            }
            (Some(ScheduleKind::RescaledLinear), _) => {
                StepsizeSchedule::RescaledLinear { a: self.a.unwrap_or(1.0), b: self.b.unwrap_or(1.0) }
            }
        };
        schedule.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(schedule)
    }
}

/// Builtins take the discount as a parameter; a model file is rewritten with
/// the new discount into the output directory.
fn apply_gamma(cfg: &mut ExperimentConfig, gamma: f64, output_dir: &Path) -> CliResult<()> {
    match &mut cfg.environment {
        EnvironmentSpec::Hard(p) => p.gamma = gamma,
        EnvironmentSpec::Inventory(p) => p.gamma = gamma,
        EnvironmentSpec::File { path } => {
            let model = MdpModel::load(&*path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
                .with_gamma(gamma)
                .map_err(|e| CliError::Config(e.to_string()))?;
            std::fs::create_dir_all(output_dir).map_err(io_err(output_dir))?;
            let target = output_dir.join("model.json");
            std::fs::write(&target, model.to_json()).map_err(io_err(&target))?;
            *path = target;
        }
    }
    Ok(())
}
