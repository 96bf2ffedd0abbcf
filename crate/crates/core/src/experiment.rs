//! Experiment descriptions, batch execution and the statistics behind the
//! convergence plots: aggregate curves, least-squares slopes, error-window
//! smoothing, CSV text and gnuplot scripts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{make_hard_mdp, make_inventory_mdp, HardMdpParams, InventoryParams};
use crate::error::{Error, Result};
use crate::mdp::MdpModel;
use crate::oracle::{solve_q_star, QTable};
use crate::qlearning::{run_trajectories, RunParams, StepsizeSchedule, TrajectoryRecord};

/// Ground-truth tolerance used when none is configured.
pub const DEFAULT_ORACLE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvironmentSpec {
    Hard(HardMdpParams),
    Inventory(InventoryParams),
    File { path: PathBuf },
}

impl EnvironmentSpec {
    pub fn build(&self) -> Result<MdpModel> {
        match self {
            Self::Hard(p) => make_hard_mdp(p),
            Self::Inventory(p) => make_inventory_mdp(p),
            Self::File { path } => MdpModel::load(path),
        }
    }

    /// Model under discount `gamma`. Builtins are rebuilt so that parameters
    /// derived from the discount (the hard instance's `p`) follow it.
    pub fn build_with_gamma(&self, gamma: f64) -> Result<MdpModel> {
        match self {
            Self::Hard(p) => make_hard_mdp(&HardMdpParams { gamma, ..*p }),
            Self::Inventory(p) => make_inventory_mdp(&InventoryParams { gamma, ..p.clone() }),
            Self::File { path } => MdpModel::load(path)?.with_gamma(gamma),
        }
    }
}

fn default_delta() -> f64 {
    0.1
}
fn default_g() -> f64 {
    0.625
}
fn default_schedule() -> StepsizeSchedule {
    StepsizeSchedule::default_rescaled_linear()
}
fn default_trajectories() -> usize {
    200
}
fn default_iterations() -> usize {
    5000
}
fn default_oracle_tol() -> f64 {
    DEFAULT_ORACLE_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub environment: EnvironmentSpec,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_g")]
    pub g: f64,
    #[serde(default = "default_schedule")]
    pub schedule: StepsizeSchedule,
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub gamma_sweep: Option<Vec<f64>>,
    #[serde(default)]
    pub delta_sweep: Option<Vec<f64>>,
    #[serde(default)]
    pub g_list: Option<Vec<f64>>,
    /// Iterations at which the gamma regression is evaluated.
    #[serde(default)]
    pub checkpoints: Option<Vec<usize>>,
    #[serde(default = "default_oracle_tol")]
    pub oracle_tol: f64,
}

impl ExperimentConfig {
    pub fn new(environment: EnvironmentSpec) -> Self {
        Self {
            environment,
            delta: default_delta(),
            g: default_g(),
            schedule: default_schedule(),
            trajectories: default_trajectories(),
            iterations: default_iterations(),
            seed: 0,
            output_dir: None,
            gamma_sweep: None,
            delta_sweep: None,
            g_list: None,
            checkpoints: None,
            oracle_tol: default_oracle_tol(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn run_params(&self) -> RunParams {
        RunParams { delta: self.delta, g: self.g, schedule: self.schedule, iterations: self.iterations }
    }

    pub fn validate(&self) -> Result<()> {
        self.run_params().validate()?;
        if self.trajectories == 0 {
            return Err(Error::InvalidArgument("trajectory count must be at least 1".into()));
        }
        if !(self.oracle_tol > 0.0) {
            return Err(Error::InvalidArgument(format!("oracle tolerance {} must be positive", self.oracle_tol)));
        }
        if let EnvironmentSpec::File { path } = &self.environment {
            if !path.is_file() {
                return Err(Error::InvalidArgument(format!("model file {} does not exist", path.display())));
            }
        }
        if let Some(gs) = &self.gamma_sweep {
            if let Some(g) = gs.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
                return Err(Error::InvalidArgument(format!("sweep discount {g} outside (0, 1)")));
            }
        }
        if let Some(ds) = &self.delta_sweep {
            if let Some(d) = ds.iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
                return Err(Error::InvalidArgument(format!("sweep radius {d} must be >= 0")));
            }
        }
        if let Some(cs) = &self.checkpoints {
            if let Some(c) = cs.iter().find(|c| **c == 0 || **c > self.iterations) {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint {c} outside 1..={}",
                    self.iterations
                )));
            }
        }
        Ok(())
    }
}

/// Ground truth plus the trajectories of one configuration.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub model: MdpModel,
    pub q_star: QTable,
    pub records: Vec<TrajectoryRecord>,
}

/// Builds the model, solves for `Q*` and runs every trajectory.
pub fn run_batch(config: &ExperimentConfig) -> Result<BatchResult> {
    config.validate()?;
    let model = config.environment.build()?;
    let (q_star, _) = solve_q_star(&model, config.delta, config.oracle_tol)?;
    let records = run_batch_with_oracle(&model, config, &q_star)?;
    Ok(BatchResult { model, q_star, records })
}

pub fn run_batch_with_oracle(model: &MdpModel, config: &ExperimentConfig, q_star: &QTable) -> Result<Vec<TrajectoryRecord>> {
    config.validate()?;
    run_trajectories(model, &config.run_params(), config.trajectories, config.seed, Some(q_star))
}

/// Per-iteration statistics across trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateCurve {
    pub mean_error: Vec<f64>,
    pub stderr: Vec<f64>,
    pub mean_cum_draws: Vec<f64>,
}

impl AggregateCurve {
    pub fn len(&self) -> usize {
        self.mean_error.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_error.is_empty()
    }

    /// Least-squares slope of `lg(mean error)` against `lg(k)` over
    /// `k in [from, to]`.
    pub fn loglog_fit(&self, from: usize, to: usize) -> Result<LinearFit> {
        check_window(from.max(1), to, self.len())?;
        let (xs, ys): (Vec<f64>, Vec<f64>) = (from.max(1)..=to)
            .map(|k| ((k as f64).log10(), self.mean_error[k].log10()))
            .unzip();
        least_squares(&xs, &ys)
    }

    /// Least-squares slope of `lg(mean error)` against `k` over `[from, to]`.
    pub fn semilog_fit(&self, from: usize, to: usize) -> Result<LinearFit> {
        check_window(from, to, self.len())?;
        let (xs, ys): (Vec<f64>, Vec<f64>) =
            (from..=to).map(|k| (k as f64, self.mean_error[k].log10())).unzip();
        least_squares(&xs, &ys)
    }
}

fn check_window(from: usize, to: usize, len: usize) -> Result<()> {
    if from >= to || to >= len {
        return Err(Error::InvalidArgument(format!("window [{from}, {to}] invalid for curve of length {len}")));
    }
    Ok(())
}

/// Mean error, its standard error and mean cumulative draws at every
/// iteration. Needs at least two trajectories that all recorded errors.
pub fn aggregate(records: &[TrajectoryRecord]) -> Result<AggregateCurve> {
    if records.len() < 2 {
        return Err(Error::InvalidArgument("aggregation needs at least two trajectories".into()));
    }
    let errors: Vec<&Vec<f64>> = records
        .iter()
        .map(|r| r.errors.as_ref().ok_or_else(|| Error::InvalidArgument("trajectory without errors".into())))
        .collect::<Result<_>>()?;
    let len = errors[0].len();
    if errors.iter().any(|e| e.len() != len) || records.iter().any(|r| r.cum_draws.len() != len) {
        return Err(Error::InvalidArgument("trajectories have different lengths".into()));
    }
    let n = records.len() as f64;
    let mut curve = AggregateCurve {
        mean_error: Vec::with_capacity(len),
        stderr: Vec::with_capacity(len),
        mean_cum_draws: Vec::with_capacity(len),
    };
    for k in 0..len {
        let mean = errors.iter().map(|e| e[k]).sum::<f64>() / n;
        let var = errors.iter().map(|e| (e[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        curve.mean_error.push(mean);
        curve.stderr.push((var / n).sqrt());
        curve.mean_cum_draws.push(records.iter().map(|r| r.cum_draws[k] as f64).sum::<f64>() / n);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = slope x + intercept`.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("regression needs two or more paired points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("degenerate regression: all abscissae equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit { slope, intercept, r_squared })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaRegressionRow {
    pub checkpoint: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Regresses `lg(mean error at checkpoint)` on `lg(1 - gamma)`, one row per
/// checkpoint. `curves[j]` belongs to `gammas[j]`.
pub fn gamma_regression(gammas: &[f64], curves: &[AggregateCurve], checkpoints: &[usize]) -> Result<Vec<GammaRegressionRow>> {
    if gammas.len() < 4 {
        return Err(Error::InvalidArgument(format!("gamma sweep needs at least 4 values, got {}", gammas.len())));
    }
    if gammas.len() != curves.len() {
        return Err(Error::InvalidArgument("one curve per discount required".into()));
    }
    let xs: Vec<f64> = gammas.iter().map(|g| (1.0 - g).log10()).collect();
    checkpoints
        .iter()
        .map(|&k| {
            let ys = curves
                .iter()
                .map(|c| {
                    c.mean_error
                        .get(k)
                        .map(|e| e.log10())
                        .ok_or_else(|| Error::InvalidArgument(format!("checkpoint {k} beyond curve")))
                })
                .collect::<Result<Vec<_>>>()?;
            let fit = least_squares(&xs, &ys)?;
            Ok(GammaRegressionRow { checkpoint: k, slope: fit.slope, intercept: fit.intercept, r_squared: fit.r_squared })
        })
        .collect()
}

/// Error-window smoothing of an `(error, samples)` scatter: each point's
/// sample count is replaced by the mean count over points whose error lies in
/// `[error, error + window]`. Output is sorted by error.
pub fn smooth_by_error(points: &[(f64, f64)], window: f64) -> Vec<(f64, f64)> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut prefix = Vec::with_capacity(sorted.len() + 1);
    prefix.push(0.0);
    for (_, n) in &sorted {
        prefix.push(prefix.last().unwrap() + n);
    }
    let mut hi = 0;
    sorted
        .iter()
        .enumerate()
        .map(|(i, (e, _))| {
            hi = hi.max(i);
            while hi + 1 < sorted.len() && sorted[hi + 1].0 - e <= window {
                hi += 1;
            }
            // Equal errors before i also fall in the window.
            let lo = sorted[..i].partition_point(|p| p.0 < *e);
            (*e, (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64)
        })
        .collect()
}

/// Moving average over a centered window of `2 * half + 1` points, truncated
/// at the ends.
pub fn moving_average(xs: &[f64], half: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(xs.len() - 1);
            xs[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Linear interpolation of `y` at `x` on a curve with nondecreasing `xs`.
/// `None` outside the curve's range.
pub fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> Option<f64> {
    if xs.is_empty() || x < xs[0] || x > *xs.last()? {
        return None;
    }
    let j = xs.partition_point(|v| *v < x);
    if j == 0 || xs[j] == x {
        return Some(ys[j]);
    }
    let (x0, x1, y0, y1) = (xs[j - 1], xs[j], ys[j - 1], ys[j]);
    Some(y0 + (y1 - y0) * (x - x0) / (x1 - x0))
}

pub const TRAJECTORY_HEADER: &str = "iteration,error,cumulative_draws";
pub const AGGREGATE_HEADER: &str = "iteration,mean_error,stderr,mean_cum_draws";
pub const GAMMA_SWEEP_HEADER: &str = "checkpoint,slope,intercept,r_squared";

pub fn trajectory_csv(record: &TrajectoryRecord) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for (k, draws) in record.cum_draws.iter().enumerate() {
        let err = record.errors.as_ref().map_or(f64::NAN, |e| e[k]);
        writeln!(out, "{k},{err},{draws}").unwrap();
    }
    out
}

pub fn aggregate_csv(curve: &AggregateCurve) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for k in 0..curve.len() {
        writeln!(out, "{k},{},{},{}", curve.mean_error[k], curve.stderr[k], curve.mean_cum_draws[k]).unwrap();
    }
    out
}

pub fn gamma_regression_csv(rows: &[GammaRegressionRow]) -> String {
    let mut out = String::from(GAMMA_SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{},{},{},{}", r.checkpoint, r.slope, r.intercept, r.r_squared).unwrap();
    }
    out
}

/// Gnuplot script for `lg(mean error)` against `lg(k)` with a `-1/2`
/// reference line anchored at the first curve's value at `k = 1`. `series`
/// pairs a legend label with an aggregate CSV path relative to the script.
pub fn loglog_plot_script(series: &[(String, String)], anchor: f64, output_png: &str) -> String {
    let mut s = String::new();
    writeln!(s, "set terminal pngcairo size 900,600").unwrap();
    writeln!(s, "set output '{output_png}'").unwrap();
    writeln!(s, "set datafile separator ','").unwrap();
    writeln!(s, "set logscale xy 10").unwrap();
    writeln!(s, "set xlabel 'iteration k'").unwrap();
    writeln!(s, "set ylabel 'mean sup-norm error'").unwrap();
    writeln!(s, "set key top right").unwrap();
    writeln!(s, "ref(x) = {anchor} * x**(-0.5)").unwrap();
    let mut parts: Vec<String> = series
        .iter()
        .map(|(label, file)| format!("'{file}' every ::2 using 1:2 with lines title '{label}'"))
        .collect();
    parts.push("ref(x) with lines dashtype 2 title 'slope -1/2'".into());
    writeln!(s, "plot {}", parts.join(", \\\n     ")).unwrap();
    s
}

/// Gnuplot script for `lg(mean error)` against linear `k`.
pub fn semilog_plot_script(series: &[(String, String)], output_png: &str) -> String {
    let mut s = String::new();
    writeln!(s, "set terminal pngcairo size 900,600").unwrap();
    writeln!(s, "set output '{output_png}'").unwrap();
    writeln!(s, "set datafile separator ','").unwrap();
    writeln!(s, "set logscale y 10").unwrap();
    writeln!(s, "set xlabel 'iteration k'").unwrap();
    writeln!(s, "set ylabel 'mean sup-norm error'").unwrap();
    let parts: Vec<String> = series
        .iter()
        .map(|(label, file)| format!("'{file}' every ::1 using 1:2 with lines title '{label}'"))
        .collect();
    writeln!(s, "plot {}", parts.join(", \\\n     ")).unwrap();
    s
}

/// Gnuplot script for mean error against mean cumulative samples, both on
/// log scales.
pub fn samples_plot_script(series: &[(String, String)], output_png: &str) -> String {
    let mut s = String::new();
    writeln!(s, "set terminal pngcairo size 900,600").unwrap();
    writeln!(s, "set output '{output_png}'").unwrap();
    writeln!(s, "set datafile separator ','").unwrap();
    writeln!(s, "set logscale xy 10").unwrap();
    writeln!(s, "set xlabel 'mean cumulative samples'").unwrap();
    writeln!(s, "set ylabel 'mean sup-norm error'").unwrap();
    let parts: Vec<String> = series
        .iter()
        .map(|(label, file)| format!("'{file}' every ::2 using 4:2 with lines title '{label}'"))
        .collect();
    writeln!(s, "plot {}", parts.join(", \\\n     ")).unwrap();
    s
}
