use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use drq_core::experiment::{
    aggregate_csv, gamma_regression, gamma_regression_csv, loglog_plot_script, run_batch_with_oracle,
    samples_plot_script, smooth_by_error, trajectory_csv,
};
use drq_core::mdp::{SmallRadiusReport, MdpModel};
use drq_core::oracle::{FixedPointReport, QTableFile};
use drq_core::qlearning::median_of_histogram;
use drq_core::{
    aggregate, check_small_radius, greedy_policy, min_support_probability, solve_q_star, AggregateCurve,
    ExperimentConfig, QTable, TrajectoryRecord,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::{ExperimentArgs, QstarArgs, Resolved, ValidateArgs};
use crate::error::{io_err, CliError, CliResult};

/// Smoothing window on `lg(error)` for the error-versus-samples scatter.
pub const SMOOTHING_WINDOW: f64 = 1e-4;
pub const DEFAULT_CHECKPOINTS: [usize; 3] = [500, 1000, 1500];
pub const DEFAULT_DELTA_SWEEP: [f64; 3] = [0.01, 0.05, 0.1];
pub const DEFAULT_G_LIST: [f64; 2] = [0.625, 0.499];
pub const COMPARISON_HEADER: &str = "g,iteration,mean_cum_draws,mean_error,stderr";
pub const SMOOTHED_HEADER: &str = "g,lg_error,smoothed_samples";
pub const HEAVY_TAIL_HEADER: &str = "g,calls,mean_call_draws,median_call_draws,max_call_draws,max_over_median";
pub const DELTA_SWEEP_HEADER: &str = "delta,final_mean_error,final_stderr";
const CACHE_DIR: &str = ".qstar-cache";

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(drq_core::Error::from)?;
    text.push('\n');
    write_file(path, &text)
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    q_star: QTableFile,
    report: FixedPointReport,
}

fn cache_key(model: &MdpModel, delta: f64, tol: f64) -> String {
    let mut h = Sha256::new();
    h.update(model.to_json().as_bytes());
    h.update(delta.to_bits().to_le_bytes());
    h.update(tol.to_bits().to_le_bytes());
    hex::encode(h.finalize())
}

/// `Q*` for `(model, delta, tol)`, read from or stored into the on-disk cache
/// under `root`.
pub fn cached_q_star(model: &MdpModel, delta: f64, tol: f64, root: &Path) -> CliResult<(QTable, FixedPointReport)> {
    let path = root.join(CACHE_DIR).join(format!("{}.json", cache_key(model, delta, tol)));
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(entry) = serde_json::from_str::<CacheEntry>(&text) {
            if let Ok(q) = QTable::from_file(model, &entry.q_star) {
                return Ok((q, entry.report));
            }
        }
    }
    let (q, report) = solve_q_star(model, delta, tol)?;
    write_json(&path, &CacheEntry { q_star: q.to_file(), report: report.clone() })?;
    Ok((q, report))
}

fn build_model(cfg: &ExperimentConfig) -> CliResult<MdpModel> {
    cfg.environment.build().map_err(|e| match e {
        drq_core::Error::Io(source) => CliError::Io { path: PathBuf::from("model file"), source },
        other => CliError::Config(other.to_string()),
    })
}

fn write_config(r: &Resolved) -> CliResult<()> {
    write_json(&r.output_dir.join("config.json"), &r.config)
}

#[derive(Serialize)]
struct QstarReport {
    gamma: f64,
    delta: f64,
    tol: f64,
    iterations: usize,
    residual: f64,
    max_contraction_ratio: f64,
    sup_norm: f64,
    r_max: f64,
    norm_bound: f64,
    norm_bound_holds: bool,
    greedy_policy: Vec<usize>,
    p_min: f64,
    small_radius_condition: Option<SmallRadiusReport>,
}

pub fn qstar(args: &QstarArgs) -> CliResult<()> {
    let r = args.experiment.resolve()?;
    let cfg = &r.config;
    let model = build_model(cfg)?;
    let (q, fp) = cached_q_star(&model, cfg.delta, cfg.oracle_tol, &r.output_dir)?;
    let out = args.out.clone().unwrap_or_else(|| r.output_dir.join("qstar.json"));
    write_json(&out, &q.to_file())?;

    let norm_bound = model.r_max() / (1.0 - model.gamma());
    let report = QstarReport {
        gamma: model.gamma(),
        delta: cfg.delta,
        tol: cfg.oracle_tol,
        iterations: fp.iterations,
        residual: fp.residual,
        max_contraction_ratio: fp.contraction.iter().cloned().fold(0.0, f64::max),
        sup_norm: q.sup_norm(),
        r_max: model.r_max(),
        norm_bound,
        norm_bound_holds: q.sup_norm() <= norm_bound + 1e-9,
        greedy_policy: greedy_policy(&q),
        p_min: min_support_probability(&model),
        small_radius_condition: if cfg.delta > 0.0 { Some(check_small_radius(&model, cfg.delta)?) } else { None },
    };
    let report_path = out.with_file_name(format!(
        "{}_report.json",
        out.file_stem().map_or("qstar".into(), |s| s.to_string_lossy())
    ));
    write_json(&report_path, &report)?;

    println!("Q* written to {}", out.display());
    println!(
        "sweeps {}, residual {:.3e}, ||Q*|| = {:.6} <= r_max/(1-gamma) = {:.6}: {}",
        report.iterations, report.residual, report.sup_norm, norm_bound, report.norm_bound_holds
    );
    if let Some(a) = &report.small_radius_condition {
        if !a.holds {
            eprintln!("warning: radius {} exceeds the small-radius condition for p_min = {}", a.delta, a.p_min);
        }
    }
    if !report.norm_bound_holds {
        return Err(CliError::Numeric(format!("||Q*|| = {} exceeds {}", report.sup_norm, norm_bound)));
    }
    Ok(())
}

/// Results of one configuration written into `dir`.
struct RunOutput {
    records: Vec<TrajectoryRecord>,
    curve: Option<AggregateCurve>,
    /// Error curve file relative to `dir`.
    error_file: String,
}

fn run_into(model: &MdpModel, cfg: &ExperimentConfig, cache_root: &Path, dir: &Path) -> CliResult<RunOutput> {
    let (q_star, _) = cached_q_star(model, cfg.delta, cfg.oracle_tol, cache_root)?;
    let records = run_batch_with_oracle(model, cfg, &q_star)?;
    let width = records.len().saturating_sub(1).to_string().len().max(4);
    for (i, rec) in records.iter().enumerate() {
        write_file(&dir.join("trajectories").join(format!("trajectory_{i:0width$}.csv")), &trajectory_csv(rec))?;
    }
    let (curve, error_file) = if records.len() >= 2 {
        let curve = aggregate(&records)?;
        write_file(&dir.join("aggregate.csv"), &aggregate_csv(&curve))?;
        (Some(curve), "aggregate.csv".to_string())
    } else {
        (None, format!("trajectories/trajectory_{:0width$}.csv", 0))
    };
    Ok(RunOutput { records, curve, error_file })
}

fn first_error(out: &RunOutput) -> f64 {
    match &out.curve {
        Some(c) => c.mean_error.get(1).copied().unwrap_or(1.0),
        None => out.records[0].errors.as_ref().and_then(|e| e.get(1).copied()).unwrap_or(1.0),
    }
}

#[derive(Serialize)]
struct RunSummary {
    label: String,
    trajectories: usize,
    iterations: usize,
    final_mean_error: f64,
    final_stderr: Option<f64>,
    mean_total_draws: f64,
    loglog_slope_last_90_percent: Option<f64>,
}

fn summarize(label: String, out: &RunOutput) -> RunSummary {
    let rec = &out.records;
    let iterations = rec[0].iterations();
    let final_errors: Vec<f64> = rec.iter().filter_map(|r| r.errors.as_ref().map(|e| e[iterations])).collect();
    let slope = out
        .curve
        .as_ref()
        .filter(|_| iterations >= 20)
        .and_then(|c| c.loglog_fit((iterations / 10).max(1), iterations).ok())
        .map(|f| f.slope);
    RunSummary {
        label,
        trajectories: rec.len(),
        iterations,
        final_mean_error: final_errors.iter().sum::<f64>() / final_errors.len() as f64,
        final_stderr: out.curve.as_ref().map(|c| c.stderr[iterations]),
        mean_total_draws: rec.iter().map(|r| r.cum_draws[iterations] as f64).sum::<f64>() / rec.len() as f64,
        loglog_slope_last_90_percent: slope,
    }
}

fn print_summary(s: &RunSummary) {
    let se = s.final_stderr.map_or(String::new(), |se| format!(" ± {se:.5}"));
    println!(
        "{}: final mean error {:.5}{se}, mean draws {:.0}{}",
        s.label,
        s.final_mean_error,
        s.mean_total_draws,
        s.loglog_slope_last_90_percent.map_or(String::new(), |v| format!(", lg-lg slope {v:.3}"))
    );
}

fn subdir_name(prefix: &str, i: usize) -> String {
    format!("{prefix}_{i:02}")
}

pub fn run(args: &ExperimentArgs) -> CliResult<()> {
    let r = args.resolve()?;
    write_config(&r)?;
    let cfg = &r.config;
    let Some(gammas) = cfg.gamma_sweep.clone() else {
        let model = build_model(cfg)?;
        let out = run_into(&model, cfg, &r.output_dir, &r.output_dir)?;
        let summary = summarize("run".into(), &out);
        print_summary(&summary);
        write_json(&r.output_dir.join("summary.json"), &summary)?;
        let series = vec![(format!("delta = {}", cfg.delta), out.error_file.clone())];
        write_file(&r.output_dir.join("loglog.gp"), &loglog_plot_script(&series, first_error(&out), "loglog.png"))?;
        return Ok(());
    };

    let mut series = Vec::new();
    let mut summaries = Vec::new();
    let mut anchor = None;
    for (i, gamma) in gammas.iter().enumerate() {
        let model = cfg.environment.build_with_gamma(*gamma).map_err(|e| CliError::Config(e.to_string()))?;
        let name = subdir_name("gamma", i);
        let out = run_into(&model, cfg, &r.output_dir, &r.output_dir.join(&name))?;
        anchor.get_or_insert(first_error(&out));
        let summary = summarize(format!("gamma = {gamma}"), &out);
        print_summary(&summary);
        summaries.push(summary);
        series.push((format!("gamma = {gamma}"), format!("{name}/{}", out.error_file)));
    }
    write_json(&r.output_dir.join("summary.json"), &summaries)?;
    write_file(&r.output_dir.join("loglog.gp"), &loglog_plot_script(&series, anchor.unwrap_or(1.0), "loglog.png"))
}

fn require_aggregate(cfg: &ExperimentConfig, command: &str) -> CliResult<()> {
    if cfg.trajectories < 2 {
        return Err(CliError::Config(format!("{command} aggregates curves and needs at least 2 trajectories")));
    }
    Ok(())
}

pub fn gamma_sweep(args: &ExperimentArgs) -> CliResult<()> {
    let r = args.resolve()?;
    let cfg = &r.config;
    require_aggregate(cfg, "gamma-sweep")?;
    let gammas = cfg
        .gamma_sweep
        .clone()
        .ok_or_else(|| CliError::Config("gamma-sweep needs a gamma list (--gammas or gamma_sweep)".into()))?;
    if gammas.len() < 4 {
        return Err(CliError::Config(format!("gamma-sweep needs at least 4 discounts, got {}", gammas.len())));
    }
    let checkpoints = match &cfg.checkpoints {
        Some(c) => c.clone(),
        None => {
            let c: Vec<usize> = DEFAULT_CHECKPOINTS.iter().copied().filter(|k| *k <= cfg.iterations).collect();
            if c.is_empty() {
                vec![cfg.iterations]
            } else {
                c
            }
        }
    };
    write_config(&r)?;

    let mut curves = Vec::new();
    for (i, gamma) in gammas.iter().enumerate() {
        let model = cfg.environment.build_with_gamma(*gamma).map_err(|e| CliError::Config(e.to_string()))?;
        let out = run_into(&model, cfg, &r.output_dir, &r.output_dir.join(subdir_name("gamma", i)))?;
        print_summary(&summarize(format!("gamma = {gamma}"), &out));
        curves.push(out.curve.expect("at least two trajectories"));
    }
    let rows = gamma_regression(&gammas, &curves, &checkpoints).map_err(|e| match e {
        drq_core::Error::InvalidArgument(m) => CliError::Numeric(format!("degenerate regression: {m}")),
        other => other.into(),
    })?;
    write_file(&r.output_dir.join("gamma_sweep.csv"), &gamma_regression_csv(&rows))?;

    let mut points = String::from("checkpoint,gamma,lg_one_minus_gamma,lg_mean_error\n");
    for k in &checkpoints {
        for (gamma, c) in gammas.iter().zip(&curves) {
            writeln!(points, "{k},{gamma},{},{}", (1.0 - gamma).log10(), c.mean_error[*k].log10()).unwrap();
        }
    }
    write_file(&r.output_dir.join("gamma_points.csv"), &points)?;
    write_file(&r.output_dir.join("gamma_sweep.gp"), &gamma_plot_script(&rows))?;
    for row in &rows {
        println!("k = {}: slope {:.4}, intercept {:.4}, R^2 {:.4}", row.checkpoint, row.slope, row.intercept, row.r_squared);
    }
    Ok(())
}

fn gamma_plot_script(rows: &[drq_core::experiment::GammaRegressionRow]) -> String {
    let mut s = String::new();
    writeln!(s, "set terminal pngcairo size 900,600").unwrap();
    writeln!(s, "set output 'gamma_sweep.png'").unwrap();
    writeln!(s, "set datafile separator ','").unwrap();
    writeln!(s, "set xlabel 'lg(1 - gamma)'").unwrap();
    writeln!(s, "set ylabel 'lg(mean error)'").unwrap();
    let mut parts = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        writeln!(s, "f{i}(x) = {} * x + {}", row.slope, row.intercept).unwrap();
        parts.push(format!(
            "'gamma_points.csv' every ::1 using 3:($1 == {} ? $4 : 1/0) with points title 'k = {}'",
            row.checkpoint, row.checkpoint
        ));
        parts.push(format!("f{i}(x) with lines title 'slope {:.3}'", row.slope));
    }
    writeln!(s, "plot {}", parts.join(", \\\n     ")).unwrap();
    s
}

pub fn delta_sweep(args: &ExperimentArgs) -> CliResult<()> {
    let r = args.resolve()?;
    let cfg = &r.config;
    require_aggregate(cfg, "delta-sweep")?;
    let deltas = cfg.delta_sweep.clone().unwrap_or_else(|| DEFAULT_DELTA_SWEEP.to_vec());
    write_config(&r)?;
    let model = build_model(cfg)?;

    let mut table = format!("{DELTA_SWEEP_HEADER}\n");
    let mut series = Vec::new();
    let mut anchor = None;
    for (i, delta) in deltas.iter().enumerate() {
        let sub = ExperimentConfig { delta: *delta, ..cfg.clone() };
        sub.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let name = subdir_name("delta", i);
        let out = run_into(&model, &sub, &r.output_dir, &r.output_dir.join(&name))?;
        let c = out.curve.as_ref().expect("at least two trajectories");
        let k = cfg.iterations;
        writeln!(table, "{delta},{},{}", c.mean_error[k], c.stderr[k]).unwrap();
        anchor.get_or_insert(first_error(&out));
        print_summary(&summarize(format!("delta = {delta}"), &out));
        series.push((format!("delta = {delta}"), format!("{name}/aggregate.csv")));
    }
    write_file(&r.output_dir.join("delta_sweep.csv"), &table)?;
    write_file(&r.output_dir.join("loglog.gp"), &loglog_plot_script(&series, anchor.unwrap_or(1.0), "loglog.png"))
}

/// `(lg error, cumulative draws)` for every trajectory and iteration `k >= 1`
/// with a positive error.
fn error_sample_points(records: &[TrajectoryRecord]) -> Vec<(f64, f64)> {
    records
        .iter()
        .flat_map(|r| {
            let errors = r.errors.as_deref().unwrap_or(&[]);
            errors.iter().zip(&r.cum_draws).skip(1).filter(|(e, _)| **e > 0.0).map(|(e, d)| (e.log10(), *d as f64))
        })
        .collect()
}

pub fn compare_g(args: &ExperimentArgs) -> CliResult<()> {
    let r = args.resolve()?;
    let cfg = &r.config;
    require_aggregate(cfg, "compare-g")?;
    let gs = cfg.g_list.clone().unwrap_or_else(|| DEFAULT_G_LIST.to_vec());
    if let Some(g) = gs.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
        return Err(CliError::Config(format!("geometric parameter {g} outside (0, 1)")));
    }
    write_config(&r)?;
    let model = build_model(cfg)?;

    let mut comparison = format!("{COMPARISON_HEADER}\n");
    let mut smoothed = format!("{SMOOTHED_HEADER}\n");
    let mut heavy = format!("{HEAVY_TAIL_HEADER}\n");
    let mut series = Vec::new();
    for (i, g) in gs.iter().enumerate() {
        let sub = ExperimentConfig { g: *g, ..cfg.clone() };
        sub.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let name = subdir_name("g", i);
        let out = run_into(&model, &sub, &r.output_dir, &r.output_dir.join(&name))?;
        let c = out.curve.as_ref().expect("at least two trajectories");
        for k in 0..c.len() {
            writeln!(comparison, "{g},{k},{},{},{}", c.mean_cum_draws[k], c.mean_error[k], c.stderr[k]).unwrap();
        }
        for (lg_e, n) in smooth_by_error(&error_sample_points(&out.records), SMOOTHING_WINDOW) {
            writeln!(smoothed, "{g},{lg_e},{n}").unwrap();
        }

        let mut hist = std::collections::BTreeMap::new();
        for rec in &out.records {
            for (d, n) in &rec.call_draws {
                *hist.entry(*d).or_insert(0u64) += n;
            }
        }
        let calls: u64 = hist.values().sum();
        let total: f64 = hist.iter().map(|(d, n)| *d as f64 * *n as f64).sum();
        let median = median_of_histogram(&hist);
        let max = hist.keys().next_back().copied().unwrap_or(0);
        writeln!(heavy, "{g},{calls},{},{median},{max},{}", total / calls as f64, max as f64 / median as f64).unwrap();
        println!(
            "g = {g}: final mean error {:.5}, mean draws per call {:.3}, median {median}, max {max}",
            c.mean_error[cfg.iterations],
            total / calls as f64
        );
        series.push((format!("g = {g}"), format!("{name}/aggregate.csv")));
    }
    write_file(&r.output_dir.join("comparison.csv"), &comparison)?;
    write_file(&r.output_dir.join("smoothed.csv"), &smoothed)?;
    write_file(&r.output_dir.join("heavy_tail.csv"), &heavy)?;
    write_file(&r.output_dir.join("samples.gp"), &samples_plot_script(&series, "samples.png"))?;
    write_file(&r.output_dir.join("smoothed.gp"), &smoothed_plot_script(&gs))
}

fn smoothed_plot_script(gs: &[f64]) -> String {
    let mut s = String::new();
    writeln!(s, "set terminal pngcairo size 900,600").unwrap();
    writeln!(s, "set output 'smoothed.png'").unwrap();
    writeln!(s, "set datafile separator ','").unwrap();
    writeln!(s, "set logscale x 10").unwrap();
    writeln!(s, "set xlabel 'samples (smoothed over lg-error windows)'").unwrap();
    writeln!(s, "set ylabel 'lg(error)'").unwrap();
    let parts: Vec<String> = gs
        .iter()
        .map(|g| format!("'smoothed.csv' every ::1 using 3:($1 == {g} ? $2 : 1/0) with dots title 'g = {g}'"))
        .collect();
    writeln!(s, "plot {}", parts.join(", \\\n     ")).unwrap();
    s
}

#[derive(Serialize)]
struct ModelSummary {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    feasible_pairs: usize,
    r_max: f64,
    value_bound: f64,
    p_min: f64,
    small_radius_condition: Option<SmallRadiusReport>,
}

pub fn validate_model(args: &ValidateArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&args.model).map_err(io_err(&args.model))?;
    let model = MdpModel::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", args.model.display())))?;
    let small_radius = match args.delta {
        Some(d) => Some(check_small_radius(&model, d).map_err(|e| CliError::Config(e.to_string()))?),
        None => None,
    };
    let summary = ModelSummary {
        n_states: model.n_states(),
        n_actions: model.n_actions(),
        gamma: model.gamma(),
        feasible_pairs: model.n_feasible_pairs(),
        r_max: model.r_max(),
        value_bound: model.r_max() / (1.0 - model.gamma()),
        p_min: min_support_probability(&model),
        small_radius_condition: small_radius,
    };
    println!("{}", serde_json::to_string_pretty(&summary).map_err(drq_core::Error::from)?);
    Ok(())
}
