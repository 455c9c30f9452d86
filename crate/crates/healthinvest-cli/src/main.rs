//! Command-line front end for the healthcare-investment solver: free
//! boundaries, parameter sweeps, value surfaces, feedback policies,
//! closed-loop simulation, and the invariant verification suite.
//!
//! Every CSV opens with '#'-prefixed manifest rows recording the
//! configuration that produced it; with a fixed config, seed, and the
//! default reproducible headers, rerunning a subcommand writes
//! byte-identical files. Exit codes: 0 success, 2 configuration error,
//! 3 solver error, 4 verification failure.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use healthinvest::boundary::{solve_surface_refined, write_surface_csv, BoundarySurface};
use healthinvest::params::{self, parse_config, ModelParams, RunConfig};
use healthinvest::policy::{solve_policy_grid, write_policy_csv, PolicyEvaluator};
use healthinvest::sim::{
    simulate_closed_loop, welfare_estimate, write_summary_csv, write_trajectory_csv, SimError,
};
use healthinvest::value::{solve_value_surface, write_value_csv};
use healthinvest::verify::run_invariant_suite;

#[derive(Parser)]
#[command(name = "healthinvest", version, about = "Optimal healthcare-investment boundary solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file; omitted keys fall back to built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSV and report files.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Override grid.n_steps (boundary-solver stages).
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Override grid.h_values (comma-separated, strictly increasing).
    #[arg(long, global = true, value_delimiter = ',')]
    h: Option<Vec<f64>>,
    /// Override sim.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses the available parallelism.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Override grid.refine (residual re-evaluation mesh multiplier).
    #[arg(long, global = true)]
    refine: Option<u32>,
    /// Record a generation timestamp in manifests (breaks byte-identical reruns).
    #[arg(long, global = true)]
    timestamps: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the free boundary; write dual and primal curves.
    Boundary,
    /// Re-solve the boundary across parameter values; report directions.
    Sweep {
        /// Parameter to vary.
        #[arg(long, value_enum)]
        parameter: SweepParameter,
        /// Values to solve at (comma-separated); defaults per parameter.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Evaluate the dual value surface on the configured (t, z) lattice.
    Value,
    /// Evaluate consumption/portfolio feedback on the configured (t, x) lattice.
    Policy,
    /// Simulate the closed loop under the configured policy and seed.
    Simulate,
    /// Run the invariant suite; write a JSON report.
    Verify,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SweepParameter {
    H,
    Delta,
    Alpha,
    Rho,
}

impl SweepParameter {
    fn name(self) -> &'static str {
        match self {
            SweepParameter::H => "h",
            SweepParameter::Delta => "delta",
            SweepParameter::Alpha => "alpha",
            SweepParameter::Rho => "rho",
        }
    }

    fn default_values(self) -> Vec<f64> {
        match self {
            SweepParameter::H => vec![1000.0, 1200.0, 1500.0],
            SweepParameter::Delta => vec![0.0055, 0.011, 0.022],
            SweepParameter::Alpha => vec![0.2258, 0.25, 0.28],
            SweepParameter::Rho => vec![0.05, 0.06, 0.07],
        }
    }
}

enum CliError {
    Config(String),
    Solver(String),
    Verification(Vec<String>),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Verification(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Solver(m) => write!(f, "solver error: {m}"),
            CliError::Verification(names) => {
                write!(f, "verification failed: {}", names.join(", "))
            }
        }
    }
}

fn solver<E: fmt::Display>(e: E) -> CliError {
    CliError::Solver(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        // Ignore the error from a pool that is already initialized.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let (mut cfg, config_desc) = load_config(cli.config.as_deref())?;
    apply_overrides(&mut cfg, &cli)?;
    fs::create_dir_all(&cli.out)
        .map_err(|e| CliError::Config(format!("--out {}: {e}", cli.out.display())))?;
    let manifest = manifest_text(&cli, &cfg, &config_desc);
    match &cli.command {
        Command::Boundary => cmd_boundary(&cfg, &cli.out, &manifest),
        Command::Sweep { parameter, values } => {
            cmd_sweep(&cfg, *parameter, values.clone(), &cli.out, &manifest)
        }
        Command::Value => cmd_value(&cfg, &cli.out, &manifest),
        Command::Policy => cmd_policy(&cfg, &cli.out, &manifest),
        Command::Simulate => cmd_simulate(&cfg, &cli.out, &manifest),
        Command::Verify => cmd_verify(&cfg, &cli.out, &manifest, &config_desc, &cli),
    }
}

fn load_config(path: Option<&Path>) -> Result<(RunConfig, String), CliError> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let (cfg, missing) =
                parse_config(&text).map_err(|e| CliError::Config(e.to_string()))?;
            for key in &missing {
                eprintln!("config: {key} not set, using default");
            }
            Ok((cfg, p.display().to_string()))
        }
        None => Ok((RunConfig::default(), "builtin-defaults".to_string())),
    }
}

fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.steps {
        cfg.grid.n_steps = n;
    }
    if let Some(h) = &cli.h {
        cfg.grid.h_values = h.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.sim.seed = seed;
    }
    if let Some(r) = cli.refine {
        cfg.grid.refine = r;
    }
    params::validate(cfg.model).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.grid.validate().map_err(|e| CliError::Config(e.to_string()))?;
    cfg.sim.validate().map_err(CliError::Config)?;
    Ok(())
}

fn subcommand_name(command: &Command) -> &'static str {
    match command {
        Command::Boundary => "boundary",
        Command::Sweep { .. } => "sweep",
        Command::Value => "value",
        Command::Policy => "policy",
        Command::Simulate => "simulate",
        Command::Verify => "verify",
    }
}

/// '#'-prefixed manifest rows placed above every CSV header: subcommand,
/// config source, grids, seed, and code version, so each file records how
/// it was produced.
fn manifest_text(cli: &Cli, cfg: &RunConfig, config_desc: &str) -> String {
    let g = &cfg.grid;
    let mut m = String::new();
    m.push_str(&format!("# healthinvest {} v{}\n", subcommand_name(&cli.command), env!("CARGO_PKG_VERSION")));
    m.push_str(&format!("# config: {config_desc}\n"));
    m.push_str(&format!("# out: {}\n", cli.out.display()));
    m.push_str(&format!(
        "# grid: n_steps={} refine={} h_values={:?} n_t={} n_z={} n_x={}\n",
        g.n_steps, g.refine, g.h_values, g.n_t, g.n_z, g.n_x
    ));
    m.push_str(&format!(
        "# sim: n_paths={} n_steps={} seed={} policy={:?}\n",
        cfg.sim.n_paths, cfg.sim.n_steps, cfg.sim.seed, cfg.sim.policy
    ));
    m.push_str(&format!("# threads: {}\n", cli.threads));
    if cli.timestamps {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        m.push_str(&format!("# generated_at_unix: {now}\n"));
    }
    m
}

fn write_output(path: &Path, manifest: &str, body: &[u8]) -> Result<(), CliError> {
    let mut contents = Vec::with_capacity(manifest.len() + body.len());
    contents.extend_from_slice(manifest.as_bytes());
    contents.extend_from_slice(body);
    fs::write(path, contents).map_err(|e| CliError::Solver(format!("{}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| (lo.ln() + (hi / lo).ln() * k as f64 / (n - 1) as f64).exp()).collect()
}

fn linear_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Time nodes in [0, T): the primal transform and consumption feedback
/// degenerate at the horizon itself.
fn interior_t_grid(horizon: f64, n_t: usize) -> Vec<f64> {
    (0..n_t).map(|k| horizon * k as f64 / n_t as f64).collect()
}

fn solve_configured_surface(cfg: &RunConfig) -> Result<BoundarySurface, CliError> {
    solve_surface_refined(&cfg.model, &cfg.grid.h_values, cfg.grid.n_steps, cfg.grid.refine)
        .map_err(solver)
}

/// The primal wealth threshold b-hat on the solved time nodes (the
/// terminal node is excluded: the transform degenerates at t = T).
fn primal_series(
    model: &ModelParams,
    surface: &BoundarySurface,
    h: f64,
) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let eval = PolicyEvaluator::new(model, surface, h).map_err(solver)?;
    let curve = surface.curve_for(h).expect("evaluator construction checked coverage");
    let mut times = Vec::new();
    let mut values = Vec::new();
    for &xi in &curve.xi_grid {
        if xi == 0.0 {
            continue;
        }
        let t = model.horizon - xi;
        times.push(t);
        values.push(eval.primal_boundary(t).map_err(solver)?);
    }
    Ok((times, values))
}

fn primal_boundary_csv(model: &ModelParams, surface: &BoundarySurface) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["h", "t", "b_hat"]).map_err(solver)?;
    for &h in &surface.h_grid {
        let (times, values) = primal_series(model, surface, h)?;
        for (t, bh) in times.iter().zip(&values) {
            w.write_record(&[format!("{h}"), format!("{t}"), format!("{bh}")]).map_err(solver)?;
        }
    }
    w.into_inner().map_err(|e| CliError::Solver(e.to_string()))
}

fn cmd_boundary(cfg: &RunConfig, out: &Path, manifest: &str) -> Result<(), CliError> {
    let surface = solve_configured_surface(cfg)?;
    let mut dual = Vec::new();
    write_surface_csv(&surface, cfg.model.horizon, &mut dual).map_err(solver)?;
    write_output(&out.join("boundary_dual.csv"), manifest, &dual)?;
    let primal = primal_boundary_csv(&cfg.model, &surface)?;
    write_output(&out.join("boundary_primal.csv"), manifest, &primal)?;
    println!(
        "boundary: {} curve(s) at n_steps={} in {:.2}s",
        surface.h_grid.len(),
        surface.meta.n_steps,
        surface.meta.wall_time_s
    );
    Ok(())
}

/// One solved sweep value: the merged-CSV bodies it contributes and the
/// primal series used for the directions report.
struct SweepOutcome {
    value: f64,
    dual_body: String,
    primal_body: String,
    series: Vec<(f64, Vec<f64>)>,
}

fn sweep_config(cfg: &RunConfig, parameter: SweepParameter, value: f64) -> RunConfig {
    let mut c = cfg.clone();
    match parameter {
        SweepParameter::H => c.grid.h_values = vec![value],
        SweepParameter::Delta => c.model.delta = value,
        SweepParameter::Alpha => c.model.alpha = value,
        SweepParameter::Rho => c.model.rho = value,
    }
    c
}

fn solve_sweep_value(
    cfg: &RunConfig,
    parameter: SweepParameter,
    value: f64,
) -> Result<SweepOutcome, CliError> {
    let c = sweep_config(cfg, parameter, value);
    params::validate(c.model).map_err(|e| CliError::Config(e.to_string()))?;
    let surface = solve_configured_surface(&c)?;
    let mut dual = Vec::new();
    write_surface_csv(&surface, c.model.horizon, &mut dual).map_err(solver)?;
    let primal = primal_boundary_csv(&c.model, &surface)?;
    let mut series = Vec::new();
    for &h in &surface.h_grid {
        series.push((h, primal_series(&c.model, &surface, h)?.1));
    }
    Ok(SweepOutcome {
        value,
        dual_body: String::from_utf8(dual).expect("CSV is UTF-8"),
        primal_body: String::from_utf8(primal).expect("CSV is UTF-8"),
        series,
    })
}

/// Prefixes every data row of a rendered CSV body with the sweep key
/// columns, so a single-value sweep stays row-for-row identical to the
/// corresponding boundary output.
fn merge_rows(out: &mut String, body: &str, name: &str, value: f64, skip_header: bool) {
    for (i, line) in body.lines().enumerate() {
        if i == 0 && skip_header {
            continue;
        }
        out.push_str(name);
        out.push(',');
        out.push_str(&format!("{value}"));
        out.push(',');
        out.push_str(line);
        out.push('\n');
    }
}

fn direction_word(mean_diff: f64) -> &'static str {
    if mean_diff > 0.0 {
        "increasing"
    } else if mean_diff < 0.0 {
        "decreasing"
    } else {
        "flat"
    }
}

fn cmd_sweep(
    cfg: &RunConfig,
    parameter: SweepParameter,
    values: Option<Vec<f64>>,
    out: &Path,
    manifest: &str,
) -> Result<(), CliError> {
    use rayon::prelude::*;
    let values = values.unwrap_or_else(|| parameter.default_values());
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".to_string()));
    }
    let name = parameter.name();
    let outcomes: Vec<Result<SweepOutcome, CliError>> =
        values.par_iter().map(|&v| solve_sweep_value(cfg, parameter, v)).collect();

    let mut merged_dual = format!("parameter,value,{}\n", "h,t,xi,b_dual,residual");
    let mut merged_primal = format!("parameter,value,{}\n", "h,t,b_hat");
    let mut successes: Vec<SweepOutcome> = Vec::new();
    let mut failures = 0usize;
    for (v, outcome) in values.iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                merge_rows(&mut merged_dual, &o.dual_body, name, o.value, true);
                merge_rows(&mut merged_primal, &o.primal_body, name, o.value, true);
                successes.push(o);
            }
            Err(e) => {
                eprintln!("sweep: {name}={v} failed: {e}");
                failures += 1;
            }
        }
    }
    // Partial results are kept even when some values fail.
    let sweep_manifest = format!("{manifest}# sweep: parameter={name} values={values:?}\n");
    write_output(&out.join(format!("sweep_{name}.csv")), &sweep_manifest, merged_dual.as_bytes())?;
    write_output(
        &out.join(format!("sweep_{name}_primal.csv")),
        &sweep_manifest,
        merged_primal.as_bytes(),
    )?;

    let mut directions = String::from("parameter,h,from_value,to_value,mean_diff,direction\n");
    let mut summary: Vec<(String, Vec<f64>)> = Vec::new();
    if parameter == SweepParameter::H {
        let mut diffs = Vec::new();
        for pair in successes.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let d = mean_difference(&b.series[0].1, &a.series[0].1);
            directions.push_str(&format!(
                "{name},,{},{},{d},{}\n",
                a.value,
                b.value,
                direction_word(d)
            ));
            diffs.push(d);
        }
        summary.push((format!("sweep {name}"), diffs));
    } else {
        for (ih, &h) in cfg.grid.h_values.iter().enumerate() {
            let mut diffs = Vec::new();
            for pair in successes.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                let d = mean_difference(&b.series[ih].1, &a.series[ih].1);
                directions.push_str(&format!(
                    "{name},{h},{},{},{d},{}\n",
                    a.value,
                    b.value,
                    direction_word(d)
                ));
                diffs.push(d);
            }
            summary.push((format!("sweep {name} at h={h}"), diffs));
        }
    }
    write_output(
        &out.join(format!("sweep_{name}_directions.csv")),
        &sweep_manifest,
        directions.as_bytes(),
    )?;
    for (label, diffs) in &summary {
        let verdict = if diffs.is_empty() {
            "no comparable pair".to_string()
        } else if diffs.iter().all(|&d| d > 0.0) {
            format!("primal boundary increases with {name}")
        } else if diffs.iter().all(|&d| d < 0.0) {
            format!("primal boundary decreases with {name}")
        } else {
            format!("primal boundary direction mixed in {name}")
        };
        println!("{label}: {verdict}");
    }
    if successes.is_empty() {
        return Err(CliError::Solver(format!("every {name} sweep value failed")));
    }
    if failures > 0 {
        return Err(CliError::Solver(format!(
            "{failures}/{} {name} sweep values failed; partial results written",
            values.len()
        )));
    }
    Ok(())
}

fn mean_difference(next: &[f64], prev: &[f64]) -> f64 {
    let n = next.len().min(prev.len());
    next.iter().zip(prev).take(n).map(|(a, b)| a - b).sum::<f64>() / n as f64
}

fn cmd_value(cfg: &RunConfig, out: &Path, manifest: &str) -> Result<(), CliError> {
    let surface = solve_configured_surface(cfg)?;
    let t_grid = interior_t_grid(cfg.model.horizon, cfg.grid.n_t);
    let z_grid = log_spaced(cfg.grid.z_min, cfg.grid.z_max, cfg.grid.n_z);
    let vs = solve_value_surface(&cfg.model, &surface, &t_grid, &z_grid).map_err(solver)?;
    let mut body = Vec::new();
    write_value_csv(&vs, &mut body).map_err(solver)?;
    write_output(&out.join("value.csv"), manifest, &body)?;
    println!(
        "value: {} h x {} t x {} z lattice",
        cfg.grid.h_values.len(),
        t_grid.len(),
        z_grid.len()
    );
    Ok(())
}

fn cmd_policy(cfg: &RunConfig, out: &Path, manifest: &str) -> Result<(), CliError> {
    let surface = solve_configured_surface(cfg)?;
    let t_grid = interior_t_grid(cfg.model.horizon, cfg.grid.n_t);
    let x_grid = linear_spaced(cfg.grid.x_min, cfg.grid.x_max, cfg.grid.n_x);
    let grid = solve_policy_grid(&cfg.model, &surface, &t_grid, &x_grid).map_err(solver)?;
    let mut body = Vec::new();
    write_policy_csv(&grid, &mut body).map_err(solver)?;
    write_output(&out.join("policy.csv"), manifest, &body)?;
    println!(
        "policy: {} h x {} t x {} x lattice",
        cfg.grid.h_values.len(),
        t_grid.len(),
        x_grid.len()
    );
    Ok(())
}

fn cmd_simulate(cfg: &RunConfig, out: &Path, manifest: &str) -> Result<(), CliError> {
    // The simulation needs the boundary curve solved exactly at the
    // initial health, independent of the surface lattice.
    let mut sim_cfg = cfg.clone();
    sim_cfg.grid.h_values = vec![cfg.sim.initial_health];
    let surface = solve_configured_surface(&sim_cfg)?;
    let bundle = simulate_closed_loop(&cfg.model, &surface, &cfg.sim).map_err(|e| match e {
        SimError::Config(m) => CliError::Config(m),
        other => solver(other),
    })?;
    let mut summary = Vec::new();
    write_summary_csv(&bundle, &mut summary).map_err(solver)?;
    write_output(&out.join("sim_summary.csv"), manifest, &summary)?;
    let mut trajectories = Vec::new();
    write_trajectory_csv(&bundle, 10_000, &mut trajectories).map_err(solver)?;
    write_output(&out.join("sim_trajectories.csv"), manifest, &trajectories)?;
    let (mean, se) = welfare_estimate(&bundle);
    println!(
        "simulate: {} paths, welfare {mean:.6} +/- {se:.6} (1 SE), {} absorbed",
        bundle.summaries.len(),
        bundle.absorbed
    );
    Ok(())
}

fn cmd_verify(
    cfg: &RunConfig,
    out: &Path,
    _manifest: &str,
    config_desc: &str,
    cli: &Cli,
) -> Result<(), CliError> {
    let report = run_invariant_suite(cfg).map_err(solver)?;
    let g = &cfg.grid;
    let wrapped = serde_json::json!({
        "manifest": {
            "subcommand": "verify",
            "version": env!("CARGO_PKG_VERSION"),
            "config": config_desc,
            "grid": format!(
                "n_steps={} refine={} h_values={:?} n_t={} n_z={} n_x={}",
                g.n_steps, g.refine, g.h_values, g.n_t, g.n_z, g.n_x
            ),
            "seed": cfg.sim.seed,
            "threads": cli.threads,
        },
        "report": report,
    });
    let path = out.join("verify_report.json");
    let text = serde_json::to_string_pretty(&wrapped).expect("report serializes");
    fs::write(&path, text + "\n")
        .map_err(|e| CliError::Solver(format!("{}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    for check in &report.checks {
        println!(
            "verify: {} {} (measured {:.3e}, bound {:.3e})",
            check.name,
            if check.passed { "pass" } else { "FAIL" },
            check.measured,
            check.bound
        );
    }
    if report.passed {
        println!("verify: all {} checks passed in {:.1}s", report.checks.len(), report.wall_time_s);
        Ok(())
    } else {
        Err(CliError::Verification(report.failing().map(|c| c.name.clone()).collect()))
    }
}
