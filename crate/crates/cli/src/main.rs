//! `volterra-fk` command-line driver.
//!
//! Exit codes: 0 when every invariant check passes, 1 when one fails,
//! 2 on configuration errors and 3 on numerical failures.

mod commands;
mod config;
mod converge;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use config::{parse_param, CoeffConfig, ExperimentConfig};
use report::{write_report, write_table, Outcome, Report, SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(volterra_fk::Error),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<volterra_fk::Error> for CliError {
    fn from(e: volterra_fk::Error) -> Self {
        use volterra_fk::Error as E;
        match e {
            E::NonFinite { .. } | E::Regression { .. } | E::NoContraction { .. } => CliError::Numerical(e),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "volterra-fk", version, about = "Stochastic Volterra forward/backward solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the forward equation; CSV of paths and a moment report.
    SimulateForward,
    /// Type-I backward solve.
    SolveBsvie,
    /// Type-II (M-solution) backward solve.
    SolveType2,
    /// Comparison principle between `--coeff` and `--coeff-b`.
    Compare,
    /// Regression sweep against the closed form of a linear equation.
    LinearOracle,
    /// Adjoint pairing of a dual pair.
    DualityCheck,
    /// `U(t, s, x)` by restart.
    EvalPpde,
    /// Global solution against nested restarts.
    FkCheck,
    /// Variational, finite-difference and resolvent path derivatives.
    PathDerivative,
    /// Picard iteration of a coupled system.
    SolveCoupled,
    /// Error ladder over `--N`, `--paths` or `--basis-degree`.
    Converge,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SimulateForward => "simulate-forward",
            Command::SolveBsvie => "solve-bsvie",
            Command::SolveType2 => "solve-type2",
            Command::Compare => "compare",
            Command::LinearOracle => "linear-oracle",
            Command::DualityCheck => "duality-check",
            Command::EvalPpde => "eval-ppde",
            Command::FkCheck => "fk-check",
            Command::PathDerivative => "path-derivative",
            Command::SolveCoupled => "solve-coupled",
            Command::Converge => "converge",
        }
    }
}

/// Overrides of the configuration file; flags win.
#[derive(Debug, Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Coefficient family.
    #[arg(long, global = true)]
    coeff: Option<String>,
    /// Family parameter `key=value` (repeatable).
    #[arg(long = "param", global = true, value_parser = parse_param)]
    params: Vec<(String, serde_json::Value)>,
    /// Second family of `compare`.
    #[arg(long, global = true)]
    coeff_b: Option<String>,
    /// Parameter of the second family (repeatable).
    #[arg(long = "param-b", global = true, value_parser = parse_param)]
    params_b: Vec<(String, serde_json::Value)>,
    /// Horizon.
    #[arg(long = "T", global = true)]
    horizon: Option<f64>,
    /// Steps; a comma list gives a `converge` ladder.
    #[arg(long = "N", global = true)]
    steps: Option<String>,
    /// Paths; a comma list gives a `converge` ladder.
    #[arg(long, global = true)]
    paths: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    antithetic: bool,
    /// Constant free term or frozen path value.
    #[arg(long, global = true, allow_hyphen_values = true)]
    x0: Option<f64>,
    /// Basis degree; a comma list gives a `converge` ladder.
    #[arg(long, global = true)]
    basis_degree: Option<String>,
    #[arg(long, global = true)]
    pivots: Option<usize>,
    #[arg(long, global = true)]
    ridge: Option<f64>,
    #[arg(long, global = true)]
    implicit: bool,
    /// `α` selector of `linear-oracle`.
    #[arg(long, global = true)]
    alpha: Option<String>,
    /// `β` selector of `linear-oracle`.
    #[arg(long, global = true)]
    beta: Option<String>,
    /// `ξ` selector of `linear-oracle`.
    #[arg(long, global = true)]
    xi: Option<String>,
    /// Dual pair of `duality-check`.
    #[arg(long, global = true)]
    pair: Option<String>,
    /// Outer time index.
    #[arg(long, global = true)]
    t: Option<usize>,
    /// Restart index.
    #[arg(long, global = true)]
    s: Option<usize>,
    /// Derivative direction as a comma list over the grid nodes.
    #[arg(long, global = true, allow_hyphen_values = true)]
    eta: Option<String>,
    #[arg(long, global = true)]
    fd_eps: Option<f64>,
    /// Sample points `path:index,...` of `fk-check`.
    #[arg(long, global = true)]
    points: Option<String>,
    #[arg(long, global = true)]
    inner_paths: Option<usize>,
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Cap on the total nested paths of `fk-check`.
    #[arg(long, global = true)]
    budget: Option<usize>,
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    /// Picard stopping gap.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Operation studied by `converge`.
    #[arg(long, global = true)]
    op: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
}

fn list<T: std::str::FromStr>(key: &str, text: &str) -> Result<Vec<T>, CliError> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| CliError::Config(format!("--{key}: cannot parse '{v}'")))
        })
        .collect()
}

fn single<T: std::str::FromStr>(key: &str, text: &str) -> Result<T, CliError> {
    let mut v = list::<T>(key, text)?;
    if v.len() != 1 {
        return Err(CliError::Config(format!("--{key}: lists are only accepted by converge")));
    }
    Ok(v.remove(0))
}

fn coeff_override(base: &CoeffConfig, name: &Option<String>, params: &[(String, serde_json::Value)]) -> CoeffConfig {
    let mut c = base.clone();
    if let Some(n) = name {
        if *n != c.name {
            c.params.clear();
        }
        c.name = n.clone();
    }
    for (k, v) in params {
        c.params.insert(k.clone(), v.clone());
    }
    c
}

/// Loads the file, applies the flags and picks the `converge` ladder.
fn resolve(cmd: &Command, a: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(c) = &cfg.command {
        if c != cmd.name() {
            eprintln!("note: config command '{c}' overridden by '{}'", cmd.name());
        }
    }
    cfg.command = Some(cmd.name().into());
    cfg.coeff = coeff_override(&cfg.coeff, &a.coeff, &a.params);
    if a.coeff_b.is_some() || !a.params_b.is_empty() {
        let base = cfg.task.coeff_b.clone().unwrap_or_else(|| cfg.coeff.clone());
        cfg.task.coeff_b = Some(coeff_override(&base, &a.coeff_b, &a.params_b));
    }
    if let Some(v) = a.horizon {
        cfg.grid.horizon = v;
    }
    let converge = matches!(cmd, Command::Converge);
    let mut ladders = Vec::new();
    if let Some(v) = &a.steps {
        let values: Vec<usize> = list("N", v)?;
        if values.len() > 1 && converge {
            ladders.push(("N", values.iter().map(|&x| x as f64).collect::<Vec<_>>()));
        } else {
            cfg.grid.steps = single("N", v)?;
        }
    }
    if let Some(v) = &a.paths {
        let values: Vec<usize> = list("paths", v)?;
        if values.len() > 1 && converge {
            ladders.push(("paths", values.iter().map(|&x| x as f64).collect()));
        } else {
            cfg.mc.paths = single("paths", v)?;
        }
    }
    if let Some(v) = &a.basis_degree {
        let values: Vec<usize> = list("basis-degree", v)?;
        if values.len() > 1 && converge {
            ladders.push(("degree", values.iter().map(|&x| x as f64).collect()));
        } else {
            cfg.basis.degree = single("basis-degree", v)?;
        }
    }
    match ladders.len() {
        0 => {}
        1 => {
            let (name, values) = ladders.remove(0);
            cfg.converge.ladder = name.into();
            cfg.converge.values = values;
        }
        _ => return Err(CliError::Config("converge: give a list for exactly one of --N, --paths, --basis-degree".into())),
    }
    if let Some(v) = a.seed {
        cfg.mc.seed = v;
    }
    if a.antithetic {
        cfg.mc.antithetic = true;
    }
    if let Some(v) = a.x0 {
        cfg.task.x0 = v;
        cfg.task.x0_path.clear();
    }
    if let Some(v) = a.pivots {
        cfg.basis.pivots = v;
    }
    if let Some(v) = a.ridge {
        cfg.basis.ridge = v;
    }
    if a.implicit {
        cfg.basis.implicit = true;
    }
    for (slot, v) in [
        (&mut cfg.task.alpha, &a.alpha),
        (&mut cfg.task.beta, &a.beta),
        (&mut cfg.task.xi, &a.xi),
        (&mut cfg.task.pair, &a.pair),
        (&mut cfg.converge.op, &a.op),
    ] {
        if let Some(v) = v {
            *slot = v.clone();
        }
    }
    if let Some(v) = a.t {
        cfg.task.t = v;
    }
    if let Some(v) = a.s {
        cfg.task.s = v;
    }
    if let Some(v) = &a.eta {
        cfg.task.eta = list("eta", v)?;
    }
    if let Some(v) = a.fd_eps {
        cfg.task.fd_eps = Some(v);
    }
    if let Some(v) = &a.points {
        cfg.task.points = v
            .split(',')
            .map(|pt| {
                let (p, i) = pt
                    .split_once(':')
                    .ok_or_else(|| CliError::Config(format!("--points: expected path:index, got '{pt}'")))?;
                Ok((single("points", p)?, single("points", i)?))
            })
            .collect::<Result<_, CliError>>()?;
    }
    if let Some(v) = a.inner_paths {
        cfg.task.inner_paths = v;
    }
    if let Some(v) = a.replicates {
        cfg.task.replicates = v;
        cfg.converge.replicates = v;
    }
    if let Some(v) = a.budget {
        cfg.task.budget = v;
    }
    if let Some(v) = a.max_iter {
        cfg.task.max_iter = v;
    }
    if let Some(v) = a.tol {
        cfg.tolerances.picard = v;
    }
    if let Some(v) = &a.out {
        cfg.output = v.clone();
    }
    if a.threads.is_some() {
        cfg.threads = a.threads;
    }
    if cfg.mc.paths == 0 {
        return Err(CliError::Config("mc.paths must be positive".into()));
    }
    Ok(cfg)
}

fn dispatch(cmd: &Command, cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    match cmd {
        Command::SimulateForward => commands::simulate_forward(cfg),
        Command::SolveBsvie => commands::solve_bsvie(cfg),
        Command::SolveType2 => commands::solve_type2_cmd(cfg),
        Command::Compare => commands::compare_cmd(cfg),
        Command::LinearOracle => commands::linear_oracle(cfg),
        Command::DualityCheck => commands::duality(cfg),
        Command::EvalPpde => commands::eval_ppde(cfg),
        Command::FkCheck => commands::fk_check_cmd(cfg),
        Command::PathDerivative => commands::path_derivative_cmd(cfg),
        Command::SolveCoupled => commands::solve_coupled_cmd(cfg),
        Command::Converge => converge::converge(cfg),
    }
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    let cfg = resolve(&cli.command, &cli.common)?;
    let workers = cfg.worker_count()?;
    std::fs::create_dir_all(&cfg.output).map_err(|e| CliError::Io(format!("{}: {e}", cfg.output.display())))?;
    let start = Instant::now();
    let outcome = volterra_fk::exec::with_threads(workers, || dispatch(&cli.command, &cfg));
    let runtime = start.elapsed().as_secs_f64();
    let outcome = match outcome {
        Ok(o) => o,
        Err(CliError::Numerical(e)) => {
            // Keep a record of the failure, including iteration traces.
            let results = json!({ "error": e.to_string(), "detail": format!("{e:?}") });
            let report = Report {
                schema_version: SCHEMA_VERSION,
                command: cli.command.name(),
                config: &cfg,
                config_hash: cfg.hash(),
                results: &results,
                invariant_checks: &[],
                pass: false,
                workers,
                runtime_seconds: runtime,
            };
            write_report(&cfg.output, &report)?;
            return Err(CliError::Numerical(e));
        }
        Err(e) => return Err(e),
    };
    for t in &outcome.tables {
        write_table(&cfg.output, t)?;
    }
    let pass = outcome.checks.iter().all(|c| c.pass);
    let report = Report {
        schema_version: SCHEMA_VERSION,
        command: cli.command.name(),
        config: &cfg,
        config_hash: cfg.hash(),
        results: &outcome.results,
        invariant_checks: &outcome.checks,
        pass,
        workers,
        runtime_seconds: runtime,
    };
    write_report(&cfg.output, &report)?;
    for c in &outcome.checks {
        println!(
            "{} {}: {:.3e} (tolerance {:.3e})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance
        );
    }
    println!("report: {}", cfg.output.join("report.json").display());
    Ok(pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
