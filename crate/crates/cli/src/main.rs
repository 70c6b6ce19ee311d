mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ene_core::diagnostics::run_checks;
use ene_core::ene::GainVariant;
use ene_core::io::{load_solution, save_gains, save_json, save_solution, save_text};
use ene_core::mene::single_segment_policy;
use ene_core::ocp::{solve_nominal, SolveOptions};
use ene_core::sim::{
    compare_prepared, preview_model_sweep, standard_preview_models, Comparison, ComparisonRow, ControllerKind,
    Experiment, SimResult, SweepReport,
};
use ene_core::systems::{NominalPreview, ScenarioSpec};
use ene_core::EneError;
use serde::Serialize;

use crate::config::{OutputFormat, RunConfig};

const EXIT_CODES: &str = "\
Exit codes:
  0  success (run: at least one controller completed)
  1  configuration or file error
  2  nominal solve failed
  3  gain computation failed
  4  a check failed";

#[derive(Parser, Debug)]
#[command(name = "ene", version, about = "Precompute and run perturbation feedback controllers for the cart-pendulum", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the nominal problem and write `nominal.json`.
    Solve,
    /// Compute the gain schedule for a stored nominal and write `gains.json`.
    Gains {
        /// Nominal solution file (defaults to `<out>/nominal.json`).
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Simulate the selected controllers and write per-controller results
    /// and a comparison table.
    Run,
    /// Verify derivatives, fixture agreement with the dense QP oracle, and
    /// value-block symmetry.
    Check,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in scenario, or `custom` for the one in the config file.
    #[arg(long, value_enum, global = true)]
    scenario: Option<ScenarioChoice>,
    /// Comma-separated controller names, or `all`.
    #[arg(long, global = true)]
    controllers: Option<String>,
    /// Seed of the measured-preview generator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Compare the nominal preview models instead of the controllers.
    #[arg(long, global = true)]
    preview_sweep: bool,
    /// Per-step trajectory file format.
    #[arg(long, value_enum, global = true)]
    format: Option<OutputFormat>,
    /// Central-difference step used by `check`.
    #[arg(long, global = true)]
    fd_step: Option<f64>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScenarioChoice {
    Small,
    Large,
    Custom,
}

#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Solve(String),
    Gains(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Solve(_) => 2,
            Failure::Gains(_) => 3,
            Failure::Check(_) => 4,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Config(e) => format!("{e:#}"),
            Failure::Solve(m) | Failure::Gains(m) | Failure::Check(m) => m.clone(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

impl From<EneError> for Failure {
    fn from(e: EneError) -> Self {
        Failure::Config(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn parse_controllers(list: &str) -> anyhow::Result<Vec<ControllerKind>> {
    if list.trim().eq_ignore_ascii_case("all") {
        return Ok(ControllerKind::ALL.to_vec());
    }
    let mut kinds = Vec::new();
    for name in list.split(',').filter(|s| !s.trim().is_empty()) {
        let kind: ControllerKind = name.parse()?;
        if !kinds.contains(&kind) {
            kinds.push(kind);
        }
    }
    Ok(kinds)
}

fn resolve_config(args: &CommonArgs) -> anyhow::Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match args.scenario {
        Some(ScenarioChoice::Small) => config.scenario = ScenarioSpec::small(),
        Some(ScenarioChoice::Large) => config.scenario = ScenarioSpec::large(),
        Some(ScenarioChoice::Custom) => {
            if args.config.is_none() {
                anyhow::bail!("--scenario custom needs --config");
            }
        }
        None => {
            if args.preview_sweep && args.config.is_none() {
                config.scenario = ScenarioSpec::preview_sweep();
            }
        }
    }
    if let Some(list) = &args.controllers {
        config.controllers = parse_controllers(list)?;
    }
    if let Some(seed) = args.seed {
        config.seed = Some(seed);
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(format) = args.format {
        config.format = format;
    }
    if let Some(step) = args.fd_step {
        config.fd_step = step;
    }
    config.preview_sweep |= args.preview_sweep;
    config.validate()?;
    Ok(config)
}

fn output_dir(config: &RunConfig) -> anyhow::Result<&Path> {
    let dir = config.output_dir.as_path();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn cmd_solve(config: &RunConfig) -> Outcome {
    let problem = config.effective_scenario().problem()?;
    let solution = solve_nominal(&problem, &SolveOptions::default()).map_err(|e| Failure::Solve(e.to_string()))?;
    if !solution.is_optimal {
        return Err(Failure::Solve(format!(
            "nominal solve did not converge after {} iterations (KKT norm {:.3e})",
            solution.iterations, solution.kkt_norm
        )));
    }
    let path = output_dir(config)?.join("nominal.json");
    save_solution(&path, &solution)?;
    println!(
        "nominal solved in {} iterations: cost {:.6}, KKT norm {:.3e}; wrote {}",
        solution.iterations,
        solution.cost,
        solution.kkt_norm,
        path.display()
    );
    Ok(())
}

fn cmd_gains(config: &RunConfig, solution: Option<&Path>) -> Outcome {
    let default_path = config.output_dir.join("nominal.json");
    let path = solution.unwrap_or(&default_path);
    let nominal = load_solution(path)?;
    let problem = config.effective_scenario().problem()?;
    let d = problem.dims();
    let t = &nominal.trajectory;
    if t.horizon() != problem.horizon || t.x[0].len() != d.state || t.u[0].len() != d.control || t.w[0].len() != d.preview {
        return Err(Failure::Config(anyhow!(
            "{}: solution shape does not match the configured scenario (horizon {})",
            path.display(),
            problem.horizon
        )));
    }
    let policy =
        single_segment_policy(&problem, &nominal, GainVariant::Extended).map_err(|e| Failure::Gains(e.to_string()))?;
    let out = output_dir(config)?.join("gains.json");
    save_gains(&out, &policy.gains)?;
    println!("wrote {} gain records to {}", policy.gains.horizon(), out.display());
    Ok(())
}

/// Per-controller metrics without the trajectories.
#[derive(Serialize)]
struct RunSummary<'a> {
    scenario: &'a str,
    controller: ControllerKind,
    completed: bool,
    failed: Option<&'a str>,
    performance: f64,
    median_step_seconds: f64,
    mean_step_seconds: f64,
    precompute_seconds: f64,
    violations: &'a [ene_core::ocp::Violation],
    segments: usize,
    flips: usize,
}

impl<'a> RunSummary<'a> {
    fn of(r: &'a SimResult) -> Self {
        Self {
            scenario: &r.scenario,
            controller: r.controller,
            completed: r.completed(),
            failed: r.failed.as_deref(),
            performance: r.performance,
            median_step_seconds: r.timing.median,
            mean_step_seconds: r.timing.mean,
            precompute_seconds: r.precompute_seconds,
            violations: &r.violations,
            segments: r.segments,
            flips: r.flips,
        }
    }
}

#[derive(Serialize)]
struct ComparisonSummary<'a> {
    scenario: &'a str,
    nominal_seconds: f64,
    nominal_kkt_norm: f64,
    rows: &'a [ComparisonRow],
}

fn file_stem(scenario: &str, kind: ControllerKind) -> String {
    format!("{scenario}_{}", kind.label().to_lowercase())
}

fn write_result(dir: &Path, r: &SimResult, format: OutputFormat) -> anyhow::Result<()> {
    let stem = file_stem(&r.scenario, r.controller);
    match format {
        OutputFormat::Csv => save_text(&dir.join(format!("{stem}.csv")), &r.to_csv())?,
        OutputFormat::Json => save_json(&dir.join(format!("{stem}.json")), r)?,
    }
    save_json(&dir.join(format!("{stem}_summary.json")), &RunSummary::of(r))?;
    Ok(())
}

fn write_comparison(dir: &Path, c: &Comparison, format: OutputFormat) -> anyhow::Result<()> {
    for r in &c.results {
        write_result(dir, r, format)?;
    }
    save_text(&dir.join(format!("{}_comparison.md", c.scenario)), &c.to_markdown())?;
    save_json(
        &dir.join(format!("{}_comparison.json", c.scenario)),
        &ComparisonSummary {
            scenario: &c.scenario,
            nominal_seconds: c.nominal_seconds,
            nominal_kkt_norm: c.nominal_kkt_norm,
            rows: &c.rows,
        },
    )?;
    Ok(())
}

fn describe_preview(model: &NominalPreview) -> String {
    match *model {
        NominalPreview::HoldConstant => "hold constant".into(),
        NominalPreview::Recursion {
            state_coupling,
            preview_coupling,
        } => format!("recursion ({state_coupling}, {preview_coupling})"),
    }
}

fn sweep_markdown(report: &SweepReport) -> String {
    let mut out = format!(
        "## {} preview models\n\n| Preview model | ENE performance | MENE performance | MENE violations | MENE flips |\n|---|---|---|---|---|\n",
        report.scenario
    );
    for (i, e) in report.entries.iter().enumerate() {
        let marker = if i == report.best { " (best)" } else { "" };
        out.push_str(&format!(
            "| {}{} | {:.4} | {:.4} | {} | {} |\n",
            describe_preview(&e.model),
            marker,
            e.ene.performance,
            e.mene.performance,
            e.mene.violations.len(),
            e.mene.flips
        ));
    }
    out
}

fn cmd_run(config: &RunConfig) -> Outcome {
    let spec = config.effective_scenario();
    let dir = output_dir(config)?;
    if config.preview_sweep {
        let report = preview_model_sweep(&spec, &standard_preview_models()).map_err(|e| Failure::Solve(e.to_string()))?;
        for e in &report.entries {
            write_result(dir, &e.ene, config.format)?;
            write_result(dir, &e.mene, config.format)?;
        }
        let markdown = sweep_markdown(&report);
        save_text(&dir.join(format!("{}_sweep.md", spec.name)), &markdown)?;
        save_json(&dir.join(format!("{}_sweep.json", spec.name)), &report)?;
        print!("{markdown}");
        let any = report.entries.iter().any(|e| e.ene.completed() || e.mene.completed());
        return if any {
            Ok(())
        } else {
            Err(Failure::Solve("no controller completed".into()))
        };
    }
    let experiment = Experiment::prepare(&spec).map_err(|e| Failure::Solve(e.to_string()))?;
    let comparison = compare_prepared(&experiment, &config.controllers);
    write_comparison(dir, &comparison, config.format)?;
    print!("{}", comparison.to_markdown());
    for r in comparison.results.iter().filter(|r| !r.completed()) {
        eprintln!("{} failed: {}", r.controller, r.failed.as_deref().unwrap_or(""));
    }
    if comparison.results.iter().any(SimResult::completed) {
        Ok(())
    } else {
        Err(Failure::Solve("no controller completed".into()))
    }
}

fn cmd_check(config: &RunConfig) -> Outcome {
    let report = run_checks(&config.effective_scenario(), config.fd_step);
    for item in &report.items {
        let status = if item.passed { "PASS" } else { "FAIL" };
        println!("{status} {} ({:.3e} <= {:.1e})", item.name, item.value, item.tolerance);
    }
    match report.first_failure() {
        Some(item) => Err(Failure::Check(format!(
            "check failed: {} = {:.3e} exceeds {:.1e}",
            item.name, item.value, item.tolerance
        ))),
        None => {
            println!("all {} checks passed", report.items.len());
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> Outcome {
    let config = resolve_config(&cli.common)?;
    if cli.common.print_config {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    match cli.command {
        Some(Command::Solve) => cmd_solve(&config),
        Some(Command::Gains { solution }) => cmd_gains(&config, solution.as_deref()),
        Some(Command::Run) => cmd_run(&config),
        Some(Command::Check) => cmd_check(&config),
        None => Err(Failure::Config(anyhow!("no command given; see --help"))),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}
