//! Command-line surface for the market equilibrium solver: scenario
//! generation, solving, certificate checking, and single-operation utilities.
//!
//! stdout carries machine output only (JSON documents); diagnostics go to
//! stderr. Exit codes: 0 success, 1 tolerance not met (outputs still
//! written), 2 usage or semantic error, 3 I/O or corrupt input, 4 numerical
//! failure.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agora::balance::{self, AffinePriceSpec, AffineSide, CommodityBox};
use agora::model::{random_scenario, GenParams, GenPricing, PricingMode, Scenario};
use agora::pricing;
use agora::solvers::{
    solve_fpi, solve_pcgm, solve_sgp, ConvergenceTrace, SolveStatus, SolverError,
};
use agora::verify::{self, VerifyError};
use agora::{ExecPolicy, MarketState};
use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

const EXIT_TOLERANCE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

const FORMAT_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "agora", version, about = "Multi-commodity market equilibrium solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random scenario file.
    Gen(GenArgs),
    /// Run a solver on a scenario and write solution + trace files.
    Solve(SolveArgs),
    /// Certify a solution state against a scenario (report on stdout).
    Check(CheckArgs),
    /// Project a volume matrix onto the balanced box set (stdin to stdout).
    Project(PolicyArg),
    /// Evaluate every agent's price vector at a state (stdin to stdout).
    Price(PriceArgs),
    /// Solve an affine single-commodity market (stdin to stdout).
    Equilibrium1d,
}

#[derive(Args)]
struct GenArgs {
    /// RNG seed; identical flags produce identical files.
    #[arg(long)]
    seed: u64,
    /// Number of agents (at least 2).
    #[arg(long)]
    agents: usize,
    /// Number of commodities (at least 1).
    #[arg(long)]
    commodities: usize,
    /// Pricing mode for every generated agent.
    #[arg(long, value_enum)]
    mode: GenMode,
    /// Window radius; "inf" for stationary boxes. Defaults per mode.
    #[arg(long)]
    radius: Option<f64>,
    /// Output scenario path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenMode {
    Lp,
    Regularized,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Sgp,
    Pcgm,
    Fpi,
}

#[derive(Args)]
struct SolveArgs {
    /// Scenario file produced by `gen` or written by hand.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Solution JSON output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-iteration trace CSV output path.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Run per-commodity work on a thread pool (same results, same files).
    #[arg(long)]
    parallel: bool,

    /// Override the sgp/fpi initial step size.
    #[arg(long)]
    theta0: Option<f64>,
    /// Override the sgp/fpi iteration cap.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Override the sgp/fpi stopping gap.
    #[arg(long)]
    target_gap: Option<f64>,
    /// Override the pcgm acceptance fraction.
    #[arg(long)]
    beta: Option<f64>,
    /// Override the pcgm initial stage tolerance.
    #[arg(long)]
    delta0: Option<f64>,
    /// Override the pcgm stage tolerance decay.
    #[arg(long)]
    delta_decay: Option<f64>,
    /// Override the pcgm initial step rung.
    #[arg(long)]
    tau0: Option<f64>,
    /// Override the pcgm step rung decay.
    #[arg(long)]
    tau_decay: Option<f64>,
    /// Override the pcgm final certificate tolerance.
    #[arg(long)]
    delta_min: Option<f64>,
    /// Override the pcgm stage cap.
    #[arg(long)]
    stage_cap: Option<usize>,
    /// Override the pcgm per-stage iteration cap.
    #[arg(long)]
    iter_cap: Option<usize>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// State file: either `solve` output or any JSON with a "state" matrix.
    #[arg(long)]
    state: PathBuf,
    /// Certificate tolerance.
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct PolicyArg {
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct PriceArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    parallel: bool,
}

/// An error bound to the exit code it should produce.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

type CliResult<T> = Result<T, Failure>;

trait WithCode<T> {
    fn code(self, code: u8) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> WithCode<T> for Result<T, E> {
    fn code(self, code: u8) -> CliResult<T> {
        self.map_err(|e| Failure {
            code,
            error: e.into(),
        })
    }
}

fn usage_error<T>(msg: String) -> CliResult<T> {
    Err(Failure {
        code: EXIT_USAGE,
        error: anyhow!(msg),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CliResult<u8> {
    match command {
        Command::Gen(args) => cmd_gen(args),
        Command::Solve(args) => cmd_solve(args),
        Command::Check(args) => cmd_check(args),
        Command::Project(args) => cmd_project(args),
        Command::Price(args) => cmd_price(args),
        Command::Equilibrium1d => cmd_equilibrium1d(),
    }
}

fn cmd_gen(args: GenArgs) -> CliResult<u8> {
    let params = GenParams {
        pricing: match args.mode {
            GenMode::Lp => GenPricing::Lp,
            GenMode::Regularized => GenPricing::Regularized,
        },
        radius: args.radius,
    };
    let scenario =
        random_scenario(args.seed, args.agents, args.commodities, &params).code(EXIT_USAGE)?;
    fs::write(&args.out, scenario.to_json() + "\n")
        .with_context(|| format!("writing {}", args.out.display()))
        .code(EXIT_IO)?;
    eprintln!(
        "wrote {} ({} agents, {} commodities)",
        args.out.display(),
        args.agents,
        args.commodities
    );
    Ok(0)
}

fn cmd_solve(args: SolveArgs) -> CliResult<u8> {
    let scenario = load_scenario(&args.scenario)?;
    let policy = policy_from_flag(args.parallel);

    let mut sgp = scenario.solver.sgp.clone();
    if let Some(v) = args.theta0 {
        sgp.theta0 = v;
    }
    if let Some(v) = args.max_iter {
        sgp.max_iter = v;
    }
    if let Some(v) = args.target_gap {
        sgp.target_gap = v;
    }
    let mut pcgm = scenario.solver.pcgm.clone();
    if let Some(v) = args.beta {
        pcgm.beta = v;
    }
    if let Some(v) = args.delta0 {
        pcgm.delta0 = v;
    }
    if let Some(v) = args.delta_decay {
        pcgm.delta_decay = v;
    }
    if let Some(v) = args.tau0 {
        pcgm.tau0 = v;
    }
    if let Some(v) = args.tau_decay {
        pcgm.tau_decay = v;
    }
    if let Some(v) = args.delta_min {
        pcgm.delta_min = v;
    }
    if let Some(v) = args.stage_cap {
        pcgm.stage_cap = v;
    }
    if let Some(v) = args.iter_cap {
        pcgm.iter_cap = v;
    }
    sgp.validate().map_err(anyhow::Error::msg).code(EXIT_USAGE)?;
    pcgm.validate().map_err(anyhow::Error::msg).code(EXIT_USAGE)?;

    let result = match args.method {
        MethodArg::Sgp => solve_sgp(&scenario, &sgp, None, policy),
        MethodArg::Pcgm => solve_pcgm(&scenario, &pcgm, None, policy),
        MethodArg::Fpi => solve_fpi(&scenario, &sgp, None, policy),
    };
    let trace = result.map_err(|e| Failure {
        code: solver_exit_code(&e),
        error: e.into(),
    })?;

    if let Some(path) = &args.trace {
        fs::write(path, trace.to_csv())
            .with_context(|| format!("writing {}", path.display()))
            .code(EXIT_IO)?;
    }
    let doc = SolutionDoc::from_trace(&trace);
    write_json_file(&args.out, &doc)?;
    eprintln!(
        "{}: {} after {} iterations, gap {:.3e}",
        trace.method.as_str(),
        trace.status.as_str(),
        trace.iterations,
        trace.final_gap
    );
    Ok(if trace.status == SolveStatus::Converged {
        0
    } else {
        EXIT_TOLERANCE
    })
}

fn cmd_check(args: CheckArgs) -> CliResult<u8> {
    let scenario = load_scenario(&args.scenario)?;
    if !(args.eps > 0.0) {
        return usage_error(format!("--eps must be positive, got {}", args.eps));
    }
    let x = load_state(&args.state, scenario.dims())?;
    let report = verify::check_qvi_solution(&x, &scenario, args.eps, policy_from_flag(args.parallel))
        .map_err(|e| Failure {
            code: verify_exit_code(&e),
            error: e.into(),
        })?;
    let doc = ReportDoc::from_report(&report);
    print_json(&doc)?;
    eprintln!(
        "feasibility {:.3e}, gap {:.3e}: {}",
        report.feasibility_violation,
        report.qvi_gap,
        if report.passed { "pass" } else { "FAIL" }
    );
    Ok(if report.passed { 0 } else { EXIT_TOLERANCE })
}

fn cmd_project(args: PolicyArg) -> CliResult<u8> {
    let req: ProjectRequest = read_stdin_doc()?;
    let z = rows_to_matrix(&req.z, "z")?;
    let (m, n) = z.dim();
    let lower = rows_to_matrix(&req.lower, "lower")?;
    let upper = rows_to_matrix(&req.upper, "upper")?;
    if lower.dim() != (m, n) || upper.dim() != (m, n) {
        return usage_error("z, lower and upper must have identical shapes".into());
    }
    let boxes: Vec<CommodityBox> = (0..n)
        .map(|j| CommodityBox::new(lower.column(j).to_vec(), upper.column(j).to_vec()))
        .collect::<Result<_, _>>()
        .code(EXIT_USAGE)?;
    let (y, prices) =
        balance::project_market(&z, &boxes, policy_from_flag(args.parallel)).code(EXIT_USAGE)?;
    print_json(&ProjectResponse {
        format_version: FORMAT_VERSION,
        y: matrix_to_rows(&y),
        lambda: prices.lambda,
    })?;
    Ok(0)
}

fn cmd_price(args: PriceArgs) -> CliResult<u8> {
    let scenario = load_scenario(&args.scenario)?;
    let req: StateRequest = read_stdin_doc()?;
    let x = shaped_state(&req.state, scenario.dims())?;
    let policy = policy_from_flag(args.parallel);
    let polys = pricing::build_polytopes(&scenario).code(EXIT_NUMERIC)?;
    let prices = pricing::price_matrix(&x, &scenario, &polys, policy).code(EXIT_NUMERIC)?;
    let mut values = Vec::with_capacity(scenario.m);
    for (i, agent) in scenario.agents.iter().enumerate() {
        let row: Vec<f64> = x.row(i).to_vec();
        let value = match &agent.pricing {
            PricingMode::LpSetValued => pricing::mu_with(&polys[i], &row).code(EXIT_NUMERIC)?.value,
            PricingMode::Regularized { reference, beta } => {
                pricing::regularized_with(&polys[i], reference, *beta, &row)
                    .code(EXIT_NUMERIC)?
                    .value
            }
        };
        values.push(value);
    }
    print_json(&PriceResponse {
        format_version: FORMAT_VERSION,
        prices: matrix_to_rows(&prices),
        values,
    })?;
    Ok(0)
}

fn cmd_equilibrium1d() -> CliResult<u8> {
    let req: Equilibrium1dRequest = read_stdin_doc()?;
    let spec = AffinePriceSpec {
        traders: req.traders.iter().map(SideDoc::to_side).collect(),
        buyers: req.buyers.iter().map(SideDoc::to_side).collect(),
    };
    let eq = balance::single_commodity_equilibrium(&spec).code(EXIT_USAGE)?;
    print_json(&Equilibrium1dResponse {
        format_version: FORMAT_VERSION,
        x: eq.x,
        y: eq.y,
        lambda: eq.lambda,
        tie: eq.tie,
    })?;
    Ok(0)
}

fn policy_from_flag(parallel: bool) -> ExecPolicy {
    if parallel {
        ExecPolicy::Parallel
    } else {
        ExecPolicy::Sequential
    }
}

/// Malformed JSON is treated as corrupt input (exit 3); well-formed JSON
/// that fails the schema or validation is a usage error (exit 2).
fn load_scenario(path: &Path) -> CliResult<Scenario> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .code(EXIT_IO)?;
    serde_json::from_str::<serde_json::Value>(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .code(EXIT_IO)?;
    Scenario::from_json(&text)
        .with_context(|| format!("loading {}", path.display()))
        .code(EXIT_USAGE)
}

fn load_state(path: &Path, dims: (usize, usize)) -> CliResult<MarketState> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .code(EXIT_IO)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .code(EXIT_IO)?;
    let rows = value
        .get("state")
        .cloned()
        .ok_or_else(|| anyhow!("{} has no \"state\" field", path.display()))
        .code(EXIT_USAGE)?;
    let rows: Vec<Vec<f64>> = serde_json::from_value(rows)
        .context("\"state\" must be a matrix of numbers")
        .code(EXIT_USAGE)?;
    shaped_state(&rows, dims)
}

fn shaped_state(rows: &[Vec<f64>], dims: (usize, usize)) -> CliResult<MarketState> {
    let x = rows_to_matrix(rows, "state")?;
    if x.dim() != dims {
        return usage_error(format!(
            "state is {}x{}, scenario needs {}x{}",
            x.dim().0,
            x.dim().1,
            dims.0,
            dims.1
        ));
    }
    Ok(x)
}

fn rows_to_matrix(rows: &[Vec<f64>], name: &str) -> CliResult<MarketState> {
    if rows.is_empty() {
        return usage_error(format!("{name} must have at least one row"));
    }
    let n = rows[0].len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return usage_error(format!("{name} must be rectangular and non-empty"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    MarketState::from_shape_vec((rows.len(), n), flat)
        .map_err(|e| anyhow!("{name}: {e}"))
        .code(EXIT_USAGE)
}

fn matrix_to_rows(x: &MarketState) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn read_stdin_doc<T: serde::de::DeserializeOwned>() -> CliResult<T> {
    let mut text = String::new();
    std::io::stdin()
        .read_to_string(&mut text)
        .context("reading stdin")
        .code(EXIT_IO)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .context("parsing stdin")
        .code(EXIT_IO)?;
    serde_json::from_value(value)
        .context("request schema")
        .code(EXIT_USAGE)
}

fn print_json<T: Serialize>(doc: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(doc)
        .context("serializing output")
        .code(EXIT_IO)?;
    println!("{text}");
    Ok(())
}

fn write_json_file<T: Serialize>(path: &Path, doc: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(doc)
        .context("serializing output")
        .code(EXIT_IO)?;
    fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .code(EXIT_IO)
}

fn solver_exit_code(e: &SolverError) -> u8 {
    match e {
        SolverError::AssumptionViolation(_) | SolverError::Model(_) => EXIT_USAGE,
        SolverError::Numerical(_) | SolverError::Pricing(_) | SolverError::Balance(_) => {
            EXIT_NUMERIC
        }
    }
}

fn verify_exit_code(e: &VerifyError) -> u8 {
    match e {
        VerifyError::WrongMode(_) | VerifyError::TooLargeForOracle(_) | VerifyError::Model(_) => {
            EXIT_USAGE
        }
        VerifyError::OracleNotConverged(_)
        | VerifyError::Pricing(_)
        | VerifyError::Balance(_) => EXIT_NUMERIC,
    }
}

#[derive(Serialize, Deserialize)]
struct SolutionDoc {
    format_version: u32,
    method: String,
    status: String,
    state: Vec<Vec<f64>>,
    lambda: Vec<f64>,
    lambda_degenerate: Vec<bool>,
    objective: f64,
    gap: f64,
    iterations: usize,
    stages: usize,
    restarts: usize,
    experimental: bool,
}

impl SolutionDoc {
    fn from_trace(trace: &ConvergenceTrace) -> Self {
        SolutionDoc {
            format_version: FORMAT_VERSION,
            method: trace.method.as_str().to_string(),
            status: trace.status.as_str().to_string(),
            state: matrix_to_rows(&trace.final_state),
            lambda: trace.clearing.lambda.clone(),
            lambda_degenerate: trace.lambda_degenerate.clone(),
            objective: trace.final_objective,
            gap: trace.final_gap,
            iterations: trace.iterations,
            stages: trace.stages,
            restarts: trace.restarts.len(),
            experimental: trace.experimental,
        }
    }
}

#[derive(Serialize)]
struct ReportDoc {
    format_version: u32,
    passed: bool,
    feasibility_violation: f64,
    qvi_gap: f64,
    lambda: Vec<f64>,
    lambda_degenerate: Vec<bool>,
    max_partial_violation: f64,
    per_agent_partial_violations: Vec<Vec<f64>>,
}

impl ReportDoc {
    fn from_report(report: &verify::CertificateReport) -> Self {
        ReportDoc {
            format_version: FORMAT_VERSION,
            passed: report.passed,
            feasibility_violation: report.feasibility_violation,
            qvi_gap: report.qvi_gap,
            lambda: report.lambda.lambda.clone(),
            lambda_degenerate: report.lambda_degenerate.clone(),
            max_partial_violation: report
                .per_agent_partial_violations
                .iter()
                .fold(0.0f64, |acc, &v| acc.max(v)),
            per_agent_partial_violations: matrix_to_rows(&report.per_agent_partial_violations),
        }
    }
}

fn default_format_version() -> u32 {
    FORMAT_VERSION
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectRequest {
    #[serde(default = "default_format_version")]
    #[allow(dead_code)]
    format_version: u32,
    z: Vec<Vec<f64>>,
    lower: Vec<Vec<f64>>,
    upper: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct ProjectResponse {
    format_version: u32,
    y: Vec<Vec<f64>>,
    lambda: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StateRequest {
    #[serde(default = "default_format_version")]
    #[allow(dead_code)]
    format_version: u32,
    state: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct PriceResponse {
    format_version: u32,
    prices: Vec<Vec<f64>>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct SideDoc {
    intercept: f64,
    #[serde(default)]
    slope: f64,
    lower: f64,
    upper: f64,
}

impl SideDoc {
    fn to_side(&self) -> AffineSide {
        AffineSide::new(self.intercept, self.slope, self.lower, self.upper)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Equilibrium1dRequest {
    #[serde(default = "default_format_version")]
    #[allow(dead_code)]
    format_version: u32,
    traders: Vec<SideDoc>,
    buyers: Vec<SideDoc>,
}

#[derive(Serialize)]
struct Equilibrium1dResponse {
    format_version: u32,
    x: Vec<f64>,
    y: Vec<f64>,
    lambda: f64,
    tie: bool,
}
