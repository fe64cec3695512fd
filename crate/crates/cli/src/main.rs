use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::warn;

use vbfn_core::config::{parse_config, parse_override, RunConfig};
use vbfn_core::flow::Channel;
use vbfn_core::par::stream_rng;
use vbfn_core::pipeline::{
    echo_config, effective_schedule, inspect_precision, sample_to_dir, train_to_dir, Checkpoint,
};
use vbfn_core::solver::{solve_spd, standard_normal, SolverConfig, SolverMethod};
use vbfn_core::structure::{
    build_node_dependency_complete, build_obs_precision, build_prior_precision, FusedOperator, LinearOperator,
    MaskOperator,
};
use vbfn_core::verify::{run_verify, Fault};
use vbfn_core::Error;

const SEED_ENV: &str = "VBFN_SEED";

#[derive(Parser)]
#[command(name = "vbfn", version, about = "Structured-precision Bayesian flow networks for graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a predictor and write checkpoints.
    Train(TrainArgs),
    /// Generate graphs from a checkpoint.
    Sample(SampleArgs),
    /// Run the oracle-backed property suites.
    Verify(VerifyArgs),
    /// Time CG against Cholesky on builder systems and print CSV.
    Bench(BenchArgs),
    /// Print operator statistics for a config as JSON.
    InspectPrecision(InspectArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file. Missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set schedule.T=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Continue from this checkpoint until `train.steps` updates in total.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    count: usize,
    /// Number of fusion steps; defaults to the checkpoint's `schedule.T`.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "runs/sample")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run only suites whose name contains this text.
    #[arg(long)]
    filter: Option<String>,
    /// Inject a deliberate defect (`laplacian-sign`).
    #[arg(long)]
    fault: Option<String>,
    /// Also write the report as JSON into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
    dims: Vec<usize>,
    /// Solves per dimension and method.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Echo the resolved config into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Echo the resolved config into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failed run, tagged with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.chain().find_map(|e| e.downcast_ref::<Error>()) {
            Some(Error::Config(_) | Error::Parse { .. }) => 2,
            Some(Error::Io { .. }) => 4,
            _ => 1,
        };
        Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
        )),
        Err(_) => Ok(None),
    }
}

/// Config file, then `--set` overrides, then the seed environment variable,
/// then an explicit `--seed`.
fn resolve_config(args: &ConfigArgs, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let overrides = args
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<vbfn_core::Result<Vec<_>>>()?;
    let mut cfg = match &args.config {
        Some(path) => parse_config(path, &overrides)?,
        None => RunConfig::from_pairs(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?,
    };
    if let Some(s) = seed.or(env_seed()?) {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let cfg = resolve_config(&args.config, args.seed)?;
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let summary = train_to_dir(&cfg, &args.out, resume.as_ref())?;
    println!("{}", serde_json::to_string_pretty(&summary).context("serializing summary")?);
    Ok(())
}

fn sample(args: SampleArgs) -> Result<(), Failure> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(ck.seed),
    };
    let (_, metrics) = sample_to_dir(&ck, args.count, seed, args.steps, &args.out)?;
    println!("{}", serde_json::to_string_pretty(&metrics).context("serializing metrics")?);
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<(), Failure> {
    let fault: Fault = args.fault.as_deref().unwrap_or("none").parse()?;
    let start = Instant::now();
    let checks = run_verify(args.filter.as_deref(), fault, |c| println!("{c}"))?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!(
        "{} checks, {failed} failed, {:.1}s",
        checks.len(),
        start.elapsed().as_secs_f64()
    );
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        let path = dir.join("verify.json");
        let text = serde_json::to_string_pretty(&checks).context("serializing report")?;
        fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    }
    if failed > 0 {
        return Err(Failure {
            code: 3,
            error: anyhow::anyhow!("{failed} verification checks failed"),
        });
    }
    Ok(())
}

/// Node-complete systems of each dimension at the middle of the schedule.
fn bench(args: BenchArgs) -> Result<(), Failure> {
    let cfg = resolve_config(&args.config, None)?;
    if let Some(dir) = &args.out {
        echo_config(dir, &cfg)?;
    }
    if args.dims.is_empty() || args.dims.contains(&0) {
        return Err(Error::Config("--dims needs positive dimensions".into()).into());
    }
    let p = &cfg.precision;
    let beta = effective_schedule(&cfg).beta_at(Channel::Node, 0.5);
    println!("D,method,iters,seconds,residual");
    for &dim in &args.dims {
        let dep = build_node_dependency_complete(dim, 1, p.lambda_x)?;
        let prior = build_prior_precision(&dep, &MaskOperator::full(dim), p.eps)?;
        let obs = build_obs_precision(&prior, p.obs_mode, p.eps_obs)?;
        let op = FusedOperator::new(&prior, &obs, beta)?;
        let b = standard_normal(dim, &mut stream_rng(cfg.seed, dim as u64));
        let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
        for method in [SolverMethod::Cg, SolverMethod::Cholesky] {
            let solver = SolverConfig { method, ..cfg.solver };
            if method == SolverMethod::Cholesky && dim > solver.dense_cap {
                warn!("skipping cholesky at D = {dim}: above solver.dense_cap");
                continue;
            }
            let start = Instant::now();
            let mut last = None;
            for _ in 0..args.repeats.max(1) {
                last = Some(solve_spd(&op, &b, &solver)?);
            }
            let seconds = start.elapsed().as_secs_f64() / args.repeats.max(1) as f64;
            let (x, report) = last.expect("at least one repeat");
            let mut px = vec![0.0; dim];
            op.apply(&x, &mut px);
            let r: f64 = px.iter().zip(&b).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
            println!("{dim},{method},{},{seconds:.6e},{:.3e}", report.iterations, r / b_norm);
        }
    }
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<(), Failure> {
    let cfg = resolve_config(&args.config, None)?;
    if let Some(dir) = &args.out {
        echo_config(dir, &cfg)?;
    }
    let report = inspect_precision(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&report).context("serializing report")?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Verify(a) => verify(a),
        Command::Bench(a) => bench(a),
        Command::InspectPrecision(a) => inspect(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
