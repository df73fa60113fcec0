//! `pipl`: runs one experiment from a TOML configuration and writes its
//! artifacts plus a `manifest.json` into the output directory.

mod config;
mod experiments;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use serde::Serialize;
use serde_json::{json, Value};

use config::{Config, Kind};
use output::{Check, Outputs};
use pipl_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_FAILURE: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "pipl", version, about = "Semilinear parabolic inverse-problem lab")]
struct Args {
    /// Experiment to run.
    #[arg(value_enum)]
    kind: Kind,
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Exit with status 4 when any check fails.
    #[arg(long)]
    check: bool,
    /// Worker threads for parallel sweeps.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory; overrides `out` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    body: Value,
}

impl Failure {
    fn config(message: String, offset: Option<usize>) -> Self {
        Self {
            code: EXIT_CONFIG,
            body: json!({ "error": "config", "message": message, "offset": offset }),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind, offset) = match &e {
            Error::Parse { offset, .. } => (EXIT_CONFIG, "parse", Some(*offset)),
            Error::InvalidInput(_) => (EXIT_CONFIG, "invalid_input", None),
            Error::CheckFailed(_) => (EXIT_CHECK, "check_failed", None),
            Error::Eval { .. } => (EXIT_FAILURE, "eval", None),
            Error::Breakdown { .. } => (EXIT_FAILURE, "breakdown", None),
            Error::NotConverged { .. } => (EXIT_FAILURE, "not_converged", None),
            Error::NonFinite { .. } => (EXIT_FAILURE, "non_finite", None),
            Error::Io(_) => (EXIT_FAILURE, "io", None),
            Error::Json(_) => (EXIT_FAILURE, "json", None),
        };
        Self {
            code,
            body: json!({ "error": kind, "message": e.to_string(), "offset": offset }),
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    kind: &'static str,
    seed: u64,
    check_mode: bool,
    jobs: Option<usize>,
    config: &'a Config,
    grid_digest: String,
    wall_time_seconds: f64,
    outputs: Vec<String>,
    summary: Value,
    checks: &'a [Check],
    passed: bool,
}

fn load(args: &Args) -> Result<(Config, u64), Failure> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", args.config.display()), None))?;
    let mut cfg = Config::parse(&text).map_err(|e| Failure::config(e.message().to_string(), e.span().map(|s| s.start)))?;
    cfg.resolve(args.kind)?;
    if let Ok(s) = std::env::var("PIPL_SEED") {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| Failure::config(format!("PIPL_SEED `{s}` is not an unsigned integer"), None))?;
    }
    let seed = cfg.seed;
    Ok((cfg, seed))
}

fn execute(args: &Args) -> Result<bool, Failure> {
    let (cfg, seed) = load(args)?;
    if let Some(n) = args.jobs {
        if n == 0 {
            return Err(Failure::config("--jobs must be positive".into(), None));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(e.to_string(), None))?;
    }
    let dir = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(args.kind.name()));
    let mut out = Outputs::create(&dir)?;
    let grid = cfg.grid.build()?;

    let start = Instant::now();
    let report = experiments::run(args.kind, &cfg, seed, &mut out)?;
    let wall = start.elapsed().as_secs_f64();

    let passed = report.checks.iter().all(|c| c.passed);
    let mut outputs = out.files();
    outputs.push("manifest.json".into());
    outputs.sort();
    let manifest = Manifest {
        tool: "pipl",
        version: env!("CARGO_PKG_VERSION"),
        kind: args.kind.name(),
        seed,
        check_mode: args.check,
        jobs: args.jobs,
        config: &cfg,
        grid_digest: grid.digest(),
        wall_time_seconds: wall,
        outputs,
        summary: report.summary,
        checks: &report.checks,
        passed,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
    std::fs::write(dir.join("manifest.json"), text + "\n").map_err(Error::from)?;

    for c in &report.checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {}: {:e}", c.name, c.value);
    }
    println!("wrote {}", dir.display());
    Ok(passed)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(passed) if passed || !args.check => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(EXIT_CHECK),
        Err(f) => {
            eprintln!("{}", f.body);
            ExitCode::from(f.code)
        }
    }
}
