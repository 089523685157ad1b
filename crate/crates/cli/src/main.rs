use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ddvcg::config::ExperimentConfig;
use ddvcg::experiment::{execute, Provenance, Verb};
use ddvcg::scenarios;
use ddvcg::Error;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "ddvcg", version, about = "Audit data-driven VCG mechanisms on finite grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Audit the configured mechanism and write regret, sweep and summary files.
    Run(Common),
    /// Audit the configured estimator family over a list of sample sizes.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `a..b` for a, 4a, 16a, … up to b, or a comma-separated list.
        #[arg(long, value_parser = parse_m)]
        m: Option<SampleSizes>,
    },
    /// Evaluate the impossibility certificate from the config's `certificate` section.
    CertifyImpossibility(Common),
    /// Print the registered scenario names.
    ListScenarios,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed and Monte Carlo seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the audit; outputs do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; defaults to the config's `out`, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
struct SampleSizes(Vec<u64>);

fn parse_m(s: &str) -> Result<SampleSizes, String> {
    expand_m(s).map(SampleSizes)
}

fn expand_m(s: &str) -> Result<Vec<u64>, String> {
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("bad sample size `{t}`: {e}"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        if a == 0 || b < a {
            return Err(format!("empty range `{s}`"));
        }
        let mut out = vec![a];
        while let Some(next) = out.last().and_then(|m| m.checked_mul(4)).filter(|&m| m <= b) {
            out.push(next);
        }
        Ok(out)
    } else {
        s.split(',').map(num).collect()
    }
}

enum Failure {
    Core(Error),
    Config(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 1,
            Failure::Core(e) => match e {
                Error::BudgetExceeded { .. } => 3,
                Error::Config(_)
                | Error::InvalidInstance(_)
                | Error::InvalidScenarioParameters(_)
                | Error::UnsupportedScenario(_)
                | Error::EstimatorUnavailable(_)
                | Error::MissingLipschitzConstant(_)
                | Error::NoClosedForm(_)
                | Error::EmptyOutcomeSpace
                | Error::ZeroReferenceMass(_)
                | Error::NonPositiveAlpha(_)
                | Error::PreconditionFails(_) => 2,
                _ => 4,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Config(m) | Failure::Io(m) => m.clone(),
        }
    }
}

fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("ddvcg".to_string(), ddvcg::VERSION.to_string()),
        ("ddvcg-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
    ])
}

fn run(common: &Common, verb: Verb) -> Result<(), Failure> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", common.config.display())))?;
    let mut cfg = ExperimentConfig::parse(&text).map_err(Failure::Core)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    let out = common.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let prov = Provenance { config_sha256: format!("{:x}", Sha256::digest(text.as_bytes())), versions: versions() };

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = common.workers {
        if w == 0 {
            return Err(Failure::Config("--workers must be positive".into()));
        }
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| Failure::Io(format!("cannot start workers: {e}")))?;
    let outputs = pool.install(|| execute(&cfg, &verb, &prov)).map_err(Failure::Core)?;
    outputs
        .write(&out)
        .map_err(|e| Failure::Io(format!("cannot write to {}: {e}", out.display())))?;

    let headline = match (&outputs.summary["regret"], &outputs.summary["sweep"], &outputs.summary["certificate"]) {
        (r, _, _) if !r.is_null() => format!("epsilon = {} (within tolerance: {})", r["epsilon"], r["within_tolerance"]),
        (_, s, _) if !s.is_null() => format!("slope = {}", s["slope"]),
        (_, _, c) => format!("certificate issued: {}, gap = {}", c["issued"], c["gap"]),
    };
    println!("{}: {headline}; wrote {}", cfg.scenario_name(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => run(c, Verb::Run),
        Command::Sweep { common, m } => run(common, Verb::Sweep(m.clone().map(|m| m.0))),
        Command::CertifyImpossibility(c) => run(c, Verb::CertifyImpossibility),
        Command::ListScenarios => {
            for (name, about) in scenarios::list() {
                println!("{name:<32}{about}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
