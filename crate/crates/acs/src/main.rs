use std::path::PathBuf;
use std::process::ExitCode;

use acs::bench::{self, Arm, Execution, ExperimentGrid, Format, Method, RunOptions};
use acs::io::{self, CsvSchema, PropertySource, SelectionReport};
use acs::server::{self, ServiceConfig};
use acs_core::conformal::reserve_size;
use acs_core::data::PropertySet;
use anyhow::Context;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "acs", version, about = "Adaptive conformal selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo grid and write one metric row per cell and arm.
    Simulate(SimulateArgs),
    /// Select from a CSV of labeled and unlabeled rows.
    Select(SelectArgs),
    /// Serve the /v1 session API.
    Serve(ServeArgs),
    /// Exact check of the hypergeometric ratio bound.
    Hypergeom {
        #[arg(long, default_value_t = 15)]
        m_max: usize,
        #[arg(long, default_value_t = 15)]
        n_max: usize,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: acs_core::policies::PolicyError| e.to_string())
}

fn parse_property(s: &str) -> Result<PropertySet, String> {
    s.parse().map_err(|e: acs_core::data::DataError| e.to_string())
}

#[derive(Args)]
struct SimulateArgs {
    /// Grid file (TOML); replaces the single-cell flags.
    #[arg(long, conflicts_with_all = ["setting", "n", "m", "sigma", "policy", "reps", "alpha"])]
    grid: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    setting: u8,
    /// Half the labeled pool; ACS reserves `n` for training.
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    m: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    /// Policy or `cs:<learner>` / `cs_screen:<learner>`; repeat for more arms.
    #[arg(long, value_parser = parse_method, default_value = "refit:forest")]
    policy: Vec<Method>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    reveal_labels: bool,
    #[arg(long)]
    parallel: bool,
    /// Writes every replication's selection result here.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    alpha: f64,
    #[arg(long, value_parser = parse_method, default_value = "refit:forest")]
    policy: Method,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training reserve size for ACS.
    #[arg(long, conflicts_with = "train_frac")]
    k: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    train_frac: f64,
    /// Property set for every row, e.g. "(-inf,0]"; otherwise `c_lo`/`c_hi`
    /// columns are used when present.
    #[arg(long, value_parser = parse_property)]
    property: Option<PropertySet>,
    #[arg(long, default_value = "y")]
    outcome: String,
    #[arg(long)]
    fingerprint: Option<String>,
    #[arg(long)]
    id: Option<String>,
    /// Replace property sets by `(-inf, c_g]`, `c_g` the per-group q-quantile.
    #[arg(long, requires = "group")]
    quantile: Option<f64>,
    #[arg(long)]
    group: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Address to bind; overrides ACS_BIND and the config file.
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let mut grid = match &args.grid {
        Some(path) => ExperimentGrid::load(path)?,
        None => {
            let arms = args.policy.iter().map(|m| Arm { name: m.to_string(), method: m.clone() }).collect();
            ExperimentGrid::single(args.setting, args.n, args.m, args.sigma, args.alpha, args.reps, arms)
        }
    };
    if args.reveal_labels {
        grid.reveal_labels = true;
    }
    let options = RunOptions {
        execution: if args.parallel { Execution::Parallel } else { Execution::Serial },
        trace_dir: args.trace_dir,
    };
    let rows = bench::run_grid(&grid, args.seed, &options)?;
    bench::emit(&rows, &args.out, Format::for_path(&args.out)).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn select(args: SelectArgs) -> anyhow::Result<()> {
    let mut schema = CsvSchema {
        outcome: args.outcome,
        fingerprint: args.fingerprint,
        group: args.group,
        id: args.id,
        ..CsvSchema::default()
    };
    schema.property = match args.property {
        Some(p) => PropertySource::Global(p),
        None => {
            let header = std::fs::read_to_string(&args.data)
                .with_context(|| format!("reading {}", args.data.display()))?
                .lines()
                .next()
                .unwrap_or_default()
                .to_string();
            if header.split(',').any(|c| c.trim() == "c_lo") {
                PropertySource::Columns { lo: "c_lo".into(), hi: "c_hi".into() }
            } else {
                PropertySource::Global(PropertySet::at_most(0.0))
            }
        }
    };
    let ingested = io::ingest_csv(&args.data, &schema).with_context(|| format!("reading {}", args.data.display()))?;
    let mut dataset = ingested.dataset;
    if let Some(q) = args.quantile {
        dataset = dataset.quantile_thresholds(q)?;
    }
    let k = match args.k {
        Some(k) => k,
        None => reserve_size(dataset.n(), args.train_frac)?,
    };
    let result = bench::run_method(&args.policy, &dataset, k, args.train_frac, args.alpha, args.seed, args.seed, false)?;
    let report = SelectionReport::new(args.policy.to_string(), result, &ingested.test_rows);
    io::write_json(&report, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!("selected {} of {} test rows", report.result.selected.len(), dataset.m());
    Ok(())
}

fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let mut config = match &args.config {
        Some(path) => ServiceConfig::load(path)?,
        None => ServiceConfig::default(),
    };
    if let Ok(bind) = std::env::var("ACS_BIND") {
        config.bind = bind;
    }
    if let Some(bind) = args.bind {
        config.bind = bind;
    }
    tokio::runtime::Builder::new_multi_thread().enable_all().build()?.block_on(server::serve(config))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Select(a) => select(a),
        Command::Serve(a) => serve(a),
        Command::Hypergeom { m_max, n_max } => {
            let report = bench::hypergeom_bound_check(m_max, n_max);
            println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
            if report.violations > 0 {
                Err(anyhow::anyhow!("{} violations", report.violations))
            } else {
                Ok(())
            }
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
