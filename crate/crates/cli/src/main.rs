use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use srsel_core::datagen::{make_datasets, DataConfig};
use srsel_core::{run, Benchmark, CriterionId, RunConfig};

/// Model-selection experiments for symbolic regression: pools of perturbed
/// expressions ranked by MSE_train, AIC, AICc, BIC, MDL and Err_in.
#[derive(Parser, Debug)]
#[command(name = "srsel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the full pipeline and write score tables, metrics and summaries.
    Run(RunArgs),
    /// Write the train and test datasets of benchmarks as CSV.
    Datasets(DatasetArgs),
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// TOML file with RunConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated benchmark ids (f1..f7).
    #[arg(long, value_delimiter = ',')]
    benchmarks: Option<Vec<Benchmark>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Accepted mutants per pool (the pool also holds the ground truth).
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    noise_scale: Option<f64>,
    /// Multistart count per fit.
    #[arg(long)]
    restarts: Option<usize>,
    /// Bootstrap replicates for Err_in.
    #[arg(long)]
    bootstrap_b: Option<usize>,
    #[arg(long)]
    with_err_in: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated criteria: mse_train, aic, aicc, bic, mdl, err_in.
    #[arg(long, value_delimiter = ',')]
    criteria: Option<Vec<CriterionId>>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    max_attempts: Option<usize>,
    /// Concurrent pool attempts (0 = one per core); results do not change.
    #[arg(long)]
    workers: Option<usize>,
    /// Record wall-clock timings (output is then no longer byte-reproducible).
    #[arg(long)]
    timings: bool,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct DatasetArgs {
    #[arg(long, value_delimiter = ',', default_value = "f1,f2,f3,f4,f5,f6,f7")]
    benchmarks: Vec<Benchmark>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    n_train: usize,
    #[arg(long, default_value_t = 10_000)]
    n_test: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_scale: f64,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, String> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn build_config(args: &RunArgs) -> Result<RunConfig, String> {
    let mut c = load_config(args.config.as_deref())?;
    if let Some(v) = &args.benchmarks {
        c.benchmarks = v.clone();
    }
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = args.pool_size {
        c.pool_target = v;
    }
    if let Some(v) = args.noise_scale {
        c.noise_scale = v;
    }
    if let Some(v) = args.restarts {
        c.restarts = v;
    }
    if let Some(v) = args.bootstrap_b {
        c.bootstrap_b = v;
    }
    if let Some(v) = &args.out {
        c.out = v.clone();
    }
    if let Some(v) = &args.criteria {
        c.criteria = v.clone();
    }
    if let Some(v) = args.n_train {
        c.n_train = v;
    }
    if let Some(v) = args.n_test {
        c.n_test = v;
    }
    if let Some(v) = args.max_attempts {
        c.max_attempts = v;
    }
    if let Some(v) = args.workers {
        c.workers = v;
    }
    c.enable_err_in |= args.with_err_in;
    c.timings |= args.timings;
    Ok(c)
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let config = match build_config(&args).and_then(|c| c.validate().map(|_| c).map_err(|e| e.to_string())) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("srsel: {e}");
            return ExitCode::from(2);
        }
    };
    let quiet = args.quiet;
    let mut progress = |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    };
    match run(&config, &mut progress) {
        Ok(report) => {
            for (b, r) in &report.results {
                if let Err(e) = r {
                    eprintln!("srsel: {b} failed: {e}");
                }
            }
            if !quiet {
                for row in &report.summary {
                    let hits: Vec<String> = row.hits.iter().map(|h| h.map_or("-".into(), |h| h.to_string())).collect();
                    let mean = row.stats.map_or("-".into(), |s| format!("{:.2}", s.mean));
                    eprintln!("{:<10} hits [{}] mean {mean}", row.criterion.name(), hits.join(" "));
                }
                eprintln!("wrote {}", config.out.display());
            }
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e @ srsel_core::experiment::RunError::Config(_)) => {
            eprintln!("srsel: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("srsel: {e}");
            ExitCode::from(1)
        }
    }
}

fn cmd_datasets(args: DatasetArgs) -> Result<(), String> {
    fs::create_dir_all(&args.out).map_err(|e| format!("{}: {e}", args.out.display()))?;
    let cfg = DataConfig { n_train: args.n_train, n_test: args.n_test, noise_scale: args.noise_scale };
    for b in args.benchmarks {
        let (train, test) = make_datasets(&b.spec(), args.seed, &cfg).map_err(|e| format!("{b}: {e}"))?;
        for (name, data) in [("train", &train), ("test", &test)] {
            let path = args.out.join(format!("{}_{name}.csv", b.id()));
            let file = File::create(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            data.write_csv(BufWriter::new(file)).map_err(|e| format!("{}: {e}", path.display()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Datasets(args) => match cmd_datasets(args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("srsel: {e}");
                ExitCode::from(1)
            }
        },
    }
}
