use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use selection_bounds::Exec;

use selbounds::analysis::{run_analysis, run_tune_split};
use selbounds::config::AnalysisConfig;
use selbounds::data::load_csv;
use selbounds::simulate::{load_spec, run_simulation};
use selbounds::CliError;

#[derive(Parser)]
#[command(name = "selbounds", version, about = "Bounds, confidence intervals and tests under bounded selection weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for resampling, multi-starts and replicates (1 = sequential).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    /// Analysis configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Input CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Output directory; the report goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Rounds every used column to a multiple of this step before collapsing.
    #[arg(long, value_name = "STEP")]
    bin_continuous: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Identified, constrained and parametric intervals for one dataset.
    Analyze(DataArgs),
    /// Width of the constrained CI across splits of the significance budget.
    TuneSplit(DataArgs),
    /// Runs a simulation spec and writes its CSV tables and manifest.
    Simulate {
        /// Experiment spec (TOML).
        #[arg(long, alias = "spec")]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(args: &DataArgs) -> Result<(AnalysisConfig, selection_bounds::ObservationSet), CliError> {
    let mut cfg = AnalysisConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.bin_continuous.is_some() {
        cfg.bin_continuous = args.bin_continuous;
        cfg.validate()?;
    }
    let obs = load_csv(&args.data, &cfg.columns())?;
    Ok((cfg, obs))
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let exec = match cli.threads {
        Some(0) => return Err(CliError::config("--threads", "must be positive")),
        Some(1) => Exec::Sequential,
        Some(t) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build_global()
                .map_err(|e| CliError::config("--threads", e.to_string()))?;
            Exec::Parallel
        }
        None => Exec::default(),
    };
    match cli.command {
        Command::Analyze(args) => {
            let (cfg, obs) = load(&args)?;
            let report = run_analysis(&cfg, obs, exec)?;
            match &args.out {
                Some(dir) => {
                    write_file(dir, "report.txt", &report.to_text())?;
                    write_file(dir, "report.json", &report.to_json())?;
                }
                None => print!("{}", report.to_text()),
            }
        }
        Command::TuneSplit(args) => {
            let (cfg, obs) = load(&args)?;
            let (table, best) = run_tune_split(&cfg, obs, exec)?;
            let a1 = table.numbers("alpha1")[best];
            let a2 = table.numbers("alpha2")[best];
            match &args.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    table.write_csv(&dir.join("splits.csv")).map_err(|e| CliError::Io(e.to_string()))?;
                }
                None => {
                    println!("{}", table.header.join(","));
                    for row in &table.rows {
                        println!("{}", row.iter().map(|v| v.render()).collect::<Vec<_>>().join(","));
                    }
                }
            }
            eprintln!("narrowest CI at alpha1 = {a1}, alpha2 = {a2}");
        }
        Command::Simulate { config, out, seed } => {
            let mut spec = load_spec(&config)?;
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            for p in run_simulation(&spec, &out, exec)? {
                log::info!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
