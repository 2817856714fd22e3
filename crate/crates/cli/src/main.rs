use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lagnmpc::error::Error;
use lagnmpc_cli::commands;
use lagnmpc_cli::config::RunConfig;

/// Laguerre NMPC toolchain: dataset generation, network training, control-law
/// maps, closed-loop simulation, and fixed-point deployment.
#[derive(Parser)]
#[command(name = "lagnmpc", version, about)]
struct Cli {
    /// Path to the TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the constraint set and solve (Lag)NMPC to build the dataset.
    GenData,
    /// Train a network on a previously generated dataset.
    Train {
        /// Dataset file; defaults to <output_dir>/dataset.csv.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate the configured controller over the state grid.
    Map {
        /// Weight file for network controllers; defaults to
        /// <output_dir>/weights.json.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Simulate the configured controller from the configured initial states.
    Simulate {
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Fold, quantize, and export the fixed-point weight file.
    Quantize {
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Benchmark fixed-point inference latency.
    Bench {
        /// Quantized weight file; defaults to <output_dir>/weights.q.json.
        #[arg(long)]
        quantized: Option<PathBuf>,
    },
    /// Run the built-in verification checks.
    Verify,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID_CONFIG: u8 = 2;

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_path(cfg: &RunConfig, given: &Option<PathBuf>, name: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.output_dir.join(name))
}

fn run(cli: &Cli, cfg: &RunConfig) -> Result<(), Error> {
    match &cli.command {
        Command::GenData => {
            let s = commands::cmd_gen_data(cfg)?;
            println!("requested N_d = {}", s.requested);
            println!("states sampled = {}", s.sampled);
            println!("retained N_s = {}", s.retained);
            println!("infeasible discarded = {}", s.infeasible);
            println!("wrote {}", s.path.display());
        }
        Command::Train { dataset } => {
            let ds = default_path(cfg, dataset, "dataset.csv");
            let (weights, history) = commands::cmd_train(cfg, &ds)?;
            println!("wrote {}", weights.display());
            println!("wrote {}", history.display());
        }
        Command::Map { weights } => {
            let w = default_path(cfg, weights, "weights.json");
            let arg = w.exists().then_some(w.as_path());
            let (csv, svg) = commands::cmd_map(cfg, arg)?;
            println!("wrote {}", csv.display());
            println!("wrote {}", svg.display());
        }
        Command::Simulate { weights } => {
            let w = default_path(cfg, weights, "weights.json");
            let arg = w.exists().then_some(w.as_path());
            for path in commands::cmd_simulate(cfg, arg)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Quantize { weights } => {
            let w = default_path(cfg, weights, "weights.json");
            let (qpath, report) = commands::cmd_quantize(cfg, &w)?;
            println!("wrote {}", qpath.display());
            println!("wrote {}", report.display());
        }
        Command::Bench { quantized } => {
            let q = default_path(cfg, quantized, "weights.q.json");
            let path = commands::cmd_bench(cfg, &q)?;
            println!("wrote {}", path.display());
            print!("{}", std::fs::read_to_string(&path)?);
        }
        Command::Verify => {
            let checks = commands::cmd_verify(cfg)?;
            let mut all_ok = true;
            for (name, ok) in &checks {
                println!("{} {}", if *ok { "PASS" } else { "FAIL" }, name);
                all_ok &= ok;
            }
            if !all_ok {
                return Err(Error::InvalidParameter(
                    "verification checks failed".into(),
                ));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_INVALID_CONFIG);
        }
    };
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
