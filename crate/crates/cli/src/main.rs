use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use adaprelora::harness::{run_grid, write_outputs, ExperimentConfig, OptimizerSummary};
use adaprelora::verify::{run_properties, Intensity, VerifyOptions};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "adaprelora", version, about = "Balance-optimal preconditioned low-rank adaptation")]
struct Cli {
    /// Output directory for run records.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,

    /// Worker threads (defaults to available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the optimizer x learning-rate x seed grid described by a config file.
    Run { config: PathBuf },
    /// Run the property suites.
    Verify {
        /// 200 seeds per property instead of 20.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = VerifyOptions::default().master_seed)]
        seed: u64,
    },
}

fn print_summary(summaries: &[OptimizerSummary], threshold: f64) {
    println!(
        "{:<20} {:>10} {:>14} {:>14} {:>14} {:>9}",
        "optimizer", "best_lr", "median_steps", "final_loss", "final_rel", "diverged"
    );
    for s in summaries {
        let steps = s.median_steps_to_threshold.map_or_else(|| "NA".to_string(), |v| v.to_string());
        println!(
            "{:<20} {:>10} {:>14} {:>14.4e} {:>14.4e} {:>9}",
            s.optimizer.name(),
            s.best_learning_rate,
            steps,
            s.median_final_loss,
            s.median_final_relative_loss,
            s.diverged_cells
        );
    }
    println!("steps counted to relative loss <= {threshold:e}");
}

fn run(config: &Path, out: &Path, threads: usize) -> ExitCode {
    let cfg = match ExperimentConfig::from_path(config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let outcome = match run_grid(&cfg, threads) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    };
    match write_outputs(&cfg, &outcome, out) {
        Ok(files) => log::info!("wrote {} files to {}", files.len(), out.display()),
        Err(e) => {
            eprintln!("error: cannot write results to {}: {e}", out.display());
            return ExitCode::from(EXIT_FAILURE);
        }
    }
    print_summary(&outcome.summaries, cfg.run.threshold);
    ExitCode::SUCCESS
}

fn verify(full: bool, seed: u64) -> ExitCode {
    let intensity = if full { Intensity::Full } else { Intensity::Quick };
    let report = run_properties(&VerifyOptions { intensity, master_seed: seed, ..VerifyOptions::default() });
    println!("{report}");
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        let names: Vec<_> = report.failures().iter().map(|p| p.name).collect();
        eprintln!("verification failed: {}", names.join(", "));
        ExitCode::from(EXIT_FAILURE)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    match cli.command {
        Command::Run { config } => run(&config, &cli.out, threads),
        Command::Verify { full, seed } => verify(full, seed),
    }
}
