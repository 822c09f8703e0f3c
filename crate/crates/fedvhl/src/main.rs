use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedvhl::config::parse_config;
use fedvhl::runner::{export_features_at_round, run_experiment, run_theory_checks};
use fedvhl::Result;

#[derive(Parser)]
#[command(name = "fedvhl", version, about = "Deterministic federated-learning simulator with virtual-homogeneity training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment and write the metrics csv.
    Run {
        config: PathBuf,
        /// Worker threads; the output bytes do not depend on this.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Run the randomized margin/transport verification suite.
    TheoryCheck {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the first seed to a round, then dump per-sample features.
    ExportFeatures {
        config: PathBuf,
        /// Rounds to train before the dump.
        #[arg(long)]
        round: usize,
        /// Feature layer, 1-based up to the deepest pre-classifier layer.
        #[arg(long)]
        layer: usize,
        /// Destination file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<fedvhl::config::ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

/// Status line on stdout. Write failures (e.g. a closed pipe) are ignored;
/// the real outputs are the files the commands write.
fn say(args: std::fmt::Arguments) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_fmt(args).and_then(|()| out.write_all(b"\n"));
}

macro_rules! say {
    ($($arg:tt)*) => { say(format_args!($($arg)*)) };
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Run { config, workers } => {
            let config = load_config(&config)?;
            let summary = run_experiment(&config, workers)?;
            for s in &summary.seeds {
                match s.target_round {
                    Some(r) => say!(
                        "seed {}: best accuracy {:.4} at round {}, target reached at round {r}",
                        s.seed, s.best_accuracy, s.best_round
                    ),
                    None => say!(
                        "seed {}: best accuracy {:.4} at round {}",
                        s.seed, s.best_accuracy, s.best_round
                    ),
                }
            }
            say!(
                "mean best accuracy {:.4} over {} seed(s)",
                summary.mean_best_accuracy,
                summary.seeds.len()
            );
            say!("metrics written to {}", summary.metrics_path.display());
        }
        Command::TheoryCheck { instances, seed } => {
            let report = run_theory_checks(instances, seed, Path::new("."))?;
            say!(
                "{} instance(s) hold; min slack {:.3e}; max margin gap {:.3e}",
                report.instances, report.min_slack, report.max_lhs
            );
        }
        Command::ExportFeatures {
            config,
            round,
            layer,
            out,
        } => {
            let config = load_config(&config)?;
            match out {
                Some(path) => {
                    let mut buf = Vec::new();
                    let written = export_features_at_round(&config, round, layer, &mut buf)?;
                    fs::write(&path, buf)?;
                    say!("{written} feature row(s) written to {}", path.display());
                }
                None => {
                    let stdout = std::io::stdout();
                    let mut lock = stdout.lock();
                    export_features_at_round(&config, round, layer, &mut lock)?;
                    lock.flush()?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems are config errors (exit 1); help/version exit 0.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        // A consumer closing the pipe mid-stream is not an error.
        Err(fedvhl::Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
