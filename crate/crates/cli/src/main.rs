use capture_core::harness::{self, ExperimentConfig, HarnessError, TrainOptions};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "capture", version, about = "Train and evaluate debris-capture agents for a free-floating manipulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed listed in the config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Must match the task in the config file.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        task: Option<u8>,
        /// Continue from a checkpoint (networks and counters only).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint on the config's evaluation seeds.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Smoothed reward and success-rate curves from metrics files.
    Curves {
        #[arg(long)]
        metrics: PathBuf,
        /// Further runs to average with the first.
        #[arg(long, num_args = 1..)]
        average: Vec<PathBuf>,
        #[arg(long, default_value = "curves")]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        window: usize,
        /// Episodes per success-rate block.
        #[arg(long, default_value_t = 20)]
        interval: usize,
    },
    /// Load and validate a config without running anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train { config, task, resume } => {
            let cfg = ExperimentConfig::load(&config)?;
            if let Some(t) = task {
                if t != cfg.task.id() {
                    return Err(HarnessError::ConfigInvalid(format!(
                        "--task {t} does not match task {} in {}",
                        cfg.task.id(),
                        config.display()
                    )));
                }
            }
            let summaries = harness::run_training(&cfg, &TrainOptions { resume })?;
            for s in &summaries {
                let tail = s.successes.len().saturating_sub(50);
                let recent = &s.successes[tail..];
                let rate = recent.iter().filter(|x| **x).count() as f64 / recent.len().max(1) as f64;
                eprintln!(
                    "seed {}: {} episodes, recent success {:.0}%, {:.0} s",
                    s.seed,
                    s.episodes,
                    100.0 * rate,
                    s.wall_clock_s
                );
            }
            print_json(&summaries.iter().map(|s| &s.metrics_path).collect::<Vec<_>>());
        }
        Command::Eval { config, ckpt, episodes } => {
            let cfg = ExperimentConfig::load(&config)?;
            let n = episodes.unwrap_or(cfg.eval.episodes);
            print_json(&harness::run_eval(&cfg, &ckpt, n)?);
        }
        Command::Curves {
            metrics,
            average,
            out,
            window,
            interval,
        } => {
            let mut inputs = vec![metrics];
            inputs.extend(average);
            print_json(&harness::emit_curves(&inputs, &out, window, interval)?);
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            print_json(&serde_json::json!({
                "valid": true,
                "task": cfg.task.id(),
                "lambda_lim": cfg.singularity.lambda_lim,
                "seeds": cfg.seeds,
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
