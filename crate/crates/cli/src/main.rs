use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nsrl_cli::commands::{self, CliError, EvalPolicy, EvalRequest, RulesRequest};
use nsrl_cli::config::{resolve_path, EvalMode, RawConfig};

/// Neural-symbolic relational RL: training, evaluation, oracles and rules.
///
/// Any `--section.key=value` argument overrides the corresponding config
/// entry.
#[derive(Parser)]
#[command(name = "nsrl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file.
    Train {
        config: PathBuf,
    },
    /// Evaluate a checkpoint, or the optimal policy of a config.
    Eval {
        #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Config whose value-iteration optimal policy is evaluated.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long)]
        mode: Option<EvalMode>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Optimal returns by value iteration; every Blocks World variant when
    /// no config is given.
    Oracle {
        config: Option<PathBuf>,
    },
    /// Extract chain rules from a checkpoint.
    Rules {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 5)]
        top: usize,
        /// Comma-separated predicates replacing the learned attention.
        #[arg(long, value_delimiter = ',')]
        force: Option<Vec<String>>,
        /// Bind clause ends to the best-scoring entity pair.
        #[arg(long)]
        ground: bool,
    },
    /// Plot learning curves from one or more logs.
    Plot {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value = "evaluation return")]
        title: String,
    },
}

fn is_override(arg: &str) -> bool {
    arg.strip_prefix("--")
        .and_then(|a| a.split_once('='))
        .is_some_and(|(k, _)| k.contains('.'))
}

fn load(path: &std::path::Path, overrides: &[String]) -> Result<RawConfig, CliError> {
    let mut raw = RawConfig::load(&resolve_path(path))?;
    raw.apply_overrides(overrides)?;
    Ok(raw)
}

fn run(cli: Cli, overrides: Vec<String>) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config } => {
            let out = commands::train(&load(&config, &overrides)?)?;
            if let Some(e) = out.evals.last() {
                println!(
                    "{} episodes, {} steps: {} {} {:.3} ± {:.3}",
                    out.checkpoint.trainer.episodes(),
                    out.checkpoint.trainer.steps(),
                    e.task,
                    e.variant,
                    e.mean,
                    e.std
                );
            }
        }
        Command::Eval {
            checkpoint,
            oracle,
            episodes,
            mode,
            log,
            seed,
        } => {
            let raw;
            let policy = match (&checkpoint, &oracle) {
                (Some(path), _) => EvalPolicy::Checkpoint(path),
                (None, Some(path)) => {
                    raw = load(path, &[])?;
                    EvalPolicy::Oracle(&raw)
                }
                (None, None) => unreachable!("clap requires one policy"),
            };
            let rec = commands::eval(&EvalRequest {
                policy,
                overrides: &overrides,
                episodes,
                mode,
                log,
                seed,
            })?;
            println!(
                "{} {} ({}, {} episodes): {:.3} ± {:.3}",
                rec.task, rec.variant, rec.mode, rec.episodes, rec.mean, rec.std
            );
        }
        Command::Oracle { config } => {
            let rows = match config {
                Some(path) => vec![commands::oracle(&load(&path, &overrides)?)?],
                None => commands::oracle_table()?,
            };
            println!("{:<8} {:<13} {:>8} {:>8}", "task", "variant", "optimal", "states");
            for r in rows {
                println!("{:<8} {:<13} {:>8.3} {:>8}", r.task, r.variant, r.value, r.states);
            }
        }
        Command::Rules {
            checkpoint,
            samples,
            top,
            force,
            ground,
        } => {
            let report = commands::rules(&RulesRequest {
                checkpoint: &checkpoint,
                overrides: &overrides,
                samples,
                top_k: top,
                force,
                ground,
            })?;
            for line in report.lines {
                println!("{line}");
            }
        }
        Command::Plot { logs, out, title } => {
            let env = commands::plot_logs(&logs, &out, &title)?;
            println!("{}: {} points from {} logs", out.display(), env.x.len(), logs.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (overrides, args): (Vec<String>, Vec<String>) = std::env::args().partition(|a| is_override(a));
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
