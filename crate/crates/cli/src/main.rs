use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use uqd::harness::{self, OUTPUT_ROOT_ENV};
use uqd::metrics::GroundTruthSource;

#[derive(Parser)]
#[command(name = "uqd", version, about = "Quality-diversity optimization under noisy evaluations")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (algorithm, task, seed) cell of an experiment config.
    Run {
        config: PathBuf,
    },
    /// Correct a stored archive against ground truth.
    Correct {
        snapshot: PathBuf,
        /// Use the median of K fresh noisy evaluations instead of the
        /// analytic evaluator. K = 1 works but is very noisy.
        #[arg(long, value_name = "K")]
        empirical: Option<usize>,
        /// Where to write the corrected archive (default: next to the input).
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// List the algorithm presets.
    Presets,
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command.unwrap_or(Command::Presets) {
        Command::Presets => {
            print!("{}", harness::cli_list_presets());
        }
        Command::Run { config } => {
            let summary = harness::cli_run(&config)
                .with_context(|| format!("running {}", config.display()))?;
            for o in &summary.outcomes {
                match o.corrected_qd_score {
                    Some(score) => println!("{}: corrected qd-score {score:.4}", o.run_id),
                    None => println!("{}: {}", o.run_id, o.status),
                }
            }
            println!("results in {}", summary.output_dir.display());
            if std::env::var_os(OUTPUT_ROOT_ENV).is_some() {
                println!("(output root overridden by {OUTPUT_ROOT_ENV})");
            }
        }
        Command::Correct {
            snapshot,
            empirical,
            output,
        } => {
            let truth = match empirical {
                None => GroundTruthSource::Analytic,
                Some(0) => anyhow::bail!("--empirical needs at least one re-evaluation"),
                Some(k) => GroundTruthSource::Empirical { reevaluations: k },
            };
            let s = harness::cli_correct(&snapshot, truth, output.as_deref())
                .with_context(|| format!("correcting {}", snapshot.display()))?;
            println!("corrected qd-score: {}", s.corrected_qd_score);
            println!("illusory qd-score: {}", s.illusory_qd_score);
            if s.clamped > 0 {
                println!("clamped fitness values: {}", s.clamped);
            }
            println!("written to {}", s.output.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
