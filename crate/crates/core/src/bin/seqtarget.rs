use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seqtarget::corpus::load_dataset;
use seqtarget::harness::{evaluate_checkpoint, run_experiment, ExperimentSpec};
use seqtarget::partition::{plan_splits, validate_sequence, SplitConfig, TargetDistribution};
use seqtarget::Error;

#[derive(Parser)]
#[command(
    name = "seqtarget",
    version,
    about = "Sequential targeting for imbalanced text classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method and trial in an experiment spec and write a CSV.
    Run {
        #[arg(long)]
        spec: PathBuf,
        /// Output CSV; defaults to output.csv from the spec, else stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the spec's base seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Write per-epoch records as JSON lines.
        #[arg(long)]
        dump_history: Option<PathBuf>,
        /// Write the split plan used by split-based methods as JSON.
        #[arg(long)]
        dump_splits: Option<PathBuf>,
    },
    /// Compute and validate a split plan without training.
    Plan {
        #[arg(long, conflicts_with = "train", required_unless_present = "train")]
        spec: Option<PathBuf>,
        /// JSON-lines training file (uniform target, k = 2).
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the plan; defaults to stdout.
        #[arg(long)]
        dump_splits: Option<PathBuf>,
    },
    /// Score a saved checkpoint on a JSON-lines test file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Positive class name for binary scores.
        #[arg(long)]
        positive: Option<String>,
    },
}

fn write_or_print(path: Option<&PathBuf>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run {
            spec,
            out,
            seed,
            jobs,
            dump_history,
            dump_splits,
        } => {
            let mut spec = ExperimentSpec::load(&spec)?;
            if let Some(seed) = seed {
                spec.set_seed(seed);
            }
            let output = run_experiment(&spec, jobs)?;
            write_or_print(out.as_ref().or(spec.out.as_ref()), &output.to_csv())?;
            if let Some(path) = dump_history {
                fs::write(path, output.history_jsonl()?)?;
            }
            if let Some(path) = dump_splits {
                let plan = output
                    .plan
                    .as_ref()
                    .ok_or_else(|| Error::Config("no split plan was produced".into()))?;
                fs::write(path, plan.to_json()?)?;
            }
            for row in &output.rows {
                if let seqtarget::harness::RowValues::Failed(reason) = &row.values {
                    eprintln!("{} trial {}: {reason}", row.method, row.trial);
                }
            }
            Ok(if output.failures > 0 {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Plan {
            spec,
            train,
            k,
            seed,
            dump_splits,
        } => {
            let (data, cfg, seed) = match (spec, train) {
                (Some(path), _) => {
                    let spec = ExperimentSpec::load(&path)?;
                    let data = seqtarget::harness::prepare_data(&spec)?.train;
                    let cfg = spec.split_config(data.num_classes())?;
                    (data, cfg, spec.seed)
                }
                (None, Some(path)) => {
                    let data = load_dataset(&path, None)?;
                    let target = TargetDistribution::uniform(data.num_classes())?;
                    (data, SplitConfig::new(k, vec![1; k], target)?, seed)
                }
                (None, None) => return Err(Error::Config("give --spec or --train".into())),
            };
            let plan = plan_splits(&data, &cfg, seed)?;
            let report = validate_sequence(&plan);
            if !report.passed() {
                return Err(Error::InvalidPlan(report.violated().join(", ")));
            }
            if let Some(advice) = &plan.advisory {
                eprintln!("{advice}");
            }
            for (i, (split, kl)) in plan.splits.iter().zip(&plan.kls).enumerate() {
                eprintln!(
                    "split {}: {} examples, counts {:?}, KL {kl:.6}",
                    i + 1,
                    split.len(),
                    plan.split_counts(&data)[i]
                );
            }
            write_or_print(dump_splits.as_ref(), &plan.to_json()?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            test,
            positive,
        } => {
            let report = evaluate_checkpoint(&checkpoint, &test, positive.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
