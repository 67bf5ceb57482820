use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ripbench::data::SplitName;
use ripbench_cli::config::ResolvedConfig;
use ripbench_cli::error::{Failure, Result};
use ripbench_cli::run::{self, TrainOutcome};

#[derive(Parser)]
#[command(name = "ripbench", version, about = "Rider-intention benchmark workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset (feature files, manifest, generation report).
    GenData {
        /// Generator settings; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one method on one task as described by a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a trained run on a dataset split.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Defaults to the dataset the model was trained on.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every method on both tasks.
    Bench {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Cells trained concurrently; defaults to the number of CPUs.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn execute(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { config, out, seed } => {
            let s = run::gen_data(config.as_deref(), &out, seed)?;
            println!("wrote {} samples to {}", s.report.n_samples, out.display());
            for (label, n) in &s.report.class_counts {
                println!("  {label:>3} {n}");
            }
            println!("frames per sequence: {}..={}", s.report.min_frames, s.report.max_frames);
            println!("nearest-centroid probe accuracy: {:.2}%", 100.0 * s.probe);
        }
        Cmd::Train { config } => {
            let cfg = ResolvedConfig::from_file(&config)?;
            match run::train_run(&cfg)? {
                TrainOutcome::Neural(h) => {
                    let b = h.best();
                    println!(
                        "best epoch {} of {}: train acc {:.2}%, val acc {:.2}%",
                        h.best_epoch,
                        h.epoch.len(),
                        100.0 * b.train_acc,
                        100.0 * b.val_acc
                    );
                }
                TrainOutcome::Svm { train_acc, val_acc, .. } => {
                    println!("train acc {:.2}%, val acc {:.2}%", 100.0 * train_acc, 100.0 * val_acc);
                }
            }
            println!("run written to {}", cfg.output.display());
        }
        Cmd::Eval { model, dataset, split, out } => {
            let split: SplitName = split.parse().map_err(Failure::usage)?;
            let e = run::eval_run(&model, dataset.as_deref(), split, out.as_deref())?;
            print!("{}", e.report.to_text());
            println!("\nreport written to {}", e.report_path.display());
        }
        Cmd::Bench { dataset, out, seed, jobs } => {
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let s = run::bench(&dataset, &out, seed, jobs)?;
            print!("{}", s.to_markdown(&dataset, seed));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
