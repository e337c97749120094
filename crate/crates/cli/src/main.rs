use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fastat_cli::config::{RunConfig, DATA_ENV};
use fastat_cli::plots::{self, PlotKind};
use fastat_cli::report::{compare_table, load_run};
use fastat_cli::runner::{final_evaluation, linearity_report, load_data, run_experiment, summarize};
use fastat_core::checkpoint;

#[derive(Parser)]
#[command(name = "fastat", version, about = "Fast adversarial training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed of a configured run.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds (overrides `seeds`).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// CIFAR-10 root directory.
        #[arg(long, env = DATA_ENV)]
        data: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Render an SVG chart from a run or seed directory.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Output file; defaults to `<input>/<kind>.svg`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a markdown table comparing finished runs.
    Compare {
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a saved checkpoint on the data of a run configuration.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = DATA_ENV)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            seeds,
            data,
            quiet,
        } => {
            let cfg = RunConfig::load(&config)?.resolve(out, seeds, data)?;
            let outcomes = run_experiment(&cfg, !quiet)?;
            print!("{}", summarize(&cfg, &outcomes).to_markdown());
            println!("artifacts: {}", cfg.output_dir().display());
        }
        Command::Plot { input, kind, out } => {
            let svg = plots::render(kind, &input)?;
            let path = out.unwrap_or_else(|| input.join(kind.file_name()));
            fs::write(&path, svg).with_context(|| format!("cannot write {}", path.display()))?;
            println!("{}", path.display());
        }
        Command::Compare { inputs, out } => {
            let runs = inputs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
            let table = compare_table(&runs);
            match out {
                Some(path) => fs::write(&path, &table).with_context(|| format!("cannot write {}", path.display()))?,
                None => print!("{table}"),
            }
        }
        Command::Eval {
            checkpoint: ckpt,
            config,
            data,
            seed,
        } => {
            let cfg = RunConfig::load(&config)?.resolve(None, None, data)?;
            let model = checkpoint::load::<f32>(&ckpt).with_context(|| format!("cannot load checkpoint {}", ckpt.display()))?;
            let sets = load_data(&cfg.data)?;
            let eps = cfg.train.attack.eps;
            let report = serde_json::json!({
                "final_eval": final_evaluation(&model, &sets.eval, &cfg.eval, eps, seed)?,
                "linearity": linearity_report(&model, &sets.eval, &cfg.eval, eps, seed)?,
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
