use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uniunc::config::{ExperimentConfig, TaskKind};
use uniunc::experiment::{run_all, run_eval, run_render, run_sweep, run_train};
use uniunc::Result;

/// Input/epistemic/aleatoric uncertainty experiments.
#[derive(Parser)]
#[command(name = "uniunc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate data and train one model per EU method.
    Train(Common),
    /// Evaluate saved models over the grid and write metrics.
    Eval(Common),
    /// Train, evaluate and render.
    Sweep(Common),
    /// Render heatmaps from existing grid CSVs.
    Render(Common),
    /// Sweep both tasks, each into its own subdirectory of the output dir.
    All(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// two-moons or toy-regression.
    #[arg(long)]
    task: Option<TaskKind>,
    /// Skip heatmap images.
    #[arg(long)]
    no_render: bool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(task) = self.task {
            if task != cfg.task && cfg.grid.as_ref().is_some_and(|g| g.bounds.len() != task.input_dim()) {
                cfg.grid = None;
            }
            cfg.task = task;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => run_train(&c.config()?).map(drop),
        Command::Eval(c) => run_eval(&c.config()?).map(drop),
        Command::Sweep(c) => run_sweep(&c.config()?, !c.no_render).map(drop),
        Command::Render(c) => {
            let cfg = c.config()?;
            if c.no_render {
                return Ok(());
            }
            run_render(&cfg).map(drop)
        }
        Command::All(c) => run_all(&c.config()?, !c.no_render),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
