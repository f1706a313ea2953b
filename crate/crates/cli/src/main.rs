use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use mmkd::schedule::AblationAxis;
use mmkd_cli::{cmd_ablate, cmd_eval, cmd_inspect, cmd_run, cmd_train_teacher, RunConfig, Session};

#[derive(Parser)]
#[command(
    name = "mmkd",
    version,
    about = "Teacher/student distillation on a synthetic VQA task"
)]
struct Cli {
    /// Suppress per-epoch progress on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher with PT then SFT and write its checkpoint.
    TrainTeacher {
        #[arg(short, long)]
        config: PathBuf,
        /// Train the small teacher preset instead.
        #[arg(long)]
        small: bool,
    },
    /// Train a student through one recipe.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// Dash-separated stages, e.g. DPT-SFT-DFT. Defaults to the config's.
        #[arg(short, long)]
        recipe: Option<String>,
        /// Defaults to the first of the config's seeds.
        #[arg(short, long)]
        seed: Option<u64>,
    },
    /// Run every cell of an ablation axis and print a ranked table.
    Ablate {
        #[arg(short, long)]
        config: PathBuf,
        /// recipes, divergences, targets or teacher_sizes.
        #[arg(short, long)]
        axis: String,
    },
    /// Held-out exact-match accuracy of a checkpoint.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print a checkpoint's header, configuration and parameter counts.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn session(config: &Path, quiet: bool) -> Result<Session> {
    let mut s = Session::new(RunConfig::load(config)?)?;
    s.verbose = !quiet;
    Ok(s)
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

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher { config, small } => {
            let out = cmd_train_teacher(&session(&config, cli.quiet)?, small)?;
            println!("teacher checkpoint: {}", out.checkpoint.display());
            println!("eval accuracy: {}", out.record.eval.accuracy);
            println!("eval ce: {}", out.record.eval.ce);
        }
        Command::Run {
            config,
            recipe,
            seed,
        } => {
            let s = session(&config, cli.quiet)?;
            let recipe = recipe.unwrap_or_else(|| s.config.recipe.clone());
            let seed = seed.unwrap_or(s.config.seeds[0]);
            let out = cmd_run(&s, &recipe, seed)?;
            println!("run directory: {}", out.dir.display());
            println!("eval accuracy: {}", out.record.eval.accuracy);
            println!("eval ce: {}", out.record.eval.ce);
        }
        Command::Ablate { config, axis } => {
            let axis: AblationAxis = axis.parse()?;
            let out = cmd_ablate(&session(&config, cli.quiet)?, axis)?;
            print!("{}", out.table.render());
            println!("written to {}", out.dir.display());
        }
        Command::Eval { config, checkpoint } => {
            let m = cmd_eval(&RunConfig::load(&config)?, &checkpoint)?;
            println!("eval accuracy: {}", m.accuracy);
            println!("eval ce: {}", m.ce);
            println!("samples: {}", m.samples);
        }
        Command::Inspect { checkpoint } => print!("{}", cmd_inspect(&checkpoint)?),
        Command::DefaultConfig => print!("{}", RunConfig::default().to_toml()),
    }
    Ok(())
}
