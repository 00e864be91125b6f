use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mammofuse::pipeline::{Overrides, PipelineConfig, TrainStage, Workspace};
use mammofuse::Error;

#[derive(Parser)]
#[command(
    name = "mammofuse",
    version,
    about = "Multi-view mammography models with patient-level fusion"
)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed; re-derives every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing generated data.
    #[arg(long, global = true)]
    force: bool,
    /// Input downscaling factor in (0, 1].
    #[arg(long, global = true)]
    scale: Option<f64>,
    /// Full-resolution inputs and the original training schedules.
    #[arg(long, global = true)]
    paper_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset.
    Generate,
    /// Assign cases to train/validation/test.
    Split,
    /// Train one stage: density, findings, localizer or fusion.
    Train { stage: String },
    /// Cache task-model outputs for fusion.
    Extract,
    /// Evaluate every model on the test split.
    Evaluate,
    /// Print the last evaluation.
    Report,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Data(_) | Error::MissingColumn(_) | Error::Format(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let overrides = Overrides {
        seed: cli.seed,
        scale: cli.scale,
        paper_scale: cli.paper_scale,
        out_dir: cli.out,
    };
    let config = match &cli.config {
        Some(p) => PipelineConfig::from_file(p, &overrides)?,
        None => PipelineConfig::from_text("", &overrides)?,
    };
    let ws = Workspace::open(config)?;
    match cli.command {
        Command::Generate => {
            let manifest = ws.generate(cli.force)?;
            println!("manifest: {}", manifest.display());
        }
        Command::Split => {
            let (train, val, test) = ws.split()?;
            println!("train={train} validation={val} test={test}");
        }
        Command::Train { stage } => ws.train(stage.parse::<TrainStage>()?)?,
        Command::Extract => {
            let cache = ws.extract()?;
            println!("cached {} cases: {}", cache.cases.len(), cache.descriptor);
        }
        Command::Evaluate => print!("{}", ws.evaluate()?.to_text()),
        Command::Report => print!("{}", ws.report()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
