use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use probe_annotate::{router, ServiceConfig};
use probe_cli::pipeline::Stage;
use probe_cli::synth::{annotate_scripted, generate_bench};
use probe_cli::{Pipeline, PipelineConfig, PipelineError, Result};
use probe_core::annotation::{Hit, HitStore};
use probe_core::synthetic::{PlantConfig, TrainConfig};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "probe", version, about = "Find spurious features of an image classifier and measure its reliance on them")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "probe.toml")]
    config: PathBuf,
    /// Directory holding the stage directories; defaults to the config's output root.
    #[arg(long, global = true)]
    stage_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cache feature activations and per-class accuracies.
    Extract(StageArgs),
    /// Choose study classes and rank their features.
    Select(StageArgs),
    /// Render discovery HITs for the top features.
    Hits(StageArgs),
    /// Build top-k feature subsets and validation HITs from the verdicts.
    Subsets(StageArgs),
    /// Export the soft-mask dataset.
    Dataset(StageArgs),
    /// Run the noise sweep on the inspected model.
    Evaluate(StageArgs),
    /// Write a summary and plots.
    Report(StageArgs),
    /// Serve the queued HITs to annotators.
    Serve {
        /// Listen address; defaults to the config's annotation endpoint.
        #[arg(long)]
        addr: Option<SocketAddr>,
    },
    /// Synthetic benchmark tooling.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Debug, clap::Args)]
struct StageArgs {
    /// Rerun even when the stage is up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum SynthCommand {
    /// Write a planted dataset, a trained tiny model and a config using both.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = TrainConfig::default().epochs)]
        epochs: usize,
    },
    /// Answer every open HIT with scripted workers that see the ground truth.
    Annotate,
}

fn pipeline(cli: &Cli) -> Result<Pipeline> {
    Ok(Pipeline::new(PipelineConfig::load(&cli.config)?, cli.stage_dir.clone()))
}

fn print<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("outputs serialize"));
}

fn serve(pipeline: &Pipeline, addr: Option<SocketAddr>) -> Result<()> {
    let hits_path = pipeline.stage_dir(Stage::Hits).join("hits.json");
    let mut hits: Vec<Hit> = pipeline.artifact(Stage::Hits, Stage::Hits, "hits.json").map_err(|_| {
        PipelineError::MissingUpstream {
            stage: "serve",
            run_first: "hits".into(),
            path: hits_path,
        }
    })?;
    let validation = pipeline.stage_dir(Stage::Subsets).join("validation_hits.json");
    if let Ok(text) = std::fs::read_to_string(&validation) {
        let more: Vec<Hit> = serde_json::from_str(&text).map_err(|e| PipelineError::Core {
            stage: "serve",
            source: e.into(),
        })?;
        hits.extend(more);
    }
    let config = pipeline.config();
    let store = HitStore::with_journal(config.annotation.quorum, hits, &pipeline.journal_path())
        .map_err(|source| PipelineError::Core { stage: "serve", source })?;
    let addr = match addr {
        Some(a) => a,
        None => config
            .annotation
            .endpoint
            .parse()
            .map_err(|e| PipelineError::Config(format!("annotation.endpoint: {e}")))?,
    };
    let service = ServiceConfig {
        asset_roots: vec![
            pipeline.stage_dir(Stage::Hits).join("assets"),
            pipeline.stage_dir(Stage::Subsets).join("assets"),
        ],
        token: config.annotation.token.clone(),
    };
    let app = router(Arc::new(store), service);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| PipelineError::io(Path::new("tokio runtime"), e))?;
    runtime
        .block_on(probe_annotate::serve(addr, app))
        .map_err(|e| PipelineError::io(Path::new(&addr.to_string()), e))
}

fn run(cli: &Cli) -> Result<()> {
    let stage = |stage: Stage, args: &StageArgs| -> Result<()> {
        print(&pipeline(cli)?.run(stage, args.force)?);
        Ok(())
    };
    match &cli.command {
        Command::Extract(a) => stage(Stage::Extract, a),
        Command::Select(a) => stage(Stage::Select, a),
        Command::Hits(a) => stage(Stage::Hits, a),
        Command::Subsets(a) => stage(Stage::Subsets, a),
        Command::Dataset(a) => stage(Stage::Dataset, a),
        Command::Evaluate(a) => stage(Stage::Evaluate, a),
        Command::Report(a) => stage(Stage::Report, a),
        Command::Serve { addr } => serve(&pipeline(cli)?, *addr),
        Command::Synth(SynthCommand::Generate { out, seed, epochs }) => {
            let plant = PlantConfig {
                seed: *seed,
                ..PlantConfig::default()
            };
            let train = TrainConfig {
                epochs: *epochs,
                seed: *seed,
                ..TrainConfig::default()
            };
            print(&generate_bench(out, &plant, &train)?);
            Ok(())
        }
        Command::Synth(SynthCommand::Annotate) => {
            print(&annotate_scripted(&pipeline(cli)?)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e.report()).expect("error reports serialize"));
            ExitCode::FAILURE
        }
    }
}
