use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lesionforge::config::PipelineConfig;
use lesionforge::layout::Stage;
use lesionforge::stages::Pipeline;

/// Superpixel-seeded deep clustering and reinforcement-learned mask selection.
#[derive(Parser, Debug)]
#[command(name = "lesionforge", version)]
struct Cli {
    /// Stage to run.
    stage: Stage,
    /// JSON pipeline configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Selections file for `train-rl`.
    #[arg(long)]
    selections: Option<PathBuf>,
    /// Override the data directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override the output root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Port for `serve`.
    #[arg(long)]
    port: Option<u16>,
    /// Override the run id.
    #[arg(long)]
    run_id: Option<String>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(d) = cli.data {
        config.data_dir = d;
    }
    if let Some(o) = cli.out {
        config.out_dir = o;
    }
    if let Some(p) = cli.port {
        config.server.port = p;
    }
    if let Some(r) = cli.run_id {
        config.run_id = r;
    }
    let mut pipeline = Pipeline::new(config)?;
    pipeline.selections = cli.selections;
    pipeline.run(cli.stage)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
