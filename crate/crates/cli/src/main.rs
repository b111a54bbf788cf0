use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use feedergraph_core::config::RunConfig;
use feedergraph_core::pipeline::{Pipeline, Stage, REPORT_JSON};

#[derive(Parser)]
#[command(
    name = "feedergraph",
    version,
    about = "Turns observed feeder trips into virtual transit service and scores the accessibility gain"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(long, value_name = "FILE")]
    config: PathBuf,

    /// Worker threads for estimation and scoring (0 = one per core)
    #[arg(long, default_value_t = 0)]
    workers: usize,

    /// Override the configured output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage in order (or one stage with --stage)
    Run {
        #[command(flatten)]
        common: Common,
        /// Name of a single stage to run
        #[arg(long, value_name = "STAGE")]
        stage: Option<String>,
    },
    /// Build the hexagonal grid and count opportunities per cell
    Tessellate(Common),
    /// Classify raw trips, reject bad rows, derive feeder areas
    Ingest(Common),
    /// Estimate wait and travel fields for every timeslot bucket
    Estimate(Common),
    /// Generate virtual trips and write the augmented feed
    Synthesize(Common),
    /// Score accessibility on the base and augmented feeds
    Score(Common),
    /// Compute per-cell improvement maps
    Diff(Common),
}

impl Command {
    fn into_parts(self) -> (Common, Option<String>) {
        match self {
            Command::Run { common, stage } => (common, stage),
            Command::Tessellate(c) => (c, Some("tessellate".into())),
            Command::Ingest(c) => (c, Some("ingest".into())),
            Command::Estimate(c) => (c, Some("estimate".into())),
            Command::Synthesize(c) => (c, Some("synthesize".into())),
            Command::Score(c) => (c, Some("score".into())),
            Command::Diff(c) => (c, Some("diff".into())),
        }
    }
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

fn run(cli: Cli) -> anyhow::Result<()> {
    let (common, stage) = cli.command.into_parts();
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = common.out {
        cfg.paths.out_dir = out;
    }
    cfg.validate()?;
    let stages: Vec<Stage> = match stage {
        Some(name) => vec![name.parse()?],
        None => Stage::ALL.to_vec(),
    };
    let pipe = Pipeline::new(cfg, common.workers);
    for stage in &stages {
        pipe.run_stage(*stage)
            .map_err(|e| anyhow::anyhow!("stage {stage}: {e}"))?;
    }
    println!(
        "{} stage(s) done, report at {}",
        stages.len(),
        pipe.cfg.paths.out_dir.join(REPORT_JSON).display()
    );
    Ok(())
}
