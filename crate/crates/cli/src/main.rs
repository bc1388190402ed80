use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use mad_cli::config::{resolve, Overrides, RunConfig};
use mad_cli::pipeline;
use mad_core::distill::TrainMode;
use mad_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mad", version, about = "Magnification-aware distillation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run config JSON; omitted fields take desk-scale defaults.
    #[arg(long)]
    config: PathBuf,
    /// Output tree root; overrides the config's paths.out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed; overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; default = available cores. Results do not depend
    /// on this.
    #[arg(long)]
    threads: Option<usize>,
    /// Training mode; overrides the config's train.distill.mode.
    #[arg(long, value_parser = TrainMode::from_str)]
    mode: Option<TrainMode>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic slide pyramids.
    Synth(Common),
    /// Build the capped tile manifest over the slides.
    Tile(Common),
    /// Train the teacher/student pair on the manifest.
    Train(Common),
    /// Embed manifest tiles with the trained teacher.
    Embed(Common),
    /// Fit the zero-shot linear probe on TRAIN MID embeddings.
    Probe(Common),
    /// Score embeddings: probe/k-NN F1, AMI/DBI, consistency, segmentation, PCA.
    Eval(Common),
    /// Summarize evaluated runs: MAD vs BASELINE medians.
    Report(Common),
}

impl Cmd {
    fn split(self) -> (&'static str, Common) {
        match self {
            Cmd::Synth(c) => ("synth", c),
            Cmd::Tile(c) => ("tile", c),
            Cmd::Train(c) => ("train", c),
            Cmd::Embed(c) => ("embed", c),
            Cmd::Probe(c) => ("probe", c),
            Cmd::Eval(c) => ("eval", c),
            Cmd::Report(c) => ("report", c),
        }
    }
}

fn main() {
    init_logging();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    let (name, common) = cli.command.split();
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    let raw = RunConfig::load(&common.config)?;
    let ov = Overrides { out: common.out, seed: common.seed, mode: common.mode };
    let resolved = resolve(raw, &ov)?;
    log::debug!("resolved config: {}", serde_json::to_string(&resolved.cfg)?);
    match name {
        "synth" => pipeline::cmd_synth(&resolved),
        "tile" => pipeline::cmd_tile(&resolved),
        "train" => pipeline::cmd_train(&resolved),
        "embed" => pipeline::cmd_embed(&resolved),
        "probe" => pipeline::cmd_probe(&resolved),
        "eval" => pipeline::cmd_eval(&resolved),
        "report" => pipeline::cmd_report(&resolved),
        _ => unreachable!(),
    }
}

/// MAD_LOG = quiet | info | debug; logs go to stderr, artifacts and
/// tables to stdout.
fn init_logging() {
    let level = match std::env::var("MAD_LOG").ok().as_deref() {
        Some("quiet") => log::LevelFilter::Off,
        Some("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}
