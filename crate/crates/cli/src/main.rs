use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use steerbridge::experiments::{self, RunConfig};

/// Align a toy teacher's hidden states with a toy student's and steer the
/// student with them.
#[derive(Parser)]
#[command(name = "steerbridge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the verbal and math corpora and the train/test split.
    CorpusGen(Common),
    /// Train the teacher and student on the shared corpus.
    TrainPair(Common),
    /// Cache final-token activations at every grid depth.
    Extract(Common),
    /// Fit ridge, lasso and permutation mappers for every layer pair.
    FitMappers(Common),
    /// Run the (l_T, l_S, alpha) intervention grid.
    Sweep(Common),
    /// Cross-domain transfer of ridge mappers.
    Dissociate(Common),
    /// Summarize all stage outputs as Markdown.
    Report(Common),
    /// Every stage in order.
    All(Common),
    /// Print the resolved config as TOML.
    ShowConfig(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run config. Keys it leaves out take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory shared by all stages of a run.
    #[arg(long)]
    out: PathBuf,
    /// Run seed; overrides the config file [default: 42].
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate().context("invalid run config")?;
        Ok(cfg)
    }
}

type Stage = fn(&RunConfig, &Path) -> steerbridge::Result<()>;

fn main() -> Result<()> {
    let cli = Cli::parse();
    let (name, common, stage): (&str, &Common, Stage) = match &cli.command {
        Command::CorpusGen(c) => ("corpus-gen", c, experiments::corpus_gen),
        Command::TrainPair(c) => ("train-pair", c, experiments::train_pair),
        Command::Extract(c) => ("extract", c, experiments::extract),
        Command::FitMappers(c) => ("fit-mappers", c, experiments::fit_mappers),
        Command::Sweep(c) => ("sweep", c, experiments::run_sweep),
        Command::Dissociate(c) => ("dissociate", c, experiments::dissociate),
        Command::Report(c) => ("report", c, experiments::report),
        Command::All(c) => ("all", c, experiments::run_all),
        Command::ShowConfig(c) => {
            print!("{}", c.resolve()?.to_toml_string()?);
            return Ok(());
        }
    };
    let cfg = common.resolve()?;
    stage(&cfg, &common.out).with_context(|| format!("{name} failed"))?;
    eprintln!("{name}: wrote {}", common.out.display());
    Ok(())
}
