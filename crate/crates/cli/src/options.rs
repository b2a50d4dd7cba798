use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use pairevo_core::evolution::{EvolutionConfig, FitnessShaping};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "pairevo", version, about = "Neuroevolution of a two-branch scan-pair classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evolve a classifier on a training manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Classify a single scan pair.
    Infer(InferArgs),
    /// Write synthetic train/test manifests and images.
    GenSynthetic(GenArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shaping {
    Fitness,
    Rank,
}

impl From<Shaping> for FitnessShaping {
    fn from(s: Shaping) -> Self {
        match s {
            Shaping::Fitness => FitnessShaping::CenteredFitness,
            Shaping::Rank => FitnessShaping::CenteredRank,
        }
    }
}

/// Training options; every field may also come from `--config`.
#[derive(Debug, Default, Clone, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainOptions {
    /// Training manifest (CSV with header scan1,scan2,label).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Optional test manifest, scored every --eval-test-every generations.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Output directory for metrics.csv and checkpoint.bin [default: out]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Children per generation [default: 40]
    #[arg(long)]
    pub population: Option<usize>,
    /// Mutation scale [default: 0.05]
    #[arg(long)]
    pub sigma: Option<f32>,
    /// Step size of the recombined update [default: 0.01]
    #[arg(long)]
    pub alpha: Option<f32>,
    /// Total generations to reach [default: 50000]
    #[arg(long)]
    pub generations: Option<u64>,
    /// Master seed for initialization and mutations [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for fitness evaluation [default: available cores]
    #[arg(long)]
    pub threads: Option<usize>,
    /// Square input resolution the scans are resized to [default: 64]
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Checkpoint interval in generations; a final checkpoint is always written [default: 500]
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Print a summary line every N generations [default: 50]
    #[arg(long)]
    pub log_every: Option<u64>,
    /// Test-set evaluation interval, 0 disables [default: 50]
    #[arg(long)]
    pub eval_test_every: Option<u64>,
    /// Fitness shaping [default: fitness]
    #[arg(long, value_enum)]
    pub shaping: Option<Shaping>,
    /// Generations at perfect training fitness before stopping, 0 disables [default: 200]
    #[arg(long)]
    pub patience: Option<u64>,
}

impl TrainOptions {
    /// Fills unset fields from `other`.
    pub fn or(self, other: TrainOptions) -> TrainOptions {
        TrainOptions {
            train: self.train.or(other.train),
            test: self.test.or(other.test),
            out: self.out.or(other.out),
            population: self.population.or(other.population),
            sigma: self.sigma.or(other.sigma),
            alpha: self.alpha.or(other.alpha),
            generations: self.generations.or(other.generations),
            seed: self.seed.or(other.seed),
            threads: self.threads.or(other.threads),
            image_size: self.image_size.or(other.image_size),
            checkpoint_every: self.checkpoint_every.or(other.checkpoint_every),
            log_every: self.log_every.or(other.log_every),
            eval_test_every: self.eval_test_every.or(other.eval_test_every),
            shaping: self.shaping.or(other.shaping),
            patience: self.patience.or(other.patience),
        }
    }

    /// Evolution config from these options layered over `base`.
    pub fn evolution(&self, base: EvolutionConfig) -> EvolutionConfig {
        EvolutionConfig {
            population: self.population.unwrap_or(base.population),
            sigma: self.sigma.unwrap_or(base.sigma),
            alpha: self.alpha.unwrap_or(base.alpha),
            generations: self.generations.unwrap_or(base.generations),
            master_seed: self.seed.unwrap_or(base.master_seed),
            fitness_shaping: self.shaping.map_or(base.fitness_shaping, Into::into),
            eval_test_every: self.eval_test_every.unwrap_or(base.eval_test_every),
            patience: self.patience.unwrap_or(base.patience),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub options: TrainOptions,
    /// JSON object with the same keys as the flags; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint. Hyperparameters come from the checkpoint;
    /// only --generations, --patience, and --eval-test-every may change.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

impl TrainArgs {
    pub fn merged_options(&self) -> Result<TrainOptions, CliError> {
        match &self.config {
            Some(path) => Ok(self.options.clone().or(read_config_file(path)?)),
            None => Ok(self.options.clone()),
        }
    }
}

fn read_config_file(path: &Path) -> Result<TrainOptions, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Earlier scan (binary PGM).
    #[arg(long)]
    pub scan1: PathBuf,
    /// Later scan (binary PGM).
    #[arg(long)]
    pub scan2: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Pairs per split; must be even.
    #[arg(long, default_value_t = 20)]
    pub pairs: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub min_blobs: usize,
    #[arg(long, default_value_t = 5)]
    pub max_blobs: usize,
    #[arg(long, default_value_t = 3.0)]
    pub min_radius: f64,
    #[arg(long, default_value_t = 7.0)]
    pub max_radius: f64,
    /// Discs added (progression) or removed (regression) in scan 2.
    #[arg(long, default_value_t = 2)]
    pub extra_blobs: usize,
    /// Radius factor applied to scan 2 discs (inverted for regression).
    #[arg(long, default_value_t = 1.4)]
    pub growth: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise_std: f64,
}
