use std::path::{Path, PathBuf};
use std::time::Instant;

use pairevo_core::data::{
    gen_synthetic as write_synthetic, load_manifest, load_pgm, preprocess, Dataset,
    ProgressionDelta, SyntheticTaskConfig,
};
use pairevo_core::evolution::{
    EvolutionConfig, GenerationStats, StopReason, TrainSink, TrainState, Trainer,
};
use pairevo_core::persistence::{load_checkpoint, Checkpoint, FileSink, MetricsWriter, RunConfig};
use pairevo_core::rng::SplitMix64;
use pairevo_core::{Class, Error, Model, ModelConfig};

use crate::options::{EvalArgs, GenArgs, InferArgs, TrainArgs};
use crate::CliError;

const DEFAULT_OUT: &str = "out";
const DEFAULT_CHECKPOINT_EVERY: u64 = 500;
const DEFAULT_LOG_EVERY: u64 = 50;

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

/// Errors raised while the training loop runs: sink failures are I/O, the rest is data.
fn training_err(e: Error) -> CliError {
    match e {
        Error::Io(_) | Error::Checkpoint(_) => CliError::Io(e.to_string()),
        Error::Config(_) => CliError::Config(e.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    load_checkpoint(path).map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} {} does not exist", path.display())))
    }
}

/// Forwards to a [`FileSink`] and prints a summary line every `log_every` generations.
struct LoggingSink {
    inner: FileSink,
    log_every: u64,
    train_len: usize,
    started: Instant,
}

impl TrainSink for LoggingSink {
    fn record(&mut self, s: &GenerationStats) -> pairevo_core::Result<()> {
        if self.log_every > 0 && s.generation % self.log_every == 0 {
            let test = s
                .test_accuracy
                .map_or_else(String::new, |a| format!(" test {a:.3}"));
            println!(
                "gen {:>6}  parent {:>3}/{}  children best {} mean {:.2} worst {}{}  [{:.1}s]",
                s.generation,
                s.parent_fitness,
                self.train_len,
                s.best_child,
                s.mean_child,
                s.worst_child,
                test,
                self.started.elapsed().as_secs_f64()
            );
        }
        self.inner.record(s)
    }

    fn checkpoint(&mut self, state: &TrainState, is_final: bool) -> pairevo_core::Result<()> {
        self.inner.checkpoint(state, is_final)
    }
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let opts = args.merged_options()?;
    let train_path = opts
        .train
        .clone()
        .ok_or_else(|| CliError::Config("--train is required".into()))?;
    let out_dir = opts.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let threads = opts.threads.unwrap_or_else(default_threads);
    if threads == 0 {
        return Err(CliError::Config("--threads must be >= 1".into()));
    }

    let (model_config, evo, state) = match &args.resume {
        Some(path) => {
            let ck = read_checkpoint(path)?;
            if opts.image_size.is_some_and(|s| s != ck.config.model.input_size) {
                return Err(CliError::Config(
                    "--image-size cannot change when resuming".into(),
                ));
            }
            let saved = ck.config.evolution.clone();
            let evo = EvolutionConfig {
                generations: opts.generations.unwrap_or(saved.generations),
                patience: opts.patience.unwrap_or(saved.patience),
                eval_test_every: opts.eval_test_every.unwrap_or(saved.eval_test_every),
                ..saved
            };
            let state = ck.state();
            (ck.config.model, evo, Some(state))
        }
        None => {
            let model = ModelConfig {
                input_size: opts.image_size.unwrap_or(ModelConfig::default().input_size),
                ..ModelConfig::default()
            };
            (model, opts.evolution(EvolutionConfig::default()), None)
        }
    };
    model_config
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    evo.validate().map_err(|e| CliError::Config(e.to_string()))?;

    require_file(&train_path, "train manifest")?;
    if let Some(test) = &opts.test {
        require_file(test, "test manifest")?;
    }
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;

    let train_set = load_manifest(&train_path, model_config.input_size).map_err(data_err)?;
    let test_set = opts
        .test
        .as_ref()
        .map(|p| load_manifest(p, model_config.input_size))
        .transpose()
        .map_err(data_err)?;

    let state = match state {
        Some(s) => s,
        None => TrainState::initial(&model_config, evo.master_seed)
            .map_err(|e| CliError::Config(e.to_string()))?,
    };
    let start_generation = state.generation;

    let metrics_path = out_dir.join("metrics.csv");
    let metrics = if args.resume.is_some() {
        MetricsWriter::resume(&metrics_path, start_generation)
    } else {
        MetricsWriter::create(&metrics_path)
    }
    .map_err(|e| CliError::Io(e.to_string()))?;

    let trainer = Trainer::new(
        model_config.clone(),
        evo.clone(),
        &train_set,
        test_set.as_ref(),
        threads,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;

    let checkpoint_path = out_dir.join("checkpoint.bin");
    let mut sink = LoggingSink {
        inner: FileSink {
            metrics,
            checkpoint_path: checkpoint_path.clone(),
            checkpoint_every: opts.checkpoint_every.unwrap_or(DEFAULT_CHECKPOINT_EVERY),
            config: RunConfig {
                model: model_config,
                evolution: evo.clone(),
            },
        },
        log_every: opts.log_every.unwrap_or(DEFAULT_LOG_EVERY),
        train_len: train_set.len(),
        started: Instant::now(),
    };
    println!(
        "training on {} pairs ({} threads) from generation {} to {}",
        train_set.len(),
        trainer.threads(),
        start_generation,
        evo.generations
    );
    let outcome = trainer.train(state, &mut sink).map_err(training_err)?;
    let last_parent = outcome.history.last().map(|s| s.parent_fitness);
    let reason = match outcome.stop {
        StopReason::Completed => "completed",
        StopReason::EarlyStop => "early stop",
    };
    match last_parent {
        Some(p) => println!(
            "{reason} at generation {}: parent fitness {p}/{}; checkpoint {}",
            outcome.state.generation,
            train_set.len(),
            checkpoint_path.display()
        ),
        None => println!(
            "no generations run; checkpoint {} at generation {}",
            checkpoint_path.display(),
            outcome.state.generation
        ),
    }
    Ok(())
}

/// Confusion counts indexed `[true][predicted]`.
fn confusion(model: &Model, dataset: &Dataset, threads: usize) -> Result<[[usize; 2]; 2], CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    use rayon::prelude::*;
    let predictions: Vec<Class> = pool
        .install(|| {
            dataset
                .samples()
                .par_iter()
                .map(|s| model.predict(&s.scan1, &s.scan2))
                .collect::<Result<Vec<_>, _>>()
        })
        .map_err(data_err)?;
    let mut m = [[0usize; 2]; 2];
    for (s, p) in dataset.samples().iter().zip(predictions) {
        m[s.label.index()][p.index()] += 1;
    }
    Ok(m)
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let threads = args.threads.unwrap_or_else(default_threads);
    if threads == 0 {
        return Err(CliError::Config("--threads must be >= 1".into()));
    }
    let ck = read_checkpoint(&args.checkpoint)?;
    let model = Model::from_genome(ck.config.model.clone(), ck.genome).map_err(data_err)?;
    let dataset = load_manifest(&args.manifest, ck.config.model.input_size).map_err(data_err)?;
    let m = confusion(&model, &dataset, threads)?;
    let correct = m[0][0] + m[1][1];
    println!(
        "accuracy {:.3} ({correct}/{})",
        correct as f64 / dataset.len() as f64,
        dataset.len()
    );
    for class in [Class::Regression, Class::Progression] {
        let i = class.index();
        println!(
            "{class}: {} pairs, {} correct",
            m[i][0] + m[i][1],
            m[i][i]
        );
    }
    println!("confusion [[{},{}],[{},{}]]", m[0][0], m[0][1], m[1][0], m[1][1]);
    println!("(rows: true regression, progression; columns: predicted)");
    Ok(())
}

pub fn infer(args: InferArgs) -> Result<(), CliError> {
    let ck = read_checkpoint(&args.checkpoint)?;
    let size = ck.config.model.input_size;
    let model = Model::from_genome(ck.config.model, ck.genome).map_err(data_err)?;
    let load = |path: &Path| {
        let raw = load_pgm(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        preprocess(&raw, size).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    };
    let scan1 = load(&args.scan1)?;
    let scan2 = load(&args.scan2)?;
    let logits = model.forward(&scan1, &scan2).map_err(data_err)?;
    let class = pairevo_core::model::argmax_class(logits);
    println!("{class}");
    println!("logits regression={} progression={}", logits[0], logits[1]);
    Ok(())
}

pub fn gen_synthetic(args: GenArgs) -> Result<(), CliError> {
    let mut seeds = SplitMix64::new(args.seed);
    let base = SyntheticTaskConfig {
        n_pairs: args.pairs,
        image_size: args.size,
        blob_count_range: (args.min_blobs, args.max_blobs),
        radius_range: (args.min_radius, args.max_radius),
        progression_delta: ProgressionDelta {
            extra_blobs: args.extra_blobs,
            radius_growth: args.growth,
        },
        noise_std: args.noise_std,
        seed: 0,
    };
    base.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    for split in ["train", "test"] {
        let cfg = SyntheticTaskConfig {
            seed: seeds.next_u64(),
            ..base.clone()
        };
        let manifest = write_synthetic(&cfg, &args.out, split).map_err(|e| match e {
            pairevo_core::data::DataError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Io(other.to_string()),
        })?;
        println!("wrote {} ({} pairs)", manifest.display(), cfg.n_pairs);
    }
    Ok(())
}
