//! Evolution-strategies training loop.
//!
//! Each generation spawns `population` children `parent + sigma * eps_i`,
//! where `eps_i` is regenerated on demand from a per-child seed, scores every
//! child by the number of correctly classified training pairs, shapes the
//! scores into weights and moves the parent by
//! `alpha / (population * sigma) * sum_i w_i * eps_i`.
//!
//! Child evaluations run on a worker pool; results land in an index-ordered
//! buffer and every floating-point reduction happens on one thread in a
//! fixed order, so the trajectory does not depend on the worker count.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Genome, Model, ModelConfig, ModelError};
use crate::rng::{derive_child_seed, GaussianStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitnessShaping {
    /// `(F_i - mean) / std`, population standard deviation.
    #[default]
    CenteredFitness,
    /// Ranks mapped linearly onto `[-0.5, 0.5]`, ties averaged.
    CenteredRank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    pub population: usize,
    pub sigma: f32,
    pub alpha: f32,
    pub generations: u64,
    pub master_seed: u64,
    pub fitness_shaping: FitnessShaping,
    /// Evaluate test accuracy every this many generations; 0 disables.
    pub eval_test_every: u64,
    /// Stop once the parent has been perfect on the training set for this
    /// many consecutive generations; 0 disables.
    pub patience: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            population: 40,
            sigma: 0.05,
            alpha: 0.01,
            generations: 50_000,
            master_seed: 0,
            fitness_shaping: FitnessShaping::CenteredFitness,
            eval_test_every: 50,
            patience: 200,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::Config(format!(
                "population must be >= 2, got {}",
                self.population
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Number of correctly classified pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Fitness(pub usize);

impl Fitness {
    pub fn correct(self) -> usize {
        self.0
    }

    pub fn accuracy(self, total: usize) -> f64 {
        self.0 as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    /// Generations completed, counting this one.
    pub generation: u64,
    pub best_child: usize,
    pub mean_child: f64,
    pub worst_child: usize,
    pub parent_fitness: usize,
    pub test_accuracy: Option<f64>,
    pub wall_ms: u64,
}

/// Scores `model` on every pair of `dataset`.
pub fn evaluate_model(model: &Model, dataset: &Dataset) -> Result<Fitness> {
    let mut correct = 0;
    for s in dataset.samples() {
        if model.predict(&s.scan1, &s.scan2)? == s.label {
            correct += 1;
        }
    }
    Ok(Fitness(correct))
}

pub fn evaluate_fitness(genome: &Genome, config: &ModelConfig, dataset: &Dataset) -> Result<Fitness> {
    let model = Model::from_genome(config.clone(), genome.clone())?;
    evaluate_model(&model, dataset)
}

/// Turns raw fitness counts into update weights.
pub fn shape_fitness(fitnesses: &[usize], mode: FitnessShaping) -> Vec<f32> {
    let n = fitnesses.len();
    if n == 0 {
        return Vec::new();
    }
    match mode {
        FitnessShaping::CenteredFitness => {
            let mean = fitnesses.iter().map(|&f| f as f64).sum::<f64>() / n as f64;
            let var = fitnesses
                .iter()
                .map(|&f| (f as f64 - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let std = var.sqrt();
            if std == 0.0 {
                return vec![0.0; n];
            }
            fitnesses
                .iter()
                .map(|&f| ((f as f64 - mean) / std) as f32)
                .collect()
        }
        FitnessShaping::CenteredRank => {
            if n < 2 {
                return vec![0.0; n];
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| fitnesses[i]);
            let mut ranks = vec![0.0f64; n];
            let mut start = 0;
            while start < n {
                let mut end = start;
                while end + 1 < n && fitnesses[order[end + 1]] == fitnesses[order[start]] {
                    end += 1;
                }
                let avg = (start + end) as f64 / 2.0;
                for &i in &order[start..=end] {
                    ranks[i] = avg;
                }
                start = end + 1;
            }
            ranks
                .iter()
                .map(|&r| (r / (n - 1) as f64 - 0.5) as f32)
                .collect()
        }
    }
}

/// Seeds of every child in `generation`, by child index.
pub fn child_seeds(master_seed: u64, generation: u64, population: usize) -> Vec<u64> {
    (0..population as u64)
        .map(|i| derive_child_seed(master_seed, generation, i))
        .collect()
}

/// Fitness-weighted noise update with caller-supplied noise.
///
/// `fill_noise(i, buf)` must write child `i`'s noise vector into `buf`.
/// Contributions are summed in ascending child order with `f32` accumulators.
pub fn recombine_with<F>(
    parent: &Genome,
    weights: &[f32],
    sigma: f32,
    alpha: f32,
    mut fill_noise: F,
) -> Genome
where
    F: FnMut(usize, &mut [f32]),
{
    if weights.iter().all(|&w| w == 0.0) {
        return parent.clone();
    }
    let len = parent.len();
    let mut acc = vec![0.0f32; len];
    let mut eps = vec![0.0f32; len];
    for (i, &w) in weights.iter().enumerate() {
        fill_noise(i, &mut eps);
        for (a, &e) in acc.iter_mut().zip(&eps) {
            *a += w * e;
        }
    }
    let scale = alpha / (weights.len() as f32 * sigma);
    Genome::new(
        parent
            .values()
            .iter()
            .zip(&acc)
            .map(|(&theta, &a)| theta + scale * a)
            .collect(),
    )
}

/// `parent + alpha / (n * sigma) * sum_i w_i * sample_noise(seed_i)`.
pub fn recombine(
    parent: &Genome,
    child_seeds: &[u64],
    weights: &[f32],
    sigma: f32,
    alpha: f32,
) -> Result<Genome> {
    if child_seeds.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} child seeds but {} weights",
            child_seeds.len(),
            weights.len()
        )));
    }
    Ok(recombine_with(parent, weights, sigma, alpha, |i, buf| {
        GaussianStream::new(child_seeds[i]).fill(buf)
    }))
}

/// Writes `parent + sigma * eps(seed)` into `out`.
pub fn mutate_into(parent: &Genome, seed: u64, sigma: f32, out: &mut Vec<f32>) {
    out.resize(parent.len(), 0.0);
    GaussianStream::new(seed).fill(out);
    for (c, &p) in out.iter_mut().zip(parent.values()) {
        *c = p + sigma * *c;
    }
}

/// Training position: the parent genome after `generation` completed generations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub generation: u64,
    pub genome: Genome,
}

impl TrainState {
    pub fn initial(model_config: &ModelConfig, master_seed: u64) -> Result<Self> {
        let model = Model::build(model_config.clone(), master_seed)?;
        Ok(Self {
            generation: 0,
            genome: model.into_genome(),
        })
    }
}

/// Receives per-generation telemetry and checkpoints from [`Trainer::train`].
pub trait TrainSink {
    fn record(&mut self, stats: &GenerationStats) -> Result<()>;

    /// Called after every generation; `is_final` is set once when training stops.
    fn checkpoint(&mut self, state: &TrainState, is_final: bool) -> Result<()>;
}

/// Sink that drops everything.
#[derive(Debug, Default)]
pub struct NullSink;

impl TrainSink for NullSink {
    fn record(&mut self, _: &GenerationStats) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _: &TrainState, _: bool) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    EarlyStop,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<GenerationStats>,
    pub stop: StopReason,
}

impl TrainOutcome {
    /// Running maximum of parent training fitness over the history.
    pub fn running_max_parent(&self) -> Vec<usize> {
        running_max(self.history.iter().map(|s| s.parent_fitness))
    }
}

pub fn running_max(values: impl IntoIterator<Item = usize>) -> Vec<usize> {
    values
        .into_iter()
        .scan(0usize, |best, v| {
            *best = (*best).max(v);
            Some(*best)
        })
        .collect()
}

/// Everything a generation needs besides the parent genome.
pub struct Trainer<'a> {
    model_config: ModelConfig,
    evo: EvolutionConfig,
    train: &'a Dataset,
    test: Option<&'a Dataset>,
    pool: rayon::ThreadPool,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model_config: ModelConfig,
        evo: EvolutionConfig,
        train: &'a Dataset,
        test: Option<&'a Dataset>,
        threads: usize,
    ) -> Result<Self> {
        model_config.validate()?;
        evo.validate()?;
        for ds in std::iter::once(train).chain(test) {
            if ds.input_shape() != model_config.input_shape() {
                return Err(Error::Config(format!(
                    "dataset {:?} has scans of shape {}, model expects {}",
                    ds.name(),
                    ds.input_shape(),
                    model_config.input_shape()
                )));
            }
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
        Ok(Self {
            model_config,
            evo,
            train,
            test,
            pool,
        })
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_config
    }

    pub fn evolution_config(&self) -> &EvolutionConfig {
        &self.evo
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    fn check_genome(&self, genome: &Genome) -> Result<()> {
        let expected = crate::model::genome_len(&self.model_config);
        if genome.len() != expected {
            return Err(ModelError::LengthMismatch {
                expected,
                actual: genome.len(),
            }
            .into());
        }
        Ok(())
    }

    /// Fitness of `genome` on `dataset`, pairs scored on the worker pool.
    pub fn fitness_on(&self, genome: &Genome, dataset: &Dataset) -> Result<Fitness> {
        let model = Model::from_genome(self.model_config.clone(), genome.clone())?;
        let hits: Vec<bool> = self.pool.install(|| {
            dataset
                .samples()
                .par_iter()
                .map(|s| Ok(model.predict(&s.scan1, &s.scan2)? == s.label))
                .collect::<Result<Vec<bool>>>()
        })?;
        Ok(Fitness(hits.into_iter().filter(|&h| h).count()))
    }

    /// Child fitness on the training set (and optionally the test set), in child order.
    pub fn evaluate_children(
        &self,
        parent: &Genome,
        seeds: &[u64],
        with_test: bool,
    ) -> Result<Vec<(Fitness, Option<Fitness>)>> {
        self.check_genome(parent)?;
        let sigma = self.evo.sigma;
        let config = &self.model_config;
        let test = self.test.filter(|_| with_test);
        self.pool.install(|| {
            seeds
                .par_iter()
                .map_init(Vec::new, |buf, &seed| {
                    mutate_into(parent, seed, sigma, buf);
                    let model =
                        Model::from_genome(config.clone(), Genome::new(std::mem::take(buf)))?;
                    let train = evaluate_model(&model, self.train)?;
                    let test = test.map(|t| evaluate_model(&model, t)).transpose()?;
                    *buf = model.into_genome().into_vec();
                    Ok((train, test))
                })
                .collect()
        })
    }

    fn test_due(&self, completed: u64) -> bool {
        self.test.is_some() && self.evo.eval_test_every > 0 && completed % self.evo.eval_test_every == 0
    }

    /// One mutation / evaluation / recombination cycle.
    pub fn run_generation(&self, state: &TrainState) -> Result<(TrainState, GenerationStats)> {
        let started = Instant::now();
        let completed = state.generation + 1;
        let with_test = self.test_due(completed);

        let seeds = child_seeds(self.evo.master_seed, state.generation, self.evo.population);
        let scores = self.evaluate_children(&state.genome, &seeds, with_test)?;
        let train_scores: Vec<usize> = scores.iter().map(|(f, _)| f.0).collect();

        let weights = shape_fitness(&train_scores, self.evo.fitness_shaping);
        let genome = recombine(&state.genome, &seeds, &weights, self.evo.sigma, self.evo.alpha)?;
        let parent_fitness = self.fitness_on(&genome, self.train)?;

        let test_accuracy = match self.test.filter(|_| with_test) {
            Some(test) => {
                let parent = self.fitness_on(&genome, test)?;
                let best = scores
                    .iter()
                    .filter_map(|(_, t)| *t)
                    .chain(std::iter::once(parent))
                    .max()
                    .unwrap_or_default();
                Some(best.accuracy(test.len()))
            }
            None => None,
        };

        let stats = GenerationStats {
            generation: completed,
            best_child: train_scores.iter().copied().max().unwrap_or(0),
            mean_child: train_scores.iter().sum::<usize>() as f64 / train_scores.len() as f64,
            worst_child: train_scores.iter().copied().min().unwrap_or(0),
            parent_fitness: parent_fitness.0,
            test_accuracy,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        Ok((
            TrainState {
                generation: completed,
                genome,
            },
            stats,
        ))
    }

    /// Runs generations from `state` until `generations` total have completed or
    /// the early-stop condition holds.
    pub fn train(&self, state: TrainState, sink: &mut dyn TrainSink) -> Result<TrainOutcome> {
        self.check_genome(&state.genome)?;
        let mut state = state;
        let mut history = Vec::new();
        let mut perfect_streak = 0u64;
        let mut stop = StopReason::Completed;
        while state.generation < self.evo.generations {
            let (next, stats) = self.run_generation(&state)?;
            state = next;
            sink.record(&stats)?;
            if stats.parent_fitness == self.train.len() {
                perfect_streak += 1;
            } else {
                perfect_streak = 0;
            }
            let early = self.evo.patience > 0 && perfect_streak >= self.evo.patience;
            history.push(stats);
            if early {
                stop = StopReason::EarlyStop;
                break;
            }
            if state.generation < self.evo.generations {
                sink.checkpoint(&state, false)?;
            }
        }
        sink.checkpoint(&state, true)?;
        Ok(TrainOutcome {
            state,
            history,
            stop,
        })
    }
}
