use std::collections::HashSet;

use pairevo_core::data::{synthesize, Dataset, PairSample, SyntheticTaskConfig};
use pairevo_core::evolution::{
    child_seeds, evaluate_fitness, evaluate_model, recombine, running_max, shape_fitness,
    EvolutionConfig, FitnessShaping, GenerationStats, NullSink, StopReason, TrainSink,
    TrainState, Trainer,
};
use pairevo_core::persistence::{Checkpoint, RunConfig};
use pairevo_core::rng::{derive_child_seed, sample_noise, SplitMix64};
use pairevo_core::{genome_len, Genome, Model, ModelConfig};
use proptest::prelude::*;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        conv_channels: 4,
        fc_branch: 8,
        fc2: 8,
        fc3: 4,
        ..ModelConfig::default()
    }
}

fn tiny_data(n: usize, seed: u64) -> Dataset {
    let cfg = SyntheticTaskConfig {
        n_pairs: n,
        image_size: 16,
        radius_range: (1.0, 3.0),
        seed,
        ..SyntheticTaskConfig::default()
    };
    Dataset::from_raw("tiny", &synthesize(&cfg).unwrap(), 16).unwrap()
}

fn default_data(n: usize, seed: u64) -> Dataset {
    let cfg = SyntheticTaskConfig {
        n_pairs: n,
        seed,
        ..SyntheticTaskConfig::default()
    };
    Dataset::from_raw("default", &synthesize(&cfg).unwrap(), 64).unwrap()
}

fn evo(seed: u64, generations: u64) -> EvolutionConfig {
    EvolutionConfig {
        population: 8,
        generations,
        master_seed: seed,
        patience: 0,
        ..EvolutionConfig::default()
    }
}

/// The same scans relabeled with `model`'s own predictions, optionally inverted.
fn relabel(data: &Dataset, model: &Model, invert: bool) -> Dataset {
    let samples = data
        .samples()
        .iter()
        .map(|s| {
            let mut label = model.predict(&s.scan1, &s.scan2).unwrap();
            if invert {
                label = pairevo_core::Class::from_index(1 - label.index() as u8).unwrap();
            }
            PairSample {
                label,
                ..s.clone()
            }
        })
        .collect();
    Dataset::new("relabeled", samples).unwrap()
}

#[test]
fn noise_statistics() {
    let z = sample_noise(0xC0FFEE, 1_000_000);
    let n = z.len() as f64;
    let mean = z.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = z.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.005, "mean {mean}");
    assert!((var - 1.0).abs() < 0.01, "variance {var}");
    let again = sample_noise(0xC0FFEE, 1_000_000);
    assert!(z.iter().zip(&again).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn sibling_seeds_never_collide() {
    let mut rng = SplitMix64::new(99);
    for _ in 0..1_000_000 {
        let (s, g) = (rng.next_u64(), rng.next_u64());
        assert_ne!(derive_child_seed(s, g, 0), derive_child_seed(s, g, 1));
    }
    let all: HashSet<u64> = (0..25_000u64)
        .flat_map(|g| child_seeds(7, g, 40))
        .collect();
    assert_eq!(all.len(), 1_000_000);
}

#[test]
fn fitness_counts_examples() {
    let config = tiny_config();
    let data = tiny_data(50, 5);
    let model = Model::build(config.clone(), 3).unwrap();

    let perfect = relabel(&data, &model, false);
    assert_eq!(evaluate_fitness(model.genome(), &config, &perfect).unwrap().0, 50);
    let hopeless = relabel(&data, &model, true);
    assert_eq!(evaluate_model(&model, &hopeless).unwrap().0, 0);

    let zero = Genome::zeros(genome_len(&config));
    let counts = data.class_counts();
    assert_eq!(counts, [25, 25]);
    assert_eq!(evaluate_fitness(&zero, &config, &data).unwrap().0, counts[0]);

    let mut always_progression = zero.clone();
    let last = always_progression.len() - 1;
    always_progression.values_mut()[last] = 1.0;
    assert_eq!(
        evaluate_fitness(&always_progression, &config, &data).unwrap().0,
        25
    );
}

#[test]
fn generation_matches_its_parts_and_respects_locality() {
    let config = tiny_config();
    let data = tiny_data(10, 2);
    let evo = evo(3, 0);
    let trainer = Trainer::new(config.clone(), evo.clone(), &data, None, 2).unwrap();
    let mut state = TrainState::initial(&config, 3).unwrap();
    for _ in 0..6 {
        let seeds = child_seeds(evo.master_seed, state.generation, evo.population);
        let scores: Vec<usize> = trainer
            .evaluate_children(&state.genome, &seeds, false)
            .unwrap()
            .iter()
            .map(|(f, _)| f.0)
            .collect();
        let weights = shape_fitness(&scores, evo.fitness_shaping);
        let expected = recombine(&state.genome, &seeds, &weights, evo.sigma, evo.alpha).unwrap();
        let (next, stats) = trainer.run_generation(&state).unwrap();
        assert!(next.genome.bits_eq(&expected));
        assert_eq!(next.generation, state.generation + 1);
        assert_stats_consistent(&stats, data.len());

        let max_eps = seeds
            .iter()
            .map(|&s| sample_noise(s, state.genome.len()).iter().fold(0f32, |m, v| m.max(v.abs())))
            .fold(0f32, f32::max);
        let sum_w: f32 = weights.iter().map(|w| w.abs()).sum();
        let bound = f64::from(evo.alpha) / (evo.population as f64 * f64::from(evo.sigma))
            * f64::from(sum_w)
            * f64::from(max_eps);
        for (a, b) in state.genome.values().iter().zip(next.genome.values()) {
            let step = f64::from(b - a).abs();
            assert!(step <= bound * (1.0 + 1e-4) + f64::from(f32::EPSILON * a.abs()), "{step} > {bound}");
        }
        state = next;
    }
}

fn assert_stats_consistent(stats: &GenerationStats, n: usize) {
    assert!(stats.worst_child as f64 <= stats.mean_child);
    assert!(stats.mean_child <= stats.best_child as f64);
    assert!(stats.best_child <= n && stats.parent_fitness <= n);
}

#[test]
fn no_signal_leaves_parent_fixed() {
    let config = tiny_config();
    let data = tiny_data(10, 6);
    let evo = EvolutionConfig {
        sigma: 1e-30,
        ..evo(4, 5)
    };
    let trainer = Trainer::new(config.clone(), evo, &data, None, 2).unwrap();
    let initial = TrainState::initial(&config, 4).unwrap();
    let outcome = trainer.train(initial.clone(), &mut NullSink).unwrap();
    assert_eq!(outcome.history.len(), 5);
    for s in &outcome.history {
        assert_eq!(s.best_child, s.worst_child);
    }
    assert!(outcome.state.genome.bits_eq(&initial.genome));
}

#[test]
fn early_stop_after_patience() {
    let config = tiny_config();
    let model = Model::build(config.clone(), 8).unwrap();
    let data = relabel(&tiny_data(10, 7), &model, false);
    let evo = EvolutionConfig {
        sigma: 1e-30,
        patience: 3,
        ..evo(8, 100)
    };
    let trainer = Trainer::new(config.clone(), evo, &data, None, 1).unwrap();
    let outcome = trainer
        .train(TrainState::initial(&config, 8).unwrap(), &mut NullSink)
        .unwrap();
    assert_eq!(outcome.stop, StopReason::EarlyStop);
    assert_eq!(outcome.history.len(), 3);
    assert!(outcome.history.iter().all(|s| s.parent_fitness == 10));
}

#[derive(Default)]
struct Recorder {
    stats: Vec<GenerationStats>,
    checkpoints: Vec<(u64, bool)>,
}

impl TrainSink for Recorder {
    fn record(&mut self, stats: &GenerationStats) -> pairevo_core::Result<()> {
        self.stats.push(stats.clone());
        Ok(())
    }

    fn checkpoint(&mut self, state: &TrainState, is_final: bool) -> pairevo_core::Result<()> {
        self.checkpoints.push((state.generation, is_final));
        Ok(())
    }
}

#[test]
fn zero_generations_returns_initial_genome() {
    let config = tiny_config();
    let data = tiny_data(4, 1);
    let trainer = Trainer::new(config.clone(), evo(1, 0), &data, None, 1).unwrap();
    let initial = TrainState::initial(&config, 1).unwrap();
    let mut sink = Recorder::default();
    let outcome = trainer.train(initial.clone(), &mut sink).unwrap();
    assert!(outcome.history.is_empty());
    assert_eq!(outcome.state, initial);
    assert_eq!(sink.checkpoints, [(0, true)]);
}

#[test]
fn sink_sees_every_generation() {
    let config = tiny_config();
    let data = tiny_data(4, 1);
    let test = tiny_data(4, 2);
    let evo = EvolutionConfig {
        eval_test_every: 2,
        ..evo(1, 5)
    };
    let trainer = Trainer::new(config.clone(), evo, &data, Some(&test), 1).unwrap();
    let mut sink = Recorder::default();
    let outcome = trainer
        .train(TrainState::initial(&config, 1).unwrap(), &mut sink)
        .unwrap();
    let gens: Vec<u64> = sink.stats.iter().map(|s| s.generation).collect();
    assert_eq!(gens, [1, 2, 3, 4, 5]);
    let tested: Vec<bool> = sink.stats.iter().map(|s| s.test_accuracy.is_some()).collect();
    assert_eq!(tested, [false, true, false, true, false]);
    assert_eq!(
        sink.checkpoints,
        [(1, false), (2, false), (3, false), (4, false), (5, true)]
    );
    let rm = outcome.running_max_parent();
    assert!(rm.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let config = tiny_config();
    let data = tiny_data(8, 11);
    let full_cfg = evo(21, 12);
    let full = Trainer::new(config.clone(), full_cfg.clone(), &data, None, 2)
        .unwrap()
        .train(TrainState::initial(&config, 21).unwrap(), &mut NullSink)
        .unwrap();

    let first = Trainer::new(config.clone(), evo(21, 6), &data, None, 3)
        .unwrap()
        .train(TrainState::initial(&config, 21).unwrap(), &mut NullSink)
        .unwrap();
    let ck = Checkpoint {
        generation: first.state.generation,
        master_seed: 21,
        config: RunConfig {
            model: config.clone(),
            evolution: full_cfg.clone(),
        },
        genome: first.state.genome.clone(),
    };
    let restored = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
    let second = Trainer::new(config, full_cfg, &data, None, 1)
        .unwrap()
        .train(restored.state(), &mut NullSink)
        .unwrap();

    assert_eq!(second.state.generation, 12);
    assert!(second.state.genome.bits_eq(&full.state.genome));
    let strip = |h: &[GenerationStats]| -> Vec<GenerationStats> {
        h.iter().map(|s| GenerationStats { wall_ms: 0, ..s.clone() }).collect()
    };
    let stitched: Vec<GenerationStats> = first.history.iter().chain(&second.history).cloned().collect();
    assert_eq!(strip(&stitched), strip(&full.history));
}

#[test]
fn default_model_generation_is_thread_independent() {
    let config = ModelConfig::default();
    let data = default_data(20, 1000);
    let evo = EvolutionConfig {
        generations: 2,
        master_seed: 42,
        ..EvolutionConfig::default()
    };
    let run = |threads| {
        let trainer = Trainer::new(config.clone(), evo.clone(), &data, None, threads).unwrap();
        let mut state = TrainState::initial(&config, 42).unwrap();
        let mut stats = Vec::new();
        for _ in 0..2 {
            let (next, s) = trainer.run_generation(&state).unwrap();
            stats.push((s.best_child, s.worst_child, s.mean_child.to_bits(), s.parent_fitness));
            state = next;
        }
        (state, stats)
    };
    let (reference, ref_stats) = run(1);
    for threads in [4, 8] {
        let (state, stats) = run(threads);
        assert!(state.genome.bits_eq(&reference.genome), "{threads} threads");
        assert_eq!(stats, ref_stats);
    }
}

proptest! {
    #[test]
    fn centered_weights_sum_to_zero(f in prop::collection::vec(0usize..=50, 2..100)) {
        let n = f.len() as f32;
        for mode in [FitnessShaping::CenteredFitness, FitnessShaping::CenteredRank] {
            let w = shape_fitness(&f, mode);
            prop_assert_eq!(w.len(), f.len());
            let sum: f32 = w.iter().sum();
            prop_assert!(sum.abs() < 1e-4 * n, "{:?}: sum {}", mode, sum);
        }
    }

    #[test]
    fn shaping_preserves_order(f in prop::collection::vec(0usize..=50, 2..60)) {
        for mode in [FitnessShaping::CenteredFitness, FitnessShaping::CenteredRank] {
            let w = shape_fitness(&f, mode);
            for i in 0..f.len() {
                for j in 0..f.len() {
                    if f[i] < f[j] {
                        prop_assert!(w[i] < w[j]);
                    } else if f[i] == f[j] {
                        prop_assert_eq!(w[i].to_bits(), w[j].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn running_max_never_decreases(v in prop::collection::vec(0usize..100, 0..200)) {
        let rm = running_max(v.iter().copied());
        prop_assert_eq!(rm.len(), v.len());
        prop_assert!(rm.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(rm.iter().zip(&v).all(|(m, x)| m >= x));
    }

    #[test]
    fn child_seed_is_pure(s in any::<u64>(), g in any::<u64>(), i in 0u64..1000) {
        prop_assert_eq!(derive_child_seed(s, g, i), derive_child_seed(s, g, i));
    }
}
