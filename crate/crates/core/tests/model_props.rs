use pairevo_core::data::{synthesize, Dataset, SyntheticTaskConfig};
use pairevo_core::model::{argmax_class, ModelError, ParamRole};
use pairevo_core::tensor::Shape;
use pairevo_core::{genome_len, Class, Genome, Model, ModelConfig};
use proptest::prelude::*;
use rayon::prelude::*;

/// Recorded logits (f32 bit patterns) of `Model::build(default, 7)` on the first pair of `sample_data(8, 3)`.
const GOLDEN_LOGITS: [u32; 2] = [3_151_555_131, 1_043_754_046];

fn sample_data(n: usize, seed: u64) -> Dataset {
    let cfg = SyntheticTaskConfig {
        n_pairs: n,
        seed,
        ..SyntheticTaskConfig::default()
    };
    Dataset::from_raw("sample", &synthesize(&cfg).unwrap(), 64).unwrap()
}

#[test]
fn default_genome_length_matches_layer_arithmetic() {
    let conv1 = 3 * 3 * 1 * 32 + 32;
    let conv_n = 3 * 3 * 32 * 32 + 32;
    let fc1 = 512 * 256 + 256;
    let fc2 = 512 * 256 + 256;
    let fc3 = 256 * 128 + 128;
    let out = 128 * 2 + 2;
    assert_eq!((conv1, conv_n, fc1), (320, 9_248, 131_328));
    let total = 2 * (conv1 + 3 * conv_n + fc1) + fc2 + fc3 + out;
    assert_eq!(total, 483_266);
    assert_eq!(genome_len(&ModelConfig::default()), total);

    let shared = ModelConfig {
        share_branch_weights: true,
        ..ModelConfig::default()
    };
    assert_eq!(genome_len(&shared), conv1 + 3 * conv_n + fc1 + fc2 + fc3 + out);
}

#[test]
fn branch_shapes_and_concat_length() {
    let model = Model::build(ModelConfig::default(), 1).unwrap();
    let data = sample_data(2, 1);
    let s = &data.samples()[0];
    let trace = model.trace(&s.scan1, &s.scan2).unwrap();
    for shapes in &trace.branch_shapes {
        let sides: Vec<usize> = shapes.iter().map(|s| s.height).collect();
        assert_eq!(sides, [64, 32, 16, 8, 4]);
        assert!(shapes.iter().all(|s| s.width == s.height));
        assert_eq!(*shapes.last().unwrap(), Shape::new(32, 4, 4));
    }
    assert_eq!(trace.flatten_lens, [512, 512]);
    assert_eq!(trace.fc1_concat.len(), 512);
}

#[test]
fn glorot_bounds_and_means() {
    let config = ModelConfig::default();
    let layout = config.layout();
    let mut samples: Vec<Vec<f32>> = vec![Vec::new(); layout.layers().len()];
    let mut seed = 0;
    while samples.iter().any(|s| s.len() < 10_000) {
        let model = Model::build(config.clone(), seed).unwrap();
        for (i, layer) in layout.layers().iter().enumerate() {
            assert!(model.layer_bias(layer).iter().all(|&b| b.to_bits() == 0));
            if samples[i].len() < 10_000 {
                samples[i].extend_from_slice(model.layer_weights(layer));
            }
        }
        seed += 1;
    }
    for (layer, values) in layout.layers().iter().zip(&samples) {
        let b = layer.kind.glorot_bound();
        assert!(
            values.iter().all(|&w| f64::from(w).abs() < b),
            "{} has a weight outside (-{b}, {b})",
            layer.name
        );
        let mean = values.iter().map(|&w| f64::from(w)).sum::<f64>() / values.len() as f64;
        assert!(mean.abs() < b / 10.0, "{}: mean {mean} vs bound {b}", layer.name);
    }
    let conv1 = &layout.layers()[0];
    assert!((conv1.kind.glorot_bound() - 0.14213).abs() < 1e-5);
}

#[test]
fn build_is_deterministic_across_threads() {
    let reference = Model::build(ModelConfig::default(), 11).unwrap().into_genome();
    let others: Vec<Genome> = (0..4)
        .into_par_iter()
        .map(|_| Model::build(ModelConfig::default(), 11).unwrap().into_genome())
        .collect();
    assert!(others.iter().all(|g| g.bits_eq(&reference)));
    let different = Model::build(ModelConfig::default(), 12).unwrap().into_genome();
    assert!(!different.bits_eq(&reference));
}

#[test]
fn golden_logits_across_thread_counts() {
    let model = Model::build(ModelConfig::default(), 7).unwrap();
    let data = sample_data(8, 3);
    let s = &data.samples()[0];
    let logits = model.forward(&s.scan1, &s.scan2).unwrap();
    assert_eq!(logits.map(f32::to_bits), GOLDEN_LOGITS);
    for threads in [1, 4, 8] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let all: Vec<[f32; 2]> = pool.install(|| {
            data.samples()
                .par_iter()
                .rev()
                .map(|s| model.forward(&s.scan1, &s.scan2).unwrap())
                .collect()
        });
        let last = all.last().unwrap();
        assert_eq!(last.map(f32::to_bits), GOLDEN_LOGITS, "{threads} threads");
    }
}

#[test]
fn genome_round_trip_and_length_check() {
    let model = Model::build(ModelConfig::default(), 5).unwrap();
    let g = model.to_genome();
    assert_eq!(g.len(), genome_len(&ModelConfig::default()));
    let back = Model::from_genome(ModelConfig::default(), g.clone()).unwrap();
    assert!(back.to_genome().bits_eq(&g));
    let short = Genome::new(g.values()[1..].to_vec());
    assert!(matches!(
        Model::from_genome(ModelConfig::default(), short),
        Err(ModelError::LengthMismatch { .. })
    ));
}

#[test]
fn perturbing_one_index_touches_one_parameter() {
    let config = ModelConfig::default();
    let base = Model::build(config.clone(), 9).unwrap();
    let len = base.genome().len();
    let layout = base.layout().clone();
    for idx in [0, 1, 319, 320, 47_000, len / 2, len - 259, len - 1] {
        let mut g = base.to_genome();
        g.values_mut()[idx] += 1.0;
        let moved = Model::from_genome(config.clone(), g).unwrap();
        let loc = layout.locate(idx).unwrap();
        let mut changed = Vec::new();
        for (li, layer) in layout.layers().iter().enumerate() {
            let pairs = [
                (ParamRole::Weight, base.layer_weights(layer), moved.layer_weights(layer)),
                (ParamRole::Bias, base.layer_bias(layer), moved.layer_bias(layer)),
            ];
            for (role, a, b) in pairs {
                for (k, (x, y)) in a.iter().zip(b).enumerate() {
                    if x.to_bits() != y.to_bits() {
                        changed.push((li, role, k));
                    }
                }
            }
        }
        assert_eq!(changed, [(loc.layer, loc.role, loc.index)], "index {idx}");
    }
}

#[test]
fn swapping_scans_changes_logits() {
    let mut g = Model::build(ModelConfig::default(), 21).unwrap().into_genome();
    for (i, v) in g.values_mut().iter_mut().enumerate() {
        if i % 97 == 0 {
            *v += 0.05;
        }
    }
    let model = Model::from_genome(ModelConfig::default(), g).unwrap();
    let data = sample_data(6, 4);
    let mut differing = 0;
    for s in data.samples() {
        let a = model.forward(&s.scan1, &s.scan2).unwrap();
        let b = model.forward(&s.scan2, &s.scan1).unwrap();
        if a != b {
            differing += 1;
        }
    }
    assert_eq!(differing, data.len());
}

#[test]
fn evaluation_order_does_not_matter() {
    let model = Model::build(ModelConfig::default(), 2).unwrap();
    let data = sample_data(6, 8);
    let forward: Vec<[u32; 2]> = data
        .samples()
        .iter()
        .map(|s| model.forward(&s.scan1, &s.scan2).unwrap().map(f32::to_bits))
        .collect();
    let mut backward: Vec<[u32; 2]> = data
        .samples()
        .iter()
        .rev()
        .map(|s| model.forward(&s.scan1, &s.scan2).unwrap().map(f32::to_bits))
        .collect();
    backward.reverse();
    assert_eq!(forward, backward);
}

fn small_config() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        conv_channels: 4,
        fc_branch: 8,
        fc2: 8,
        fc3: 4,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prediction_invariant_to_common_logit_shift(seed in any::<u64>(), c in -8.0f32..8.0) {
        let config = small_config();
        let model = Model::build(config.clone(), seed).unwrap();
        let data = Dataset::from_raw(
            "s",
            &synthesize(&SyntheticTaskConfig { n_pairs: 2, image_size: 16, radius_range: (1.0, 3.0), seed, ..SyntheticTaskConfig::default() }).unwrap(),
            16,
        ).unwrap();
        let out = model.layout().head().last().unwrap().bias_range();
        let mut g = model.to_genome();
        g.values_mut()[out.start] += c;
        g.values_mut()[out.start + 1] += c;
        let shifted = Model::from_genome(config, g).unwrap();
        for s in data.samples() {
            let before = model.forward(&s.scan1, &s.scan2).unwrap();
            let after = shifted.forward(&s.scan1, &s.scan2).unwrap();
            prop_assume!((before[0] - before[1]).abs() > 1e-4);
            prop_assert!(((after[0] - after[1]) - (before[0] - before[1])).abs() < 1e-5);
            prop_assert_eq!(argmax_class(before), argmax_class(after));
        }
    }

    #[test]
    fn argmax_ignores_constant_offset(a in -100.0f32..100.0, b in -100.0f32..100.0, c in -1000.0f32..1000.0) {
        prop_assume!((a - b).abs() > 1e-3);
        prop_assert_eq!(argmax_class([a, b]), argmax_class([a + c, b + c]));
    }
}

#[test]
fn predict_examples() {
    assert_eq!(argmax_class([1.0, -1.0]).index(), 0);
    assert_eq!(argmax_class([-0.1, 0.2]).index(), 1);
    assert_eq!(argmax_class([0.0, 0.0]), Class::Regression);
}
