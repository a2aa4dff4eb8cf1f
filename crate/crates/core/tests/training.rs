use fbnet::data::{synth_generate, SynthConfig};
use fbnet::models::{ForwardOptions, ForwardPass, ModelParams, ModelVariant};
use fbnet::nn::{softmax_cross_entropy, OptState, SgdConfig};
use fbnet::training::{balanced_minibatch, dihedral, train, train_step, TrainConfig};
use fbnet::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_set() -> fbnet::data::Dataset {
    synth_generate(&SynthConfig {
        n_pos: 20,
        n_neg: 200,
        seed: 3,
        ..SynthConfig::default()
    })
}

fn quick_config(iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 16,
        positives_per_batch: 2,
        eval_every: 5,
        ..TrainConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batches_hold_both_classes(
        n_pos_pool in 1usize..20, n_neg_pool in 1usize..50,
        n_pos in 1usize..10, n_neg in 1usize..40, seed in any::<u64>(),
    ) {
        let pos: Vec<usize> = (0..n_pos_pool).collect();
        let neg: Vec<usize> = (100..100 + n_neg_pool).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = balanced_minibatch(&pos, &neg, n_pos, n_neg, &mut rng).unwrap();
        prop_assert_eq!(b.iter().filter(|e| e.1).count(), n_pos);
        prop_assert_eq!(b.iter().filter(|e| !e.1).count(), n_neg);
        prop_assert!(b.iter().all(|&(i, l)| l == (i < 100)));
    }

    #[test]
    fn dihedral_permutes_pixels_within_each_channel(
        vals in prop::collection::vec(-10.0f32..10.0, 2 * 5 * 5), k in 0usize..8,
    ) {
        let x = Tensor::new(vec![2, 5, 5], vals).unwrap();
        let y = dihedral(&x, k).unwrap();
        for c in 0..2 {
            let mut a: Vec<u32> = x.channel(c).iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = y.channel(c).iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn dihedral_group_has_eight_distinct_elements() {
    let x = Tensor::from_fn(&[1, 3, 3], |i| i as f32);
    let imgs: Vec<Vec<f32>> = (0..8).map(|k| dihedral(&x, k).unwrap().into_data()).collect();
    for i in 0..8 {
        for j in 0..i {
            assert_ne!(imgs[i], imgs[j], "{i} and {j}");
        }
    }
    assert_eq!(imgs[0], x.data());
}

#[test]
fn minibatch_draws_are_uniform() {
    let pos: Vec<usize> = (0..10).collect();
    let neg: Vec<usize> = (10..50).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut counts = vec![0usize; 50];
    let rounds = 4000;
    for _ in 0..rounds {
        for (i, _) in balanced_minibatch(&pos, &neg, 2, 8, &mut rng).unwrap() {
            counts[i] += 1;
        }
    }
    // Expected 800 per index in both pools; binomial sd ≈ 25.
    for (i, &c) in counts.iter().enumerate() {
        assert!((c as f64 - 800.0).abs() < 125.0, "index {i} drawn {c} times");
    }
}

#[test]
fn zero_iterations_return_the_initialization() {
    let init = ModelParams::init(ModelVariant::Fbnet, 4);
    let out = train(init.clone(), &small_set(), None, &quick_config(0), |_| {}).unwrap();
    assert!(out.params.bit_eq(&init));
    assert!(out.log.steps.is_empty());
}

#[test]
fn training_is_deterministic() {
    let ds = small_set();
    let val = synth_generate(&SynthConfig {
        n_pos: 5,
        n_neg: 20,
        seed: 4,
        ..SynthConfig::default()
    });
    let run = || {
        let mut c = quick_config(12);
        c.augment = true;
        train(ModelParams::init(ModelVariant::InetGap, 1), &ds, Some(&val), &c, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.params.bit_eq(&b.params));
    assert_eq!(a.log.loss_digest(), b.log.loss_digest());
    assert_eq!(a.log.best_step, b.log.best_step);
    assert_eq!(a.log.evals.len(), 3);

    let mut c = quick_config(12);
    c.seed = 1;
    let other = train(ModelParams::init(ModelVariant::InetGap, 1), &ds, Some(&val), &c, |_| {}).unwrap();
    assert_ne!(a.log.loss_digest(), other.log.loss_digest());
}

fn batch_loss(params: &ModelParams, batch: &[Tensor], labels: &[usize]) -> f64 {
    let pass = ForwardPass::run(params, batch, ForwardOptions::train(0.0, 0)).unwrap();
    pass.logits_wide
        .iter()
        .zip(labels)
        .map(|(l, &y)| softmax_cross_entropy(l, y).0)
        .sum::<f64>()
        / batch.len() as f64
}

#[test]
fn one_small_step_lowers_the_batch_loss() {
    let ds = small_set();
    let idx: Vec<usize> = (0..4).chain(20..32).collect();
    let batch: Vec<Tensor> = idx.iter().map(|&i| ds.patch(i)).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| ds.label(i) as usize).collect();
    for v in ModelVariant::ALL {
        let mut p = ModelParams::init(v, 0);
        let before = batch_loss(&p, &batch, &labels);
        let shapes: Vec<Vec<usize>> = p.trainable().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let mut opt = OptState::new(
            SgdConfig {
                learning_rate: 1e-3,
                momentum: 0.9,
            },
            shapes.iter().map(|s| s.as_slice()),
        );
        train_step(&mut p, &mut opt, &batch, &labels, 0.0, 0).unwrap();
        let after = batch_loss(&p, &batch, &labels);
        assert!(after < before, "{v}: {before} -> {after}");
    }
}
