use fbnet::data::{synth_generate, SynthConfig};
use fbnet::maps::{
    cam, feature_average, feature_average_branches, fc_channel_weights, grad_cam, model_cam, normalize_map,
    resize_nearest, ActivationMap, GradTarget,
};
use fbnet::models::{infer, ModelParams, ModelVariant, POSITIVE};
use fbnet::training::{train, TrainConfig};
use fbnet::Tensor;
use proptest::prelude::*;

fn features(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f32..2.0, c * h * w).prop_map(move |d| Tensor::new(vec![c, h, w], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cam_is_linear_in_weights(
        f in features(4, 5, 6),
        w1 in prop::collection::vec(-1.0f64..1.0, 4),
        w2 in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
        let a = cam(&[&f], &w1, (5, 6)).unwrap();
        let b = cam(&[&f], &w2, (5, 6)).unwrap();
        let s = cam(&[&f], &sum, (5, 6)).unwrap();
        for i in 0..30 {
            let want = a.values()[i] as f64 + b.values()[i] as f64;
            prop_assert!((s.values()[i] as f64 - want).abs() <= 1e-5 * want.abs().max(1.0));
        }
    }

    #[test]
    fn feature_average_is_uniform_cam(f in features(5, 4, 4)) {
        let avg = feature_average(&f).unwrap();
        let uniform = cam(&[&f], &[0.2; 5], (4, 4)).unwrap();
        prop_assert!(avg.bit_eq(&uniform));
        let branches = feature_average_branches(&[&f], (4, 4)).unwrap();
        prop_assert!(avg.bit_eq(&branches));
    }

    #[test]
    fn integer_resize_makes_exact_blocks(
        h in 1usize..6, w in 1usize..6, k in 1usize..5,
        seed in any::<u64>(),
    ) {
        let vals: Vec<f32> = (0..h * w).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32).collect();
        let m = ActivationMap::new(h, w, vals).unwrap();
        let r = resize_nearest(&m, h * k, w * k).unwrap();
        for y in 0..h * k {
            for x in 0..w * k {
                prop_assert_eq!(r.get(y, x).to_bits(), m.get(y / k, x / k).to_bits());
            }
        }
    }

    #[test]
    fn normalization_is_idempotent(vals in prop::collection::vec(-5.0f32..5.0, 12)) {
        let m = ActivationMap::new(3, 4, vals).unwrap();
        let once = normalize_map(&m);
        let twice = normalize_map(&once.map);
        prop_assert!(once.map.values().iter().all(|v| (0.0..=1.0).contains(v)));
        if !once.constant {
            prop_assert_eq!(once.map.min(), 0.0);
            prop_assert_eq!(once.map.max(), 1.0);
            prop_assert!(once.map.bit_eq(&twice.map));
        }
    }
}

fn trained_inet_gap() -> ModelParams {
    let ds = synth_generate(&SynthConfig {
        n_pos: 40,
        n_neg: 400,
        seed: 5,
        ..SynthConfig::default()
    });
    let config = TrainConfig {
        iterations: 40,
        batch_size: 32,
        positives_per_batch: 4,
        eval_every: 0,
        ..TrainConfig::default()
    };
    train(ModelParams::init(ModelVariant::InetGap, 5), &ds, None, &config, |_| {}).unwrap().params
}

#[test]
fn cam_identities_on_a_trained_gap_model() {
    let params = trained_inet_gap();
    assert_ne!(params, ModelParams::init(ModelVariant::InetGap, 5));
    let ds = synth_generate(&SynthConfig {
        n_pos: 10,
        n_neg: 10,
        seed: 77,
        ..SynthConfig::default()
    });
    let patches: Vec<Tensor> = (0..ds.len()).map(|i| ds.patch(i)).collect();
    let bias = params.fc.bias.data()[POSITIVE] as f64;
    for inf in infer(&params, &patches).unwrap() {
        let c = model_cam(&params, &inf.features, POSITIVE, (10, 10)).unwrap();
        let logit = inf.logits[POSITIVE] as f64;
        assert!((c.mean() + bias - logit).abs() < 1e-4, "{} vs {logit}", c.mean() + bias);

        let g = grad_cam(&params, &inf.features, &inf.logits, POSITIVE, GradTarget::Logit, (10, 10)).unwrap();
        for (gv, cv) in g.map.values().iter().zip(c.values()) {
            assert!((*gv as f64 - *cv as f64 / 100.0).abs() < 1e-5);
        }
        let w = fc_channel_weights(&params, POSITIVE).unwrap();
        for (a, b) in g.channel_weights.iter().zip(&w) {
            assert!((a - b / 100.0).abs() < 1e-9);
        }
    }
}

#[test]
fn nogap_cam_sums_to_the_logit() {
    let params = ModelParams::init(ModelVariant::FbnetNogap, 2);
    let patch = Tensor::from_fn(&[7, 16, 16], |i| ((i * 13) % 29) as f32 / 29.0);
    let inf = infer(&params, &[patch]).unwrap().remove(0);
    let branches = inf.features.decision_branches();
    let mut total = params.fc.bias.data()[POSITIVE] as f64;
    let mut off = 0;
    for b in &branches {
        let side = b.shape()[1];
        let row = &params.fc.row(POSITIVE)[off..off + b.len()];
        let m = fbnet::maps::pixel_cam(&[*b], row, (side, side)).unwrap();
        total += m.values().iter().map(|&v| v as f64).sum::<f64>();
        off += b.len();
    }
    assert!((total - inf.logits[POSITIVE] as f64).abs() < 1e-4);
}

#[test]
fn probability_target_is_a_scaled_class_contrast() {
    let params = ModelParams::init(ModelVariant::InetGap, 8);
    let patch = Tensor::from_fn(&[7, 16, 16], |i| ((i * 7) % 17) as f32 / 17.0);
    let inf = infer(&params, &[patch]).unwrap().remove(0);
    let p = fbnet::nn::softmax(&inf.logits);
    let s = p[0] * p[1];
    let prob = grad_cam(&params, &inf.features, &inf.logits, POSITIVE, GradTarget::Probability, (10, 10)).unwrap();
    let c1 = model_cam(&params, &inf.features, 1, (10, 10)).unwrap();
    let c0 = model_cam(&params, &inf.features, 0, (10, 10)).unwrap();
    assert!(!prob.degenerate);
    for ((g, a), b) in prob.map.values().iter().zip(c1.values()).zip(c0.values()) {
        let want = s * (*a as f64 - *b as f64) / 100.0;
        assert!((*g as f64 - want).abs() <= 1e-4 * want.abs().max(1e-3), "{g} vs {want}");
    }
}
