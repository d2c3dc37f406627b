mod common;

use common::*;
use metasel::nn::{per_sample_gradient, Activation, GradMode};
use metasel::reweight::{
    apply_weight_update_ren, apply_weight_update_shu, batch_trace, meta_weight_gradient,
    run_meta_reweighting, Architecture, TrainConfig, WeightRule,
};
use ndarray::Axis;
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn shu_weights_stay_in_the_unit_interval(
        init in prop::collection::vec(0.0f64..=1.0, 1..30),
        steps in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 30), 1..10),
    ) {
        let mut w = init.clone();
        for delta in &steps {
            let n = w.len();
            apply_weight_update_shu(&mut w, &delta[..n]);
            prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn shu_weights_never_drop_under_positive_updates(
        init in prop::collection::vec(0.0f64..=1.0, 1..30),
        steps in prop::collection::vec(prop::collection::vec(0.0f64..0.3, 30), 1..10),
    ) {
        let mut w = init.clone();
        for delta in &steps {
            let before = w.clone();
            let n = w.len();
            apply_weight_update_shu(&mut w, &delta[..n]);
            prop_assert!(w.iter().zip(&before).all(|(a, b)| a >= b));
        }
    }

    #[test]
    fn ren_weights_are_a_distribution(delta in prop::collection::vec(-3.0f64..3.0, 1..64)) {
        let w = apply_weight_update_ren(&delta);
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (wi, di) in w.iter().zip(&delta) {
            if *di < 0.0 && delta.iter().any(|d| *d > 0.0) {
                prop_assert_eq!(*wi, 0.0);
            }
        }
    }

    #[test]
    fn self_meta_update_is_the_scaled_squared_gradient_norm(
        seed in any::<u64>(),
        n in 1usize..12,
        alpha in 0.01f64..1.0,
        eta in 0.1f64..50.0,
    ) {
        let p = random_net(seed, 10);
        let mut r = rng(seed ^ 4);
        let x = gaussian_matrix(&mut r, n, p.input_dim());
        let y: Vec<usize> = (0..n).map(|_| r.random_range(0..p.class_count())).collect();
        let j = r.random_range(0..n);
        let batch = batch_trace(&p, x.view(), &y).unwrap();
        let xj = x.select(Axis(0), &[j]);
        // meta loss is sample j's own training loss, evaluated at the current parameters
        let delta = meta_weight_gradient(&p, xj.view(), &[y[j]], &batch, alpha, eta).unwrap();
        let g = per_sample_gradient(&p, x.row(j), Some(y[j]), GradMode::Full).unwrap();
        let expected = eta * alpha / n as f64 * g.norm_sq();
        prop_assert!((delta[j] - expected).abs() <= 1e-10 * expected.max(1.0), "{} vs {expected}", delta[j]);
    }
}

fn tiny_run(rule: WeightRule, seed: u64) -> metasel::reweight::RunArtifacts {
    let mut ds = random_dataset(seed, 120, 3, 3);
    ds = metasel::data::inject_uniform_noise(&ds, 40.0, seed)
        .unwrap()
        .0;
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 16,
        weight_lr: 30.0,
        weight_rule: rule,
        seed,
        ..TrainConfig::default()
    };
    let arch = Architecture {
        hidden: vec![8],
        activation: Activation::Tanh,
    };
    let meta: Vec<usize> = ds.training_pool()[..5].to_vec();
    run_meta_reweighting(&cfg, &arch, &ds, &meta).unwrap()
}

#[test]
fn shu_run_keeps_every_epoch_in_the_unit_interval() {
    for seed in 0..5 {
        let run = tiny_run(WeightRule::Shu, seed);
        assert_eq!(run.trajectory.len(), 4);
        assert!(run.trajectory.iter().all(|w| w.in_unit_interval()));
    }
}

#[test]
fn ren_run_weights_are_non_negative() {
    for seed in 0..5 {
        let run = tiny_run(WeightRule::Ren, seed);
        for w in &run.trajectory {
            assert!(w.w.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0));
        }
    }
}
