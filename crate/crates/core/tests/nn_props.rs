mod common;

use common::*;
use metasel::nn::{cross_entropy, per_sample_gradient, softmax, GradMode, NetworkParams};
use ndarray::Array1;
use proptest::prelude::*;
use rand::Rng;

fn loss(p: &NetworkParams, x: &Array1<f64>, y: usize) -> f64 {
    cross_entropy(p.logits(x.view()).unwrap().view(), y).unwrap()
}

/// Central differences for every parameter, in the gradient's flatten order
/// (per layer: weights row-major, then bias).
fn numeric_gradient(p: &NetworkParams, x: &Array1<f64>, y: usize, h: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for l in 0..p.num_layers() {
        let (rows, cols) = p.layers()[l].weight.dim();
        for i in 0..rows {
            for j in 0..cols {
                let mut up = p.clone();
                up.layers_mut()[l].weight[[i, j]] += h;
                let mut down = p.clone();
                down.layers_mut()[l].weight[[i, j]] -= h;
                out.push((loss(&up, x, y) - loss(&down, x, y)) / (2.0 * h));
            }
        }
        for i in 0..rows {
            let mut up = p.clone();
            up.layers_mut()[l].bias[i] += h;
            let mut down = p.clone();
            down.layers_mut()[l].bias[i] -= h;
            out.push((loss(&up, x, y) - loss(&down, x, y)) / (2.0 * h));
        }
    }
    out
}

/// Smallest |pre-activation| of the hidden layers; ReLU kinks spoil finite differences.
fn kink_distance(p: &NetworkParams, x: &Array1<f64>) -> f64 {
    let t = p.forward(x.view()).unwrap();
    let hidden = &t.pre_activations[..t.pre_activations.len() - 1];
    hidden
        .iter()
        .flatten()
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>()) {
        let p = random_net(seed, 12);
        let mut r = rng(seed ^ 1);
        let x = gaussian_vec(&mut r, p.input_dim());
        let y = r.random_range(0..p.class_count());
        prop_assume!(kink_distance(&p, &x) > 1e-3);
        let g = per_sample_gradient(&p, x.view(), Some(y), GradMode::Full).unwrap().flatten();
        let fd = numeric_gradient(&p, &x, y, 1e-5);
        for (k, (a, b)) in g.iter().zip(&fd).enumerate() {
            prop_assert!(relative_error(*a, *b) < 1e-4, "param {k}: {a} vs {b}");
        }
    }

    #[test]
    fn full_gradient_is_label_free_minus_label_dependent(seed in any::<u64>()) {
        let p = random_net(seed, 32);
        let mut r = rng(seed ^ 2);
        let x = gaussian_vec(&mut r, p.input_dim());
        let y = r.random_range(0..p.class_count());
        let full = per_sample_gradient(&p, x.view(), Some(y), GradMode::Full).unwrap().flatten();
        let free = per_sample_gradient(&p, x.view(), None, GradMode::LabelFree).unwrap().flatten();
        let dep = per_sample_gradient(&p, x.view(), Some(y), GradMode::LabelDependent).unwrap().flatten();
        for k in 0..full.len() {
            prop_assert!((full[k] - (free[k] - dep[k])).abs() <= 1e-12 * (1.0 + free[k].abs() + dep[k].abs()));
        }
    }

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-1e3f64..1e3, 1..20)) {
        let p = softmax(Array1::from(z).view());
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_is_pure(seed in any::<u64>()) {
        let p = random_net(seed, 16);
        let x = gaussian_vec(&mut rng(seed ^ 3), p.input_dim());
        let a = p.forward(x.view()).unwrap();
        let b = p.forward(x.view()).unwrap();
        prop_assert_eq!(a, b);
    }
}
