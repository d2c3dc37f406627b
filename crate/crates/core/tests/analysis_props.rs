mod common;

use common::*;
use metasel::analysis::{
    auc_weights_vs_clean, boundary_subset, d_statistics, first_order_margin, mco_value,
    mco_value_weighted, msso_value, verify_bound,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

/// Features spread around one shared direction with random signs, so most
/// rows see same-signed inner products with every centroid.
fn aligned_instance(
    seed: u64,
    n: usize,
    m: usize,
    dim: usize,
    spread: f64,
) -> (Array2<f64>, Array2<f64>) {
    let mut r = rng(seed);
    let u = gaussian_vec(&mut r, dim);
    let c = Array2::from_shape_fn((m, dim), |(_, k)| {
        u[k] + spread * r.sample::<f64, _>(rand_distr::StandardNormal)
    });
    let mut f = Array2::zeros((n, dim));
    for mut row in f.rows_mut() {
        let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let scale = r.random_range(0.1..3.0);
        for k in 0..dim {
            row[k] =
                sign * scale * (u[k] + spread * r.sample::<f64, _>(rand_distr::StandardNormal));
        }
    }
    (f, c)
}

fn pairwise_auc(w: &[f64], clean: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..w.len() {
        for j in 0..w.len() {
            if clean[i] && !clean[j] {
                pairs += 1.0;
                num += if w[i] > w[j] {
                    1.0
                } else if w[i] == w[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mco_forms_agree_and_bound_msso(seed in any::<u64>(), n in 1usize..30, m in 1usize..6, dim in 1usize..10) {
        let mut r = rng(seed);
        let f = gaussian_matrix(&mut r, n, dim);
        let c = gaussian_matrix(&mut r, m, dim);
        let a = mco_value(f.view(), c.view()).unwrap();
        let b = mco_value_weighted(f.view(), c.view()).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0), "{a} vs {b}");
        let msso = msso_value(f.view(), c.view()).unwrap();
        prop_assert!(msso <= a * (1.0 + 1e-12));
    }

    #[test]
    fn bound_holds_whenever_dominance_does(seed in any::<u64>(), spread in 0.05f64..1.5) {
        let (f, c) = aligned_instance(seed, 20, 3, 8, spread);
        let check = verify_bound(f.view(), c.view()).unwrap();
        if check.assumption_holds {
            prop_assert!(check.holds, "{check:?}");
        }
        let (d, stats) = d_statistics(f.view(), c.view()).unwrap();
        prop_assert_eq!(stats.count, 20);
        prop_assert!(d.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn auc_is_the_pairwise_rate_and_rank_invariant(
        w in prop::collection::vec(0i32..12, 2..50),
        clean in prop::collection::vec(any::<bool>(), 50),
    ) {
        let clean = &clean[..w.len()];
        prop_assume!(clean.iter().any(|&c| c) && clean.iter().any(|&c| !c));
        let w: Vec<f64> = w.iter().map(|&v| v as f64 / 8.0).collect();
        let auc = auc_weights_vs_clean(&w, clean).unwrap();
        prop_assert_eq!(auc, pairwise_auc(&w, clean));
        let t: Vec<f64> = w.iter().map(|v| v * v * v + 3.0 * v - 7.0).collect();
        prop_assert_eq!(auc_weights_vs_clean(&t, clean).unwrap(), auc);
        let e: Vec<f64> = w.iter().map(|v| v.exp()).collect();
        prop_assert_eq!(auc_weights_vs_clean(&e, clean).unwrap(), auc);
    }

    #[test]
    fn boundary_subset_ignores_a_logit_shift(seed in any::<u64>(), shift in -20.0f64..20.0, k in 1usize..20) {
        let p = random_net(seed, 8);
        let ds = random_dataset(seed ^ 5, 40, p.input_dim(), p.class_count());
        let mut q = p.clone();
        let last = q.num_layers() - 1;
        q.layers_mut()[last].bias += shift;
        let idx: Vec<usize> = (0..40).collect();
        let mut margins: Vec<f64> = idx.iter().map(|&i| first_order_margin(&p, ds.features.row(i)).unwrap()).collect();
        for &i in &idx {
            let shifted = first_order_margin(&q, ds.features.row(i)).unwrap();
            prop_assert!((shifted - margins[i]).abs() <= 1e-9 * margins[i].abs().max(1.0));
        }
        margins.sort_by(f64::total_cmp);
        // rounding can only reorder near-ties
        prop_assume!(margins[k] - margins[k - 1] > 1e-6);
        let a = boundary_subset(&p, &ds, &idx, k).unwrap();
        let b = boundary_subset(&q, &ds, &idx, k).unwrap();
        let (mut a, mut b) = (a, b);
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn the_aligned_generator_mostly_satisfies_dominance() {
    let held = (0..200u64)
        .filter(|&s| {
            let (f, c) = aligned_instance(s, 20, 3, 8, 0.3);
            verify_bound(f.view(), c.view()).unwrap().assumption_holds
        })
        .count();
    assert!(held >= 100, "{held} of 200");
}
