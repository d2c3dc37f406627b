#![allow(dead_code)]

use metasel::data::{Dataset, Split};
use metasel::nn::{Activation, NetworkParams};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Layer sizes `input, hidden..., classes` with up to three linear layers.
pub fn random_sizes(r: &mut impl Rng, max_units: usize) -> Vec<usize> {
    let depth = r.random_range(1..=3);
    let mut sizes = vec![r.random_range(1..=max_units.min(6))];
    for _ in 1..depth {
        sizes.push(r.random_range(1..=max_units));
    }
    sizes.push(r.random_range(2..=max_units.clamp(2, 5)));
    sizes
}

pub fn random_net(seed: u64, max_units: usize) -> NetworkParams {
    let mut r = rng(seed);
    let sizes = random_sizes(&mut r, max_units);
    let act = if r.random_bool(0.5) {
        Activation::Relu
    } else {
        Activation::Tanh
    };
    NetworkParams::init(&sizes, act, &mut r).unwrap()
}

pub fn net(sizes: &[usize], act: Activation, seed: u64) -> NetworkParams {
    NetworkParams::init(sizes, act, &mut rng(seed)).unwrap()
}

pub fn gaussian_vec(r: &mut impl Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| r.sample::<f64, _>(rand_distr::StandardNormal))
}

pub fn gaussian_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        r.sample::<f64, _>(rand_distr::StandardNormal)
    })
}

/// Gaussian features, uniform labels, the first 60% tagged train, then
/// validation and test.
pub fn random_dataset(seed: u64, n: usize, dim: usize, classes: usize) -> Dataset {
    let mut r = rng(seed);
    let x = gaussian_matrix(&mut r, n, dim);
    let y: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
    let mut ds = Dataset::new(x, y, classes).unwrap();
    for (i, s) in ds.splits.iter_mut().enumerate() {
        *s = if i < n * 6 / 10 {
            Split::Train
        } else if i < n * 8 / 10 {
            Split::Validation
        } else {
            Split::Test
        };
    }
    ds
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
