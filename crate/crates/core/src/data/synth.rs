use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{split, Dataset, SplitFractions};
use crate::error::{invalid, Result};

/// The four vertices of the square `[-1, 1]²`, lower row first.
const CENTERS: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Upper two components are class 1, lower two class 0.
    #[default]
    UpperLower,
    /// Each component is its own class (4 classes).
    PerComponent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianMixtureSpec {
    pub n: usize,
    pub sigma: f64,
    #[serde(default)]
    pub label_rule: LabelRule,
    /// Fraction of ground-truth labels flipped before anything else.
    pub base_flip: f64,
    pub fractions: SplitFractions,
}

impl Default for GaussianMixtureSpec {
    fn default() -> Self {
        GaussianMixtureSpec {
            n: 1000,
            sigma: 0.5,
            label_rule: LabelRule::UpperLower,
            base_flip: 0.01,
            fractions: SplitFractions::TOY,
        }
    }
}

/// Samples a 2-d mixture of four isotropic Gaussians centred on the square's
/// vertices, flips `round(base_flip · n)` ground-truth labels to another class
/// and partitions the result.
pub fn gen_gaussian_mixture(spec: &GaussianMixtureSpec, seed: u64) -> Result<Dataset> {
    if spec.n < 8 {
        return Err(invalid(format!("need at least 8 samples, got {}", spec.n)));
    }
    if !(spec.sigma > 0.0 && spec.sigma.is_finite()) {
        return Err(invalid(format!(
            "sigma must be positive, got {}",
            spec.sigma
        )));
    }
    if !(0.0..=1.0).contains(&spec.base_flip) {
        return Err(invalid("base_flip must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = match spec.label_rule {
        LabelRule::UpperLower => 2,
        LabelRule::PerComponent => 4,
    };
    let mut features = Array2::zeros((spec.n, 2));
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let component = rng.random_range(0..4);
        for d in 0..2 {
            let z: f64 = StandardNormal.sample(&mut rng);
            features[[i, d]] = CENTERS[component][d] + spec.sigma * z;
        }
        labels.push(match spec.label_rule {
            LabelRule::UpperLower => usize::from(CENTERS[component][1] > 0.0),
            LabelRule::PerComponent => component,
        });
    }
    let flips = (spec.base_flip * spec.n as f64).round() as usize;
    for i in index::sample(&mut rng, spec.n, flips) {
        let shift = rng.random_range(1..classes);
        labels[i] = (labels[i] + shift) % classes;
    }
    let ds = Dataset::new(features, labels, classes)?;
    split(&ds, spec.fractions, rng.random())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    #[test]
    fn default_split_sizes() {
        let ds = gen_gaussian_mixture(&GaussianMixtureSpec::default(), 1).unwrap();
        assert_eq!(ds.len(), 1000);
        assert_eq!(ds.indices(Split::Train).len(), 600);
        assert_eq!(ds.indices(Split::Test).len(), 240);
        assert_eq!(ds.indices(Split::Validation).len(), 160);
        assert_eq!(ds.observed_labels, ds.clean_labels);
    }

    #[test]
    fn tiny_sigma_collapses_onto_vertices() {
        let spec = GaussianMixtureSpec {
            sigma: 1e-20,
            ..Default::default()
        };
        let ds = gen_gaussian_mixture(&spec, 5).unwrap();
        let mut rule_breaks = 0;
        for (row, &y) in ds.features.rows().into_iter().zip(&ds.clean_labels) {
            assert!(row.iter().all(|v| v.abs() == 1.0));
            if usize::from(row[1] > 0.0) != y {
                rule_breaks += 1;
            }
        }
        assert_eq!(rule_breaks, 10);
    }

    #[test]
    fn deterministic_for_seed() {
        let spec = GaussianMixtureSpec::default();
        assert_eq!(
            gen_gaussian_mixture(&spec, 42).unwrap(),
            gen_gaussian_mixture(&spec, 42).unwrap()
        );
        assert_ne!(
            gen_gaussian_mixture(&spec, 42).unwrap(),
            gen_gaussian_mixture(&spec, 43).unwrap()
        );
    }

    #[test]
    fn invalid_specs() {
        let bad_sigma = GaussianMixtureSpec {
            sigma: 0.0,
            ..Default::default()
        };
        assert!(gen_gaussian_mixture(&bad_sigma, 0).is_err());
        let small = GaussianMixtureSpec {
            n: 7,
            ..Default::default()
        };
        assert!(gen_gaussian_mixture(&small, 0).is_err());
    }
}
