use serde::{Deserialize, Serialize};

use super::{check_gradient_shape, LayeredGradient, NetworkParams};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Momentum SGD with an L2 term added to the gradient:
///
/// ```text
/// v ← momentum · v + (g + weight_decay · Θ)
/// Θ ← Θ − lr · v
/// ```
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Option<LayeredGradient>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            velocity: None,
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        let config = SgdConfig { lr, ..self.config };
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn step(&mut self, params: &mut NetworkParams, grad: &LayeredGradient) -> Result<()> {
        check_gradient_shape(grad, params)?;
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;

        let mut effective = grad.clone();
        if weight_decay > 0.0 {
            for (g, layer) in effective.layers.iter_mut().zip(params.layers()) {
                g.weight.scaled_add(weight_decay, &layer.weight);
                g.bias.scaled_add(weight_decay, &layer.bias);
            }
        }
        let update = match self.velocity.take() {
            Some(mut v) if momentum > 0.0 => {
                v.scale(momentum);
                v.add_scaled(&effective, 1.0);
                v
            }
            _ => effective,
        };
        params.add_scaled(&update, -lr);
        self.velocity = Some(update);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, GradMode, NetworkParams};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> NetworkParams {
        NetworkParams::init(
            &[3, 4, 2],
            Activation::Relu,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap()
    }

    fn filled(net: &NetworkParams, value: f64) -> LayeredGradient {
        let mut g = LayeredGradient::zeros_like(net, GradMode::Full);
        for l in &mut g.layers {
            l.weight.fill(value);
            l.bias.fill(value);
        }
        g
    }

    fn diff(a: &NetworkParams, b: &NetworkParams) -> Vec<f64> {
        a.layers()
            .iter()
            .zip(b.layers())
            .flat_map(|(x, y)| {
                (&x.weight - &y.weight)
                    .into_iter()
                    .chain((&x.bias - &y.bias).into_iter())
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn vanilla_step() {
        let start = net();
        let mut p = start.clone();
        let mut sgd = Sgd::new(SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        })
        .unwrap();
        sgd.step(&mut p, &filled(&start, 2.0)).unwrap();
        for d in diff(&p, &start) {
            assert_abs_diff_eq!(d, -0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let start = net();
        let mut p = start.clone();
        let mut sgd = Sgd::new(SgdConfig {
            lr: 0.5,
            momentum: 0.8,
            weight_decay: 0.0,
        })
        .unwrap();
        sgd.step(&mut p, &filled(&start, 0.0)).unwrap();
        assert_eq!(p, start);
    }

    #[test]
    fn momentum_recurrence() {
        let start = net();
        let mut p = start.clone();
        let mut sgd = Sgd::new(SgdConfig {
            lr: 0.1,
            momentum: 0.8,
            weight_decay: 0.0,
        })
        .unwrap();
        let (g1, g2) = (1.5, -0.5);
        sgd.step(&mut p, &filled(&start, g1)).unwrap();
        let after_first = p.clone();
        sgd.step(&mut p, &filled(&start, g2)).unwrap();
        for d in diff(&p, &after_first) {
            assert_abs_diff_eq!(d, -0.1 * (g2 + 0.8 * g1), epsilon = 1e-14);
        }
    }

    #[test]
    fn rejects_bad_config_and_nan() {
        assert!(Sgd::new(SgdConfig {
            lr: 0.0,
            momentum: 0.0,
            weight_decay: 0.0
        })
        .is_err());
        assert!(Sgd::new(SgdConfig {
            lr: 0.1,
            momentum: 1.0,
            weight_decay: 0.0
        })
        .is_err());
        let start = net();
        let mut p = start.clone();
        let mut sgd = Sgd::new(SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        })
        .unwrap();
        assert!(matches!(
            sgd.step(&mut p, &filled(&start, f64::NAN)),
            Err(Error::NonFinite(_))
        ));
    }
}
