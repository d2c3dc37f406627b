//! Dense feed-forward networks with exact per-sample gradients.
//!
//! Layers are stored as `(weight: out × in, bias: out)` pairs. Every hidden
//! layer is followed by the configured [`Activation`]; the last layer is linear
//! and feeds a softmax cross-entropy loss.
//!
//! The loss gradient with respect to the logits splits into a label-free part
//! (`softmax(z)`) and a label-dependent part (`onehot(y)`). [`GradMode`] selects
//! which of the two seeds backpropagation, so
//! `full = label_free - label_dependent` holds layer by layer.

mod batch;
mod checkpoint;
mod optim;

pub use batch::BatchTrace;
pub use checkpoint::{read_params, write_params, CheckpointStore};
pub use optim::{Sgd, SgdConfig};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and activation `a`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Which part of the cross-entropy gradient to backpropagate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// `softmax(z) - onehot(y)`
    Full,
    /// `softmax(z)`
    LabelFree,
    /// `onehot(y)`
    LabelDependent,
}

impl GradMode {
    pub fn needs_label(self) -> bool {
        !matches!(self, GradMode::LabelFree)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Parameters of a dense network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layers: Vec<Layer>,
    activation: Activation,
}

impl NetworkParams {
    /// Validates that layer shapes chain and every entry is finite.
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("layer list"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::DimensionMismatch {
                    context: "layer bias",
                    expected: layer.output_dim(),
                    found: layer.bias.len(),
                });
            }
            if l > 0 && layers[l - 1].output_dim() != layer.input_dim() {
                return Err(Error::DimensionMismatch {
                    context: "layer chain",
                    expected: layers[l - 1].output_dim(),
                    found: layer.input_dim(),
                });
            }
            if layer.input_dim() == 0 || layer.output_dim() == 0 {
                return Err(invalid("layers must have non-zero width"));
            }
        }
        let params = NetworkParams { layers, activation };
        if !params.is_finite() {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(params)
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    ///
    /// `sizes` lists every width including input and class count, so
    /// `[2, 16, 16, 2]` is a two-hidden-layer net on 2-d inputs.
    pub fn init<R: Rng + ?Sized>(
        sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(invalid("a network needs at least input and output sizes"));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..=bound));
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        NetworkParams::new(layers, activation)
    }

    /// All-zero network with the given widths.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(invalid("a network needs at least input and output sizes"));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weight: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        NetworkParams::new(layers, activation)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn class_count(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Layer::output_dim));
        sizes
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// `self += scale * grad`, layer by layer.
    pub fn add_scaled(&mut self, grad: &LayeredGradient, scale: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grad.layers) {
            layer.weight.scaled_add(scale, &g.weight);
            layer.bias.scaled_add(scale, &g.bias);
        }
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                found: len,
            });
        }
        Ok(())
    }

    /// Runs the network on one input, recording every intermediate.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<ForwardTrace> {
        self.check_input(x.len())?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_owned());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.weight.dot(&activations[l]) + &layer.bias;
            if l < last {
                activations.push(z.mapv(|v| self.activation.apply(v)));
            }
            pre_activations.push(z);
        }
        Ok(ForwardTrace {
            activations,
            pre_activations,
        })
    }

    /// Logits for one input.
    pub fn logits(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(self
            .forward(x)?
            .pre_activations
            .pop()
            .expect("at least one layer"))
    }
}

/// Intermediates of one forward pass.
///
/// `activations[0]` is the input and `activations[l]` feeds layer `l`;
/// `pre_activations[l]` is layer `l`'s linear output, the last one being the
/// logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub activations: Vec<Array1<f64>>,
    pub pre_activations: Vec<Array1<f64>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Array1<f64> {
        self.pre_activations.last().expect("at least one layer")
    }

    /// Input to the last linear layer.
    pub fn last_layer_input(&self) -> &Array1<f64> {
        self.activations.last().expect("input is always recorded")
    }
}

/// Numerically stable softmax.
pub fn softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out = z.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// `log(sum(exp(z)))` computed stably.
pub fn log_sum_exp(z: ArrayView1<f64>) -> f64 {
    let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> Result<f64> {
    check_label(label, logits.len())?;
    Ok(log_sum_exp(logits) - logits[label])
}

/// Gradient of the cross-entropy with respect to the logits, or one of its parts.
pub fn last_layer_delta(
    logits: ArrayView1<f64>,
    label: Option<usize>,
    mode: GradMode,
) -> Result<Array1<f64>> {
    let classes = logits.len();
    let label = match (mode.needs_label(), label) {
        (true, None) => return Err(Error::MissingLabel(mode_name(mode))),
        (_, Some(y)) => {
            check_label(y, classes)?;
            Some(y)
        }
        (false, None) => None,
    };
    let delta = match mode {
        GradMode::LabelFree => softmax(logits),
        GradMode::Full => {
            let mut p = softmax(logits);
            p[label.expect("checked above")] -= 1.0;
            p
        }
        GradMode::LabelDependent => {
            let mut onehot = Array1::zeros(classes);
            onehot[label.expect("checked above")] = 1.0;
            onehot
        }
    };
    Ok(delta)
}

fn mode_name(mode: GradMode) -> &'static str {
    match mode {
        GradMode::Full => "full",
        GradMode::LabelFree => "label-free",
        GradMode::LabelDependent => "label-dependent",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGrad {
    pub fn dot(&self, other: &LayerGrad) -> f64 {
        dot_flat(&self.weight, &other.weight) + self.bias.dot(&other.bias)
    }

    pub fn weight_dot(&self, other: &LayerGrad) -> f64 {
        dot_flat(&self.weight, &other.weight)
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }
}

fn dot_flat(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let mut acc = 0.0;
    Zip::from(a).and(b).for_each(|&x, &y| acc += x * y);
    acc
}

/// A gradient (or gradient-shaped tensor) organised by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredGradient {
    pub layers: Vec<LayerGrad>,
    pub mode: GradMode,
}

impl LayeredGradient {
    pub fn zeros_like(params: &NetworkParams, mode: GradMode) -> Self {
        LayeredGradient {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
            mode,
        }
    }

    /// Frobenius inner product over all layers, biases included.
    pub fn dot(&self, other: &LayeredGradient) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn add_scaled(&mut self, other: &LayeredGradient, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Row-major weights of each layer followed by its bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    fn shape_matches(&self, params: &NetworkParams) -> bool {
        self.layers.len() == params.layers.len()
            && self
                .layers
                .iter()
                .zip(&params.layers)
                .all(|(g, p)| g.weight.dim() == p.weight.dim() && g.bias.len() == p.bias.len())
    }
}

/// Backpropagates `delta` (the gradient at the logits) through a recorded trace.
pub fn backprop(
    params: &NetworkParams,
    trace: &ForwardTrace,
    delta: Array1<f64>,
    mode: GradMode,
) -> LayeredGradient {
    let n = params.layers.len();
    let mut grads = Vec::with_capacity(n);
    let mut delta = delta;
    for l in (0..n).rev() {
        let input = &trace.activations[l];
        let weight = outer(&delta, input);
        let bias = delta.clone();
        if l > 0 {
            let back = params.layers[l].weight.t().dot(&delta);
            let z = &trace.pre_activations[l - 1];
            let a = &trace.activations[l];
            delta = Zip::from(&back)
                .and(z)
                .and(a)
                .map_collect(|&g, &z, &a| g * params.activation.derivative(z, a));
        }
        grads.push(LayerGrad { weight, bias });
    }
    grads.reverse();
    LayeredGradient {
        layers: grads,
        mode,
    }
}

pub(crate) fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Exact gradient of one sample's cross-entropy (or one of its parts).
pub fn per_sample_gradient(
    params: &NetworkParams,
    x: ArrayView1<f64>,
    label: Option<usize>,
    mode: GradMode,
) -> Result<LayeredGradient> {
    let trace = params.forward(x)?;
    if !trace.logits().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("forward trace"));
    }
    let delta = last_layer_delta(trace.logits().view(), label, mode)?;
    Ok(backprop(params, &trace, delta, mode))
}

/// Gradient of `direction · logits` with respect to the input.
pub fn input_gradient(
    params: &NetworkParams,
    x: ArrayView1<f64>,
    direction: &Array1<f64>,
) -> Result<Array1<f64>> {
    let trace = params.forward(x)?;
    if direction.len() != params.class_count() {
        return Err(Error::DimensionMismatch {
            context: "logit direction",
            expected: params.class_count(),
            found: direction.len(),
        });
    }
    let mut delta = direction.clone();
    for l in (0..params.layers.len()).rev() {
        let back = params.layers[l].weight.t().dot(&delta);
        if l == 0 {
            return Ok(back);
        }
        let z = &trace.pre_activations[l - 1];
        let a = &trace.activations[l];
        delta = Zip::from(&back)
            .and(z)
            .and(a)
            .map_collect(|&g, &z, &a| g * params.activation.derivative(z, a));
    }
    unreachable!("networks have at least one layer")
}

/// Arg-max class of every row of `inputs` (ties go to the lower class).
pub fn predict(params: &NetworkParams, inputs: ArrayView2<f64>) -> Result<Vec<usize>> {
    let trace = BatchTrace::forward(params, inputs)?;
    Ok(trace
        .logits()
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Fraction of rows whose prediction equals `labels`; NaN for an empty set.
pub fn accuracy(params: &NetworkParams, inputs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if inputs.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "accuracy labels",
            expected: inputs.nrows(),
            found: labels.len(),
        });
    }
    if labels.is_empty() {
        return Ok(f64::NAN);
    }
    let hits = predict(params, inputs)?
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub(crate) fn check_gradient_shape(grad: &LayeredGradient, params: &NetworkParams) -> Result<()> {
    if !grad.shape_matches(params) {
        return Err(invalid("gradient shape does not match network parameters"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn linear(weight: Array2<f64>, bias: Array1<f64>) -> NetworkParams {
        NetworkParams::new(vec![Layer { weight, bias }], Activation::Relu).unwrap()
    }

    #[test]
    fn zero_net_gives_zero_logits() {
        let net = NetworkParams::zeros(&[3, 4, 2], Activation::Relu).unwrap();
        let logits = net.logits(array![0.3, -2.0, 7.0].view()).unwrap();
        assert_eq!(logits, array![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = linear(Array2::eye(2), Array1::zeros(2));
        assert_eq!(
            net.logits(array![1.0, 2.0].view()).unwrap(),
            array![1.0, 2.0]
        );
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = linear(Array2::eye(2), Array1::zeros(2));
        assert!(matches!(
            net.forward(array![1.0, 2.0, 3.0].view()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn layers_must_chain() {
        let layers = vec![
            Layer {
                weight: Array2::zeros((3, 2)),
                bias: Array1::zeros(3),
            },
            Layer {
                weight: Array2::zeros((2, 4)),
                bias: Array1::zeros(2),
            },
        ];
        assert!(NetworkParams::new(layers, Activation::Relu).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(array![0.0, 0.0].view()), array![0.5, 0.5]);
        let third = softmax(array![1.0, 1.0, 1.0].view());
        for p in third.iter() {
            assert_abs_diff_eq!(*p, 1.0 / 3.0, epsilon = 1e-15);
        }
        let z = array![0.2, -1.3, 4.0];
        let shifted = softmax((&z + 17.5).view());
        assert_abs_diff_eq!(softmax(z.view()), shifted, epsilon = 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let p = softmax(array![1000.0, -1000.0, 999.0].view());
        assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let m = 5;
        let uniform = Array1::<f64>::zeros(m);
        assert_abs_diff_eq!(
            cross_entropy(uniform.view(), 2).unwrap(),
            (m as f64).ln(),
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(
            cross_entropy(array![800.0, 0.0].view(), 0).unwrap(),
            0.0,
            epsilon = 1e-14
        );
        let e2 = 2f64.exp();
        let expected = -(e2 / (e2 + 1.0)).ln();
        assert_abs_diff_eq!(
            cross_entropy(array![2.0, 0.0].view(), 0).unwrap(),
            expected,
            epsilon = 1e-14
        );
        assert!(matches!(
            cross_entropy(array![0.0, 0.0].view(), 2),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn delta_examples() {
        // logits whose softmax is [0.7, 0.2, 0.1]
        let logits = array![0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()];
        let d = last_layer_delta(logits.view(), Some(0), GradMode::Full).unwrap();
        assert_abs_diff_eq!(d, array![-0.3, 0.2, 0.1], epsilon = 1e-12);

        let d = last_layer_delta(Array1::zeros(3).view(), Some(1), GradMode::Full).unwrap();
        assert_abs_diff_eq!(d, array![1.0 / 3.0, -2.0 / 3.0, 1.0 / 3.0], epsilon = 1e-15);
        assert_abs_diff_eq!(d.sum(), 0.0, epsilon = 1e-15);

        assert!(matches!(
            last_layer_delta(logits.view(), None, GradMode::Full),
            Err(Error::MissingLabel(_))
        ));
        assert!(last_layer_delta(logits.view(), None, GradMode::LabelFree).is_ok());
        assert!(matches!(
            last_layer_delta(logits.view(), None, GradMode::LabelDependent),
            Err(Error::MissingLabel(_))
        ));
    }

    #[test]
    fn single_linear_layer_gradient_by_hand() {
        let net = linear(Array2::zeros((2, 2)), Array1::zeros(2));
        let g =
            per_sample_gradient(&net, array![1.0, 0.0].view(), Some(0), GradMode::Full).unwrap();
        assert_abs_diff_eq!(
            g.layers[0].weight,
            array![[-0.5, 0.0], [0.5, 0.0]],
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(g.layers[0].bias, array![-0.5, 0.5], epsilon = 1e-15);
    }

    #[test]
    fn zero_input_gradient_is_bias_only() {
        let net = linear(
            array![[0.3, -0.2, 1.0], [0.1, 0.4, -0.7]],
            array![0.2, -0.1],
        );
        let x = Array1::zeros(3);
        let g = per_sample_gradient(&net, x.view(), Some(1), GradMode::Full).unwrap();
        assert!(g.layers[0].weight.iter().all(|v| *v == 0.0));
        let delta = last_layer_delta(
            net.logits(x.view()).unwrap().view(),
            Some(1),
            GradMode::Full,
        )
        .unwrap();
        assert_eq!(g.layers[0].bias, delta);
    }

    #[test]
    fn input_gradient_of_linear_model_is_weight_combination() {
        let net = linear(array![[1.0, 2.0], [-3.0, 0.5]], array![0.0, 1.0]);
        let g = input_gradient(&net, array![0.4, 0.1].view(), &array![1.0, -1.0]).unwrap();
        assert_abs_diff_eq!(g, array![4.0, 1.5], epsilon = 1e-15);
    }
}
