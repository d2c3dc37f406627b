//! Batched forward/backward passes.
//!
//! Per-sample layer gradients are rank one (`delta_j ⊗ input_j`), so the
//! quantities the training loop needs (weighted gradient sums and inner
//! products of every sample's gradient with a fixed tensor) can be formed from
//! the per-layer delta and input matrices without materialising one gradient
//! per sample.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::{softmax, GradMode, LayerGrad, LayeredGradient, NetworkParams};
use crate::error::{Error, Result};

/// Forward intermediates and backpropagated deltas for a batch (one row per sample).
#[derive(Debug, Clone)]
pub struct BatchTrace {
    /// `activations[l]` is the input to layer `l` (`activations[0]` is the batch).
    pub activations: Vec<Array2<f64>>,
    pub pre_activations: Vec<Array2<f64>>,
    /// `deltas[l]` is the loss gradient at layer `l`'s linear output.
    pub deltas: Vec<Array2<f64>>,
    pub mode: GradMode,
}

impl BatchTrace {
    /// Forward pass only; `deltas` stays empty.
    pub fn forward(params: &NetworkParams, inputs: ArrayView2<f64>) -> Result<Self> {
        if inputs.ncols() != params.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "batch input",
                expected: params.input_dim(),
                found: inputs.ncols(),
            });
        }
        let layers = params.layers();
        let last = layers.len() - 1;
        let mut activations = Vec::with_capacity(layers.len());
        let mut pre_activations = Vec::with_capacity(layers.len());
        activations.push(inputs.to_owned());
        for (l, layer) in layers.iter().enumerate() {
            let mut z = activations[l].dot(&layer.weight.t());
            z += &layer.bias;
            if l < last {
                let act = params.activation();
                activations.push(z.mapv(|v| act.apply(v)));
            }
            pre_activations.push(z);
        }
        Ok(BatchTrace {
            activations,
            pre_activations,
            deltas: Vec::new(),
            mode: GradMode::Full,
        })
    }

    /// Forward pass followed by backpropagation of the chosen loss part.
    pub fn with_deltas(
        params: &NetworkParams,
        inputs: ArrayView2<f64>,
        labels: Option<&[usize]>,
        mode: GradMode,
    ) -> Result<Self> {
        let mut trace = Self::forward(params, inputs)?;
        trace.backward(params, labels, mode)?;
        Ok(trace)
    }

    pub fn logits(&self) -> &Array2<f64> {
        self.pre_activations.last().expect("at least one layer")
    }

    pub fn len(&self) -> usize {
        self.activations[0].nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-wise softmax of the logits.
    pub fn probabilities(&self) -> Array2<f64> {
        let mut probs = self.logits().clone();
        for mut row in probs.rows_mut() {
            let p = softmax(row.view());
            row.assign(&p);
        }
        probs
    }

    /// Mean cross-entropy against `labels`.
    pub fn mean_loss(&self, labels: &[usize]) -> f64 {
        let logits = self.logits();
        let total: f64 = logits
            .rows()
            .into_iter()
            .zip(labels)
            .map(|(row, &y)| super::log_sum_exp(row) - row[y])
            .sum();
        total / labels.len().max(1) as f64
    }

    pub fn backward(
        &mut self,
        params: &NetworkParams,
        labels: Option<&[usize]>,
        mode: GradMode,
    ) -> Result<()> {
        let classes = params.class_count();
        let n = self.len();
        if let Some(labels) = labels {
            if labels.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "batch labels",
                    expected: n,
                    found: labels.len(),
                });
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    classes,
                });
            }
        } else if mode.needs_label() {
            return Err(Error::MissingLabel("batched"));
        }
        if !self.logits().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("forward trace"));
        }

        let mut top = match mode {
            GradMode::LabelDependent => Array2::zeros((n, classes)),
            _ => self.probabilities(),
        };
        if let Some(labels) = labels {
            match mode {
                GradMode::Full => labels
                    .iter()
                    .enumerate()
                    .for_each(|(j, &y)| top[[j, y]] -= 1.0),
                GradMode::LabelDependent => labels
                    .iter()
                    .enumerate()
                    .for_each(|(j, &y)| top[[j, y]] = 1.0),
                GradMode::LabelFree => {}
            }
        }

        let layers = params.layers();
        let act = params.activation();
        let mut deltas = Vec::with_capacity(layers.len());
        deltas.push(top);
        for l in (1..layers.len()).rev() {
            let back = deltas.last().expect("seeded above").dot(&layers[l].weight);
            let d = Zip::from(&back)
                .and(&self.pre_activations[l - 1])
                .and(&self.activations[l])
                .map_collect(|&g, &z, &a| g * act.derivative(z, a));
            deltas.push(d);
        }
        deltas.reverse();
        self.deltas = deltas;
        self.mode = mode;
        Ok(())
    }

    fn require_deltas(&self) {
        assert!(
            !self.deltas.is_empty(),
            "backward() must run before gradient queries"
        );
    }

    /// Gradient of sample `row`, identical to `per_sample_gradient` on that sample.
    pub fn sample_gradient(&self, row: usize) -> LayeredGradient {
        self.require_deltas();
        let layers = self
            .deltas
            .iter()
            .zip(&self.activations)
            .map(|(d, a)| {
                let delta = d.row(row).to_owned();
                let input = a.row(row).to_owned();
                LayerGrad {
                    weight: super::outer(&delta, &input),
                    bias: delta,
                }
            })
            .collect();
        LayeredGradient {
            layers,
            mode: self.mode,
        }
    }

    /// `Σ_j coefficients[j] · ∇f_j`.
    pub fn weighted_gradient(&self, coefficients: &[f64]) -> LayeredGradient {
        self.require_deltas();
        assert_eq!(coefficients.len(), self.len(), "one coefficient per sample");
        let coef = Array1::from(coefficients.to_vec()).insert_axis(Axis(1));
        let layers = self
            .deltas
            .iter()
            .zip(&self.activations)
            .map(|(d, a)| {
                let scaled = d * &coef;
                LayerGrad {
                    weight: scaled.t().dot(a),
                    bias: scaled.sum_axis(Axis(0)),
                }
            })
            .collect();
        LayeredGradient {
            layers,
            mode: self.mode,
        }
    }

    /// `⟨∇f_j, other⟩` for every sample `j`, over all layers and biases.
    pub fn dots_with(&self, other: &LayeredGradient) -> Vec<f64> {
        self.require_deltas();
        let mut out = vec![0.0; self.len()];
        for ((d, a), g) in self.deltas.iter().zip(&self.activations).zip(&other.layers) {
            let projected = a.dot(&g.weight.t()) + &g.bias;
            for (acc, (drow, prow)) in out
                .iter_mut()
                .zip(d.rows().into_iter().zip(projected.rows()))
            {
                *acc += drow.dot(&prow);
            }
        }
        out
    }

    /// Squared gradient norm of every sample (rank-one layers factorise).
    pub fn gradient_norms_sq(&self) -> Vec<f64> {
        self.require_deltas();
        let mut out = vec![0.0; self.len()];
        for (d, a) in self.deltas.iter().zip(&self.activations) {
            for (acc, (drow, arow)) in out.iter_mut().zip(d.rows().into_iter().zip(a.rows())) {
                let dd = drow.dot(&drow);
                *acc += dd * arow.dot(&arow) + dd;
            }
        }
        out
    }
}
