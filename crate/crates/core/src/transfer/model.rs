//! Logistic and one-hidden-layer MLP classifiers with analytic gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;

use super::{TransferConfig, TransferError};
use crate::catalog::LabeledTable;
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnerKind {
    Logistic,
    Mlp,
}

impl LearnerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LearnerKind::Logistic => "logistic",
            LearnerKind::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for LearnerKind {
    type Err = TransferError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logistic" => Ok(LearnerKind::Logistic),
            "mlp" => Ok(LearnerKind::Mlp),
            other => Err(TransferError::InvalidConfig(format!("unknown learner `{other}`"))),
        }
    }
}

/// Dense layer: `out = input · weights + bias`, weights stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Logistic: one layer `p × C`. MLP: `p × h` with tanh, then `h × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub kind: LearnerKind,
    pub layers: Vec<Layer>,
}

/// Uniform in `±1/sqrt(fan_in)` weights, zero biases.
pub fn init_model(p: usize, classes: usize, config: &TransferConfig) -> ModelParams {
    assert!(p >= 1 && classes >= 2, "a model needs at least one feature and two classes");
    let mut rng = util::rng(util::derive_seed(config.seed, "init"));
    let mut layer = |fan_in: usize, fan_out: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Layer {
            weights: Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..=bound)),
            bias: Array1::zeros(fan_out),
        }
    };
    let layers = match config.learner {
        LearnerKind::Logistic => vec![layer(p, classes)],
        LearnerKind::Mlp => vec![layer(p, config.hidden_width), layer(config.hidden_width, classes)],
    };
    ModelParams {
        kind: config.learner,
        layers,
    }
}

/// Mini-batch of feature rows with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn new(x: Array2<f64>, y: Vec<usize>) -> Self {
        assert_eq!(x.nrows(), y.len(), "one label per row");
        Self { x, y }
    }

    pub fn empty(p: usize) -> Self {
        Self {
            x: Array2::zeros((0, p)),
            y: Vec::new(),
        }
    }

    pub fn from_table(table: &LabeledTable) -> Self {
        Self::new(table.features.clone(), table.labels.clone())
    }

    pub fn rows(table: &LabeledTable, rows: &[usize]) -> Self {
        Self::new(
            table.features.select(Axis(0), rows),
            rows.iter().map(|&r| table.labels[r]).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

impl ModelParams {
    pub fn n_features(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// Parameters in layer order, each layer as row-major weights then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Same shapes as `self`, values from `flat` (see [`flatten`](Self::flatten)).
    pub fn with_values(&self, flat: &[f64]) -> ModelParams {
        assert_eq!(flat.len(), self.parameter_count(), "flat parameter length");
        let mut at = 0;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (r, c) = l.weights.dim();
                let weights = Array2::from_shape_vec((r, c), flat[at..at + r * c].to_vec()).expect("shape");
                at += r * c;
                let bias = Array1::from(flat[at..at + c].to_vec());
                at += c;
                Layer { weights, bias }
            })
            .collect();
        ModelParams { kind: self.kind, layers }
    }

    pub fn zeros_like(&self) -> ModelParams {
        self.with_values(&vec![0.0; self.parameter_count()])
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(factor, &b.weights);
            a.bias.scaled_add(factor, &b.bias);
        }
    }

    /// Hidden activations (MLP only) and output logits.
    fn forward(&self, x: ArrayView2<'_, f64>) -> (Option<Array2<f64>>, Array2<f64>) {
        match self.kind {
            LearnerKind::Logistic => {
                let l = &self.layers[0];
                (None, x.dot(&l.weights) + &l.bias)
            }
            LearnerKind::Mlp => {
                let (l1, l2) = (&self.layers[0], &self.layers[1]);
                let h = (x.dot(&l1.weights) + &l1.bias).mapv(f64::tanh);
                let z = h.dot(&l2.weights) + &l2.bias;
                (Some(h), z)
            }
        }
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward(x).1
    }

    /// Arg-max class per row; ties go to the lower class index.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<usize> {
        self.logits(x)
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Mean cross-entropy of a batch and its gradient with respect to the
    /// logits (already divided by the batch size).
    fn cross_entropy(&self, batch: &Batch) -> (f64, Option<Array2<f64>>, Array2<f64>) {
        let (h, mut z) = self.forward(batch.x.view());
        let n = batch.len() as f64;
        let mut loss = 0.0;
        for (mut row, &y) in z.axis_iter_mut(Axis(0)).zip(&batch.y) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[y];
            row.mapv_inplace(|v| (v - lse).exp() / n);
            row[y] -= 1.0 / n;
        }
        (loss / n, h, z)
    }

    /// Mean cross-entropy and its gradient, scaled by `weight`.
    fn weighted_term(&self, batch: &Batch, weight: f64, grad: &mut ModelParams) -> f64 {
        let (loss, h, dz) = self.cross_entropy(batch);
        let dz = dz * weight;
        match self.kind {
            LearnerKind::Logistic => {
                grad.layers[0].weights += &batch.x.t().dot(&dz);
                grad.layers[0].bias += &dz.sum_axis(Axis(0));
            }
            LearnerKind::Mlp => {
                let h = h.expect("mlp forward keeps activations");
                grad.layers[1].weights += &h.t().dot(&dz);
                grad.layers[1].bias += &dz.sum_axis(Axis(0));
                let dh = dz.dot(&self.layers[1].weights.t());
                let da = dh * h.mapv(|v| 1.0 - v * v);
                grad.layers[0].weights += &batch.x.t().dot(&da);
                grad.layers[0].bias += &da.sum_axis(Axis(0));
            }
        }
        loss
    }
}

fn check_batches(source: &Batch, target: &Batch, alpha: f64) -> Result<(), TransferError> {
    if alpha > 0.0 && source.is_empty() {
        return Err(TransferError::EmptyWeightedBatch { side: "source" });
    }
    if alpha < 1.0 && target.is_empty() {
        return Err(TransferError::EmptyWeightedBatch { side: "target" });
    }
    Ok(())
}

fn batch_loss(model: &ModelParams, batch: &Batch) -> f64 {
    model.cross_entropy(batch).0
}

/// `alpha · CE(source) + (1 − alpha) · CE(target)`; a side with zero
/// weight is not evaluated and may be empty.
pub fn weighted_loss(model: &ModelParams, source: &Batch, target: &Batch, alpha: f64) -> Result<f64, TransferError> {
    check_batches(source, target, alpha)?;
    let s = if alpha > 0.0 { batch_loss(model, source) } else { 0.0 };
    let t = if alpha < 1.0 { batch_loss(model, target) } else { 0.0 };
    Ok(alpha * s + (1.0 - alpha) * t)
}

/// Weighted loss and its analytic gradient (same shapes as `model`).
pub fn loss_and_gradient(
    model: &ModelParams,
    source: &Batch,
    target: &Batch,
    alpha: f64,
) -> Result<(f64, ModelParams), TransferError> {
    check_batches(source, target, alpha)?;
    let mut grad = model.zeros_like();
    let s = if alpha > 0.0 {
        model.weighted_term(source, alpha, &mut grad)
    } else {
        0.0
    };
    let t = if alpha < 1.0 {
        model.weighted_term(target, 1.0 - alpha, &mut grad)
    } else {
        0.0
    };
    Ok((alpha * s + (1.0 - alpha) * t, grad))
}

pub fn gradient(model: &ModelParams, source: &Batch, target: &Batch, alpha: f64) -> Result<ModelParams, TransferError> {
    loss_and_gradient(model, source, target, alpha).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn config(learner: LearnerKind, seed: u64) -> TransferConfig {
        TransferConfig {
            learner,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let a = init_model(3, 2, &config(LearnerKind::Logistic, 1));
        assert_eq!(a, init_model(3, 2, &config(LearnerKind::Logistic, 1)));
        assert_ne!(a, init_model(3, 2, &config(LearnerKind::Logistic, 2)));
        assert_eq!(a.layers[0].weights.dim(), (3, 2));
        assert_eq!(a.layers[0].bias.len(), 2);
        assert!(a.layers[0].weights.iter().all(|w| w.abs() <= 1.0 / 3f64.sqrt()));
        assert!(a.layers[0].bias.iter().all(|&b| b == 0.0));
        let m = init_model(5, 3, &config(LearnerKind::Mlp, 1));
        assert_eq!(m.parameter_count(), 5 * 32 + 32 + 32 * 3 + 3);
    }

    #[test]
    fn flatten_round_trip() {
        let m = init_model(4, 3, &config(LearnerKind::Mlp, 7));
        assert_eq!(m.with_values(&m.flatten()), m);
    }

    #[test]
    fn alpha_endpoints_and_midpoint() {
        let m = init_model(2, 2, &config(LearnerKind::Logistic, 3));
        let s = Batch::new(array![[1.0, 2.0], [0.5, -1.0]], vec![0, 1]);
        let t = Batch::new(array![[3.0, -2.0]], vec![1]);
        let ls = weighted_loss(&m, &s, &Batch::empty(2), 1.0).unwrap();
        let lt = weighted_loss(&m, &Batch::empty(2), &t, 0.0).unwrap();
        assert_eq!(weighted_loss(&m, &s, &t, 0.0).unwrap(), lt);
        assert_eq!(weighted_loss(&m, &s, &t, 1.0).unwrap(), ls);
        let mid = weighted_loss(&m, &s, &t, 0.5).unwrap();
        assert!((mid - 0.5 * (ls + lt)).abs() < 1e-15);
        assert!(matches!(
            weighted_loss(&m, &Batch::empty(2), &t, 0.3),
            Err(TransferError::EmptyWeightedBatch { side: "source" })
        ));
    }

    /// Logistic model on a single zero input whose class-0 cross-entropy is
    /// exactly `loss`: with logits (0, b), CE = ln(1 + e^b).
    fn model_with_loss(loss: f64) -> ModelParams {
        let mut m = init_model(1, 2, &config(LearnerKind::Logistic, 0));
        m.layers[0].bias = array![0.0, (loss.exp() - 1.0).ln()];
        m
    }

    #[test]
    fn constructed_losses_average() {
        let b = Batch::new(array![[0.0]], vec![0]);
        let l2 = weighted_loss(&model_with_loss(2.0), &b, &Batch::empty(1), 1.0).unwrap();
        let l4 = weighted_loss(&model_with_loss(4.0), &Batch::empty(1), &b, 0.0).unwrap();
        assert!((l2 - 2.0).abs() < 1e-12 && (l4 - 4.0).abs() < 1e-12);
        assert!((0.5 * l2 + 0.5 * l4 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_bias_gradient_closed_form() {
        let mut m = init_model(2, 2, &config(LearnerKind::Logistic, 0));
        m.layers[0].weights.fill(0.0);
        let t = Batch::new(array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [-1.0, 3.0]], vec![0, 1, 0, 1]);
        let g = gradient(&m, &Batch::empty(2), &t, 0.0).unwrap();
        // mean of (0.5 - onehot) over a balanced batch is zero for both classes
        assert!(g.layers[0].bias.iter().all(|v| v.abs() < 1e-15));
        let t = Batch::new(array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]], vec![0, 0, 1]);
        let g = gradient(&m, &Batch::empty(2), &t, 0.0).unwrap();
        assert!((g.layers[0].bias[0] - (0.5 - 2.0 / 3.0)).abs() < 1e-15);
        assert!((g.layers[0].bias[1] - (0.5 - 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn stable_for_large_logits() {
        let mut m = init_model(1, 2, &config(LearnerKind::Logistic, 0));
        m.layers[0].weights = array![[1000.0, -1000.0]];
        let b = Batch::new(array![[1.0]], vec![1]);
        let l = weighted_loss(&m, &Batch::empty(1), &b, 0.0).unwrap();
        assert!((l - 2000.0).abs() < 1e-9);
    }
}
