//! Joint training on a harmonized source table and a target table with the
//! objective `alpha · L(source) + (1 − alpha) · L(target)`, plain gradient
//! descent, early stopping on validation macro-F1, and evaluation.

mod metrics;
mod model;

pub use metrics::{evaluate, metrics_from_predictions, ClassMetrics, MetricReport};
pub use model::{
    gradient, init_model, loss_and_gradient, weighted_loss, Batch, Layer, LearnerKind, ModelParams,
};

use ndarray::Axis;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::catalog::LabeledTable;
use crate::util;

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error("{side} batch is empty but carries nonzero weight")]
    EmptyWeightedBatch { side: &'static str },
    #[error("label spaces differ: source {source_classes} classes, train {train}, validation {validation}")]
    LabelSpaceMismatch {
        source_classes: usize,
        train: usize,
        validation: usize,
    },
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    FeatureMismatch { expected: usize, found: usize },
    #[error("loss became non-finite in epoch {epoch}")]
    DivergedLoss { epoch: usize, log: TrainingLog },
    #[error("invalid transfer configuration: {0}")]
    InvalidConfig(String),
    #[error("{0} table is empty")]
    EmptyTable(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    /// 512 when either table has at least 4096 rows, otherwise 32.
    Auto,
    Fixed(usize),
}

impl BatchSize {
    pub fn resolve(self, n_source: usize, n_target: usize) -> usize {
        match self {
            BatchSize::Fixed(b) => b,
            BatchSize::Auto if n_source.max(n_target) >= 4096 => 512,
            BatchSize::Auto => 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: BatchSize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub learner: LearnerKind,
    pub hidden_width: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            learning_rate: 0.02,
            batch_size: BatchSize::Auto,
            max_epochs: 100,
            patience: 20,
            seed: 0,
            learner: LearnerKind::Logistic,
            hidden_width: 32,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<(), TransferError> {
        let bad = |m: &str| Err(TransferError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if matches!(self.batch_size, BatchSize::Fixed(0)) {
            return bad("batch size must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if self.patience > self.max_epochs {
            return bad("patience cannot exceed max_epochs");
        }
        if self.learner == LearnerKind::Mlp && self.hidden_width == 0 {
            return bad("hidden width must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub stopped_early: bool,
}

impl TrainingLog {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!(
                "epoch={} train_loss={:.6} val_macro_f1={:.6}\n",
                e.epoch, e.train_loss, e.val_macro_f1
            ));
        }
        out
    }
}

/// Source of per-step loss and gradient; [`AnalyticGradient`] in practice.
pub trait GradientOracle {
    fn loss_and_gradient(
        &self,
        model: &ModelParams,
        source: &Batch,
        target: &Batch,
        alpha: f64,
    ) -> Result<(f64, ModelParams), TransferError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AnalyticGradient;

impl GradientOracle for AnalyticGradient {
    fn loss_and_gradient(
        &self,
        model: &ModelParams,
        source: &Batch,
        target: &Batch,
        alpha: f64,
    ) -> Result<(f64, ModelParams), TransferError> {
        loss_and_gradient(model, source, target, alpha)
    }
}

/// Endless seeded stream of row indices: a shuffled pass, reshuffled on
/// wraparound.
struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    rng: util::Rng,
}

impl BatchStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = util::rng(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, cursor: 0, rng }
    }

    /// `min(size, n)` distinct indices.
    fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

fn check_tables(
    model: &ModelParams,
    source: &LabeledTable,
    train: &LabeledTable,
    val: &LabeledTable,
) -> Result<(), TransferError> {
    let c = model.n_classes();
    if source.n_classes != c || train.n_classes != c || val.n_classes != c {
        return Err(TransferError::LabelSpaceMismatch {
            source_classes: source.n_classes,
            train: train.n_classes,
            validation: val.n_classes,
        });
    }
    let p = model.n_features();
    for t in [source, train, val] {
        if t.n_features() != p {
            return Err(TransferError::FeatureMismatch {
                expected: p,
                found: t.n_features(),
            });
        }
    }
    if train.n_rows() == 0 {
        return Err(TransferError::EmptyTable("target training"));
    }
    if val.n_rows() == 0 {
        return Err(TransferError::EmptyTable("validation"));
    }
    Ok(())
}

pub fn train(
    model: ModelParams,
    source: &LabeledTable,
    target_train: &LabeledTable,
    target_val: &LabeledTable,
    config: &TransferConfig,
) -> Result<(ModelParams, TrainingLog), TransferError> {
    train_with_oracle(model, source, target_train, target_val, config, &AnalyticGradient)
}

/// Each epoch runs `ceil(n / batch)` steps, `n` being the larger row count
/// among the sides with nonzero weight. Every step draws an independent
/// source batch and target batch and applies `θ ← θ − η·g`. Training stops
/// once validation macro-F1 has not improved for `patience` epochs; the
/// best-validation parameters are returned.
pub fn train_with_oracle(
    mut model: ModelParams,
    source: &LabeledTable,
    target_train: &LabeledTable,
    target_val: &LabeledTable,
    config: &TransferConfig,
    oracle: &dyn GradientOracle,
) -> Result<(ModelParams, TrainingLog), TransferError> {
    config.validate()?;
    check_tables(&model, source, target_train, target_val)?;
    let alpha = config.alpha;
    let use_source = alpha > 0.0;
    let use_target = alpha < 1.0;
    if use_source && source.n_rows() == 0 {
        return Err(TransferError::EmptyWeightedBatch { side: "source" });
    }
    let batch = config.batch_size.resolve(source.n_rows(), target_train.n_rows());
    let longest = [
        use_source.then_some(source.n_rows()),
        use_target.then_some(target_train.n_rows()),
    ]
    .into_iter()
    .flatten()
    .max()
    .unwrap_or(0);
    let steps = longest.div_ceil(batch).max(1);
    let mut source_stream = BatchStream::new(source.n_rows(), util::derive_seed(config.seed, "source-batches"));
    let mut target_stream = BatchStream::new(target_train.n_rows(), util::derive_seed(config.seed, "target-batches"));
    let p = model.n_features();

    let mut log = TrainingLog {
        best_val_macro_f1: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best = model.clone();
    let mut since_best = 0usize;
    for epoch in 1..=config.max_epochs {
        let mut loss_sum = 0.0;
        for _ in 0..steps {
            let sb = if use_source {
                Batch::rows(source, &source_stream.next(batch))
            } else {
                Batch::empty(p)
            };
            let tb = if use_target {
                Batch::rows(target_train, &target_stream.next(batch))
            } else {
                Batch::empty(p)
            };
            let (loss, grad) = oracle.loss_and_gradient(&model, &sb, &tb, alpha)?;
            if !loss.is_finite() {
                return Err(TransferError::DivergedLoss { epoch, log });
            }
            model.add_scaled(&grad, -config.learning_rate);
            loss_sum += loss;
        }
        if !model.is_finite() {
            return Err(TransferError::DivergedLoss { epoch, log });
        }
        let val = evaluate(&model, target_val).macro_f1;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_macro_f1: val,
        });
        if val > log.best_val_macro_f1 {
            log.best_val_macro_f1 = val;
            log.best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    Ok((best, log))
}

/// Per-column standardization with statistics from one table (constant
/// columns keep unit scale).
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(table: &LabeledTable) -> Self {
        let (means, stds) = table
            .features
            .axis_iter(Axis(1))
            .map(|c| {
                let v = c.to_vec();
                let sd = util::std_dev(&v);
                (util::mean(&v), if sd > 0.0 { sd } else { 1.0 })
            })
            .unzip();
        Self { means, stds }
    }

    pub fn apply(&self, table: &LabeledTable) -> LabeledTable {
        let mut out = table.clone();
        for (j, mut col) in out.features.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.means[j], self.stds[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub alpha: f64,
    pub validation: MetricReport,
    pub log: TrainingLog,
    pub model: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    /// Highest validation macro-F1; ties go to the smaller alpha.
    pub best_alpha: f64,
}

/// One seeded train-and-evaluate run per grid value, run in parallel. All
/// grid points share the configured seed, so equal alphas give equal rows
/// and alpha 0 reproduces a target-only run.
pub fn alpha_sweep(
    source: &LabeledTable,
    target_train: &LabeledTable,
    target_val: &LabeledTable,
    grid: &[f64],
    config: &TransferConfig,
) -> Result<SweepResult, TransferError> {
    if grid.is_empty() {
        return Err(TransferError::InvalidConfig("alpha grid is empty".into()));
    }
    let entries = grid
        .par_iter()
        .map(|&alpha| {
            let cfg = TransferConfig { alpha, ..*config };
            let model = init_model(target_train.n_features(), target_train.n_classes, &cfg);
            let (model, log) = train(model, source, target_train, target_val, &cfg)?;
            Ok(SweepEntry {
                alpha,
                validation: evaluate(&model, target_val),
                log,
                model,
            })
        })
        .collect::<Result<Vec<_>, TransferError>>()?;
    let mut best = 0;
    for (i, e) in entries.iter().enumerate() {
        let b = &entries[best];
        let better = e.validation.macro_f1 > b.validation.macro_f1
            || (e.validation.macro_f1 == b.validation.macro_f1 && e.alpha < b.alpha);
        if better {
            best = i;
        }
    }
    Ok(SweepResult {
        best_alpha: entries[best].alpha,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{ColumnKind, ColumnMeta};
    use ndarray::Array2;
    use rand::Rng as _;

    pub(crate) fn blobs(n: usize, seed: u64, offset: f64) -> LabeledTable {
        let mut rng = util::rng(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let features = Array2::from_shape_fn((n, 2), |(i, j)| {
            let centre = if labels[i] == 1 { 2.0 } else { -2.0 };
            centre * (j as f64 + 0.5) + offset + rng.gen_range(-1.0..1.0)
        });
        LabeledTable {
            missing: Array2::from_elem(features.dim(), false),
            features,
            labels,
            columns: (0..2)
                .map(|j| ColumnMeta {
                    name: format!("x{j}"),
                    kind: ColumnKind::Continuous,
                    categories: Vec::new(),
                })
                .collect(),
            n_classes: 2,
            card_ref: "blobs".into(),
            dropped_rows: 0,
        }
    }

    #[test]
    fn separable_target_is_learned() {
        let t = blobs(200, 1, 0.0);
        let cfg = TransferConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let model = init_model(2, 2, &cfg);
        let (model, log) = train(model, &t, &t, &t, &cfg).unwrap();
        assert!(evaluate(&model, &t).accuracy >= 0.99);
        assert!(log.epochs.len() <= 100);
    }

    #[test]
    fn alpha_zero_ignores_source() {
        let t = blobs(60, 2, 0.0);
        let cfg = TransferConfig {
            alpha: 0.0,
            max_epochs: 15,
            patience: 5,
            ..Default::default()
        };
        let a = train(init_model(2, 2, &cfg), &blobs(500, 3, 5.0), &t, &t, &cfg).unwrap();
        let b = train(init_model(2, 2, &cfg), &blobs(7, 4, -3.0), &t, &t, &cfg).unwrap();
        assert_eq!(a, b);
    }

    struct Frozen;

    impl GradientOracle for Frozen {
        fn loss_and_gradient(
            &self,
            model: &ModelParams,
            _: &Batch,
            _: &Batch,
            _: f64,
        ) -> Result<(f64, ModelParams), TransferError> {
            Ok((1.0, model.zeros_like()))
        }
    }

    #[test]
    fn patience_counts_epochs_without_improvement() {
        let t = blobs(40, 5, 0.0);
        let cfg = TransferConfig {
            patience: 3,
            ..Default::default()
        };
        let (_, log) = train_with_oracle(init_model(2, 2, &cfg), &t, &t, &t, &cfg, &Frozen).unwrap();
        assert_eq!(log.epochs.len(), 4);
        assert_eq!(log.best_epoch, 1);
        assert!(log.stopped_early);
    }

    #[test]
    fn diverging_learning_rate_is_reported() {
        let mut t = blobs(40, 6, 0.0);
        t.features.mapv_inplace(|v| v * 1e150);
        let cfg = TransferConfig {
            alpha: 0.0,
            learning_rate: 1e150,
            ..Default::default()
        };
        let r = train(init_model(2, 2, &cfg), &t, &t, &t, &cfg);
        assert!(matches!(r, Err(TransferError::DivergedLoss { .. })));
    }

    #[test]
    fn label_space_mismatch() {
        let t = blobs(20, 7, 0.0);
        let mut s = t.clone();
        s.n_classes = 3;
        let cfg = TransferConfig::default();
        let r = train(init_model(2, 2, &cfg), &s, &t, &t, &cfg);
        assert!(matches!(r, Err(TransferError::LabelSpaceMismatch { .. })));
    }

    #[test]
    fn config_validation() {
        let bad = TransferConfig {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TransferConfig {
            patience: 200,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(BatchSize::Auto.resolve(5000, 10), 512);
        assert_eq!(BatchSize::Auto.resolve(100, 60), 32);
    }

    #[test]
    fn sweep_is_deterministic_and_picks_smaller_alpha_on_ties() {
        let t = blobs(80, 8, 0.0);
        let s = blobs(300, 9, 0.0);
        let cfg = TransferConfig {
            max_epochs: 10,
            patience: 5,
            ..Default::default()
        };
        let r = alpha_sweep(&s, &t, &t, &[0.5, 0.0, 0.5], &cfg).unwrap();
        assert_eq!(r.entries[0], r.entries[2]);
        let alone = train(init_model(2, 2, &TransferConfig { alpha: 0.0, ..cfg }), &s, &t, &t, &TransferConfig { alpha: 0.0, ..cfg }).unwrap();
        assert_eq!(r.entries[1].log, alone.1);
        let top = r.entries.iter().map(|e| e.validation.macro_f1).fold(f64::MIN, f64::max);
        let smallest = r
            .entries
            .iter()
            .filter(|e| e.validation.macro_f1 == top)
            .map(|e| e.alpha)
            .fold(f64::MAX, f64::min);
        assert_eq!(r.best_alpha, smallest);
    }

    #[test]
    fn standardizer_centres_columns() {
        let t = blobs(50, 10, 3.0);
        let z = Standardizer::fit(&t).apply(&t);
        for c in z.features.axis_iter(Axis(1)) {
            let v = c.to_vec();
            assert!(util::mean(&v).abs() < 1e-12);
            assert!((util::std_dev(&v) - 1.0).abs() < 1e-12);
        }
    }
}
