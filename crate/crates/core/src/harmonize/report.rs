//! Applying a mapping to produce the harmonized source table, and the
//! distances that document it.

use std::fmt::Write as _;

use ndarray::{Array2, Axis};

use super::{
    equalize_samples, kernel_distance, pooled_wasserstein, wasserstein_1d, ClassMap, ColumnTransform, FeatureMapping,
    HarmonizeError, KernelConfig, SinkhornParams,
};
use crate::catalog::LabeledTable;
use crate::kv::KvWriter;
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonizeSettings {
    pub kernel: KernelConfig,
    pub sinkhorn: SinkhornParams,
    /// Rows per side for the kernel distance and the pooled Wasserstein.
    pub sample_cap: usize,
    pub seed: u64,
}

impl Default for HarmonizeSettings {
    fn default() -> Self {
        Self {
            kernel: KernelConfig::median_heuristic(),
            sinkhorn: SinkhornParams::default(),
            sample_cap: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDistance {
    pub target_column: String,
    pub source_column: Option<String>,
    /// `quantile`, `affine`, `categorical` or `fill`.
    pub transform: &'static str,
    pub w1_before: f64,
    pub w1_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonizationReport {
    pub source_id: String,
    pub target_id: String,
    pub rows: usize,
    pub kernel_distance_before: f64,
    pub kernel_distance_after: f64,
    pub per_feature: Vec<FeatureDistance>,
    /// Entropic W1 between harmonized source and target, both standardized
    /// with the target column moments.
    pub pooled_wasserstein: f64,
    pub mapping: FeatureMapping,
    pub class_map: ClassMap,
}

impl HarmonizationReport {
    pub fn per_feature_w1_before(&self) -> Vec<f64> {
        self.per_feature.iter().map(|f| f.w1_before).collect()
    }

    pub fn per_feature_w1_after(&self) -> Vec<f64> {
        self.per_feature.iter().map(|f| f.w1_after).collect()
    }

    /// Key/value header followed by a per-feature table.
    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new();
        let m = &self.mapping;
        let class_map: Vec<String> = self
            .class_map
            .map
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                format!(
                    "{}->{} ({})",
                    self.class_map.source_labels[i],
                    self.class_map.target_labels[j],
                    self.class_map.rules[i].as_str()
                )
            })
            .collect();
        let unmatched: Vec<&str> = m.unmatched_source.iter().map(|&s| m.source_columns[s].as_str()).collect();
        w.entry("source", &self.source_id)
            .entry("target", &self.target_id)
            .entry("rows", self.rows)
            .entry("kernel_distance_before", format!("{:.6}", self.kernel_distance_before))
            .entry("kernel_distance_after", format!("{:.6}", self.kernel_distance_after))
            .entry("pooled_wasserstein", format!("{:.6}", self.pooled_wasserstein))
            .entry("matched_columns", m.matched.len())
            .entry("filled_columns", m.fills.len())
            .entry("unmatched_source", unmatched.join(", "))
            .entry("class_map", class_map.join(", "));
        if let Some(warning) = &self.class_map.warning {
            w.entry("class_warning", warning);
        }
        let mut out = w.finish();
        let _ = writeln!(out, "\n{:<24} {:<24} {:<12} {:>12} {:>12}", "target", "source", "transform", "w1_before", "w1_after");
        for f in &self.per_feature {
            let _ = writeln!(
                out,
                "{:<24} {:<24} {:<12} {:>12.6} {:>12.6}",
                f.target_column,
                f.source_column.as_deref().unwrap_or("-"),
                f.transform,
                f.w1_before,
                f.w1_after
            );
        }
        out
    }
}

fn target_standardized(x: &Array2<f64>, means: &[f64], stds: &[f64]) -> Array2<f64> {
    let mut out = x.clone();
    for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        col.mapv_inplace(|v| (v - means[j]) / stds[j]);
    }
    out
}

/// Expresses `source` in the target's columns and label space.
///
/// The report compares the identity-ordered raw source (target medians
/// padding missing columns) against the harmonized one: gram discrepancy,
/// per-column W1 and a pooled entropic Wasserstein distance.
pub fn harmonize_dataset(
    source: &LabeledTable,
    target: &LabeledTable,
    mapping: &FeatureMapping,
    class_map: &ClassMap,
    settings: &HarmonizeSettings,
) -> Result<(LabeledTable, HarmonizationReport), HarmonizeError> {
    mapping.validate(Some((source, target)))?;
    if class_map.map.len() != source.n_classes || class_map.map.iter().any(|&t| t >= target.n_classes) {
        return Err(HarmonizeError::InvalidMapping(
            "class map does not fit the source and target label spaces".into(),
        ));
    }
    if source.n_rows() == 0 || target.n_rows() == 0 {
        return Err(HarmonizeError::EmptySample);
    }
    let (n, pt) = (source.n_rows(), target.n_features());
    let harmonized = mapping.apply(source);
    let mut missing = Array2::from_elem((n, pt), true);
    for m in &mapping.matched {
        missing.column_mut(m.target).assign(&source.missing.column(m.source));
    }
    let table = LabeledTable {
        features: harmonized,
        labels: source.labels.iter().map(|&y| class_map.apply(y)).collect(),
        columns: target.columns.clone(),
        n_classes: target.n_classes,
        card_ref: source.card_ref.clone(),
        missing,
        dropped_rows: source.dropped_rows,
    };

    let mut before = Array2::zeros((n, pt));
    for t in 0..pt {
        if t < source.n_features() {
            before.column_mut(t).assign(&source.column(t));
        } else {
            let fill = util::median(&target.column(t).to_vec()).unwrap_or(0.0);
            before.column_mut(t).fill(fill);
        }
    }

    let mut per_feature = Vec::with_capacity(pt);
    for t in 0..pt {
        let target_col = target.column(t).to_vec();
        let after = wasserstein_1d(&table.column(t).to_vec(), &target_col)?;
        let entry = match mapping.for_target(t) {
            Some(m) => FeatureDistance {
                target_column: mapping.target_columns[t].clone(),
                source_column: Some(mapping.source_columns[m.source].clone()),
                transform: match &m.transform {
                    ColumnTransform::Numeric { quantile: Some(_), .. } => "quantile",
                    ColumnTransform::Numeric { quantile: None, .. } => "affine",
                    ColumnTransform::Categorical { .. } => "categorical",
                },
                w1_before: wasserstein_1d(&source.column(m.source).to_vec(), &target_col)?,
                w1_after: after,
            },
            None => FeatureDistance {
                target_column: mapping.target_columns[t].clone(),
                source_column: None,
                transform: "fill",
                w1_before: after,
                w1_after: after,
            },
        };
        per_feature.push(entry);
    }

    let kd = |x: &Array2<f64>| -> Result<f64, HarmonizeError> {
        let (a, b) = equalize_samples(x.view(), target.features.view(), settings.sample_cap, settings.seed);
        kernel_distance(a.view(), b.view(), &settings.kernel)
    };
    let kernel_distance_before = kd(&before)?;
    let kernel_distance_after = kd(&table.features)?;

    let means: Vec<f64> = (0..pt).map(|t| util::mean(&target.column(t).to_vec())).collect();
    let stds: Vec<f64> = (0..pt)
        .map(|t| {
            let sd = util::std_dev(&target.column(t).to_vec());
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let pooled = pooled_wasserstein(
        target_standardized(&table.features, &means, &stds).view(),
        target_standardized(&target.features, &means, &stds).view(),
        settings.sinkhorn,
        settings.sample_cap,
        util::derive_seed(settings.seed, "pooled-wasserstein"),
    )?;

    let report = HarmonizationReport {
        source_id: mapping.source_id.clone(),
        target_id: mapping.target_id.clone(),
        rows: n,
        kernel_distance_before,
        kernel_distance_after,
        per_feature,
        pooled_wasserstein: pooled,
        mapping: mapping.clone(),
        class_map: class_map.clone(),
    };
    Ok((table, report))
}

#[cfg(test)]
mod tests {
    use super::super::{search_feature_mapping, ClassMatch, MappingSearchConfig};
    use super::*;
    use crate::adapter::{AdapterKind, MappingHints};
    use crate::catalog::{ColumnKind, ColumnMeta};
    use rand::Rng as _;

    fn table(features: Array2<f64>, names: &[&str]) -> LabeledTable {
        let n = features.nrows();
        LabeledTable {
            missing: Array2::from_elem(features.dim(), false),
            labels: (0..n).map(|i| i % 2).collect(),
            columns: names
                .iter()
                .map(|n| ColumnMeta {
                    name: n.to_string(),
                    kind: ColumnKind::Continuous,
                    categories: Vec::new(),
                })
                .collect(),
            n_classes: 2,
            card_ref: "t".into(),
            dropped_rows: 0,
            features,
        }
    }

    fn identity_classes() -> ClassMap {
        ClassMap::new(vec![0, 1], vec![ClassMatch::Exact; 2], vec!["a".into(), "b".into()], vec!["a".into(), "b".into()])
    }

    fn sample(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = util::rng(seed);
        Array2::from_shape_fn((n, 3), |(_, j)| {
            let u: f64 = rng.gen_range(0.0..1.0);
            match j {
                0 => u * 4.0,
                1 => -(1.0 - u).ln(),
                _ => (u - 0.3).powi(3),
            }
        })
    }

    fn settings() -> HarmonizeSettings {
        HarmonizeSettings {
            sample_cap: 128,
            sinkhorn: SinkhornParams {
                epsilon: 0.05,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn already_harmonized_source_is_unchanged() {
        let t = table(sample(100, 1), &["a", "b", "c"]);
        let hints = MappingHints::empty(AdapterKind::Stub);
        let m = search_feature_mapping(("t", &t), ("t", &t), &hints, &MappingSearchConfig::default()).unwrap();
        let (out, report) = harmonize_dataset(&t, &t, &m, &identity_classes(), &settings()).unwrap();
        for (a, b) in out.features.iter().zip(t.features.iter()) {
            assert!((a - b).abs() <= 1e-9);
        }
        assert!(report.kernel_distance_after <= 1e-9);
        assert!(report.per_feature_w1_after().iter().all(|&w| w <= 1e-9));
    }

    #[test]
    fn shifted_clone_w1_collapses() {
        let x = sample(300, 2);
        let perm = [1usize, 2, 0];
        let src_x = Array2::from_shape_fn((300, 3), |(i, j)| 2.5 * x[[i, perm[j]]] + 4.0 * (j as f64 + 1.0));
        let tgt = table(x, &["a", "b", "c"]);
        let src = table(src_x, &["p", "q", "r"]);
        let hints = MappingHints::empty(AdapterKind::Stub);
        let m = search_feature_mapping(("s", &src), ("t", &tgt), &hints, &MappingSearchConfig::default()).unwrap();
        let (_, report) = harmonize_dataset(&src, &tgt, &m, &identity_classes(), &settings()).unwrap();
        for f in &report.per_feature {
            assert!(f.w1_after <= 0.05 * f.w1_before, "{f:?}");
        }
        assert!(report.kernel_distance_after.is_finite() && report.pooled_wasserstein >= 0.0);
        let text = report.to_text();
        assert!(text.contains("pooled_wasserstein = "));
    }

    #[test]
    fn wider_source_yields_target_shape() {
        let x = sample(80, 3);
        let src_x = ndarray::concatenate![Axis(1), x, sample(80, 4)];
        let src = table(src_x, &["a", "b", "c", "d", "e", "f"]);
        let tgt = table(x.select(Axis(1), &[0, 1]), &["a", "b"]);
        let hints = MappingHints::empty(AdapterKind::Stub);
        let m = search_feature_mapping(("s", &src), ("t", &tgt), &hints, &MappingSearchConfig::default()).unwrap();
        let (out, _) = harmonize_dataset(&src, &tgt, &m, &identity_classes(), &settings()).unwrap();
        assert_eq!(out.n_features(), 2);
        assert_eq!(out.column_names(), vec!["a", "b"]);
    }

    #[test]
    fn relabels_through_class_map() {
        let t = table(sample(10, 5), &["a", "b", "c"]);
        let hints = MappingHints::empty(AdapterKind::Stub);
        let m = search_feature_mapping(("t", &t), ("t", &t), &hints, &MappingSearchConfig::default()).unwrap();
        let swap = ClassMap::new(vec![1, 0], vec![ClassMatch::Manual; 2], vec!["a".into(), "b".into()], vec!["b".into(), "a".into()]);
        let (out, _) = harmonize_dataset(&t, &t, &m, &swap, &settings()).unwrap();
        assert!(out.labels.iter().zip(&t.labels).all(|(a, b)| *a == 1 - *b));
        let bad = ClassMap::new(vec![0], vec![ClassMatch::Manual], vec!["a".into()], vec!["a".into()]);
        assert!(harmonize_dataset(&t, &t, &m, &bad, &settings()).is_err());
    }
}
