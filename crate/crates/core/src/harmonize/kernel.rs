//! Gaussian-kernel gram matrices and the gram discrepancy between two samples.

use ndarray::{Array2, ArrayView2, Axis};

use super::HarmonizeError;
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthMode {
    Fixed,
    /// `gamma = 1 / (2 m^2)` with `m` the median pairwise distance of the pooled sample.
    MedianHeuristic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    /// Used as-is in fixed mode; ignored under the median heuristic.
    pub gamma: f64,
    pub mode: BandwidthMode,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self::median_heuristic()
    }
}

impl KernelConfig {
    pub fn fixed(gamma: f64) -> Self {
        assert!(gamma > 0.0 && gamma.is_finite(), "kernel bandwidth must be positive");
        Self {
            gamma,
            mode: BandwidthMode::Fixed,
        }
    }

    pub fn median_heuristic() -> Self {
        Self {
            gamma: 1.0,
            mode: BandwidthMode::MedianHeuristic,
        }
    }

    /// Bandwidth for the pooled sample made of `samples`.
    pub fn resolve(&self, samples: &[ArrayView2<'_, f64>]) -> f64 {
        match self.mode {
            BandwidthMode::Fixed => self.gamma,
            BandwidthMode::MedianHeuristic => {
                let m = median_pairwise_distance(samples);
                if m > 0.0 {
                    1.0 / (2.0 * m * m)
                } else {
                    1.0
                }
            }
        }
    }
}

fn squared_distance(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median Euclidean distance over all unordered pairs of the pooled rows.
pub fn median_pairwise_distance(samples: &[ArrayView2<'_, f64>]) -> f64 {
    let rows: Vec<_> = samples.iter().flat_map(|s| s.axis_iter(Axis(0))).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            d.push(squared_distance(rows[i], rows[j]).sqrt());
        }
    }
    util::median(&d).unwrap_or(0.0)
}

fn check_finite(points: &ArrayView2<'_, f64>) -> Result<(), HarmonizeError> {
    if points.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(HarmonizeError::NonFiniteInput)
    }
}

/// `K[i][j] = exp(-gamma * ||x_i - x_j||^2)`.
pub fn gaussian_gram(points: ArrayView2<'_, f64>, gamma: f64) -> Result<Array2<f64>, HarmonizeError> {
    check_finite(&points)?;
    let m = points.nrows();
    let mut k = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        k[[i, i]] = 1.0;
        for j in (i + 1)..m {
            let v = (-gamma * squared_distance(points.row(i), points.row(j))).exp();
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    Ok(k)
}

pub fn gram_matrix(points: ArrayView2<'_, f64>, config: &KernelConfig) -> Result<Array2<f64>, HarmonizeError> {
    let gamma = config.resolve(&[points]);
    gaussian_gram(points, gamma)
}

/// Frobenius norm of the difference between the gram matrices of two
/// equally sized samples. Under the median heuristic the bandwidth comes
/// from the pooled sample, so the statistic is symmetric in its arguments.
pub fn kernel_distance(
    source: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    config: &KernelConfig,
) -> Result<f64, HarmonizeError> {
    if source.dim() != target.dim() {
        return Err(HarmonizeError::SizeMismatch {
            source_shape: source.dim(),
            target_shape: target.dim(),
        });
    }
    check_finite(&source)?;
    check_finite(&target)?;
    let gamma = config.resolve(&[source, target]);
    let ks = gaussian_gram(source, gamma)?;
    let kt = gaussian_gram(target, gamma)?;
    Ok(ks
        .iter()
        .zip(kt.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Seeded subsampling of both samples to a common size `min(n_a, n_b, cap)`,
/// with rows then put in lexicographic order so the index pairing used by
/// the gram comparison does not depend on file row order.
pub fn equalize_samples(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    cap: usize,
    seed: u64,
) -> (Array2<f64>, Array2<f64>) {
    let m = a.nrows().min(b.nrows()).min(cap);
    let mut rng = util::rng(seed);
    let ia = util::sample_indices(a.nrows(), m, &mut rng);
    let ib = util::sample_indices(b.nrows(), m, &mut rng);
    let (a, b) = (a.select(Axis(0), &ia), b.select(Axis(0), &ib));
    let scales = column_scales(&[a.view(), b.view()]);
    (canonical_order(a.view(), &scales), canonical_order(b.view(), &scales))
}

/// Per-column standard deviation of the pooled rows (1 for constant columns).
pub(crate) fn column_scales(samples: &[ArrayView2<'_, f64>]) -> Vec<f64> {
    let p = samples.first().map_or(0, |s| s.ncols());
    (0..p)
        .map(|j| {
            let col: Vec<f64> = samples.iter().flat_map(|s| s.column(j).to_vec()).collect();
            let sd = util::std_dev(&col);
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect()
}

/// Rows sorted lexicographically after rounding each coordinate to a
/// 1e-9 fraction of its column scale, so values that differ only by
/// floating-point noise still compare equal and fall through to the next
/// column.
pub(crate) fn canonical_order(x: ArrayView2<'_, f64>, scales: &[f64]) -> Array2<f64> {
    let keys: Vec<Vec<i64>> = x
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .zip(scales)
                .map(|(v, s)| (v / s * 1e9).round() as i64)
                .collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.sort_by(|&i, &j| keys[i].cmp(&keys[j]));
    x.select(Axis(0), &order)
}
