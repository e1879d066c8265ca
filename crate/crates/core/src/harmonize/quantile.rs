//! Monotone quantile maps between empirical distributions.

use super::{wasserstein_1d, HarmonizeError};

pub const QUANTILE_LEVELS: usize = 101;

/// Piecewise-linear map through matched (source, target) quantile knots;
/// constant outside the source range.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileMap {
    source: Vec<f64>,
    target: Vec<f64>,
}

/// Linear-interpolation empirical quantile of a sorted sample.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn knots(sample: &[f64]) -> Vec<f64> {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = (0..QUANTILE_LEVELS)
        .map(|k| quantile_sorted(&s, k as f64 / (QUANTILE_LEVELS - 1) as f64))
        .collect();
    // interpolation rounding can break monotonicity by an ulp
    for k in 1..out.len() {
        if out[k] < out[k - 1] {
            out[k] = out[k - 1];
        }
    }
    out
}

impl QuantileMap {
    pub fn fit(source: &[f64], target: &[f64]) -> Result<Self, HarmonizeError> {
        if source.is_empty() || target.is_empty() {
            return Err(HarmonizeError::EmptySample);
        }
        if source.iter().chain(target).any(|v| !v.is_finite()) {
            return Err(HarmonizeError::NonFiniteInput);
        }
        Ok(Self {
            source: knots(source),
            target: knots(target),
        })
    }

    /// Rebuilds a map from stored knots, checking they are usable.
    pub fn from_knots(source: Vec<f64>, target: Vec<f64>) -> Result<Self, HarmonizeError> {
        let monotone = |v: &[f64]| v.windows(2).all(|w| w[0] <= w[1]);
        if source.len() != target.len()
            || source.len() < 2
            || !monotone(&source)
            || !monotone(&target)
            || source.iter().chain(&target).any(|v| !v.is_finite())
        {
            return Err(HarmonizeError::InvalidMapping(
                "quantile knots must be finite, non-decreasing and of equal length".into(),
            ));
        }
        Ok(Self { source, target })
    }

    pub fn source_knots(&self) -> &[f64] {
        &self.source
    }

    pub fn target_knots(&self) -> &[f64] {
        &self.target
    }

    pub fn apply(&self, v: f64) -> f64 {
        let s = &self.source;
        let t = &self.target;
        let last = s.len() - 1;
        if v < s[0] {
            return t[0];
        }
        if v > s[last] {
            return t[last];
        }
        // first knot >= v
        let hi = s.partition_point(|&k| k < v);
        if s[hi] == v {
            // v sits on a (possibly repeated) knot value: use the middle of
            // the matching target range
            let end = s.partition_point(|&k| k <= v) - 1;
            return 0.5 * (t[hi] + t[end]);
        }
        let lo = hi - 1;
        let frac = (v - s[lo]) / (s[hi] - s[lo]);
        t[lo] + frac * (t[hi] - t[lo])
    }

    pub fn apply_all(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.apply(v)).collect()
    }
}

/// Fits the source-to-target quantile map. When the fitted map would not
/// reduce W1 on the fitting sample (possible only when the samples already
/// nearly coincide) the identity map on the source knots is returned.
pub fn quantile_transform(source: &[f64], target: &[f64]) -> Result<QuantileMap, HarmonizeError> {
    let map = QuantileMap::fit(source, target)?;
    let before = wasserstein_1d(source, target)?;
    let after = wasserstein_1d(&map.apply_all(source), target)?;
    if after <= before {
        Ok(map)
    } else {
        Ok(QuantileMap {
            target: map.source.clone(),
            source: map.source,
        })
    }
}
