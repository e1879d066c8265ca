//! Wasserstein distances: exact in one dimension, entropic (log-domain
//! Sinkhorn) for pooled multivariate samples.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use super::HarmonizeError;
use crate::util;

/// Scalings beyond `exp(±this)` are folded into the log potentials.
const ABSORB_LOG_THRESHOLD: f64 = 30.0;

/// Exact W1 between two empirical distributions on the line.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64, HarmonizeError> {
    if a.is_empty() || b.is_empty() {
        return Err(HarmonizeError::EmptySample);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(HarmonizeError::NonFiniteInput);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    if n == m {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64);
    }
    // Walk the merged quantile breakpoints i/n and j/m; between consecutive
    // breakpoints both quantile functions are constant.
    let (mut i, mut j) = (0usize, 0usize);
    let mut level = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        // compare (i+1)/n with (j+1)/m exactly in integers
        let lhs = (i + 1) * m;
        let rhs = (j + 1) * n;
        let next = if lhs <= rhs {
            (i + 1) as f64 / n as f64
        } else {
            (j + 1) as f64 / m as f64
        };
        total += (next - level) * (a[i] - b[j]).abs();
        level = next;
        if lhs <= rhs {
            i += 1;
        }
        if rhs <= lhs {
            j += 1;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            max_iter: 5_000,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    /// `<coupling, cost>`.
    pub cost: f64,
    pub epsilon: f64,
    pub iterations_used: usize,
    /// L1 row-marginal violation after each iteration (columns are exact
    /// after every column update).
    pub violation_history: Vec<f64>,
}

impl TransportPlan {
    /// Largest absolute deviation of row or column sums from the marginals.
    pub fn max_marginal_violation(&self) -> f64 {
        let rows = self
            .coupling
            .sum_axis(Axis(1))
            .iter()
            .zip(&self.row_marginal)
            .map(|(s, a)| (s - a).abs())
            .fold(0.0, f64::max);
        let cols = self
            .coupling
            .sum_axis(Axis(0))
            .iter()
            .zip(&self.col_marginal)
            .map(|(s, b)| (s - b).abs())
            .fold(0.0, f64::max);
        rows.max(cols)
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_marginal(m: &[f64], len: usize) -> Result<(), HarmonizeError> {
    if m.len() != len || m.iter().any(|v| !v.is_finite() || *v < 0.0) || (m.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(HarmonizeError::InvalidMarginal);
    }
    Ok(())
}

/// Stabilized entropic optimal transport.
///
/// Potentials `f`, `g` are updated alternately; the plan is
/// `P_ij = exp((f_i + g_j - C_ij) / eps)`. Iteration stops when the L1 row
/// violation drops below `tol` (columns are exact after each update) or
/// after `max_iter` sweeps. A warm start from a coarser regularization
/// (halving from the cost scale down to `eps`) is used to reach small
/// `eps` in few sweeps; only the sweeps at the requested `eps` are
/// reported in `iterations_used`.
pub fn sinkhorn(
    cost: ArrayView2<'_, f64>,
    row_marginal: &[f64],
    col_marginal: &[f64],
    params: SinkhornParams,
) -> Result<TransportPlan, HarmonizeError> {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Err(HarmonizeError::EmptySample);
    }
    if cost.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(HarmonizeError::NonFiniteInput);
    }
    if !(params.epsilon > 0.0 && params.epsilon.is_finite()) {
        return Err(HarmonizeError::InvalidParameter("epsilon must be positive".into()));
    }
    check_marginal(row_marginal, n)?;
    check_marginal(col_marginal, m)?;

    let log_a: Vec<f64> = row_marginal.iter().map(|a| a.ln()).collect();
    let log_b: Vec<f64> = col_marginal.iter().map(|b| b.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];

    let sweep = |eps: f64, f: &mut Vec<f64>, g: &mut Vec<f64>| {
        for i in 0..n {
            f[i] = if log_a[i] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                eps * log_a[i] - eps * log_sum_exp((0..m).map(|j| (g[j] - cost[[i, j]]) / eps))
            };
        }
        for j in 0..m {
            g[j] = if log_b[j] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                eps * log_b[j] - eps * log_sum_exp((0..n).map(|i| (f[i] - cost[[i, j]]) / eps))
            };
        }
    };
    let finite = |f: &[f64], g: &[f64]| f.iter().chain(g).all(|v| !v.is_nan() && *v != f64::INFINITY);

    // coarse-to-fine warm start
    let scale = cost.iter().fold(0.0f64, |acc, &c| acc.max(c));
    let mut eps = scale.max(params.epsilon);
    while eps > params.epsilon {
        for _ in 0..10 {
            sweep(eps, &mut f, &mut g);
        }
        if !finite(&f, &g) {
            return Err(HarmonizeError::NumericalUnderflow { epsilon: eps });
        }
        eps = (eps * 0.5).max(params.epsilon);
    }

    // Scaling iterations on the absorbed kernel K = exp((f + g - C) / eps):
    // the plan is diag(u) K diag(v). Large scalings are absorbed back into
    // the potentials, and a log-domain sweep repairs any underflowed row.
    let eps = params.epsilon;
    let kernel = |f: &[f64], g: &[f64]| {
        Array2::from_shape_fn((n, m), |(i, j)| {
            if f[i] == f64::NEG_INFINITY || g[j] == f64::NEG_INFINITY {
                0.0
            } else {
                ((f[i] + g[j] - cost[[i, j]]) / eps).exp()
            }
        })
    };
    let absorb = |f: &mut [f64], g: &mut [f64], u: &mut [f64], v: &mut [f64]| {
        for (fi, ui) in f.iter_mut().zip(u.iter_mut()) {
            if *ui > 0.0 {
                *fi += eps * ui.ln();
            }
            *ui = 1.0;
        }
        for (gj, vj) in g.iter_mut().zip(v.iter_mut()) {
            if *vj > 0.0 {
                *gj += eps * vj.ln();
            }
            *vj = 1.0;
        }
    };
    let mut k = kernel(&f, &g);
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv = k.sum_axis(Axis(1));
    let mut history = Vec::new();
    let mut iterations_used = 0;
    for _ in 0..params.max_iter {
        if (0..n).any(|i| row_marginal[i] > 0.0 && !(kv[i] > 0.0 && kv[i].is_finite())) {
            absorb(&mut f, &mut g, &mut u, &mut v);
            sweep(eps, &mut f, &mut g);
            if !finite(&f, &g) {
                return Err(HarmonizeError::NumericalUnderflow { epsilon: eps });
            }
            k = kernel(&f, &g);
            kv = k.sum_axis(Axis(1));
        }
        for i in 0..n {
            u[i] = if row_marginal[i] > 0.0 { row_marginal[i] / kv[i] } else { 0.0 };
        }
        let ktu = k.t().dot(&ArrayView1::from(&u));
        for j in 0..m {
            v[j] = if col_marginal[j] > 0.0 { col_marginal[j] / ktu[j] } else { 0.0 };
        }
        iterations_used += 1;
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(HarmonizeError::NumericalUnderflow { epsilon: eps });
        }
        kv = k.dot(&ArrayView1::from(&v));
        let violation: f64 = (0..n).map(|i| (u[i] * kv[i] - row_marginal[i]).abs()).sum();
        history.push(violation);
        if violation < params.tol {
            break;
        }
        if u.iter().chain(&v).any(|&x| x > 0.0 && x.ln().abs() > ABSORB_LOG_THRESHOLD) {
            absorb(&mut f, &mut g, &mut u, &mut v);
            k = kernel(&f, &g);
            kv = k.sum_axis(Axis(1));
        }
    }
    absorb(&mut f, &mut g, &mut u, &mut v);

    let coupling = Array2::from_shape_fn((n, m), |(i, j)| {
        if f[i] == f64::NEG_INFINITY || g[j] == f64::NEG_INFINITY {
            0.0
        } else {
            ((f[i] + g[j] - cost[[i, j]]) / eps).exp()
        }
    });
    if coupling.iter().any(|v| !v.is_finite()) {
        return Err(HarmonizeError::NumericalUnderflow { epsilon: eps });
    }
    let total_cost = coupling.iter().zip(cost.iter()).map(|(p, c)| p * c).sum();
    Ok(TransportPlan {
        coupling,
        row_marginal: row_marginal.to_vec(),
        col_marginal: col_marginal.to_vec(),
        cost: total_cost,
        epsilon: eps,
        iterations_used,
        violation_history: history,
    })
}

/// Pairwise Euclidean distances between the rows of two samples.
pub fn euclidean_cost(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        a.row(i)
            .iter()
            .zip(b.row(j).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    })
}

/// Entropic W1 between two point clouds under Euclidean ground cost and
/// uniform weights. Each side is subsampled (seeded) to at most `cap` rows.
pub fn pooled_wasserstein(
    source: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    params: SinkhornParams,
    cap: usize,
    seed: u64,
) -> Result<f64, HarmonizeError> {
    if source.ncols() != target.ncols() {
        return Err(HarmonizeError::SizeMismatch {
            source_shape: source.dim(),
            target_shape: target.dim(),
        });
    }
    if source.nrows() == 0 || target.nrows() == 0 {
        return Err(HarmonizeError::EmptySample);
    }
    let mut rng = util::rng(seed);
    let is = util::sample_indices(source.nrows(), cap, &mut rng);
    let it = util::sample_indices(target.nrows(), cap, &mut rng);
    let s = source.select(Axis(0), &is);
    let t = target.select(Axis(0), &it);
    let cost = euclidean_cost(s.view(), t.view());
    let a = vec![1.0 / s.nrows() as f64; s.nrows()];
    let b = vec![1.0 / t.nrows() as f64; t.nrows()];
    Ok(sinkhorn(cost.view(), &a, &b, params)?.cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn w1_examples() {
        assert_eq!(wasserstein_1d(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&[0.0], &[3.0]).unwrap(), 3.0);
        assert_eq!(wasserstein_1d(&[0.0, 1.0], &[1.0, 2.0]).unwrap(), 1.0);
        // {0, 1} vs {0}: half the mass moves by 1
        assert_eq!(wasserstein_1d(&[0.0, 1.0], &[0.0]).unwrap(), 0.5);
        assert!(matches!(wasserstein_1d(&[], &[1.0]), Err(HarmonizeError::EmptySample)));
    }

    #[test]
    fn sinkhorn_single_cell() {
        let plan = sinkhorn(array![[2.5]].view(), &[1.0], &[1.0], SinkhornParams::default()).unwrap();
        assert!((plan.coupling[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((plan.cost - 2.5).abs() < 1e-12);
    }

    #[test]
    fn sinkhorn_two_by_two_prefers_diagonal() {
        let params = SinkhornParams {
            epsilon: 0.01,
            ..Default::default()
        };
        let plan = sinkhorn(array![[0.0, 1.0], [1.0, 0.0]].view(), &[0.5, 0.5], &[0.5, 0.5], params).unwrap();
        // couplings are [[t, .5-t], [.5-t, t]] with cost 1 - 2t; optimum t = .5, cost 0
        assert!(plan.cost <= 0.05);
        assert!(plan.coupling[[0, 0]] + plan.coupling[[1, 1]] >= 0.95);
        assert!(plan.max_marginal_violation() < 1e-6);
    }

    #[test]
    fn sinkhorn_rejects_bad_marginals() {
        let c = array![[0.0, 1.0]];
        assert!(matches!(
            sinkhorn(c.view(), &[0.9], &[0.5, 0.5], SinkhornParams::default()),
            Err(HarmonizeError::InvalidMarginal)
        ));
    }

    #[test]
    fn sinkhorn_handles_zero_mass_entries() {
        let c = array![[0.0, 1.0], [1.0, 0.0]];
        let plan = sinkhorn(c.view(), &[1.0, 0.0], &[0.5, 0.5], SinkhornParams::default()).unwrap();
        assert_eq!(plan.coupling[[1, 0]], 0.0);
        assert!((plan.cost - 0.5).abs() < 1e-6);
    }

    #[test]
    fn pooled_identical_sets_near_zero() {
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 1.0]];
        let loose = pooled_wasserstein(x.view(), x.view(), SinkhornParams { epsilon: 0.05, ..Default::default() }, 512, 0).unwrap();
        let tight = pooled_wasserstein(x.view(), x.view(), SinkhornParams { epsilon: 0.005, ..Default::default() }, 512, 0).unwrap();
        assert!(tight <= loose + 1e-12);
        assert!(tight < 0.005);
    }

    #[test]
    fn pooled_matches_translation() {
        let mut rng = crate::util::rng(11);
        use rand::Rng;
        let p = 3;
        let c = 0.7;
        let x = Array2::from_shape_fn((40, p), |_| rng.gen_range(-1.0..1.0));
        let y = x.mapv(|v| v + c);
        let w = pooled_wasserstein(x.view(), y.view(), SinkhornParams { epsilon: 0.005, ..Default::default() }, 512, 0).unwrap();
        assert!((w - c * (p as f64).sqrt()).abs() < 2e-2, "w = {w}");
    }

    #[test]
    fn pooled_agrees_with_exact_1d() {
        let mut rng = crate::util::rng(5);
        use rand::Rng;
        let a: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..2.0)).collect();
        let b: Vec<f64> = (0..30).map(|_| rng.gen_range(0.5..3.0)).collect();
        let xa = Array2::from_shape_vec((30, 1), a.clone()).unwrap();
        let xb = Array2::from_shape_vec((30, 1), b.clone()).unwrap();
        let w = pooled_wasserstein(xa.view(), xb.view(), SinkhornParams { epsilon: 0.005, ..Default::default() }, 512, 0).unwrap();
        let exact = wasserstein_1d(&a, &b).unwrap();
        assert!((w - exact).abs() < 2e-2, "{w} vs {exact}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn w1_translation_covariance(a in proptest::collection::vec(-1000i32..1000, 1..30), b in proptest::collection::vec(-1000i32..1000, 1..30), c in -1000i32..1000) {
                let fa: Vec<f64> = a.iter().map(|&v| v as f64).collect();
                let fb: Vec<f64> = b.iter().map(|&v| v as f64).collect();
                let sa: Vec<f64> = fa.iter().map(|v| v + c as f64).collect();
                let sb: Vec<f64> = fb.iter().map(|v| v + c as f64).collect();
                prop_assert_eq!(wasserstein_1d(&fa, &fb).unwrap(), wasserstein_1d(&sa, &sb).unwrap());
            }

            #[test]
            fn w1_triangle(a in proptest::collection::vec(-10.0f64..10.0, 1..20), b in proptest::collection::vec(-10.0f64..10.0, 1..20), c in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
                let ab = wasserstein_1d(&a, &b).unwrap();
                let bc = wasserstein_1d(&b, &c).unwrap();
                let ac = wasserstein_1d(&a, &c).unwrap();
                prop_assert!(ac <= ab + bc + 1e-9);
                prop_assert!((ab - wasserstein_1d(&b, &a).unwrap()).abs() < 1e-12);
            }

            #[test]
            fn sinkhorn_violation_non_increasing(vals in proptest::collection::vec(0.0f64..1.0, 12), w in proptest::collection::vec(0.1f64..1.0, 7)) {
                let cost = Array2::from_shape_vec((3, 4), vals).unwrap();
                let sa: f64 = w[..3].iter().sum();
                let sb: f64 = w[3..].iter().sum();
                let a: Vec<f64> = w[..3].iter().map(|v| v / sa).collect();
                let mut b: Vec<f64> = w[3..].iter().map(|v| v / sb).collect();
                let fix = 1.0 - b.iter().sum::<f64>();
                b[0] += fix;
                let plan = sinkhorn(cost.view(), &a, &b, SinkhornParams { epsilon: 0.05, max_iter: 200, tol: 1e-12 }).unwrap();
                for w in plan.violation_history.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-15);
                }
                prop_assert!(plan.coupling.iter().all(|&v| v >= 0.0));
                let frob: f64 = plan.coupling.iter().zip(cost.iter()).map(|(p, c)| p * c).sum();
                prop_assert!((frob - plan.cost).abs() <= 1e-9 * plan.cost.abs().max(1e-300));
            }
        }
    }
}
