//! Independent reference computations shared by the integration and
//! acceptance tests. Only `fixtures` uses the library, to build inputs.

#![allow(dead_code)]

pub mod fixtures;

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Strictly positive weights summing to one.
pub fn random_marginal(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..len).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

pub fn random_matrix(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(lo..hi)).collect())
        .collect()
}

/// Flows on a spanning tree of the bipartite row/column graph, by peeling
/// leaves. `None` when the tree solution is infeasible (a negative flow).
fn tree_flows(edges: &[(usize, usize)], a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let n = a.len();
    let mut remaining: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut degree = vec![0usize; remaining.len()];
    for &(i, j) in edges {
        degree[i] += 1;
        degree[n + j] += 1;
    }
    let mut flow = vec![0.0; edges.len()];
    let mut done = vec![false; edges.len()];
    for _ in 0..edges.len() {
        let (e, leaf, other) = edges
            .iter()
            .enumerate()
            .filter(|(e, _)| !done[*e])
            .find_map(|(e, &(i, j))| {
                if degree[i] == 1 {
                    Some((e, i, n + j))
                } else if degree[n + j] == 1 {
                    Some((e, n + j, i))
                } else {
                    None
                }
            })?;
        flow[e] = remaining[leaf];
        remaining[other] -= flow[e];
        remaining[leaf] = 0.0;
        degree[leaf] -= 1;
        degree[other] -= 1;
        done[e] = true;
    }
    if flow.iter().any(|&x| x < -1e-12) {
        None
    } else {
        Some(flow)
    }
}

fn find(parent: &[usize], mut v: usize) -> usize {
    while parent[v] != v {
        v = parent[v];
    }
    v
}

/// Exact optimum of the transportation LP by enumerating every basic
/// solution: each vertex of the transportation polytope is the flow on a
/// spanning tree of the complete bipartite graph.
pub fn exact_transport_cost(cost: &[Vec<f64>], a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    let need = n + m - 1;
    let mut best = f64::INFINITY;

    #[allow(clippy::too_many_arguments)]
    fn rec(
        cells: &[(usize, usize)],
        start: usize,
        chosen: &mut Vec<(usize, usize)>,
        parent: &[usize],
        need: usize,
        n: usize,
        cost: &[Vec<f64>],
        a: &[f64],
        b: &[f64],
        best: &mut f64,
    ) {
        if chosen.len() == need {
            if let Some(flow) = tree_flows(chosen, a, b) {
                let total: f64 = chosen.iter().zip(&flow).map(|(&(i, j), x)| x * cost[i][j]).sum();
                *best = best.min(total);
            }
            return;
        }
        if cells.len() - start < need - chosen.len() {
            return;
        }
        for c in start..cells.len() {
            let (i, j) = cells[c];
            let (ri, rj) = (find(parent, i), find(parent, n + j));
            if ri == rj {
                continue;
            }
            let mut next = parent.to_vec();
            next[ri] = rj;
            chosen.push((i, j));
            rec(cells, c + 1, chosen, &next, need, n, cost, a, b, best);
            chosen.pop();
        }
    }

    let parent: Vec<usize> = (0..n + m).collect();
    rec(&cells, 0, &mut Vec::new(), &parent, need, n, cost, a, b, &mut best);
    best
}

/// Equal-size W1: mean absolute difference of the co-sorted samples.
pub fn co_sorted_w1(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for i in 0..a.len() {
        total += (a[i] - b[i]).abs();
    }
    total / a.len() as f64
}

/// W1 as the integral of |Qa(u) - Qb(u)| over the merged set of quantile
/// levels i/n and j/m, using exact rational levels.
pub fn merged_quantile_w1(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let mut levels: Vec<(usize, usize)> = (1..=n).map(|i| (i, n)).chain((1..=m).map(|j| (j, m))).collect();
    let cmp = |x: &(usize, usize), y: &(usize, usize)| (x.0 * y.1).cmp(&(y.0 * x.1));
    levels.sort_by(cmp);
    levels.dedup_by(|x, y| cmp(x, y) == Ordering::Equal);
    let mut total = 0.0;
    let mut prev = 0.0;
    for &(p, q) in &levels {
        let level = p as f64 / q as f64;
        // Q(u) on (prev, level] is the ceil(level * len)-th order statistic
        let ia = (p * n).div_ceil(q) - 1;
        let ib = (p * m).div_ceil(q) - 1;
        total += (level - prev) * (a[ia] - b[ib]).abs();
        prev = level;
    }
    total
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..x.len() {
        let d = x[k] - y[k];
        s += d * d;
    }
    s
}

/// Median of all pairwise Euclidean distances in the pooled sample.
pub fn pooled_median_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut d = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let h = d.len() / 2;
    if d.is_empty() {
        0.0
    } else if d.len() % 2 == 1 {
        d[h]
    } else {
        (d[h - 1] + d[h]) / 2.0
    }
}

/// Frobenius distance between the Gaussian gram matrices of `a` and `b`,
/// one kernel evaluation per term.
pub fn gram_distance_terms(a: &[Vec<f64>], b: &[Vec<f64>], gamma: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut total = 0.0;
    for i in 0..a.len() {
        for j in 0..a.len() {
            let ka = (-gamma * sq_dist(&a[i], &a[j])).exp();
            let kb = (-gamma * sq_dist(&b[i], &b[j])).exp();
            total += (ka - kb) * (ka - kb);
        }
    }
    total.sqrt()
}

/// Central difference of `f` at `x` along every coordinate.
pub fn central_differences(x: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + step;
            let up = f(&probe);
            probe[k] = x[k] - step;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Ids ordered by descending cosine to `query`, ties by ascending id.
pub fn exact_scan<'a>(entries: &'a [(String, Vec<f64>)], query: &[f64]) -> Vec<(&'a str, f64)> {
    let mut scored: Vec<(&str, f64)> = entries.iter().map(|(id, v)| (id.as_str(), cosine(v, query))).collect();
    scored.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(y.0)));
    scored
}

/// Every permutation of `0..n`.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

/// Accuracy, per-class precision/recall/F1 and macro-F1 from a confusion
/// matrix indexed `[truth][predicted]`.
pub fn confusion_scores(confusion: &[Vec<usize>]) -> (f64, f64) {
    let c = confusion.len();
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
    let mut f1 = 0.0;
    for k in 0..c {
        let tp = confusion[k][k] as f64;
        let predicted: usize = (0..c).map(|t| confusion[t][k]).sum();
        let actual: usize = confusion[k].iter().sum();
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = if actual == 0 { 0.0 } else { tp / actual as f64 };
        f1 += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    }
    let acc = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    (acc, f1 / c as f64)
}
