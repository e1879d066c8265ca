//! Maximum-weight bipartite assignment.
//!
//! Small problems are solved by exhaustive enumeration of injections; larger
//! ones by the Hungarian algorithm with potentials (O(n^2 m)).

use ndarray::Array2;

/// Exhaustive search is used while the smaller side has at most this many
/// columns and the larger side at most [`EXHAUSTIVE_MAX_LARGE`].
pub const EXHAUSTIVE_MAX_SMALL: usize = 6;
pub const EXHAUSTIVE_MAX_LARGE: usize = 8;

/// Optimal assignment maximizing the summed weight. Returns `(row, col)`
/// pairs sorted by row; every row (or every column, whichever side is
/// smaller) is matched exactly once.
pub fn max_weight_assignment(weights: &Array2<f64>) -> Vec<(usize, usize)> {
    let (r, c) = weights.dim();
    if r == 0 || c == 0 {
        return Vec::new();
    }
    if r.min(c) <= EXHAUSTIVE_MAX_SMALL && r.max(c) <= EXHAUSTIVE_MAX_LARGE {
        exhaustive_assignment(weights)
    } else {
        hungarian_assignment(weights)
    }
}

pub fn assignment_weight(weights: &Array2<f64>, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| weights[[i, j]]).sum()
}

/// Enumerates every injection of the smaller side into the larger one.
/// Ties keep the lexicographically first injection.
pub fn exhaustive_assignment(weights: &Array2<f64>) -> Vec<(usize, usize)> {
    let (r, c) = weights.dim();
    let transposed = r > c;
    let w = if transposed {
        weights.t().to_owned()
    } else {
        weights.clone()
    };
    let (rows, cols) = w.dim();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut current = Vec::with_capacity(rows);
    let mut used = vec![false; cols];
    fn recurse(
        w: &Array2<f64>,
        row: usize,
        acc: f64,
        current: &mut Vec<usize>,
        used: &mut [bool],
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if row == w.nrows() {
            if best.as_ref().map_or(true, |(b, _)| acc > *b) {
                *best = Some((acc, current.clone()));
            }
            return;
        }
        for col in 0..w.ncols() {
            if used[col] {
                continue;
            }
            used[col] = true;
            current.push(col);
            recurse(w, row + 1, acc + w[[row, col]], current, used, best);
            current.pop();
            used[col] = false;
        }
    }
    recurse(&w, 0, 0.0, &mut current, &mut used, &mut best);
    let (_, cols_for_rows) = best.expect("non-empty problem has an assignment");
    let mut pairs: Vec<(usize, usize)> = cols_for_rows
        .into_iter()
        .enumerate()
        .map(|(i, j)| if transposed { (j, i) } else { (i, j) })
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Hungarian algorithm (shortest augmenting paths with potentials) on the
/// negated weights.
pub fn hungarian_assignment(weights: &Array2<f64>) -> Vec<(usize, usize)> {
    let (r, c) = weights.dim();
    let transposed = r > c;
    let view = if transposed { weights.t() } else { weights.view() };
    let (n, m) = view.dim();
    // row-major, so each row's costs are one contiguous slice
    let cost: Vec<f64> = view.iter().map(|v| -v).collect();
    // 1-based arrays; column 0 is a virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut matched_row = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![f64::INFINITY; m + 1];
    let mut used = vec![false; m + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let row = &cost[(i0 - 1) * m..i0 * m];
            let ui = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - ui - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| matched_row[j] != 0)
        .map(|j| {
            let (i, j) = (matched_row[j] - 1, j - 1);
            if transposed {
                (j, i)
            } else {
                (i, j)
            }
        })
        .collect();
    pairs.sort_unstable();
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn picks_the_obvious_permutation() {
        let w = array![[0.1, 0.9, 0.0], [0.8, 0.2, 0.1], [0.0, 0.1, 0.7]];
        let expected = vec![(0, 1), (1, 0), (2, 2)];
        assert_eq!(exhaustive_assignment(&w), expected);
        assert_eq!(hungarian_assignment(&w), expected);
    }

    #[test]
    fn rectangular_more_rows() {
        // 6 source columns onto 4 target columns
        let w = Array2::from_shape_fn((6, 4), |(i, j)| if i == j + 2 { 1.0 } else { 0.0 });
        let pairs = max_weight_assignment(&w);
        assert_eq!(pairs, vec![(2, 0), (3, 1), (4, 2), (5, 3)]);
        assert_eq!(hungarian_assignment(&w), pairs);
    }

    #[test]
    fn empty_problem() {
        assert!(max_weight_assignment(&Array2::zeros((0, 3))).is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn hungarian_matches_exhaustive(r in 1usize..6, c in 1usize..6, vals in proptest::collection::vec(-5.0f64..5.0, 36)) {
                let w = Array2::from_shape_fn((r, c), |(i, j)| vals[i * 6 + j]);
                let a = exhaustive_assignment(&w);
                let b = hungarian_assignment(&w);
                prop_assert_eq!(a.len(), r.min(c));
                prop_assert_eq!(b.len(), r.min(c));
                prop_assert!((assignment_weight(&w, &a) - assignment_weight(&w, &b)).abs() < 1e-9);
            }
        }
    }
}
