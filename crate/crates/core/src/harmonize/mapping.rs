//! Feature-mapping search and the reviewable mapping file.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};

use super::classes::{ClassMap, ClassMatch};
use super::kernel::column_scales;
use super::{max_weight_assignment, quantile_transform, wasserstein_1d, HarmonizeError, QuantileMap};
use crate::adapter::MappingHints;
use crate::catalog::{ColumnKind, LabeledTable};
use crate::embed::embed_text;
use crate::kv::{split_list, KvDocument, KvWriter};
use crate::util;

pub const NAME_EMBEDDING_DIMENSION: usize = 1024;
/// All injections are scored when there are at most this many.
pub const EXHAUSTIVE_SEARCH_LIMIT: usize = 720;
/// Skewness magnitude above which opposite signs flip the affine scale.
const SKEW_FLIP_THRESHOLD: f64 = 0.5;
/// Relative slack on bound pruning, absorbing rounding in the bounds.
const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffinityWeights {
    pub name: f64,
    pub stats: f64,
    pub hint: f64,
}

impl Default for AffinityWeights {
    fn default() -> Self {
        Self {
            name: 0.5,
            stats: 0.3,
            hint: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingSearchConfig {
    pub weights: AffinityWeights,
    pub hint_bonus: f64,
    pub affinity_floor: f64,
    /// Distance units traded per unit of mean pair affinity when ranking
    /// candidate assignments; 0 ranks by transport distance alone.
    pub affinity_tradeoff: f64,
    /// Maximum number of accepted single-swap moves when the injection
    /// space is too large to enumerate.
    pub max_variants: usize,
    /// Rows per side in the subsample used to score candidate mappings.
    pub search_rows: usize,
    pub seed: u64,
}

impl Default for MappingSearchConfig {
    fn default() -> Self {
        Self {
            weights: AffinityWeights::default(),
            hint_bonus: 1.0,
            affinity_floor: -0.25,
            affinity_tradeoff: 0.25,
            max_variants: 10,
            search_rows: 128,
            seed: 0,
        }
    }
}

/// Summary statistics of one column over its observed entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnProfile {
    pub mean: f64,
    pub std: f64,
    pub skew: f64,
    pub distinct_ratio: f64,
}

impl ColumnProfile {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: 0.0,
                std: 0.0,
                skew: 0.0,
                distinct_ratio: 0.0,
            };
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        Self {
            mean: util::mean(values),
            std: util::std_dev(values),
            skew: util::skewness(values),
            distinct_ratio: sorted.len() as f64 / values.len() as f64,
        }
    }

    /// Normalized distance in `[0, 1]`; the skew term ignores sign.
    pub fn distance(&self, other: &ColumnProfile) -> f64 {
        let spread = self.mean.abs() + other.mean.abs() + self.std + other.std;
        let mean_term = if spread > 0.0 {
            (self.mean - other.mean).abs() / spread
        } else {
            0.0
        };
        let std_term = if self.std > 0.0 && other.std > 0.0 {
            let d = (self.std.ln() - other.std.ln()).abs();
            d / (1.0 + d)
        } else if self.std == other.std {
            0.0
        } else {
            1.0
        };
        let ds = (self.skew.abs() - other.skew.abs()).abs();
        let skew_term = ds / (1.0 + ds);
        let distinct_term = (self.distinct_ratio - other.distinct_ratio).abs();
        (mean_term + std_term + skew_term + distinct_term) / 4.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub scale: f64,
    pub shift: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        scale: 1.0,
        shift: 0.0,
    };

    /// Standardizes with the source moments and rescales to the target
    /// moments. A degenerate side keeps unit scale. The scale is negated
    /// when both columns are clearly skewed in opposite directions.
    pub fn standardizing(source: &ColumnProfile, target: &ColumnProfile) -> Self {
        let mut scale = if source.std > 0.0 && target.std > 0.0 {
            target.std / source.std
        } else {
            1.0
        };
        if source.skew.abs() > SKEW_FLIP_THRESHOLD
            && target.skew.abs() > SKEW_FLIP_THRESHOLD
            && source.skew.signum() != target.skew.signum()
        {
            scale = -scale;
        }
        Self {
            scale,
            shift: target.mean - scale * source.mean,
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        self.scale * v + self.shift
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnTransform {
    /// Affine map, then an optional quantile map.
    Numeric {
        affine: Affine,
        quantile: Option<QuantileMap>,
    },
    /// Source category code `c` becomes target code `codes[c]`.
    Categorical { codes: Vec<f64> },
}

impl ColumnTransform {
    pub fn apply(&self, v: f64) -> f64 {
        match self {
            ColumnTransform::Numeric { affine, quantile } => {
                let a = affine.apply(v);
                quantile.as_ref().map_or(a, |q| q.apply(a))
            }
            ColumnTransform::Categorical { codes } => {
                let idx = if v.is_finite() && v > 0.0 {
                    (v.round() as usize).min(codes.len() - 1)
                } else {
                    0
                };
                codes[idx]
            }
        }
    }

    fn without_quantile(&self) -> ColumnTransform {
        match self {
            ColumnTransform::Numeric { affine, .. } => ColumnTransform::Numeric {
                affine: *affine,
                quantile: None,
            },
            other => other.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedColumn {
    pub source: usize,
    pub target: usize,
    pub affinity: f64,
    pub transform: ColumnTransform,
}

/// Column correspondence from a source table onto a target table.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapping {
    pub source_id: String,
    pub target_id: String,
    pub source_columns: Vec<String>,
    pub target_columns: Vec<String>,
    /// Sorted by target column.
    pub matched: Vec<MatchedColumn>,
    /// Unmatched target columns and the constant (target median) filling them.
    pub fills: Vec<(usize, f64)>,
    pub unmatched_source: Vec<usize>,
    /// Transport distance of the chosen assignment on the search subsamples.
    pub search_distance: f64,
    /// Same statistic for the identity-ordered assignment, when scored.
    pub baseline_distance: Option<f64>,
    pub candidates_evaluated: usize,
}

impl FeatureMapping {
    pub fn for_target(&self, t: usize) -> Option<&MatchedColumn> {
        self.matched.iter().find(|m| m.target == t)
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.matched.iter().map(|m| (m.source, m.target)).collect()
    }

    /// Checks the mapping's structural invariants and, when tables are
    /// given, that it fits them.
    pub fn validate(&self, tables: Option<(&LabeledTable, &LabeledTable)>) -> Result<(), HarmonizeError> {
        let bad = |msg: String| Err(HarmonizeError::InvalidMapping(msg));
        let (ps, pt) = (self.source_columns.len(), self.target_columns.len());
        let mut target_seen = vec![0usize; pt];
        let mut source_seen = vec![false; ps];
        for m in &self.matched {
            if m.source >= ps || m.target >= pt {
                return bad(format!("pair ({}, {}) out of range", m.source, m.target));
            }
            if source_seen[m.source] {
                return bad(format!("source column `{}` used twice", self.source_columns[m.source]));
            }
            source_seen[m.source] = true;
            target_seen[m.target] += 1;
            match &m.transform {
                ColumnTransform::Numeric { affine, .. } => {
                    if !(affine.scale.is_finite() && affine.scale != 0.0 && affine.shift.is_finite()) {
                        return bad(format!("affine for `{}` must be finite with nonzero scale", self.target_columns[m.target]));
                    }
                }
                ColumnTransform::Categorical { codes } => {
                    if codes.is_empty() || codes.iter().any(|c| !c.is_finite()) {
                        return bad(format!("code map for `{}` is empty or non-finite", self.target_columns[m.target]));
                    }
                }
            }
        }
        for &(t, v) in &self.fills {
            if t >= pt || !v.is_finite() {
                return bad(format!("fill for target column {t} is invalid"));
            }
            target_seen[t] += 1;
        }
        if let Some(t) = target_seen.iter().position(|&c| c != 1) {
            return bad(format!("target column `{}` must be matched or filled exactly once", self.target_columns[t]));
        }
        for &s in &self.unmatched_source {
            if s >= ps || source_seen[s] {
                return bad(format!("unmatched source column {s} is invalid"));
            }
            source_seen[s] = true;
        }
        if source_seen.iter().any(|&s| !s) {
            return bad("every source column must be matched or listed as unmatched".into());
        }
        if let Some((source, target)) = tables {
            if source.column_names() != self.source_columns || target.column_names() != self.target_columns {
                return bad("column names do not match the tables".into());
            }
            for m in &self.matched {
                if let ColumnTransform::Categorical { codes } = &m.transform {
                    if codes.len() != source.columns[m.source].categories.len() {
                        return bad(format!("code map for `{}` does not cover the source categories", self.target_columns[m.target]));
                    }
                }
            }
        }
        Ok(())
    }

    /// Source rows expressed in the target's columns.
    pub fn apply(&self, source: &LabeledTable) -> Array2<f64> {
        let n = source.n_rows();
        let mut out = Array2::zeros((n, self.target_columns.len()));
        for m in &self.matched {
            let col = source.column(m.source);
            for (i, &v) in col.iter().enumerate() {
                out[[i, m.target]] = m.transform.apply(v);
            }
        }
        for &(t, v) in &self.fills {
            out.column_mut(t).fill(v);
        }
        out
    }
}

fn column_values(table: &LabeledTable, j: usize) -> Vec<f64> {
    table.column(j).to_vec()
}

fn column_profiles(table: &LabeledTable) -> Vec<ColumnProfile> {
    (0..table.n_features())
        .map(|j| {
            let observed = table.observed(j);
            if observed.is_empty() {
                ColumnProfile::of(&column_values(table, j))
            } else {
                ColumnProfile::of(&observed)
            }
        })
        .collect()
}

fn median_fill(table: &LabeledTable, j: usize) -> f64 {
    let observed = table.observed(j);
    util::median(&observed)
        .or_else(|| util::median(&column_values(table, j)))
        .unwrap_or(0.0)
}

/// Source codes keep a target code with the same category string; the
/// rest pair by frequency rank; surplus source codes take the most
/// frequent target code.
fn category_code_map(source: &LabeledTable, s: usize, target: &LabeledTable, t: usize) -> Vec<f64> {
    let s_cats = &source.columns[s].categories;
    let t_cats = &target.columns[t].categories;
    let counts = |table: &LabeledTable, j: usize, k: usize| {
        let mut c = vec![0usize; k];
        for &v in table.column(j) {
            let idx = v.round() as usize;
            if idx < k {
                c[idx] += 1;
            }
        }
        c
    };
    let sc = counts(source, s, s_cats.len());
    let tc = counts(target, t, t_cats.len());
    let by_freq = |c: &[usize], pool: Vec<usize>| {
        let mut v = pool;
        v.sort_by(|&a, &b| c[b].cmp(&c[a]).then(a.cmp(&b)));
        v
    };
    let mut codes: Vec<Option<usize>> = vec![None; s_cats.len()];
    let mut t_used = vec![false; t_cats.len()];
    for (i, name) in s_cats.iter().enumerate() {
        if let Some(k) = t_cats.iter().position(|c| c == name) {
            if !t_used[k] {
                codes[i] = Some(k);
                t_used[k] = true;
            }
        }
    }
    let free_s = by_freq(&sc, (0..s_cats.len()).filter(|&i| codes[i].is_none()).collect());
    let free_t = by_freq(&tc, (0..t_cats.len()).filter(|&k| !t_used[k]).collect());
    for (&i, &k) in free_s.iter().zip(&free_t) {
        codes[i] = Some(k);
    }
    let most_frequent = by_freq(&tc, (0..t_cats.len()).collect()).first().copied().unwrap_or(0);
    codes
        .into_iter()
        .map(|c| c.unwrap_or(most_frequent) as f64)
        .collect()
}

fn hinted(hints: &MappingHints, source: &str, target: &str) -> bool {
    hints.pairs.iter().any(|h| h.source == source && h.target == target)
}

/// Pairwise affinity between source columns (rows) and target columns:
/// weighted name similarity, negated profile distance and hint bonus.
pub fn column_affinity(
    source: &LabeledTable,
    target: &LabeledTable,
    hints: &MappingHints,
    config: &MappingSearchConfig,
) -> Array2<f64> {
    affinity_matrix(source, target, &column_profiles(source), &column_profiles(target), hints, config)
}

fn affinity_matrix(
    source: &LabeledTable,
    target: &LabeledTable,
    source_profiles: &[ColumnProfile],
    target_profiles: &[ColumnProfile],
    hints: &MappingHints,
    config: &MappingSearchConfig,
) -> Array2<f64> {
    let embed = |name: &str| embed_text(name, NAME_EMBEDDING_DIMENSION);
    let s_names: Vec<_> = source.columns.iter().map(|c| embed(&c.name)).collect();
    let t_names: Vec<_> = target.columns.iter().map(|c| embed(&c.name)).collect();
    let w = config.weights;
    Array2::from_shape_fn((source.n_features(), target.n_features()), |(s, t)| {
        let name = s_names[s].cosine(&t_names[t]);
        let stats = -source_profiles[s].distance(&target_profiles[t]);
        let hint = if hinted(hints, &source.columns[s].name, &target.columns[t].name) {
            config.hint_bonus
        } else {
            0.0
        };
        w.name * name + w.stats * stats + w.hint * hint
    })
}

/// Precomputed pieces shared by every candidate evaluation.
struct SearchContext {
    source_rows: Array2<f64>,
    /// Target subsample divided by `scales`.
    target_rows: Array2<f64>,
    scales: Vec<f64>,
    transforms: Vec<Vec<ColumnTransform>>,
    fills: Vec<f64>,
    /// W1 between transformed source column `s` and target column `t`,
    /// both scaled, indexed `[s][t]`.
    pair_w1: Vec<Vec<f64>>,
    /// W1 between the scaled fill value of target column `t` and the column.
    fill_w1: Vec<f64>,
}

impl SearchContext {
    fn new(
        source: &LabeledTable,
        target: &LabeledTable,
        source_profiles: &[ColumnProfile],
        target_profiles: &[ColumnProfile],
        config: &MappingSearchConfig,
    ) -> Result<Self, HarmonizeError> {
        let m = source.n_rows().min(target.n_rows()).min(config.search_rows.max(1));
        let mut rng = util::rng(util::derive_seed(config.seed, "mapping-search"));
        let is = util::sample_indices(source.n_rows(), m, &mut rng);
        let it = util::sample_indices(target.n_rows(), m, &mut rng);
        let source_rows = source.features.select(Axis(0), &is);
        let mut target_rows = target.features.select(Axis(0), &it);
        let scales = column_scales(&[target_rows.view()]);
        for (mut col, &sc) in target_rows.axis_iter_mut(Axis(1)).zip(&scales) {
            col.mapv_inplace(|v| v / sc);
        }
        let transforms: Vec<Vec<ColumnTransform>> = (0..source.n_features())
            .map(|s| {
                (0..target.n_features())
                    .map(|t| search_transform(source, s, target, t, &source_profiles[s], &target_profiles[t]))
                    .collect()
            })
            .collect();
        let fills: Vec<f64> = (0..target.n_features()).map(|t| median_fill(target, t)).collect();
        let target_cols: Vec<Vec<f64>> = target_rows.axis_iter(Axis(1)).map(|c| c.to_vec()).collect();
        let pair_w1 = transforms
            .iter()
            .enumerate()
            .map(|(s, row)| {
                row.iter()
                    .enumerate()
                    .map(|(t, tr)| {
                        let mapped: Vec<f64> = source_rows.column(s).iter().map(|&v| tr.apply(v) / scales[t]).collect();
                        wasserstein_1d(&mapped, &target_cols[t])
                    })
                    .collect::<Result<Vec<f64>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let fill_w1 = target_cols
            .iter()
            .enumerate()
            .map(|(t, col)| wasserstein_1d(&[fills[t] / scales[t]], col))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            source_rows,
            target_rows,
            scales,
            transforms,
            fills,
            pair_w1,
            fill_w1,
        })
    }

    /// A lower bound on [`SearchContext::evaluate`]: the Euclidean ground
    /// cost dominates every coordinate gap and `1/sqrt(p)` times their sum,
    /// so the W1 of the joint sample is at least the largest per-column W1
    /// and at least their sum over `sqrt(p)`.
    fn lower_bound(&self, pairs: &[(usize, usize)]) -> f64 {
        let mut per_column = self.fill_w1.clone();
        for &(s, t) in pairs {
            per_column[t] = self.pair_w1[s][t];
        }
        let max = per_column.iter().copied().fold(0.0, f64::max);
        let sum: f64 = per_column.iter().sum();
        max.max(sum / (per_column.len() as f64).sqrt())
    }

    /// Mean Euclidean cost of the optimal one-to-one matching between the
    /// mapped source subsample and the target subsample, in target-scaled
    /// units: the exact W1 between the two empirical distributions.
    fn evaluate(&self, pairs: &[(usize, usize)]) -> Result<f64, HarmonizeError> {
        let m = self.source_rows.nrows();
        let mut mapped = Array2::zeros((m, self.fills.len()));
        for (t, &v) in self.fills.iter().enumerate() {
            mapped.column_mut(t).fill(v / self.scales[t]);
        }
        for &(s, t) in pairs {
            let tr = &self.transforms[s][t];
            for i in 0..m {
                mapped[[i, t]] = tr.apply(self.source_rows[[i, s]]) / self.scales[t];
            }
        }
        if mapped.iter().any(|v| !v.is_finite()) {
            return Err(HarmonizeError::NonFiniteInput);
        }
        let neg_cost = Array2::from_shape_fn((m, m), |(i, j)| {
            -mapped
                .row(i)
                .iter()
                .zip(self.target_rows.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        });
        let total: f64 = max_weight_assignment(&neg_cost).iter().map(|&(i, j)| -neg_cost[[i, j]]).sum();
        Ok(total / m as f64)
    }
}

fn search_transform(
    source: &LabeledTable,
    s: usize,
    target: &LabeledTable,
    t: usize,
    sp: &ColumnProfile,
    tp: &ColumnProfile,
) -> ColumnTransform {
    let both_categorical = source.columns[s].kind == ColumnKind::CategoricalEncoded
        && target.columns[t].kind == ColumnKind::CategoricalEncoded;
    if both_categorical {
        ColumnTransform::Categorical {
            codes: category_code_map(source, s, target, t),
        }
    } else {
        ColumnTransform::Numeric {
            affine: Affine::standardizing(sp, tp),
            quantile: None,
        }
    }
}

/// Transport distance between the target and the source mapped through
/// `pairs` (affine or code transforms only, target medians elsewhere), on
/// the same seeded subsamples the search uses.
pub fn assignment_transport_distance(
    source: &LabeledTable,
    target: &LabeledTable,
    pairs: &[(usize, usize)],
    config: &MappingSearchConfig,
) -> Result<f64, HarmonizeError> {
    let sp = column_profiles(source);
    let tp = column_profiles(target);
    SearchContext::new(source, target, &sp, &tp, config)?.evaluate(pairs)
}

/// The quantity [`search_feature_mapping`] minimizes: transport distance of
/// `pairs` less `affinity_tradeoff` times their mean affinity.
pub fn mapping_objective(
    source: &LabeledTable,
    target: &LabeledTable,
    pairs: &[(usize, usize)],
    hints: &MappingHints,
    config: &MappingSearchConfig,
) -> Result<f64, HarmonizeError> {
    let affinity = column_affinity(source, target, hints, config);
    let total: f64 = pairs.iter().map(|&(s, t)| affinity[[s, t]]).sum();
    let k = source.n_features().min(target.n_features()).max(1);
    Ok(assignment_transport_distance(source, target, pairs, config)? - config.affinity_tradeoff * total / k as f64)
}

fn injection_count(n: usize, k: usize) -> Option<usize> {
    (0..k).try_fold(1usize, |acc, i| acc.checked_mul(n - i))
}

/// Every injection of `0..k` into `0..n`, as `(small index, large index)`.
fn injections(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, k: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(n, k, cur, used, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(n, k, &mut Vec::with_capacity(k), &mut vec![false; n], &mut out);
    out
}

struct Scored {
    pairs: Vec<(usize, usize)>,
    distance: f64,
    affinity: f64,
    objective: f64,
}

impl Scored {
    /// Smaller objective first, then larger total affinity, then pair order.
    fn better_than(&self, other: &Scored) -> bool {
        self.objective
            .total_cmp(&other.objective)
            .then_with(|| other.affinity.total_cmp(&self.affinity))
            .then_with(|| self.pairs.cmp(&other.pairs))
            .is_lt()
    }
}

fn normalized(mut pairs: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    pairs.sort_unstable_by_key(|&(s, t)| (t, s));
    pairs
}

/// Chooses a column correspondence minimizing the transport distance
/// between the mapped source and the target on seeded equal-size
/// subsamples, less `affinity_tradeoff` times the mean affinity of the
/// chosen pairs (see [`mapping_objective`]).
///
/// Candidates are the optimal assignment on the affinity matrix and the
/// identity-ordered assignment; when the injection space is small
/// (at most [`EXHAUSTIVE_SEARCH_LIMIT`]) every injection is considered, else
/// the better start is improved by single-swap moves. Candidates are
/// visited in order of a lower bound built from per-column W1 and skipped
/// once the bound exceeds the best objective found, which leaves the result
/// exact.
/// Continuous pairs then get a quantile map on top of their affine
/// transform.
pub fn search_feature_mapping(
    source: (&str, &LabeledTable),
    target: (&str, &LabeledTable),
    hints: &MappingHints,
    config: &MappingSearchConfig,
) -> Result<FeatureMapping, HarmonizeError> {
    let (source_id, src) = source;
    let (target_id, tgt) = target;
    if src.n_rows() == 0 || tgt.n_rows() == 0 || src.n_features() == 0 || tgt.n_features() == 0 {
        return Err(HarmonizeError::EmptySample);
    }
    if src.features.iter().chain(tgt.features.iter()).any(|v| !v.is_finite()) {
        return Err(HarmonizeError::NonFiniteInput);
    }
    let sp = column_profiles(src);
    let tp = column_profiles(tgt);
    let affinity = affinity_matrix(src, tgt, &sp, &tp, hints, config);
    if affinity.iter().all(|&a| a < config.affinity_floor) {
        return Err(HarmonizeError::NoFeasibleMapping {
            floor: config.affinity_floor,
        });
    }
    let ctx = SearchContext::new(src, tgt, &sp, &tp, config)?;
    let (ps, pt) = (src.n_features(), tgt.n_features());
    let k = ps.min(pt);
    let total_affinity = |pairs: &[(usize, usize)]| pairs.iter().map(|&(s, t)| affinity[[s, t]]).sum::<f64>();
    let prior = |pairs: &[(usize, usize)]| config.affinity_tradeoff * total_affinity(pairs) / k.max(1) as f64;
    let mut evaluated = 0usize;
    let mut score = |pairs: Vec<(usize, usize)>| -> Result<Scored, HarmonizeError> {
        evaluated += 1;
        let pairs = normalized(pairs);
        let distance = ctx.evaluate(&pairs)?;
        Ok(Scored {
            distance,
            affinity: total_affinity(&pairs),
            objective: distance - prior(&pairs),
            pairs,
        })
    };
    let bound = |pairs: &[(usize, usize)]| ctx.lower_bound(pairs) - prior(pairs);

    let assigned = score(max_weight_assignment(&affinity))?;
    let baseline = score((0..k).map(|j| (j, j)).collect())?;
    let baseline_distance = baseline.distance;
    let mut best = if baseline.better_than(&assigned) {
        baseline
    } else {
        assigned
    };

    let space = injection_count(ps.max(pt), k);
    // Candidates whose lower bound exceeds the incumbent cannot win or tie.
    let pruned = |bound: f64, bar: &Scored| bound > bar.objective + BOUND_SLACK * (1.0 + bar.objective.abs());
    if space.is_some_and(|c| c <= EXHAUSTIVE_SEARCH_LIMIT) {
        let mut candidates: Vec<(f64, Vec<(usize, usize)>)> = injections(ps.max(pt), k)
            .into_iter()
            .map(|inj| {
                let pairs: Vec<(usize, usize)> = inj
                    .into_iter()
                    .enumerate()
                    .map(|(small, large)| if ps <= pt { (small, large) } else { (large, small) })
                    .collect();
                (bound(&pairs), pairs)
            })
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (bound, pairs) in candidates {
            if pruned(bound, &best) {
                break;
            }
            let cand = score(pairs)?;
            if cand.better_than(&best) {
                best = cand;
            }
        }
    } else {
        for _ in 0..config.max_variants {
            let mut improved: Option<Scored> = None;
            for cand in neighbours(&best.pairs, ps) {
                let bar = improved.as_ref().unwrap_or(&best);
                if pruned(bound(&cand), bar) {
                    continue;
                }
                let cand = score(cand)?;
                let bar = improved.as_ref().unwrap_or(&best);
                if cand.better_than(bar) {
                    improved = Some(cand);
                }
            }
            match improved {
                Some(c) => best = c,
                None => break,
            }
        }
    }

    finish_mapping(
        (source_id, src),
        (target_id, tgt),
        &sp,
        &tp,
        &affinity,
        &ctx,
        best,
        Some(baseline_distance),
        evaluated,
    )
}

/// Single-swap neighbourhood: exchange the sources of two targets, or
/// replace one matched source with an unmatched one.
fn neighbours(pairs: &[(usize, usize)], n_source: usize) -> Vec<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for a in 0..pairs.len() {
        for b in (a + 1)..pairs.len() {
            let mut p = pairs.to_vec();
            let (sa, sb) = (p[a].0, p[b].0);
            p[a].0 = sb;
            p[b].0 = sa;
            out.push(p);
        }
    }
    let used: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    for free in (0..n_source).filter(|s| !used.contains(s)) {
        for a in 0..pairs.len() {
            let mut p = pairs.to_vec();
            p[a].0 = free;
            out.push(p);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn finish_mapping(
    source: (&str, &LabeledTable),
    target: (&str, &LabeledTable),
    sp: &[ColumnProfile],
    tp: &[ColumnProfile],
    affinity: &Array2<f64>,
    ctx: &SearchContext,
    best: Scored,
    baseline_distance: Option<f64>,
    candidates_evaluated: usize,
) -> Result<FeatureMapping, HarmonizeError> {
    let (source_id, src) = source;
    let (target_id, tgt) = target;
    let mut matched = Vec::with_capacity(best.pairs.len());
    for &(s, t) in &best.pairs {
        let transform = full_transform(src, s, tgt, t, &sp[s], &tp[t], &ctx.transforms[s][t])?;
        matched.push(MatchedColumn {
            source: s,
            target: t,
            affinity: affinity[[s, t]],
            transform,
        });
    }
    let fills = (0..tgt.n_features())
        .filter(|t| !best.pairs.iter().any(|p| p.1 == *t))
        .map(|t| (t, ctx.fills[t]))
        .collect();
    let unmatched_source = (0..src.n_features())
        .filter(|s| !best.pairs.iter().any(|p| p.0 == *s))
        .collect();
    Ok(FeatureMapping {
        source_id: source_id.to_string(),
        target_id: target_id.to_string(),
        source_columns: src.column_names().iter().map(|s| s.to_string()).collect(),
        target_columns: tgt.column_names().iter().map(|s| s.to_string()).collect(),
        matched,
        fills,
        unmatched_source,
        search_distance: best.distance,
        baseline_distance,
        candidates_evaluated,
    })
}

/// Adds a quantile map to continuous pairs. If the affine-plus-quantile
/// column ends up farther (in W1) from the target than the raw column, the
/// quantile map is refitted on the raw column with an identity affine.
fn full_transform(
    src: &LabeledTable,
    s: usize,
    tgt: &LabeledTable,
    t: usize,
    sp: &ColumnProfile,
    tp: &ColumnProfile,
    search: &ColumnTransform,
) -> Result<ColumnTransform, HarmonizeError> {
    let continuous = src.columns[s].kind == ColumnKind::Continuous && tgt.columns[t].kind == ColumnKind::Continuous;
    if !continuous {
        return Ok(search.clone());
    }
    let raw = column_values(src, s);
    let target_col = column_values(tgt, t);
    let affine = Affine::standardizing(sp, tp);
    let shifted: Vec<f64> = raw.iter().map(|&v| affine.apply(v)).collect();
    let q = quantile_transform(&shifted, &target_col)?;
    let after = wasserstein_1d(&q.apply_all(&shifted), &target_col)?;
    let before = wasserstein_1d(&raw, &target_col)?;
    if after <= before {
        return Ok(ColumnTransform::Numeric {
            affine,
            quantile: Some(q),
        });
    }
    Ok(ColumnTransform::Numeric {
        affine: Affine::IDENTITY,
        quantile: Some(quantile_transform(&raw, &target_col)?),
    })
}

impl FeatureMapping {
    /// The same correspondence with every quantile map removed.
    pub fn affine_only(&self) -> FeatureMapping {
        let mut out = self.clone();
        for m in &mut out.matched {
            m.transform = m.transform.without_quantile();
        }
        out
    }
}

fn join_f64(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

fn parse_f64_list(value: &str, key: &str) -> Result<Vec<f64>, HarmonizeError> {
    split_list(value)
        .iter()
        .map(|v| {
            v.parse::<f64>()
                .map_err(|_| HarmonizeError::InvalidMapping(format!("`{key}`: `{v}` is not a number")))
        })
        .collect()
}

/// Renders a mapping and class map as an editable key/value file.
pub fn write_mapping_file(mapping: &FeatureMapping, classes: &ClassMap) -> String {
    let mut w = KvWriter::new();
    w.comment("feature mapping: one block per target column, in target order")
        .comment("transform: numeric (affine = scale, shift; optional quantile knots), categorical (codes), fill")
        .entry("mapping.source", &mapping.source_id)
        .entry("mapping.target", &mapping.target_id)
        .entry("mapping.search_distance", mapping.search_distance)
        .entry("source.columns", mapping.source_columns.join(", "))
        .entry("target.columns", mapping.target_columns.join(", "));
    for (t, name) in mapping.target_columns.iter().enumerate() {
        w.blank().comment(name);
        let key = |suffix: &str| format!("target.{t}.{suffix}");
        if let Some(m) = mapping.for_target(t) {
            w.entry(&key("source"), &mapping.source_columns[m.source])
                .entry(&key("affinity"), m.affinity);
            match &m.transform {
                ColumnTransform::Numeric { affine, quantile } => {
                    w.entry(&key("transform"), "numeric")
                        .entry(&key("affine"), format!("{}, {}", affine.scale, affine.shift));
                    if let Some(q) = quantile {
                        w.entry(&key("quantile_source"), join_f64(q.source_knots()))
                            .entry(&key("quantile_target"), join_f64(q.target_knots()));
                    }
                }
                ColumnTransform::Categorical { codes } => {
                    w.entry(&key("transform"), "categorical")
                        .entry(&key("codes"), join_f64(codes));
                }
            }
        } else if let Some(&(_, v)) = mapping.fills.iter().find(|f| f.0 == t) {
            w.entry(&key("transform"), "fill").entry(&key("fill"), v);
        }
    }
    w.blank().comment("class map: source class index = target class index");
    w.entry("class.source_labels", classes.source_labels.join(", "))
        .entry("class.target_labels", classes.target_labels.join(", "));
    for (i, &j) in classes.map.iter().enumerate() {
        w.entry(&format!("class.{i}"), j)
            .entry(&format!("class.{i}.rule"), classes.rules[i].as_str());
    }
    w.finish()
}

/// Parses a file written by [`write_mapping_file`], possibly hand-edited.
pub fn parse_mapping_file(text: &str) -> Result<(FeatureMapping, ClassMap), HarmonizeError> {
    let doc = KvDocument::parse(text)?;
    let req = |key: &str| {
        doc.get(key)
            .ok_or_else(|| HarmonizeError::InvalidMapping(format!("missing key `{key}`")))
    };
    let source_columns = split_list(req("source.columns")?);
    let target_columns = split_list(req("target.columns")?);
    let mut matched = Vec::new();
    let mut fills = Vec::new();
    for t in 0..target_columns.len() {
        let key = |suffix: &str| format!("target.{t}.{suffix}");
        match req(&key("transform"))? {
            "fill" => {
                let v = parse_f64_list(req(&key("fill"))?, &key("fill"))?;
                if v.len() != 1 {
                    return Err(HarmonizeError::InvalidMapping(format!("`{}` needs one value", key("fill"))));
                }
                fills.push((t, v[0]));
            }
            kind => {
                let source_name = req(&key("source"))?;
                let s = source_columns
                    .iter()
                    .position(|c| c == source_name)
                    .ok_or_else(|| HarmonizeError::InvalidMapping(format!("unknown source column `{source_name}`")))?;
                let affinity = match doc.get(&key("affinity")) {
                    Some(v) => parse_f64_list(v, &key("affinity"))?.first().copied().unwrap_or(0.0),
                    None => 0.0,
                };
                let transform = match kind {
                    "numeric" => {
                        let a = parse_f64_list(req(&key("affine"))?, &key("affine"))?;
                        if a.len() != 2 {
                            return Err(HarmonizeError::InvalidMapping(format!("`{}` needs scale, shift", key("affine"))));
                        }
                        let quantile = match (doc.get(&key("quantile_source")), doc.get(&key("quantile_target"))) {
                            (Some(qs), Some(qt)) => Some(QuantileMap::from_knots(
                                parse_f64_list(qs, &key("quantile_source"))?,
                                parse_f64_list(qt, &key("quantile_target"))?,
                            )?),
                            (None, None) => None,
                            _ => {
                                return Err(HarmonizeError::InvalidMapping(format!(
                                    "target column {t} needs both quantile_source and quantile_target"
                                )))
                            }
                        };
                        ColumnTransform::Numeric {
                            affine: Affine {
                                scale: a[0],
                                shift: a[1],
                            },
                            quantile,
                        }
                    }
                    "categorical" => ColumnTransform::Categorical {
                        codes: parse_f64_list(req(&key("codes"))?, &key("codes"))?,
                    },
                    other => return Err(HarmonizeError::InvalidMapping(format!("unknown transform `{other}`"))),
                };
                matched.push(MatchedColumn {
                    source: s,
                    target: t,
                    affinity,
                    transform,
                });
            }
        }
    }
    let unmatched_source = (0..source_columns.len())
        .filter(|s| !matched.iter().any(|m| m.source == *s))
        .collect();
    let search_distance = match doc.get("mapping.search_distance") {
        Some(v) => parse_f64_list(v, "mapping.search_distance")?.first().copied().unwrap_or(0.0),
        None => 0.0,
    };
    let mapping = FeatureMapping {
        source_id: req("mapping.source")?.to_string(),
        target_id: req("mapping.target")?.to_string(),
        source_columns,
        target_columns,
        matched,
        fills,
        unmatched_source,
        search_distance,
        baseline_distance: None,
        candidates_evaluated: 0,
    };
    mapping.validate(None)?;

    let source_labels = split_list(req("class.source_labels")?);
    let target_labels = split_list(req("class.target_labels")?);
    let mut map = Vec::with_capacity(source_labels.len());
    let mut rules = Vec::with_capacity(source_labels.len());
    let mut entries: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..source_labels.len() {
        let key = format!("class.{i}");
        let j: usize = req(&key)?
            .parse()
            .map_err(|_| HarmonizeError::InvalidMapping(format!("`{key}` must be a class index")))?;
        if j >= target_labels.len() {
            return Err(HarmonizeError::InvalidMapping(format!("`{key}` points past the target classes")));
        }
        entries.insert(i, j);
        map.push(j);
        rules.push(match doc.get(&format!("class.{i}.rule")) {
            Some(r) => r.parse()?,
            None => ClassMatch::Manual,
        });
    }
    let classes = ClassMap::new(map, rules, source_labels, target_labels);
    Ok((mapping, classes))
}
