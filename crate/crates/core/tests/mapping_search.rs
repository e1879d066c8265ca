mod support;

use ndarray::Array2;
use support::fixtures::affine_clone;
use tabxfer::adapter::{AdapterKind, MappingHints};
use tabxfer::catalog::LabeledTable;
use tabxfer::harmonize::{
    assignment_transport_distance, equalize_samples, kernel_distance, mapping_objective, search_feature_mapping, Affine,
    ColumnProfile, KernelConfig, MappingSearchConfig,
};

fn config(seed: u64) -> MappingSearchConfig {
    MappingSearchConfig {
        seed,
        ..MappingSearchConfig::default()
    }
}

fn no_hints() -> MappingHints {
    MappingHints::empty(AdapterKind::Stub)
}

fn search(source: &LabeledTable, target: &LabeledTable, seed: u64) -> (Vec<(usize, usize)>, f64) {
    let m = search_feature_mapping(("src", source), ("tgt", target), &no_hints(), &config(seed)).unwrap();
    (m.pairs(), m.search_distance)
}

fn permutation_pairs(perm: &[usize]) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = perm.iter().enumerate().map(|(s, &t)| (s, t)).collect();
    pairs.sort_by_key(|&(s, t)| (t, s));
    pairs
}

/// Source mapped onto target columns through standardizing affine maps.
fn standardized(source: &LabeledTable, target: &LabeledTable, pairs: &[(usize, usize)]) -> Array2<f64> {
    let mut out = Array2::zeros((source.n_rows(), target.n_features()));
    for &(s, t) in pairs {
        let map = Affine::standardizing(
            &ColumnProfile::of(&source.observed(s)),
            &ColumnProfile::of(&target.observed(t)),
        );
        for i in 0..source.n_rows() {
            out[[i, t]] = map.apply(source.features[[i, s]]);
        }
    }
    out
}

fn gram_discrepancy(source: &LabeledTable, target: &LabeledTable, pairs: &[(usize, usize)]) -> f64 {
    let mapped = standardized(source, target, pairs);
    let (a, b) = equalize_samples(mapped.view(), target.features.view(), 512, 7);
    kernel_distance(a.view(), b.view(), &KernelConfig::median_heuristic()).unwrap()
}

#[test]
fn chosen_assignment_minimizes_the_objective_over_all_permutations() {
    for seed in 0..10u64 {
        let p = 3 + (seed as usize % 4);
        // independent draws, so no permutation reaches zero distance
        let inst = affine_clone(seed, p, 90);
        let other = affine_clone(seed + 500, p, 90);
        let (chosen, distance) = search(&other.source, &inst.target, seed);
        let objective = |pairs: &[(usize, usize)]| {
            mapping_objective(&other.source, &inst.target, pairs, &no_hints(), &config(seed)).unwrap()
        };
        let best = support::permutations(p)
            .iter()
            .map(|perm| objective(&permutation_pairs(perm)))
            .fold(f64::INFINITY, f64::min);
        let got = objective(&chosen);
        assert!((got - best).abs() <= 1e-12, "seed {seed}: chosen {got}, best {best}");
        let again = assignment_transport_distance(&other.source, &inst.target, &chosen, &config(seed)).unwrap();
        assert_eq!(again, distance);
    }
}

#[test]
fn pure_distance_search_minimizes_transport() {
    for seed in 0..5u64 {
        let inst = affine_clone(seed, 5, 90);
        let other = affine_clone(seed + 700, 5, 90);
        let cfg = MappingSearchConfig {
            affinity_tradeoff: 0.0,
            ..config(seed)
        };
        let m = search_feature_mapping(("src", &other.source), ("tgt", &inst.target), &no_hints(), &cfg).unwrap();
        let best = support::permutations(5)
            .iter()
            .map(|perm| {
                assignment_transport_distance(&other.source, &inst.target, &permutation_pairs(perm), &cfg).unwrap()
            })
            .fold(f64::INFINITY, f64::min);
        assert!((m.search_distance - best).abs() <= 1e-12, "seed {seed}");
    }
}

#[test]
fn clones_recover_the_permutation_with_minimal_gram_discrepancy() {
    for seed in 0..10u64 {
        let p = 3 + (seed as usize % 4);
        let inst = affine_clone(100 + seed, p, 90);
        let (chosen, _) = search(&inst.source, &inst.target, seed);
        assert_eq!(chosen, inst.truth, "seed {seed}");
        let at_truth = gram_discrepancy(&inst.source, &inst.target, &chosen);
        assert!(at_truth < 1e-6, "seed {seed}: {at_truth}");
        for perm in support::permutations(p) {
            let pairs = permutation_pairs(&perm);
            assert!(gram_discrepancy(&inst.source, &inst.target, &pairs) >= at_truth);
        }
    }
}

#[test]
fn larger_clones_beyond_the_search_subsample() {
    let mut hits = 0;
    for seed in 0..10u64 {
        let inst = affine_clone(200 + seed, 5, 400);
        if search(&inst.source, &inst.target, seed).0 == inst.truth {
            hits += 1;
        }
    }
    assert!(hits >= 9, "{hits}/10");
}
