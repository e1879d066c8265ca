//! Inputs built with the library's synthetic generators.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng;
use tabxfer::catalog::{load_library, DatasetCard, LabeledTable};
use tabxfer::adapter::stub_mapping_hints;
use tabxfer::harmonize::{HarmonizeSettings, MappingSearchConfig};
use tabxfer::pipeline::{harmonize_candidate, transfer_stage, TargetSplits};
use tabxfer::synth::{
    card_for, feature_names, make_table, shifted_domain_task, twin_library, ColumnShift, GenerativeProcess, TaskSizes,
};
use tabxfer::transfer::TransferConfig;
use tabxfer::util;

pub struct CloneInstance {
    pub source: LabeledTable,
    pub target: LabeledTable,
    /// (source column, target column), ordered by target column.
    pub truth: Vec<(usize, usize)>,
}

fn obfuscated_names(p: usize, rng: &mut util::Rng) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    while names.len() < p {
        let name: String = (0..6).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
        if !names.contains(&name) {
            names.push(name);
        }
    }
    names
}

/// The target's rows with columns permuted and affinely rescaled, rows
/// shuffled, and column names replaced by random strings.
pub fn affine_clone(seed: u64, p: usize, rows: usize) -> CloneInstance {
    let process = GenerativeProcess::new(p, 2, 1.0, seed);
    let mut rng = util::rng(util::derive_seed(seed, "clone"));
    let (x, y) = process.sample(rows, &mut rng);
    let shift = ColumnShift::random(p, &mut rng);
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut rng);
    let xs = shift.apply(&x).select(Axis(0), &order);
    let ys = order.iter().map(|&i| y[i]).collect();
    let names = obfuscated_names(p, &mut rng);
    CloneInstance {
        source: make_table(xs, ys, &names, 2, "clone"),
        target: make_table(x, y, &feature_names("x", p), 2, "target"),
        truth: shift.true_pairs(),
    }
}

pub struct TwinCorpus {
    pub target: DatasetCard,
    pub cards: Vec<DatasetCard>,
    pub twin: String,
}

/// A 20-card library (the twin plus 19 distractors) and its target card.
pub fn twin_corpus(seed: u64) -> TwinCorpus {
    let dir = tempfile::tempdir().unwrap();
    let (target_path, twin) = twin_library(dir.path(), seed, 19, 30).unwrap();
    let target = DatasetCard::from_file(&target_path).unwrap();
    let cards = load_library(&dir.path().join("library"))
        .unwrap()
        .into_iter()
        .map(|(_, c)| c)
        .collect();
    TwinCorpus { target, cards, twin }
}

/// A card with the given description and no data behind it.
pub fn text_card(id: &str, description: &str) -> DatasetCard {
    let table = make_table(ndarray::Array2::zeros((1, 2)), vec![0], &feature_names("f", 2), 2, id);
    card_for(id, id, description, &table, &["no".to_string(), "yes".to_string()])
}

/// Held-out accuracies on one seeded shifted-domain task.
pub struct TransferComparison {
    pub baseline: f64,
    pub harmonized: f64,
    pub raw: f64,
    pub swept_alpha: f64,
}

/// Target-only baseline, harmonized transfer and unharmonized transfer at
/// alpha 0.5, plus the alpha picked by a [0, 0.5, 1] sweep on the
/// harmonized source.
pub fn transfer_comparison(seed: u64) -> TransferComparison {
    let sizes = TaskSizes {
        features: 6,
        ..TaskSizes::default()
    };
    let task = shifted_domain_task(seed, sizes, 1.0);
    let labels: Vec<String> = (0..sizes.classes).map(|c| format!("class {c}")).collect();
    let tcard = card_for("target", "target", "small labeled sample", &task.target, &labels);
    let scard = card_for("source", "source", "large related sample", &task.source, &labels);
    let splits = TargetSplits::with_test(task.target.clone(), task.holdout.clone(), 0.2, seed).unwrap();
    let search = MappingSearchConfig {
        seed,
        ..MappingSearchConfig::default()
    };
    let settings = HarmonizeSettings {
        seed,
        ..HarmonizeSettings::default()
    };
    let hints = stub_mapping_hints(&scard, &tcard);
    let h = harmonize_candidate((&scard, &task.source), (&tcard, &splits.dev), hints, &search, &settings).unwrap();
    let config = TransferConfig {
        alpha: 0.5,
        seed,
        ..TransferConfig::default()
    };
    let harmonized = transfer_stage(&h.harmonized, &splits, &config, None).unwrap();
    let raw = transfer_stage(&task.source, &splits, &config, None).unwrap();
    let swept = transfer_stage(&h.harmonized, &splits, &config, Some(&[0.0, 0.5, 1.0])).unwrap();
    TransferComparison {
        baseline: harmonized.baseline.accuracy,
        harmonized: harmonized.transfer.accuracy,
        raw: raw.transfer.accuracy,
        swept_alpha: swept.alpha,
    }
}
