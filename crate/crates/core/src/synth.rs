//! Seeded synthetic tables and card libraries.
//!
//! A [`GenerativeProcess`] draws class-conditional correlated latents and
//! pushes each coordinate through its own shape (gaussian, log-normal,
//! cubic, integer, logistic), so columns are distinguishable by their
//! marginals. A [`ColumnShift`] turns a sample into a "twin" table with
//! permuted and affinely rescaled columns.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::catalog::{ColumnKind, ColumnMeta, DatasetCard, LabeledTable};
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Gaussian,
    LogNormal,
    Cubic,
    Integer,
    Logistic,
}

impl Shape {
    const ALL: [Shape; 5] = [Shape::Gaussian, Shape::LogNormal, Shape::Cubic, Shape::Integer, Shape::Logistic];

    fn apply(self, z: f64) -> f64 {
        match self {
            Shape::Gaussian => z,
            Shape::LogNormal => (0.6 * z).exp(),
            Shape::Cubic => z + 0.3 * z * z * z,
            Shape::Integer => (2.0 * z).round(),
            Shape::Logistic => 10.0 / (1.0 + (-z).exp()),
        }
    }
}

/// Standard normal draw (Box-Muller).
fn normal(rng: &mut util::Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeProcess {
    /// Class means in latent space, `classes × p`.
    pub means: Array2<f64>,
    /// Lower-triangular mixing matrix of the shared latent covariance.
    pub mixing: Array2<f64>,
    pub shapes: Vec<Shape>,
}

impl GenerativeProcess {
    pub fn new(p: usize, classes: usize, separation: f64, seed: u64) -> Self {
        let mut rng = util::rng(util::derive_seed(seed, "process"));
        let means = Array2::from_shape_fn((classes, p), |_| separation * normal(&mut rng));
        let mixing = Array2::from_shape_fn((p, p), |(i, j)| match i.cmp(&j) {
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Greater => 0.35 * normal(&mut rng),
            std::cmp::Ordering::Less => 0.0,
        });
        let offset = rng.gen_range(0..Shape::ALL.len());
        let shapes = (0..p).map(|j| Shape::ALL[(j + offset) % Shape::ALL.len()]).collect();
        Self { means, mixing, shapes }
    }

    pub fn n_features(&self) -> usize {
        self.shapes.len()
    }

    pub fn n_classes(&self) -> usize {
        self.means.nrows()
    }

    /// `n` rows with uniformly drawn labels.
    pub fn sample(&self, n: usize, rng: &mut util::Rng) -> (Array2<f64>, Vec<usize>) {
        let p = self.n_features();
        let mut x = Array2::zeros((n, p));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = rng.gen_range(0..self.n_classes());
            let e = Array1::from_shape_fn(p, |_| normal(rng));
            let z = self.mixing.dot(&e) + self.means.row(y);
            for j in 0..p {
                x[[i, j]] = self.shapes[j].apply(z[j]);
            }
            labels.push(y);
        }
        (x, labels)
    }
}

/// Source column `j` holds `scale[j] · x[:, perm[j]] + shift[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnShift {
    pub perm: Vec<usize>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl ColumnShift {
    /// Random permutation, scales in `[0.5, 3]`, shifts in `[-10, 10]`.
    pub fn random(p: usize, rng: &mut util::Rng) -> Self {
        let mut perm: Vec<usize> = (0..p).collect();
        perm.shuffle(rng);
        Self {
            perm,
            scale: (0..p).map(|_| rng.gen_range(0.5..3.0)).collect(),
            shift: (0..p).map(|_| rng.gen_range(-10.0..10.0)).collect(),
        }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn((x.nrows(), self.perm.len()), |(i, j)| {
            self.scale[j] * x[[i, self.perm[j]]] + self.shift[j]
        })
    }

    /// The (source column, target column) pairs this shift implies.
    pub fn true_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<(usize, usize)> = self.perm.iter().enumerate().map(|(s, &t)| (s, t)).collect();
        pairs.sort_by_key(|&(s, t)| (t, s));
        pairs
    }
}

/// All-continuous table with the given names.
pub fn make_table(features: Array2<f64>, labels: Vec<usize>, names: &[String], n_classes: usize, card_ref: &str) -> LabeledTable {
    LabeledTable {
        missing: Array2::from_elem(features.dim(), false),
        columns: names
            .iter()
            .map(|n| ColumnMeta {
                name: n.clone(),
                kind: ColumnKind::Continuous,
                categories: Vec::new(),
            })
            .collect(),
        features,
        labels,
        n_classes,
        card_ref: card_ref.to_string(),
        dropped_rows: 0,
    }
}

pub fn feature_names(prefix: &str, p: usize) -> Vec<String> {
    (0..p).map(|j| format!("{prefix}{j}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSizes {
    pub target_labeled: usize,
    pub target_holdout: usize,
    pub source: usize,
    pub features: usize,
    pub classes: usize,
}

impl Default for TaskSizes {
    fn default() -> Self {
        Self {
            target_labeled: 60,
            target_holdout: 200,
            source: 2000,
            features: 8,
            classes: 3,
        }
    }
}

/// A small labeled target, its held-out rows, and a large source drawn
/// from the same process with permuted, affinely shifted columns.
#[derive(Debug, Clone)]
pub struct ShiftedDomainTask {
    pub process: GenerativeProcess,
    pub target: LabeledTable,
    pub holdout: LabeledTable,
    pub source: LabeledTable,
    pub shift: ColumnShift,
}

pub fn shifted_domain_task(seed: u64, sizes: TaskSizes, separation: f64) -> ShiftedDomainTask {
    let process = GenerativeProcess::new(sizes.features, sizes.classes, separation, seed);
    let mut rng = util::rng(util::derive_seed(seed, "task"));
    let names = feature_names("x", sizes.features);
    let (xt, yt) = process.sample(sizes.target_labeled, &mut rng);
    let (xh, yh) = process.sample(sizes.target_holdout, &mut rng);
    let (xs, ys) = process.sample(sizes.source, &mut rng);
    let shift = ColumnShift::random(sizes.features, &mut rng);
    let source_names: Vec<String> = shift.perm.iter().map(|&t| names[t].clone()).collect();
    ShiftedDomainTask {
        target: make_table(xt, yt, &names, sizes.classes, "target"),
        holdout: make_table(xh, yh, &names, sizes.classes, "target"),
        source: make_table(shift.apply(&xs), ys, &source_names, sizes.classes, "source"),
        process,
        shift,
    }
}

/// Writes `features` and `labels` as CSV (header: names then `label`) and a
/// card next to it. Returns the card path.
pub fn write_dataset(dir: &Path, card: &DatasetCard, table: &LabeledTable) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let data_name = format!("{}.csv", card.id);
    let mut w = csv::Writer::from_path(dir.join(&data_name))?;
    let mut header: Vec<&str> = card.feature_names.iter().map(String::as_str).collect();
    header.push(&card.target_column);
    w.write_record(&header)?;
    for (row, &y) in table.features.axis_iter(Axis(0)).zip(&table.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(card.class_labels[y].clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    let card_path = dir.join(format!("{}.card", card.id));
    fs::write(&card_path, card.to_card_text(&data_name))?;
    Ok(card_path)
}

/// Card for a synthetic table. Feature names and labels come from the table.
pub fn card_for(id: &str, name: &str, description: &str, table: &LabeledTable, class_labels: &[String]) -> DatasetCard {
    DatasetCard {
        id: id.to_string(),
        name: name.to_string(),
        description: description.to_string(),
        feature_names: table.column_names().iter().map(|s| s.to_string()).collect(),
        feature_descriptions: Default::default(),
        target_column: "label".to_string(),
        class_labels: class_labels.to_vec(),
        categorical: Vec::new(),
        numeric: Vec::new(),
        source_path: PathBuf::new(),
    }
}

const TOPICS: &[(&str, &str, &[&str])] = &[
    ("credit default", "loan applicants credit history repayment default risk bank", &["repaid", "defaulted"]),
    ("wine quality", "chemical analysis of red wine acidity sugar alcohol quality grade", &["low", "medium", "high"]),
    ("network intrusion", "packet flow statistics traffic anomaly intrusion detection", &["normal", "attack"]),
    ("crop yield", "soil moisture rainfall fertilizer temperature harvest yield class", &["poor", "good"]),
    ("churn", "telecom customer tenure monthly charges contract churn", &["stayed", "left"]),
    ("galaxy morphology", "photometric magnitudes redshift galaxy shape classification", &["spiral", "elliptical", "irregular"]),
    ("machine failure", "sensor vibration torque rotational speed tool wear failure", &["ok", "failure"]),
    ("air quality", "pollutant concentrations ozone particulate weather air quality index", &["good", "moderate", "unhealthy"]),
    ("student outcome", "enrollment grades attendance tuition student dropout graduation", &["dropout", "graduate"]),
    ("fraud", "card transaction amount merchant time fraud detection", &["genuine", "fraud"]),
    ("energy use", "building insulation glazing orientation heating cooling load", &["efficient", "wasteful"]),
    ("song genre", "audio tempo loudness timbre spectral features music genre", &["rock", "jazz", "pop"]),
    ("traffic accidents", "road surface lighting speed limit accident severity", &["slight", "serious"]),
    ("seed variety", "kernel area perimeter compactness length width wheat seed variety", &["kama", "rosa", "canadian"]),
    ("insurance claims", "policy holder age vehicle premium claim filed", &["no claim", "claim"]),
    ("bird species", "wing span beak length body mass plumage species", &["sparrow", "finch"]),
    ("power outage", "grid load weather storm outage duration category", &["short", "long"]),
    ("hotel booking", "lead time stay nights deposit booking cancellation", &["kept", "cancelled"]),
    ("water potability", "ph hardness solids chloramines sulfate water potable", &["unsafe", "safe"]),
];

/// A target card, its planted twin and `distractors` unrelated cards, each
/// with CSV data, written to `dir`. Returns (target card path, twin id).
///
/// The twin is drawn from the target's generative process with shifted
/// columns and shares its topic; distractors use other topics and their own
/// processes.
pub fn twin_library(dir: &Path, seed: u64, distractors: usize, rows: usize) -> io::Result<(PathBuf, String)> {
    let mut rng = util::rng(util::derive_seed(seed, "library"));
    let p = 6;
    let process = GenerativeProcess::new(p, 2, 1.2, seed);
    let names: Vec<String> = ["tumor radius", "texture score", "perimeter mm", "smoothness", "concavity", "symmetry"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let labels: Vec<String> = vec!["benign".into(), "malignant".into()];
    let description = "clinical breast tumor cell nuclei measurements for malignant versus benign diagnosis";

    let target_dir = dir.join("target");
    let (xt, yt) = process.sample(rows.min(120), &mut rng);
    let target = make_table(xt, yt, &names, 2, "target-tumor");
    let target_card = card_for("target-tumor", "tumor diagnosis (small clinic)", description, &target, &labels);
    let target_path = write_dataset(&target_dir, &target_card, &target)?;

    let lib = dir.join("library");
    let shift = ColumnShift::random(p, &mut rng);
    let (xs, ys) = process.sample(rows, &mut rng);
    let twin_names: Vec<String> = shift.perm.iter().map(|&t| names[t].clone()).collect();
    let twin = make_table(shift.apply(&xs), ys, &twin_names, 2, "twin-tumor");
    let twin_card = card_for(
        "twin-tumor",
        "breast tumor diagnosis registry",
        "registry of breast tumor cell nuclei measurements with benign and malignant diagnosis labels",
        &twin,
        &labels,
    );
    write_dataset(&lib, &twin_card, &twin)?;

    for d in 0..distractors {
        let (topic, desc, classes) = TOPICS[d % TOPICS.len()];
        let classes: Vec<String> = classes.iter().map(|s| s.to_string()).collect();
        let dp = 4 + d % 5;
        let proc_d = GenerativeProcess::new(dp, classes.len(), 1.0, seed.wrapping_add(1000 + d as u64));
        let (x, y) = proc_d.sample(rows, &mut rng);
        let words: Vec<&str> = desc.split(' ').collect();
        let fnames: Vec<String> = (0..dp).map(|j| format!("{} {}", words[j % words.len()], j)).collect();
        let t = make_table(x, y, &fnames, classes.len(), "distractor");
        let id = format!("{}-{d}", topic.replace(' ', "-"));
        let card = card_for(&id, topic, desc, &t, &classes);
        write_dataset(&lib, &card, &t)?;
    }
    Ok((target_path, twin_card.id))
}
