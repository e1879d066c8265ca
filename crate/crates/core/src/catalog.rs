//! Dataset cards, tabular ingestion, schema inference and holdout splits.
//!
//! A card is a small `key = value` text file describing a dataset (name,
//! free-text description, feature names, target column, class labels) and
//! pointing at a delimited data file. Loading a card yields a fully numeric
//! [`LabeledTable`]: categorical columns are ordinal-encoded by first
//! occurrence, numeric gaps are filled with the column median and rows
//! without a label are dropped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;

use crate::kv::{self, KvDocument, KvError, KvWriter};
use crate::util;

/// Category name used for missing cells of categorical columns.
pub const MISSING_CATEGORY: &str = "<missing>";

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    CardSyntax {
        path: PathBuf,
        #[source]
        source: KvError,
    },
    #[error("invalid card {id}: {reason}")]
    InvalidCard { id: String, reason: String },
    #[error("{path}: target column `{column}` not found in header")]
    MissingTargetColumn { path: PathBuf, column: String },
    #[error("{path}: feature column `{column}` not found in header")]
    MissingFeatureColumn { path: PathBuf, column: String },
    #[error("{path}: no data rows")]
    EmptyTable { path: PathBuf },
    #[error("{path}: unparseable cell at row {row}, column `{column}`: `{value}`")]
    UnparseableCell {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{path}: row {row} has label `{value}` which is not one of the card classes")]
    UnknownLabel {
        path: PathBuf,
        row: usize,
        value: String,
    },
    #[error("duplicate card id `{id}` ({first} and {second})")]
    DuplicateCardId {
        id: String,
        first: PathBuf,
        second: PathBuf,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("holdout fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("cannot split a table with {0} rows")]
    TooFewRows(usize),
}

/// Textual identity of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetCard {
    pub id: String,
    pub name: String,
    pub description: String,
    pub feature_names: Vec<String>,
    pub feature_descriptions: BTreeMap<String, String>,
    pub target_column: String,
    pub class_labels: Vec<String>,
    /// Features forced to categorical encoding regardless of content.
    pub categorical: Vec<String>,
    /// Features that must parse as numbers.
    pub numeric: Vec<String>,
    /// Resolved path of the delimited data file.
    pub source_path: PathBuf,
}

impl DatasetCard {
    /// Parses card text; relative `data_path` values resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path, origin: &Path) -> Result<Self, CatalogError> {
        let doc = KvDocument::parse(text).map_err(|source| CatalogError::CardSyntax {
            path: origin.to_path_buf(),
            source,
        })?;
        let id = doc.get("id").unwrap_or_default().to_string();
        let invalid = |reason: &str| CatalogError::InvalidCard {
            id: if id.is_empty() {
                origin.display().to_string()
            } else {
                id.clone()
            },
            reason: reason.to_string(),
        };
        if id.is_empty() {
            return Err(invalid("missing `id`"));
        }
        if id.chars().any(char::is_whitespace) {
            return Err(invalid("`id` must not contain whitespace"));
        }
        let target_column = doc
            .get("target")
            .filter(|t| !t.is_empty())
            .ok_or_else(|| invalid("missing `target`"))?
            .to_string();
        let class_labels = kv::split_list(doc.get("classes").unwrap_or_default());
        if class_labels.len() < 2 {
            return Err(invalid("`classes` needs at least two labels"));
        }
        let unique: BTreeSet<_> = class_labels.iter().collect();
        if unique.len() != class_labels.len() {
            return Err(invalid("`classes` contains duplicates"));
        }
        let feature_names = kv::split_list(doc.get("features").unwrap_or_default());
        if feature_names.contains(&target_column) {
            return Err(invalid("target column is listed among the features"));
        }
        let data_path = doc
            .get("data_path")
            .filter(|p| !p.is_empty())
            .ok_or_else(|| invalid("missing `data_path`"))?;
        let data_path = Path::new(data_path);
        let source_path = if data_path.is_absolute() {
            data_path.to_path_buf()
        } else {
            base_dir.join(data_path)
        };
        let feature_descriptions = doc
            .with_prefix("feature_desc.")
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Ok(Self {
            name: doc.get("name").unwrap_or(&id).to_string(),
            description: doc.get("description").unwrap_or_default().to_string(),
            id,
            feature_names,
            feature_descriptions,
            target_column,
            class_labels,
            categorical: kv::split_list(doc.get("categorical").unwrap_or_default()),
            numeric: kv::split_list(doc.get("numeric").unwrap_or_default()),
            source_path,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, CatalogError> {
        let text = fs::read_to_string(path).map_err(|source| CatalogError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base, path)
    }

    /// Renders the card in the on-disk format. `data_path` is written as given.
    pub fn to_card_text(&self, data_path: &str) -> String {
        let mut w = KvWriter::new();
        w.entry("id", &self.id)
            .entry("name", &self.name)
            .entry("description", &self.description)
            .entry("target", &self.target_column)
            .entry("classes", self.class_labels.join(","))
            .entry("features", self.feature_names.join(","));
        if !self.categorical.is_empty() {
            w.entry("categorical", self.categorical.join(","));
        }
        if !self.numeric.is_empty() {
            w.entry("numeric", self.numeric.join(","));
        }
        for (name, desc) in &self.feature_descriptions {
            w.entry(&format!("feature_desc.{name}"), desc);
        }
        w.entry("data_path", data_path);
        w.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Continuous,
    CategoricalEncoded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMeta {
    /// Originating feature name on the card.
    pub name: String,
    pub kind: ColumnKind,
    /// Category dictionary in code order; empty for continuous columns.
    pub categories: Vec<String>,
}

/// Numeric instance matrix with class-index labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTable {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub columns: Vec<ColumnMeta>,
    pub n_classes: usize,
    pub card_ref: String,
    /// `true` where the cell was missing in the source file and imputed.
    pub missing: Array2<bool>,
    /// Rows dropped at ingestion because their label was missing.
    pub dropped_rows: usize,
}

impl LabeledTable {
    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.features.column(j)
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    /// Values of column `j` that were present in the source file.
    pub fn observed(&self, j: usize) -> Vec<f64> {
        self.features
            .column(j)
            .iter()
            .zip(self.missing.column(j))
            .filter(|(_, &m)| !m)
            .map(|(&v, _)| v)
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// New table holding the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> LabeledTable {
        LabeledTable {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            columns: self.columns.clone(),
            n_classes: self.n_classes,
            card_ref: self.card_ref.clone(),
            missing: self.missing.select(Axis(0), rows),
            dropped_rows: self.dropped_rows,
        }
    }
}

fn delimiter_for(path: &Path) -> u8 {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("tsv") || ext.eq_ignore_ascii_case("tab") => b'\t',
        _ => b',',
    }
}

fn read_records(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CatalogError> {
    let csv_err = |source| CatalogError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter_for(path))
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err)?;
    let header = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        rows.push(record.iter().map(|c| c.trim().to_string()).collect());
    }
    Ok((header, rows))
}

fn resolve_label(card: &DatasetCard, raw: &str) -> Option<usize> {
    if let Some(idx) = card.class_labels.iter().position(|c| c == raw) {
        return Some(idx);
    }
    raw.parse::<usize>()
        .ok()
        .filter(|&i| i < card.class_labels.len())
}

/// Loads a card and its data file into a numeric table.
pub fn load_dataset(card_path: &Path) -> Result<(DatasetCard, LabeledTable), CatalogError> {
    let card = DatasetCard::from_file(card_path)?;
    let table = load_table(&card)?;
    let mut card = card;
    if card.feature_names.is_empty() {
        card.feature_names = table.columns.iter().map(|c| c.name.clone()).collect();
    }
    Ok((card, table))
}

/// Reads the data file a card points at.
pub fn load_table(card: &DatasetCard) -> Result<LabeledTable, CatalogError> {
    let path = card.source_path.as_path();
    let (header, rows) = read_records(path)?;
    let target_idx = header
        .iter()
        .position(|h| *h == card.target_column)
        .ok_or_else(|| CatalogError::MissingTargetColumn {
            path: path.to_path_buf(),
            column: card.target_column.clone(),
        })?;
    let feature_names: Vec<String> = if card.feature_names.is_empty() {
        header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != target_idx)
            .map(|(_, h)| h.clone())
            .collect()
    } else {
        card.feature_names.clone()
    };
    let feature_idx: Vec<usize> = feature_names
        .iter()
        .map(|name| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CatalogError::MissingFeatureColumn {
                    path: path.to_path_buf(),
                    column: name.clone(),
                })
        })
        .collect::<Result<_, _>>()?;

    let mut labels = Vec::with_capacity(rows.len());
    let mut kept: Vec<(usize, &Vec<String>)> = Vec::with_capacity(rows.len());
    let mut dropped_rows = 0;
    for (i, row) in rows.iter().enumerate() {
        // file line = data row + 2 (header is line 1)
        let line = i + 2;
        let raw = &row[target_idx];
        if raw.is_empty() {
            dropped_rows += 1;
            continue;
        }
        let label = resolve_label(card, raw).ok_or_else(|| CatalogError::UnknownLabel {
            path: path.to_path_buf(),
            row: line,
            value: raw.clone(),
        })?;
        labels.push(label);
        kept.push((line, row));
    }
    if kept.is_empty() {
        return Err(CatalogError::EmptyTable {
            path: path.to_path_buf(),
        });
    }

    let n = kept.len();
    let p = feature_idx.len();
    let mut features = Array2::<f64>::zeros((n, p));
    let mut missing = Array2::<bool>::from_elem((n, p), false);
    let mut columns = Vec::with_capacity(p);
    for (j, (&src, name)) in feature_idx.iter().zip(&feature_names).enumerate() {
        let cells: Vec<&str> = kept.iter().map(|(_, row)| row[src].as_str()).collect();
        let forced_categorical = card.categorical.contains(name);
        let forced_numeric = card.numeric.contains(name);
        let parsed: Vec<Option<f64>> = cells
            .iter()
            .map(|c| if c.is_empty() { None } else { c.parse::<f64>().ok() })
            .collect();
        let all_parse = cells
            .iter()
            .zip(&parsed)
            .all(|(c, v)| c.is_empty() || v.is_some());
        let numeric = !forced_categorical && (forced_numeric || all_parse);
        if numeric {
            for (r, (cell, value)) in cells.iter().zip(&parsed).enumerate() {
                match value {
                    Some(v) if v.is_finite() => features[[r, j]] = *v,
                    None if cell.is_empty() => missing[[r, j]] = true,
                    _ => {
                        return Err(CatalogError::UnparseableCell {
                            path: path.to_path_buf(),
                            row: kept[r].0,
                            column: name.clone(),
                            value: (*cell).to_string(),
                        })
                    }
                }
            }
            let observed: Vec<f64> = (0..n)
                .filter(|&r| !missing[[r, j]])
                .map(|r| features[[r, j]])
                .collect();
            let fill = util::median(&observed).unwrap_or(0.0);
            for r in 0..n {
                if missing[[r, j]] {
                    features[[r, j]] = fill;
                }
            }
            columns.push(ColumnMeta {
                name: name.clone(),
                kind: ColumnKind::Continuous,
                categories: Vec::new(),
            });
        } else {
            let mut dictionary: Vec<String> = Vec::new();
            let mut codes: HashMap<String, usize> = HashMap::new();
            for (r, cell) in cells.iter().enumerate() {
                let key = if cell.is_empty() {
                    missing[[r, j]] = true;
                    MISSING_CATEGORY
                } else {
                    cell
                };
                let code = *codes.entry(key.to_string()).or_insert_with(|| {
                    dictionary.push(key.to_string());
                    dictionary.len() - 1
                });
                features[[r, j]] = code as f64;
            }
            columns.push(ColumnMeta {
                name: name.clone(),
                kind: ColumnKind::CategoricalEncoded,
                categories: dictionary,
            });
        }
    }

    Ok(LabeledTable {
        features,
        labels,
        columns,
        n_classes: card.class_labels.len(),
        card_ref: card.id.clone(),
        missing,
        dropped_rows,
    })
}

/// All `*.card` files in a directory, sorted by path, with duplicate ids rejected.
pub fn load_library(dir: &Path) -> Result<Vec<(PathBuf, DatasetCard)>, CatalogError> {
    let entries = fs::read_dir(dir).map_err(|source| CatalogError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("card"))
        .collect();
    paths.sort();
    let mut seen: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut cards = Vec::with_capacity(paths.len());
    for path in paths {
        let card = DatasetCard::from_file(&path)?;
        if let Some(first) = seen.get(&card.id) {
            return Err(CatalogError::DuplicateCardId {
                id: card.id,
                first: first.clone(),
                second: path,
            });
        }
        seen.insert(card.id.clone(), path.clone());
        cards.push((path, card));
    }
    Ok(cards)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferredKind {
    Numeric,
    Categorical,
    TextLike,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NumericStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population convention.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: InferredKind,
    pub distinct: usize,
    pub missing: usize,
    pub stats: Option<NumericStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub columns: Vec<ColumnSchema>,
}

impl Schema {
    /// Per-column statistics over observed (non-imputed) entries.
    pub fn infer(table: &LabeledTable) -> Schema {
        let n = table.n_rows();
        let columns = table
            .columns
            .iter()
            .enumerate()
            .map(|(j, meta)| {
                let observed = table.observed(j);
                let mut sorted = observed.clone();
                sorted.sort_by(f64::total_cmp);
                sorted.dedup();
                let distinct = sorted.len();
                let missing = n - observed.len();
                match meta.kind {
                    ColumnKind::Continuous => ColumnSchema {
                        name: meta.name.clone(),
                        kind: InferredKind::Numeric,
                        distinct,
                        missing,
                        stats: (!observed.is_empty()).then(|| NumericStats {
                            min: sorted[0],
                            max: sorted[sorted.len() - 1],
                            mean: util::mean(&observed),
                            std: util::std_dev(&observed),
                        }),
                    },
                    ColumnKind::CategoricalEncoded => {
                        let text_like = distinct > 20 && distinct * 2 > observed.len();
                        ColumnSchema {
                            name: meta.name.clone(),
                            kind: if text_like {
                                InferredKind::TextLike
                            } else {
                                InferredKind::Categorical
                            },
                            distinct,
                            missing,
                            stats: None,
                        }
                    }
                }
            })
            .collect();
        Schema { columns }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitWarning {
    /// Some class had a single member; the split fell back to unstratified.
    InfeasibleStratification,
}

#[derive(Debug, Clone)]
pub struct HoldoutSplit {
    pub train: LabeledTable,
    pub holdout: LabeledTable,
    pub train_rows: Vec<usize>,
    pub holdout_rows: Vec<usize>,
    pub warning: Option<SplitWarning>,
}

fn holdout_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n - 1)
}

/// Stratified, seeded train/holdout split. Row order within each side
/// follows the input table.
pub fn split_holdout(table: &LabeledTable, fraction: f64, seed: u64) -> Result<HoldoutSplit, CatalogError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CatalogError::InvalidFraction(fraction));
    }
    let n = table.n_rows();
    if n < 2 {
        return Err(CatalogError::TooFewRows(n));
    }
    let mut rng = util::rng(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); table.n_classes];
    for (row, &y) in table.labels.iter().enumerate() {
        by_class[y].push(row);
    }
    let stratifiable = by_class.iter().all(|rows| rows.len() != 1);
    let mut holdout_rows = Vec::new();
    let warning = if stratifiable {
        for rows in by_class.iter_mut().filter(|r| !r.is_empty()) {
            rows.shuffle(&mut rng);
            let k = holdout_count(fraction, rows.len());
            holdout_rows.extend_from_slice(&rows[..k]);
        }
        None
    } else {
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut rng);
        holdout_rows.extend_from_slice(&rows[..holdout_count(fraction, n)]);
        Some(SplitWarning::InfeasibleStratification)
    };
    holdout_rows.sort_unstable();
    let in_holdout: BTreeSet<usize> = holdout_rows.iter().copied().collect();
    let train_rows: Vec<usize> = (0..n).filter(|r| !in_holdout.contains(r)).collect();
    Ok(HoldoutSplit {
        train: table.select_rows(&train_rows),
        holdout: table.select_rows(&holdout_rows),
        train_rows,
        holdout_rows,
        warning,
    })
}
