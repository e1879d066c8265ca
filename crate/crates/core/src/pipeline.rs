//! End-to-end run: retrieve candidate sources for a target card, harmonize
//! each candidate, pick the closest one and compare target-only training
//! against weighted transfer.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;

use crate::adapter::{
    Adapter, AdapterError, AdapterKind, FallbackAdapter, MappingHints, RemoteAdapter, RemoteClient, RemoteEmbedder,
    RemoteSettings, StubAdapter, Transcript,
};
use crate::catalog::{load_dataset, load_library, split_holdout, CatalogError, DatasetCard, LabeledTable};
use crate::embed::{build_query, CardIndex, Embedder, RetrievalError, RetrievalResult, DEFAULT_DIMENSION, DEFAULT_TOP_K};
use crate::harmonize::{
    class_align, harmonize_dataset, search_feature_mapping, write_mapping_file, AffinityWeights, ClassMap,
    FeatureMapping, HarmonizationReport, HarmonizeError, HarmonizeSettings, KernelConfig, MappingSearchConfig,
};
use crate::kv::{split_list, KvDocument, KvEntry, KvWriter};
use crate::transfer::{
    alpha_sweep, evaluate, init_model, train, BatchSize, LearnerKind, MetricReport, Standardizer, SweepResult,
    TrainingLog, TransferConfig, TransferError,
};
use crate::util;

pub const REPORT_FILE: &str = "report.txt";
pub const SUMMARY_FILE: &str = "summary.kv";
pub const MAPPING_FILE: &str = "mapping.txt";
pub const TRANSCRIPT_FILE: &str = "transcript.log";

/// Error of one pipeline stage.
#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Harmonize(#[from] HarmonizeError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl StageError {
    pub fn kind(&self) -> &'static str {
        match self {
            StageError::Catalog(_) => "Catalog",
            StageError::Retrieval(_) => "Retrieval",
            StageError::Adapter(_) => "Adapter",
            StageError::Harmonize(HarmonizeError::NoFeasibleMapping { .. }) => "NoFeasibleMapping",
            StageError::Harmonize(_) => "Harmonize",
            StageError::Transfer(TransferError::DivergedLoss { .. }) => "DivergedLoss",
            StageError::Transfer(_) => "Transfer",
            StageError::Io(_) => "Io",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("{what} not found: {}", path.display())]
    NotFound { what: &'static str, path: PathBuf },
    #[error("library {} has no cards besides the target", dir.display())]
    EmptyLibrary { dir: PathBuf },
    #[error("stage {stage}{}: {source}", candidate.as_ref().map(|c| format!(" (candidate {c})")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        candidate: Option<String>,
        #[source]
        source: StageError,
    },
}

impl PipelineError {
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config { .. } => "Config",
            PipelineError::NotFound { .. } => "NotFound",
            PipelineError::EmptyLibrary { .. } => "EmptyLibrary",
            PipelineError::Stage { source, .. } => source.kind(),
        }
    }

    fn config(line: usize, message: impl Into<String>) -> Self {
        PipelineError::Config {
            line,
            message: message.into(),
        }
    }
}

/// Wraps a stage error with the stage name and, optionally, a candidate id.
pub fn at_stage<'a, E: Into<StageError>>(stage: &'static str, candidate: Option<&'a str>) -> impl FnOnce(E) -> PipelineError + 'a {
    move |e| PipelineError::Stage {
        stage,
        candidate: candidate.map(str::to_string),
        source: e.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedderKind {
    HashedTf,
    Remote,
}

impl EmbedderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbedderKind::HashedTf => "hashed-tf",
            EmbedderKind::Remote => "remote",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub library_dir: PathBuf,
    pub target_card: PathBuf,
    pub output_dir: PathBuf,
    /// Saved index to reuse instead of embedding the library again.
    pub index_path: Option<PathBuf>,
    pub k: usize,
    pub seed: u64,
    pub embedder: EmbedderKind,
    pub embed_dimension: usize,
    pub embed_idf: bool,
    pub adapter: AdapterKind,
    pub remote: RemoteSettings,
    pub search: MappingSearchConfig,
    pub harmonize: HarmonizeSettings,
    pub transfer: TransferConfig,
    pub alpha_grid: Option<Vec<f64>>,
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl PipelineConfig {
    pub fn new(library_dir: PathBuf, target_card: PathBuf, output_dir: PathBuf) -> Self {
        Self {
            library_dir,
            target_card,
            output_dir,
            index_path: None,
            k: DEFAULT_TOP_K,
            seed: 0,
            embedder: EmbedderKind::HashedTf,
            embed_dimension: DEFAULT_DIMENSION,
            embed_idf: true,
            adapter: AdapterKind::Stub,
            remote: RemoteSettings::default(),
            search: MappingSearchConfig::default(),
            harmonize: HarmonizeSettings::default(),
            transfer: TransferConfig::default(),
            alpha_grid: None,
            test_fraction: 0.3,
            val_fraction: 0.2,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|_| PipelineError::NotFound {
            what: "config file",
            path: path.to_path_buf(),
        })?;
        Self::parse(&text, path.parent().unwrap_or_else(|| Path::new(".")))
    }

    /// Parses a config document. Relative paths resolve against `base_dir`;
    /// unknown keys are rejected.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let doc = KvDocument::parse(text).map_err(|e| PipelineError::config(0, e.to_string()))?;
        let path_of = |e: &KvEntry| {
            let p = Path::new(&e.value);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };
        let mut cfg = Self::new(PathBuf::new(), PathBuf::new(), base_dir.join("out"));
        let (mut have_library, mut have_target) = (false, false);
        let mut weights = AffinityWeights::default();
        for e in doc.entries() {
            match e.key.as_str() {
                "library_dir" => {
                    cfg.library_dir = path_of(e);
                    have_library = true;
                }
                "target_card" => {
                    cfg.target_card = path_of(e);
                    have_target = true;
                }
                "output_dir" => cfg.output_dir = path_of(e),
                "index.path" => cfg.index_path = Some(path_of(e)),
                "k" => cfg.k = num(e)?,
                "seed" => cfg.seed = num(e)?,
                "embed.kind" => {
                    cfg.embedder = match e.value.as_str() {
                        "hashed-tf" => EmbedderKind::HashedTf,
                        "remote" => EmbedderKind::Remote,
                        other => return Err(PipelineError::config(e.line, format!("unknown embedder `{other}`"))),
                    }
                }
                "embed.dimension" => cfg.embed_dimension = num(e)?,
                "embed.idf" => cfg.embed_idf = num(e)?,
                "adapter.kind" => {
                    cfg.adapter = AdapterKind::from_str(&e.value).map_err(|err| PipelineError::config(e.line, err.to_string()))?
                }
                "adapter.endpoint" => cfg.remote.endpoint = e.value.clone(),
                "adapter.model" => cfg.remote.model = e.value.clone(),
                "adapter.timeout_ms" => cfg.remote.timeout = Duration::from_millis(num(e)?),
                "adapter.max_attempts" => cfg.remote.max_attempts = num(e)?,
                "adapter.max_in_flight" => cfg.remote.max_in_flight = num(e)?,
                "kernel.bandwidth" => {
                    cfg.harmonize.kernel = if e.value == "median" {
                        KernelConfig::median_heuristic()
                    } else {
                        let g: f64 = num(e)?;
                        if !(g > 0.0 && g.is_finite()) {
                            return Err(PipelineError::config(e.line, "kernel bandwidth must be positive"));
                        }
                        KernelConfig::fixed(g)
                    }
                }
                "sinkhorn.epsilon" => cfg.harmonize.sinkhorn.epsilon = num(e)?,
                "sinkhorn.max_iter" => cfg.harmonize.sinkhorn.max_iter = num(e)?,
                "sinkhorn.tol" => cfg.harmonize.sinkhorn.tol = num(e)?,
                "harmonize.sample_cap" => cfg.harmonize.sample_cap = num(e)?,
                "mapping.weight_name" => weights.name = num(e)?,
                "mapping.weight_stats" => weights.stats = num(e)?,
                "mapping.weight_hint" => weights.hint = num(e)?,
                "mapping.hint_bonus" => cfg.search.hint_bonus = num(e)?,
                "mapping.affinity_floor" => cfg.search.affinity_floor = num(e)?,
                "mapping.affinity_tradeoff" => cfg.search.affinity_tradeoff = num(e)?,
                "mapping.max_variants" => cfg.search.max_variants = num(e)?,
                "mapping.search_rows" => cfg.search.search_rows = num(e)?,
                "transfer.alpha" => cfg.transfer.alpha = num(e)?,
                "transfer.learning_rate" => cfg.transfer.learning_rate = num(e)?,
                "transfer.batch_size" => {
                    cfg.transfer.batch_size = if e.value == "auto" {
                        BatchSize::Auto
                    } else {
                        BatchSize::Fixed(num(e)?)
                    }
                }
                "transfer.max_epochs" => cfg.transfer.max_epochs = num(e)?,
                "transfer.patience" => cfg.transfer.patience = num(e)?,
                "transfer.learner" => {
                    cfg.transfer.learner =
                        LearnerKind::from_str(&e.value).map_err(|err| PipelineError::config(e.line, err.to_string()))?
                }
                "transfer.hidden_width" => cfg.transfer.hidden_width = num(e)?,
                "transfer.alpha_grid" => {
                    let grid = split_list(&e.value)
                        .iter()
                        .map(|v| v.parse::<f64>().map_err(|_| PipelineError::config(e.line, format!("bad alpha `{v}`"))))
                        .collect::<Result<Vec<_>, _>>()?;
                    cfg.alpha_grid = (!grid.is_empty()).then_some(grid);
                }
                "split.test_fraction" => cfg.test_fraction = num(e)?,
                "split.val_fraction" => cfg.val_fraction = num(e)?,
                other => return Err(PipelineError::config(e.line, format!("unknown key `{other}`"))),
            }
        }
        cfg.search.weights = weights;
        if !have_library {
            return Err(PipelineError::config(0, "missing `library_dir`"));
        }
        if !have_target {
            return Err(PipelineError::config(0, "missing `target_card`"));
        }
        Ok(cfg)
    }

    /// `TABXFER_SEED` replaces the seed; the remote adapter settings take
    /// their own environment overrides.
    pub fn apply_env(&mut self) -> Result<(), PipelineError> {
        if let Ok(v) = std::env::var("TABXFER_SEED") {
            self.seed = v
                .parse()
                .map_err(|_| PipelineError::config(0, format!("bad TABXFER_SEED `{v}`")))?;
        }
        self.remote
            .apply_env()
            .map_err(|e| PipelineError::config(0, e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !self.library_dir.is_dir() {
            return Err(PipelineError::NotFound {
                what: "library directory",
                path: self.library_dir.clone(),
            });
        }
        if !self.target_card.is_file() {
            return Err(PipelineError::NotFound {
                what: "target card",
                path: self.target_card.clone(),
            });
        }
        if self.k == 0 {
            return Err(PipelineError::config(0, "k must be at least 1"));
        }
        for (name, f) in [("split.test_fraction", self.test_fraction), ("split.val_fraction", self.val_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(PipelineError::config(0, format!("{name} must lie in (0, 1)")));
            }
        }
        if let Some(grid) = &self.alpha_grid {
            if grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(PipelineError::config(0, "alpha grid values must lie in [0, 1]"));
            }
        }
        self.transfer_config()
            .validate()
            .map_err(|e| PipelineError::config(0, e.to_string()))?;
        if self.adapter == AdapterKind::Remote || self.embedder == EmbedderKind::Remote {
            self.remote
                .validate()
                .map_err(|e| PipelineError::config(0, e.to_string()))?;
        }
        Ok(())
    }

    pub fn search_config(&self) -> MappingSearchConfig {
        MappingSearchConfig {
            seed: util::derive_seed(self.seed, "mapping-search"),
            ..self.search
        }
    }

    pub fn harmonize_settings(&self) -> HarmonizeSettings {
        HarmonizeSettings {
            seed: util::derive_seed(self.seed, "harmonize"),
            ..self.harmonize
        }
    }

    pub fn transfer_config(&self) -> TransferConfig {
        TransferConfig {
            seed: self.seed,
            ..self.transfer
        }
    }

    pub fn split_seed(&self) -> u64 {
        util::derive_seed(self.seed, "split")
    }

    /// Effective settings as a key/value block (output directory omitted).
    pub fn snapshot(&self) -> String {
        let mut w = KvWriter::new();
        let t = &self.transfer;
        let s = &self.search;
        let h = &self.harmonize;
        w.entry("library_dir", self.library_dir.display())
            .entry("target_card", self.target_card.display())
            .entry("k", self.k)
            .entry("seed", self.seed)
            .entry("embed.kind", self.embedder.as_str())
            .entry("embed.dimension", self.embed_dimension)
            .entry("embed.idf", self.embed_idf)
            .entry("adapter.kind", self.adapter.as_str());
        if let Some(p) = &self.index_path {
            w.entry("index.path", p.display());
        }
        match h.kernel.mode {
            crate::harmonize::BandwidthMode::MedianHeuristic => w.entry("kernel.bandwidth", "median"),
            crate::harmonize::BandwidthMode::Fixed => w.entry("kernel.bandwidth", h.kernel.gamma),
        };
        w.entry("sinkhorn.epsilon", h.sinkhorn.epsilon)
            .entry("sinkhorn.max_iter", h.sinkhorn.max_iter)
            .entry("sinkhorn.tol", h.sinkhorn.tol)
            .entry("harmonize.sample_cap", h.sample_cap)
            .entry("mapping.weight_name", s.weights.name)
            .entry("mapping.weight_stats", s.weights.stats)
            .entry("mapping.weight_hint", s.weights.hint)
            .entry("mapping.hint_bonus", s.hint_bonus)
            .entry("mapping.affinity_floor", s.affinity_floor)
            .entry("mapping.affinity_tradeoff", s.affinity_tradeoff)
            .entry("mapping.max_variants", s.max_variants)
            .entry("mapping.search_rows", s.search_rows)
            .entry("transfer.alpha", t.alpha)
            .entry("transfer.learning_rate", t.learning_rate)
            .entry(
                "transfer.batch_size",
                match t.batch_size {
                    BatchSize::Auto => "auto".to_string(),
                    BatchSize::Fixed(b) => b.to_string(),
                },
            )
            .entry("transfer.max_epochs", t.max_epochs)
            .entry("transfer.patience", t.patience)
            .entry("transfer.learner", t.learner.as_str())
            .entry("transfer.hidden_width", t.hidden_width);
        if let Some(grid) = &self.alpha_grid {
            let g: Vec<String> = grid.iter().map(|a| a.to_string()).collect();
            w.entry("transfer.alpha_grid", g.join(", "));
        }
        w.entry("split.test_fraction", self.test_fraction)
            .entry("split.val_fraction", self.val_fraction);
        w.finish()
    }
}

fn num<T: FromStr>(e: &KvEntry) -> Result<T, PipelineError> {
    e.value
        .parse()
        .map_err(|_| PipelineError::config(e.line, format!("`{}`: cannot parse `{}`", e.key, e.value)))
}

/// The target's labeled rows split three ways. `dev` is `train ∪ val`, the
/// reference the source is harmonized against.
#[derive(Debug, Clone)]
pub struct TargetSplits {
    pub dev: LabeledTable,
    pub train: LabeledTable,
    pub val: LabeledTable,
    pub test: LabeledTable,
}

impl TargetSplits {
    /// Splits off the test rows, then the validation rows from the rest.
    pub fn split(table: &LabeledTable, test_fraction: f64, val_fraction: f64, seed: u64) -> Result<Self, CatalogError> {
        let outer = split_holdout(table, test_fraction, util::derive_seed(seed, "test"))?;
        Self::with_test(outer.train, outer.holdout, val_fraction, seed)
    }

    /// Uses `test` as given and splits `dev` into train and validation.
    pub fn with_test(dev: LabeledTable, test: LabeledTable, val_fraction: f64, seed: u64) -> Result<Self, CatalogError> {
        let inner = split_holdout(&dev, val_fraction, util::derive_seed(seed, "validation"))?;
        Ok(Self {
            train: inner.train,
            val: inner.holdout,
            dev,
            test,
        })
    }
}

/// Everything produced while harmonizing one candidate source.
#[derive(Debug, Clone)]
pub struct CandidateHarmonization {
    pub hints: MappingHints,
    pub mapping: FeatureMapping,
    pub class_map: ClassMap,
    pub harmonized: LabeledTable,
    pub report: HarmonizationReport,
}

/// Class alignment, mapping search and harmonization of `source` onto `target`.
pub fn harmonize_candidate(
    source: (&DatasetCard, &LabeledTable),
    target: (&DatasetCard, &LabeledTable),
    hints: MappingHints,
    search: &MappingSearchConfig,
    settings: &HarmonizeSettings,
) -> Result<CandidateHarmonization, HarmonizeError> {
    let (scard, stable) = source;
    let (tcard, ttable) = target;
    let class_map = class_align(
        &scard.class_labels,
        &stable.class_counts(),
        &tcard.class_labels,
        &ttable.class_counts(),
        &hints,
    );
    let mapping = search_feature_mapping((&scard.id, stable), (&tcard.id, ttable), &hints, search)?;
    let (harmonized, report) = harmonize_dataset(stable, ttable, &mapping, &class_map, settings)?;
    Ok(CandidateHarmonization {
        hints,
        mapping,
        class_map,
        harmonized,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutcome {
    pub alpha: f64,
    pub sweep: Option<SweepResult>,
    pub baseline_log: TrainingLog,
    pub baseline: MetricReport,
    pub transfer_log: TrainingLog,
    pub transfer: MetricReport,
}

/// Trains the target-only baseline (alpha 0) and the transfer model with
/// the same seed and evaluates both on the test rows. Features are
/// standardized with target-train statistics. With a grid, the transfer
/// alpha is the sweep's choice.
pub fn transfer_stage(
    source: &LabeledTable,
    splits: &TargetSplits,
    config: &TransferConfig,
    grid: Option<&[f64]>,
) -> Result<TransferOutcome, TransferError> {
    if source.n_features() != splits.train.n_features() {
        return Err(TransferError::FeatureMismatch {
            expected: splits.train.n_features(),
            found: source.n_features(),
        });
    }
    let z = Standardizer::fit(&splits.train);
    let (src, tr, va, te) = (z.apply(source), z.apply(&splits.train), z.apply(&splits.val), z.apply(&splits.test));
    let (p, c) = (tr.n_features(), tr.n_classes);
    let base_cfg = TransferConfig { alpha: 0.0, ..*config };
    let (base_model, baseline_log) = train(init_model(p, c, &base_cfg), &src, &tr, &va, &base_cfg)?;
    let (alpha, sweep, model, transfer_log) = match grid {
        Some(grid) => {
            let sweep = alpha_sweep(&src, &tr, &va, grid, config)?;
            let best = sweep
                .entries
                .iter()
                .find(|e| e.alpha == sweep.best_alpha)
                .expect("best alpha is a grid entry");
            let (model, log) = (best.model.clone(), best.log.clone());
            (sweep.best_alpha, Some(sweep), model, log)
        }
        None => {
            let (model, log) = train(init_model(p, c, config), &src, &tr, &va, config)?;
            (config.alpha, None, model, log)
        }
    };
    Ok(TransferOutcome {
        alpha,
        sweep,
        baseline: evaluate(&base_model, &te),
        baseline_log,
        transfer: evaluate(&model, &te),
        transfer_log,
    })
}

#[derive(Debug, Clone)]
pub struct CandidateRecord {
    pub rank: usize,
    pub id: String,
    pub score: f64,
    /// Harmonization report, or the error message when harmonization failed.
    pub outcome: Result<HarmonizationReport, String>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub target_id: String,
    pub class_labels: Vec<String>,
    pub query: String,
    pub ranking: RetrievalResult,
    pub candidates: Vec<CandidateRecord>,
    pub chosen: String,
    pub mapping_text: String,
    pub split_sizes: [usize; 3],
    pub transfer: TransferOutcome,
    pub config_snapshot: String,
    pub adapter_fallbacks: Vec<String>,
    pub transcript_path: PathBuf,
}

/// Index of the candidate with the smallest pooled Wasserstein distance;
/// ties go to the higher retrieval score, then the smaller id. Failed
/// candidates are never chosen.
pub fn select_candidate(candidates: &[CandidateRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        let Ok(r) = &c.outcome else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let (bc, br) = (&candidates[b], candidates[b].outcome.as_ref().expect("chosen candidates succeeded"));
                r.pooled_wasserstein
                    .total_cmp(&br.pooled_wasserstein)
                    .then_with(|| bc.score.total_cmp(&c.score))
                    .then_with(|| c.id.cmp(&bc.id))
                    .is_lt()
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

fn metric_lines(w: &mut KvWriter, prefix: &str, m: &MetricReport) {
    w.entry(&format!("{prefix}.accuracy"), format!("{:.6}", m.accuracy))
        .entry(&format!("{prefix}.macro_precision"), format!("{:.6}", m.macro_precision))
        .entry(&format!("{prefix}.macro_recall"), format!("{:.6}", m.macro_recall))
        .entry(&format!("{prefix}.macro_f1"), format!("{:.6}", m.macro_f1));
}

impl RunReport {
    /// Flat key/value summary for scripts.
    pub fn summary(&self) -> String {
        let mut w = KvWriter::new();
        w.entry("target", &self.target_id)
            .entry("chosen_source", &self.chosen)
            .entry("selection_rule", "min pooled_wasserstein; ties: higher retrieval score, then smaller id")
            .entry("alpha", self.transfer.alpha)
            .entry("rows.train", self.split_sizes[0])
            .entry("rows.val", self.split_sizes[1])
            .entry("rows.test", self.split_sizes[2]);
        for c in &self.candidates {
            w.entry(&format!("candidate.{}.rank", c.id), c.rank)
                .entry(&format!("candidate.{}.score", c.id), format!("{:.6}", c.score));
            match &c.outcome {
                Ok(r) => w.entry(&format!("candidate.{}.pooled_wasserstein", c.id), format!("{:.6}", r.pooled_wasserstein)),
                Err(e) => w.entry(&format!("candidate.{}.error", c.id), e),
            };
        }
        metric_lines(&mut w, "baseline", &self.transfer.baseline);
        metric_lines(&mut w, "transfer", &self.transfer.transfer);
        w.entry(
            "gain.accuracy",
            format!("{:.6}", self.transfer.transfer.accuracy - self.transfer.baseline.accuracy),
        );
        w.finish()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# run report\n");
        out.push_str(&self.summary());
        let _ = writeln!(out, "\n## retrieval\nquery = {}", self.query);
        for (i, r) in self.ranking.ranked.iter().enumerate() {
            let _ = writeln!(out, "{:>3}  {:<32} {:.6}", i + 1, r.id, r.score);
        }
        for c in &self.candidates {
            let _ = writeln!(out, "\n## candidate {} (rank {})", c.id, c.rank);
            match &c.outcome {
                Ok(r) => out.push_str(&r.to_text()),
                Err(e) => {
                    let _ = writeln!(out, "error = {e}");
                }
            }
        }
        let _ = writeln!(out, "\n## chosen mapping");
        out.push_str(&self.mapping_text);
        let _ = writeln!(out, "\n## baseline (target only)");
        out.push_str(&self.transfer.baseline.to_text(&self.class_labels));
        out.push_str(&self.transfer.baseline_log.to_text());
        let _ = writeln!(out, "\n## transfer (alpha {})", self.transfer.alpha);
        out.push_str(&self.transfer.transfer.to_text(&self.class_labels));
        out.push_str(&self.transfer.transfer_log.to_text());
        if let Some(sweep) = &self.transfer.sweep {
            let _ = writeln!(out, "\n## alpha sweep (validation)");
            for e in &sweep.entries {
                let _ = writeln!(
                    out,
                    "alpha {:<6} accuracy {:.6} macro_f1 {:.6}",
                    e.alpha, e.validation.accuracy, e.validation.macro_f1
                );
            }
        }
        let _ = writeln!(out, "\n## adapter\ntranscript = {}", self.transcript_path.display());
        for f in &self.adapter_fallbacks {
            let _ = writeln!(out, "fallback = {f}");
        }
        let _ = writeln!(out, "\n## config");
        out.push_str(&self.config_snapshot);
        out
    }

    /// Writes the report, summary and chosen mapping into `dir`.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(REPORT_FILE), self.to_text())?;
        fs::write(dir.join(SUMMARY_FILE), self.summary())?;
        fs::write(dir.join(MAPPING_FILE), &self.mapping_text)
    }
}

/// Adapter for the configured kind. Remote adapters fall back to the stub
/// on failure; every query and hint set lands in the transcript.
pub fn make_adapter(config: &PipelineConfig, transcript: Option<Arc<Transcript>>) -> Result<FallbackAdapter, PipelineError> {
    let inner: Box<dyn Adapter> = match config.adapter {
        AdapterKind::Stub => Box::new(StubAdapter),
        AdapterKind::Remote => {
            let client = RemoteClient::new(config.remote.clone(), transcript.clone())
                .map_err(|e| PipelineError::config(0, e.to_string()))?;
            Box::new(RemoteAdapter::new(client))
        }
    };
    Ok(FallbackAdapter::new(inner, transcript))
}

/// Library cards other than the target (matched by id).
pub fn candidate_cards(config: &PipelineConfig, target_id: &str) -> Result<Vec<(PathBuf, DatasetCard)>, PipelineError> {
    if !config.library_dir.is_dir() {
        return Err(PipelineError::NotFound {
            what: "library directory",
            path: config.library_dir.clone(),
        });
    }
    let cards: Vec<_> = load_library(&config.library_dir)
        .map_err(at_stage("index", None))?
        .into_iter()
        .filter(|(_, c)| c.id != target_id)
        .collect();
    if cards.is_empty() {
        return Err(PipelineError::EmptyLibrary {
            dir: config.library_dir.clone(),
        });
    }
    Ok(cards)
}

/// Index over `cards` plus the embedder for queries against it. A saved
/// index at `index_path` is reused (minus the target) when present.
pub fn build_index(
    config: &PipelineConfig,
    cards: &[(PathBuf, DatasetCard)],
    target_id: &str,
    transcript: Option<Arc<Transcript>>,
) -> Result<(CardIndex, Box<dyn Embedder>), PipelineError> {
    let stage = at_stage::<RetrievalError>("index", None);
    let remote_embedder = || -> Result<Box<dyn Embedder>, PipelineError> {
        let client = RemoteClient::new(config.remote.clone(), transcript.clone())
            .map_err(|e| PipelineError::config(0, e.to_string()))?;
        Ok(Box::new(RemoteEmbedder::new(client, config.embed_dimension)))
    };
    if let Some(path) = config.index_path.as_ref().filter(|p| p.is_file()) {
        let index = CardIndex::load(path).map_err(stage)?.without(&[target_id]);
        let embedder: Box<dyn Embedder> = match index.hashed_embedder() {
            Some(e) => Box::new(e),
            None => remote_embedder()?,
        };
        if embedder.tag() != index.embedder_tag() {
            return Err(at_stage("index", None)(RetrievalError::EmbedderMismatch {
                expected: index.embedder_tag().to_string(),
                found: embedder.tag(),
            }));
        }
        return Ok((index, embedder));
    }
    let list = cards.iter().map(|(_, c)| c);
    match config.embedder {
        EmbedderKind::HashedTf => {
            let (index, e) = CardIndex::build_hashed(list, config.embed_dimension, config.embed_idf).map_err(stage)?;
            Ok((index, Box::new(e)))
        }
        EmbedderKind::Remote => {
            let e = remote_embedder()?;
            let index = CardIndex::build(list, e.as_ref()).map_err(stage)?;
            Ok((index, e))
        }
    }
}

/// Full pipeline. Writes the report files and the adapter transcript into
/// the output directory.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(at_stage("output", None))?;
    let transcript = Arc::new(Transcript::create(&out.join(TRANSCRIPT_FILE)).map_err(at_stage("output", None))?);
    let adapter = make_adapter(config, Some(transcript.clone()))?;

    let (tcard, ttable) = load_dataset(&config.target_card).map_err(at_stage("load", None))?;
    let cards = candidate_cards(config, &tcard.id)?;
    let (index, embedder) = build_index(config, &cards, &tcard.id, Some(transcript.clone()))?;

    let query = build_query(&tcard, &adapter).map_err(at_stage("retrieve", None))?;
    let qv = embedder.embed(&query).map_err(at_stage("retrieve", None))?;
    let ranking = index.query_topk(&qv, config.k).map_err(at_stage("retrieve", None))?;

    let splits = TargetSplits::split(&ttable, config.test_fraction, config.val_fraction, config.split_seed())
        .map_err(at_stage("split", None))?;

    let mut loaded = Vec::with_capacity(ranking.ranked.len());
    for r in &ranking.ranked {
        let id = r.id.as_str();
        let path = &cards
            .iter()
            .find(|(_, c)| c.id == id)
            .ok_or_else(|| PipelineError::NotFound {
                what: "card for indexed id",
                path: PathBuf::from(id),
            })?
            .0;
        let (scard, stable) = load_dataset(path).map_err(at_stage("load", Some(id)))?;
        let hints = adapter.mapping_hints(&scard, &tcard).map_err(at_stage("hints", Some(id)))?;
        loaded.push((scard, stable, hints));
    }

    let search = config.search_config();
    let settings = config.harmonize_settings();
    let results: Vec<Result<CandidateHarmonization, HarmonizeError>> = loaded
        .into_par_iter()
        .map(|(scard, stable, hints)| harmonize_candidate((&scard, &stable), (&tcard, &splits.dev), hints, &search, &settings))
        .collect();

    let mut candidates = Vec::with_capacity(results.len());
    let mut first_error = None;
    for (i, (r, result)) in ranking.ranked.iter().zip(&results).enumerate() {
        let outcome = match result {
            Ok(h) => Ok(h.report.clone()),
            Err(e) => {
                log::warn!("candidate {} skipped: {e}", r.id);
                first_error.get_or_insert((r.id.clone(), e.to_string()));
                Err(e.to_string())
            }
        };
        candidates.push(CandidateRecord {
            rank: i + 1,
            id: r.id.clone(),
            score: r.score,
            outcome,
        });
    }
    let Some(chosen) = select_candidate(&candidates) else {
        let idx = results.iter().position(Result::is_err).expect("no candidate succeeded");
        let err = results.into_iter().nth(idx).expect("index in range").expect_err("failed candidate");
        return Err(at_stage("harmonize", Some(&ranking.ranked[idx].id))(err));
    };
    let picked = results[chosen].as_ref().expect("chosen candidate succeeded");
    let chosen_id = candidates[chosen].id.clone();

    let transfer = transfer_stage(&picked.harmonized, &splits, &config.transfer_config(), config.alpha_grid.as_deref())
        .map_err(at_stage("transfer", Some(&chosen_id)))?;

    let report = RunReport {
        target_id: tcard.id.clone(),
        class_labels: tcard.class_labels.clone(),
        query,
        ranking,
        candidates,
        chosen: chosen_id,
        mapping_text: write_mapping_file(&picked.mapping, &picked.class_map),
        split_sizes: [splits.train.n_rows(), splits.val.n_rows(), splits.test.n_rows()],
        transfer,
        config_snapshot: config.snapshot(),
        adapter_fallbacks: adapter.fallbacks(),
        transcript_path: PathBuf::from(TRANSCRIPT_FILE),
    };
    report.write(out).map_err(at_stage("output", None))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::twin_library;

    fn config_for(dir: &Path, distractors: usize, k: usize) -> (PipelineConfig, String) {
        let (target, twin) = twin_library(dir, 11, distractors, 300).unwrap();
        let mut cfg = PipelineConfig::new(dir.join("library"), target, dir.join("out"));
        cfg.k = k;
        cfg.seed = 3;
        cfg.transfer.max_epochs = 30;
        cfg.transfer.patience = 10;
        (cfg, twin)
    }

    #[test]
    fn parses_config_keys() {
        let text = "library_dir = lib\ntarget_card = t/x.card\nk = 3\nseed = 9\ntransfer.alpha_grid = 0, 0.5, 1\n\
                    transfer.batch_size = 16\nkernel.bandwidth = 0.5\nsplit.val_fraction = 0.25\n";
        let cfg = PipelineConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.library_dir, Path::new("/base/lib"));
        assert_eq!(cfg.target_card, Path::new("/base/t/x.card"));
        assert_eq!((cfg.k, cfg.seed), (3, 9));
        assert_eq!(cfg.alpha_grid, Some(vec![0.0, 0.5, 1.0]));
        assert_eq!(cfg.transfer.batch_size, BatchSize::Fixed(16));
        assert_eq!(cfg.harmonize.kernel, KernelConfig::fixed(0.5));
        assert_eq!(cfg.val_fraction, 0.25);
        assert_eq!(cfg.output_dir, Path::new("/base/out"));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let base = "library_dir = l\ntarget_card = t\n";
        let err = PipelineConfig::parse(&format!("{base}colour = red\n"), Path::new(".")).unwrap_err();
        assert!(matches!(err, PipelineError::Config { line: 3, .. }), "{err}");
        let err = PipelineConfig::parse(&format!("{base}k = many\n"), Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("cannot parse"));
        assert!(PipelineConfig::parse("k = 2\n", Path::new(".")).is_err());
    }

    #[test]
    fn missing_library_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, _) = config_for(dir.path(), 1, 1);
        cfg.library_dir = dir.path().join("nope");
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.kind(), "NotFound");
    }

    #[test]
    fn library_with_only_the_target_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, _) = config_for(dir.path(), 0, 1);
        cfg.library_dir = cfg.target_card.parent().unwrap().to_path_buf();
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.kind(), "EmptyLibrary");
    }

    #[test]
    fn single_candidate_is_chosen() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, _) = config_for(dir.path(), 4, 1);
        let report = run_pipeline(&cfg).unwrap();
        assert_eq!(report.candidates.len(), 1);
        assert_eq!(report.chosen, report.candidates[0].id);
        assert!(report.candidates[0].outcome.is_ok());
        for f in [REPORT_FILE, SUMMARY_FILE, MAPPING_FILE, TRANSCRIPT_FILE] {
            assert!(cfg.output_dir.join(f).is_file(), "{f}");
        }
    }

    fn dummy_report() -> HarmonizationReport {
        use crate::adapter::AdapterKind;
        use crate::synth::{make_table, GenerativeProcess};
        let process = GenerativeProcess::new(2, 2, 1.0, 1);
        let (x, y) = process.sample(30, &mut util::rng(1));
        let names = vec!["a".to_string(), "b".to_string()];
        let t = make_table(x, y, &names, 2, "t");
        let card = crate::synth::card_for("t", "t", "", &t, &names);
        harmonize_candidate(
            (&card, &t),
            (&card, &t),
            MappingHints::empty(AdapterKind::Stub),
            &MappingSearchConfig::default(),
            &HarmonizeSettings::default(),
        )
        .unwrap()
        .report
    }

    #[test]
    fn selection_prefers_distance_then_score_then_id() {
        let report = |pw: f64| {
            let mut r = dummy_report();
            r.pooled_wasserstein = pw;
            Ok(r)
        };
        let rec = |id: &str, score: f64, outcome| CandidateRecord {
            rank: 0,
            id: id.into(),
            score,
            outcome,
        };
        let c = vec![rec("b", 0.5, report(1.0)), rec("a", 0.4, report(1.0)), rec("c", 0.9, Err("x".into()))];
        assert_eq!(select_candidate(&c), Some(0));
        let c = vec![rec("b", 0.5, report(1.0)), rec("a", 0.5, report(1.0))];
        assert_eq!(select_candidate(&c), Some(1));
        let c = vec![rec("b", 0.5, report(2.0)), rec("a", 0.1, report(1.0))];
        assert_eq!(select_candidate(&c), Some(1));
        assert_eq!(select_candidate(&[rec("z", 1.0, Err("x".into()))]), None);
    }
}
