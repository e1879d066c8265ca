use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use tabxfer::adapter::{Adapter, Transcript};
use tabxfer::catalog::{load_dataset, DatasetCard, LabeledTable};
use tabxfer::embed::build_query;
use tabxfer::harmonize::{harmonize_dataset, parse_mapping_file, write_mapping_file};
use tabxfer::kv::{split_list, KvWriter};
use tabxfer::pipeline::{
    at_stage, build_index, candidate_cards, harmonize_candidate, make_adapter, run_pipeline, transfer_stage,
    PipelineConfig, PipelineError, TargetSplits, TransferOutcome, MAPPING_FILE, TRANSCRIPT_FILE,
};
use tabxfer::synth::twin_library;
use tabxfer::transfer::alpha_sweep;
use tabxfer::transfer::Standardizer;

const DEFAULT_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Parser)]
#[command(name = "tabxfer", version, about = "Retrieve, harmonize and transfer from related labeled tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Pipeline config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Embed every library card and save the index.
    Index(Common),
    /// Print the candidate ranking for the target card.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Harmonize one source onto the target; writes a report and a mapping file.
    Harmonize {
        #[command(flatten)]
        common: Common,
        /// Library card id or card path.
        #[arg(long)]
        source: String,
    },
    /// Train and evaluate baseline and transfer models from a mapping file.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: String,
        #[arg(long)]
        mapping: PathBuf,
        /// Fixed alpha; disables the configured grid.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Full pipeline.
    Run(Common),
    /// Validation metrics over a grid of alphas.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: String,
        /// Mapping file to reuse; the pair is harmonized afresh without one.
        #[arg(long)]
        mapping: Option<PathBuf>,
        /// Comma-separated alphas.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Write a demo library with a planted twin of the target, and a config.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 9)]
        distractors: usize,
        #[arg(long, default_value_t = 400)]
        rows: usize,
    },
}

struct Failure {
    kind: &'static str,
    message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

fn failure(kind: &'static str, message: impl Into<String>) -> Failure {
    Failure {
        kind,
        message: message.into(),
    }
}

fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| failure("Io", format!("{}: {e}", path.display()))
}

fn load_config(common: &Common) -> Result<PipelineConfig, Failure> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| failure("Usage", "--config is required for this command"))?;
    let mut cfg = PipelineConfig::from_file(path)?;
    cfg.apply_env()?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn output_dir(cfg: &PipelineConfig) -> Result<&Path, Failure> {
    fs::create_dir_all(&cfg.output_dir).map_err(io_failure(&cfg.output_dir))?;
    Ok(&cfg.output_dir)
}

fn transcript(cfg: &PipelineConfig) -> Result<Arc<Transcript>, Failure> {
    let path = output_dir(cfg)?.join(TRANSCRIPT_FILE);
    Ok(Arc::new(Transcript::create(&path).map_err(io_failure(&path))?))
}

struct Target {
    card: DatasetCard,
    splits: TargetSplits,
}

fn load_target(cfg: &PipelineConfig) -> Result<Target, Failure> {
    cfg.validate()?;
    let (card, table) = load_dataset(&cfg.target_card).map_err(at_stage("load", None))?;
    let splits = TargetSplits::split(&table, cfg.test_fraction, cfg.val_fraction, cfg.split_seed())
        .map_err(at_stage("split", None))?;
    Ok(Target { card, splits })
}

/// A card path, or the id of a card in the library.
fn load_source(cfg: &PipelineConfig, source: &str, target_id: &str) -> Result<(DatasetCard, LabeledTable), Failure> {
    let path = Path::new(source);
    let path = if path.is_file() {
        path.to_path_buf()
    } else {
        candidate_cards(cfg, target_id)?
            .into_iter()
            .find(|(_, c)| c.id == source)
            .map(|(p, _)| p)
            .ok_or_else(|| failure("NotFound", format!("no card `{source}` in {}", cfg.library_dir.display())))?
    };
    Ok(load_dataset(&path).map_err(at_stage("load", Some(source)))?)
}

fn cmd_index(common: &Common) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    if !cfg.library_dir.is_dir() {
        return Err(PipelineError::NotFound {
            what: "library directory",
            path: cfg.library_dir.clone(),
        }
        .into());
    }
    let cards = candidate_cards(&cfg, "")?;
    let no_saved = PipelineConfig {
        index_path: None,
        ..cfg.clone()
    };
    let (index, _) = build_index(&no_saved, &cards, "", Some(transcript(&cfg)?))?;
    let path = match &cfg.index_path {
        Some(p) => p.clone(),
        None => output_dir(&cfg)?.join("index.txt"),
    };
    index.save(&path).map_err(at_stage("index", None))?;
    println!("indexed {} cards -> {}", index.len(), path.display());
    Ok(())
}

fn cmd_retrieve(common: &Common, k: Option<usize>) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    if let Some(k) = k {
        cfg.k = k;
    }
    cfg.validate()?;
    let tcard = DatasetCard::from_file(&cfg.target_card).map_err(at_stage("load", None))?;
    let log = transcript(&cfg)?;
    let cards = candidate_cards(&cfg, &tcard.id)?;
    let (index, embedder) = build_index(&cfg, &cards, &tcard.id, Some(log.clone()))?;
    let adapter = make_adapter(&cfg, Some(log))?;
    let query = build_query(&tcard, &adapter).map_err(at_stage("retrieve", None))?;
    let qv = embedder.embed(&query).map_err(at_stage("retrieve", None))?;
    let ranking = index.query_topk(&qv, cfg.k).map_err(at_stage("retrieve", None))?;
    for (i, r) in ranking.ranked.iter().enumerate() {
        println!("{}\t{}\t{:.6}", i + 1, r.id, r.score);
    }
    Ok(())
}

fn cmd_harmonize(common: &Common, source: &str) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let target = load_target(&cfg)?;
    let (scard, stable) = load_source(&cfg, source, &target.card.id)?;
    let adapter = make_adapter(&cfg, Some(transcript(&cfg)?))?;
    let hints = adapter
        .mapping_hints(&scard, &target.card)
        .map_err(at_stage("hints", Some(&scard.id)))?;
    let h = harmonize_candidate(
        (&scard, &stable),
        (&target.card, &target.splits.dev),
        hints,
        &cfg.search_config(),
        &cfg.harmonize_settings(),
    )
    .map_err(at_stage("harmonize", Some(&scard.id)))?;
    let out = output_dir(&cfg)?;
    let report_path = out.join("harmonization.txt");
    let mapping_path = out.join(MAPPING_FILE);
    fs::write(&report_path, h.report.to_text()).map_err(io_failure(&report_path))?;
    fs::write(&mapping_path, write_mapping_file(&h.mapping, &h.class_map)).map_err(io_failure(&mapping_path))?;
    print!("{}", h.report.to_text());
    println!("mapping = {}", mapping_path.display());
    Ok(())
}

/// Source expressed in the target's columns through a saved mapping file.
fn replay_mapping(
    cfg: &PipelineConfig,
    source: &str,
    mapping: &Path,
) -> Result<(Target, DatasetCard, LabeledTable), Failure> {
    let target = load_target(cfg)?;
    let (scard, stable) = load_source(cfg, source, &target.card.id)?;
    let text = fs::read_to_string(mapping).map_err(io_failure(mapping))?;
    let (fm, class_map) = parse_mapping_file(&text).map_err(at_stage("mapping", Some(&scard.id)))?;
    if fm.source_id != scard.id || fm.target_id != target.card.id {
        log::warn!(
            "mapping file was written for {} -> {}, applying it to {} -> {}",
            fm.source_id,
            fm.target_id,
            scard.id,
            target.card.id
        );
    }
    let (harmonized, _) = harmonize_dataset(&stable, &target.splits.dev, &fm, &class_map, &cfg.harmonize_settings())
        .map_err(at_stage("harmonize", Some(&scard.id)))?;
    Ok((target, scard, harmonized))
}

fn outcome_text(source: &str, labels: &[String], o: &TransferOutcome) -> String {
    let mut w = KvWriter::new();
    w.entry("source", source).entry("alpha", o.alpha);
    for (prefix, m) in [("baseline", &o.baseline), ("transfer", &o.transfer)] {
        w.entry(&format!("{prefix}.accuracy"), format!("{:.6}", m.accuracy))
            .entry(&format!("{prefix}.macro_precision"), format!("{:.6}", m.macro_precision))
            .entry(&format!("{prefix}.macro_recall"), format!("{:.6}", m.macro_recall))
            .entry(&format!("{prefix}.macro_f1"), format!("{:.6}", m.macro_f1));
    }
    let mut out = w.finish();
    let _ = writeln!(out, "\n## baseline (target only)");
    out.push_str(&o.baseline.to_text(labels));
    let _ = writeln!(out, "\n## transfer");
    out.push_str(&o.transfer.to_text(labels));
    out.push_str(&o.transfer_log.to_text());
    out
}

fn cmd_transfer(common: &Common, source: &str, mapping: &Path, alpha: Option<f64>) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    if let Some(a) = alpha {
        cfg.transfer.alpha = a;
        cfg.alpha_grid = None;
    }
    let (target, scard, harmonized) = replay_mapping(&cfg, source, mapping)?;
    let outcome = transfer_stage(&harmonized, &target.splits, &cfg.transfer_config(), cfg.alpha_grid.as_deref())
        .map_err(at_stage("transfer", Some(&scard.id)))?;
    let text = outcome_text(&scard.id, &target.card.class_labels, &outcome);
    let path = output_dir(&cfg)?.join("transfer.txt");
    fs::write(&path, &text).map_err(io_failure(&path))?;
    print!("{text}");
    Ok(())
}

fn cmd_run(common: &Common) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let report = run_pipeline(&cfg)?;
    print!("{}", report.summary());
    Ok(())
}

fn cmd_sweep(common: &Common, source: &str, mapping: Option<&Path>, grid: Option<&str>) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let grid: Vec<f64> = match grid {
        Some(g) => split_list(g)
            .iter()
            .map(|v| v.parse().map_err(|_| failure("Usage", format!("bad alpha `{v}` in --grid"))))
            .collect::<Result<_, _>>()?,
        None => cfg.alpha_grid.clone().unwrap_or_else(|| DEFAULT_GRID.to_vec()),
    };
    let (target, scard, harmonized) = match mapping {
        Some(m) => replay_mapping(&cfg, source, m)?,
        None => {
            let target = load_target(&cfg)?;
            let (scard, stable) = load_source(&cfg, source, &target.card.id)?;
            let adapter = make_adapter(&cfg, Some(transcript(&cfg)?))?;
            let hints = adapter
                .mapping_hints(&scard, &target.card)
                .map_err(at_stage("hints", Some(&scard.id)))?;
            let h = harmonize_candidate(
                (&scard, &stable),
                (&target.card, &target.splits.dev),
                hints,
                &cfg.search_config(),
                &cfg.harmonize_settings(),
            )
            .map_err(at_stage("harmonize", Some(&scard.id)))?;
            (target, scard, h.harmonized)
        }
    };
    let z = Standardizer::fit(&target.splits.train);
    let result = alpha_sweep(
        &z.apply(&harmonized),
        &z.apply(&target.splits.train),
        &z.apply(&target.splits.val),
        &grid,
        &cfg.transfer_config(),
    )
    .map_err(at_stage("sweep", Some(&scard.id)))?;
    let mut text = format!("{:<8} {:>12} {:>12} {:>8}\n", "alpha", "accuracy", "macro_f1", "epochs");
    for e in &result.entries {
        let _ = writeln!(
            text,
            "{:<8} {:>12.6} {:>12.6} {:>8}",
            e.alpha,
            e.validation.accuracy,
            e.validation.macro_f1,
            e.log.epochs.len()
        );
    }
    let _ = writeln!(text, "best_alpha = {}", result.best_alpha);
    let path = output_dir(&cfg)?.join("sweep.txt");
    fs::write(&path, &text).map_err(io_failure(&path))?;
    print!("{text}");
    Ok(())
}

fn cmd_synth(common: &Common, distractors: usize, rows: usize) -> Result<(), Failure> {
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("demo"));
    let seed = common.seed.unwrap_or(0);
    let (target, twin) = twin_library(&out, seed, distractors, rows).map_err(io_failure(&out))?;
    let target_rel = target.strip_prefix(&out).unwrap_or(&target);
    let mut w = KvWriter::new();
    w.entry("library_dir", "library")
        .entry("target_card", target_rel.display())
        .entry("output_dir", "run")
        .entry("seed", seed)
        .entry("k", 5);
    let config = out.join("config.kv");
    fs::write(&config, w.finish()).map_err(io_failure(&config))?;
    println!("library with planted twin `{twin}` -> {}", out.display());
    println!("config -> {}", config.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Index(c) => cmd_index(c),
        Command::Retrieve { common, k } => cmd_retrieve(common, *k),
        Command::Harmonize { common, source } => cmd_harmonize(common, source),
        Command::Transfer {
            common,
            source,
            mapping,
            alpha,
        } => cmd_transfer(common, source, mapping, *alpha),
        Command::Run(c) => cmd_run(c),
        Command::Sweep {
            common,
            source,
            mapping,
            grid,
        } => cmd_sweep(common, source, mapping.as_deref(), grid.as_deref()),
        Command::Synth {
            common,
            distractors,
            rows,
        } => cmd_synth(common, *distractors, *rows),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let message = f.message.replace(['\n', '\r'], " ");
            eprintln!("error: kind={} message={}", f.kind, message);
            ExitCode::FAILURE
        }
    }
}
