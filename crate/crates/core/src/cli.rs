//! The `embedkit` command line.
//!
//! Exit codes: 0 on success, 1 on runtime or data errors, 2 on usage errors.
//! `EMBEDKIT_THREADS` caps the worker pool (0 or unset = automatic).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;
use serde_json::json;

use crate::classifier::{self, ClassifierParams, TrainConfig};
use crate::dataset::{ClassCatalog, DatasetManifest, Split};
use crate::metrics::{classification_map, EvalReport};
use crate::retrieval::{self, BenchmarkConfig, Corpus, PipelineMode};
use crate::store::{write_atomic, EmbeddingStore};
use crate::synthetic::{self, SynthConfig};

pub const THREADS_ENV: &str = "EMBEDKIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "embedkit", version, about = "Classification and retrieval over precomputed embeddings")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus (images.cemb, texts.cemb, manifest.jsonl)
    Synth(SynthArgs),
    /// L2-normalize an embedding store
    Normalize(NormalizeArgs),
    /// Validate a store against a manifest (and optionally class texts/descriptions)
    Check(CheckArgs),
    /// Train the shallow classifier on the train split
    Train(TrainArgs),
    /// Evaluate a trained classifier: accuracy and macro mAP
    EvalClassify(EvalClassifyArgs),
    /// Zero-shot classification against class text embeddings
    ZeroShot(ZeroShotArgs),
    /// Run a retrieval pipeline over query/index splits
    Retrieve(RetrieveArgs),
    /// Compare the metrics of two evaluation reports
    ReportDiff(ReportDiffArgs),
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Write the JSON report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print a human-readable table to stdout
    #[arg(long)]
    pretty: bool,
    /// Write one `unit,ap` row per evaluated unit to this file
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    classes: u64,
    #[arg(long, default_value_t = 50)]
    train_per_class: usize,
    #[arg(long, default_value_t = 10)]
    val_per_class: usize,
    #[arg(long, default_value_t = 10)]
    test_per_class: usize,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(2..))]
    dim: u64,
    /// Noise scale for both images and texts (overridden by the specific flags)
    #[arg(long, value_parser = non_negative_f64)]
    sigma: Option<f64>,
    #[arg(long, value_parser = non_negative_f64)]
    sigma_image: Option<f64>,
    #[arg(long, value_parser = non_negative_f64)]
    sigma_text: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct NormalizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    texts: Option<PathBuf>,
    #[arg(long)]
    descriptions: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-epoch JSON report (stdout if omitted)
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: u64,
    #[arg(long, default_value_t = 1e-4, value_parser = positive_f64)]
    lr: f64,
    #[arg(long, default_value_t = 4096, value_parser = clap::value_parser!(u64).range(1..))]
    hidden: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split used for per-epoch validation accuracy
    #[arg(long, default_value = "val")]
    val_split: SplitArg,
}

#[derive(Debug, Args)]
struct EvalClassifyArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: SplitArg,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct ZeroShotArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    texts: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: SplitArg,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Image store holding the queries (and the index unless --index-store is given)
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    index_store: Option<PathBuf>,
    /// Class text store (required by every mode except visual)
    #[arg(long)]
    texts: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = retrieval::DEFAULT_RERANK_DEPTH as u64, value_parser = clap::value_parser!(u64).range(1..))]
    rerank_depth: u64,
    #[arg(long, default_value = "val")]
    query_split: SplitArg,
    #[arg(long, default_value = "test")]
    index_split: SplitArg,
    /// Also search store entries the manifest does not list
    #[arg(long)]
    include_orphans: bool,
    /// Export ranked lists as JSON Lines
    #[arg(long)]
    rankings: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct ReportDiffArgs {
    a: PathBuf,
    b: PathBuf,
    /// Largest absolute difference still counted as equal
    #[arg(long, default_value_t = 0.0, value_parser = non_negative_f64)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Visual,
    ClassText,
    ClassTextRerank,
    Oracle,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn non_negative_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err("must be a finite non-negative number".into())
    }
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v = non_negative_f64(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err("must be positive".into())
    }
}

enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = configure_threads().and_then(|()| dispatch(cli.command));
    match outcome {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a non-negative integer, got {raw:?}")))?;
    if n > 0 {
        // A pool may already exist when embedded in a larger process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Normalize(a) => cmd_normalize(a),
        Command::Check(a) => cmd_check(a),
        Command::Train(a) => cmd_train(a),
        Command::EvalClassify(a) => cmd_eval_classify(a),
        Command::ZeroShot(a) => cmd_zero_shot(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::ReportDiff(a) => cmd_report_diff(a),
    }
}

fn load_store(path: &Path) -> anyhow::Result<EmbeddingStore> {
    EmbeddingStore::load(path).with_context(|| format!("loading store {}", path.display()))
}

fn load_manifest(path: &Path) -> anyhow::Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))
        .with_context(|| format!("writing {}", path.display()))
}

fn emit_json(value: &serde_json::Value, out: Option<&Path>) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit_report(report: &EvalReport, output: &OutputArgs) -> anyhow::Result<()> {
    if let Some(csv) = &output.csv {
        write_text(csv, &report.to_csv()?)?;
    }
    let json = report.to_json_pretty();
    match (&output.out, output.pretty) {
        (Some(p), _) => write_text(p, &json)?,
        (None, false) => print!("{json}"),
        (None, true) => {}
    }
    if output.pretty {
        print!("{}", report.render_pretty());
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let cfg = SynthConfig {
        num_classes: a.classes as usize,
        train_per_class: a.train_per_class,
        val_per_class: a.val_per_class,
        test_per_class: a.test_per_class,
        dim: a.dim as usize,
        sigma_image: a.sigma_image.or(a.sigma).unwrap_or(0.1),
        sigma_text: a.sigma_text.or(a.sigma).unwrap_or(0.1),
        seed: a.seed,
    };
    let corpus = synthetic::generate(&cfg)?;
    corpus.write_to_dir(&a.out)?;
    let summary = json!({
        "generator": synthetic::GENERATOR,
        "config": cfg,
        "files": [synthetic::IMAGES_FILE, synthetic::TEXTS_FILE, synthetic::MANIFEST_FILE],
        "images": corpus.images.len(),
        "classes": corpus.texts.len(),
    });
    emit_json(&summary, None)?;
    Ok(())
}

fn cmd_normalize(a: NormalizeArgs) -> CliResult {
    let store = load_store(&a.input)?;
    let normalized = store.l2_normalize()?;
    normalized.save(&a.output)?;
    emit_json(
        &json!({
            "input": a.input,
            "output": a.output,
            "count": normalized.len(),
            "dim": normalized.dim(),
        }),
        None,
    )?;
    Ok(())
}

fn cmd_check(a: CheckArgs) -> CliResult {
    let store = load_store(&a.store)?;
    let manifest = load_manifest(&a.manifest)?;
    let alignment = manifest.check_alignment(&store);
    let mut findings = !alignment.is_aligned();
    let mut report = json!({
        "store": {
            "dim": store.dim(),
            "count": store.len(),
            "modality": store.modality(),
            "normalized": store.is_normalized(),
        },
        "manifest": {
            "items": manifest.items().len(),
            "classes": manifest.num_classes(),
            "train": manifest.split_view(Split::Train).len(),
            "val": manifest.split_view(Split::Val).len(),
            "test": manifest.split_view(Split::Test).len(),
        },
        "alignment": alignment,
    });
    if let Some(t) = &a.texts {
        let texts = load_store(t)?;
        let ta = manifest.check_class_alignment(&texts);
        findings |= !ta.is_aligned() || texts.dim() != store.dim();
        report["text_alignment"] = serde_json::to_value(&ta).map_err(anyhow::Error::from)?;
        report["text_dim"] = texts.dim().into();
    }
    if let Some(d) = &a.descriptions {
        let verdict = ClassCatalog::load(d).and_then(|c| c.validate_against(&manifest));
        findings |= verdict.is_err();
        report["descriptions"] = match verdict {
            Ok(()) => json!("ok"),
            Err(e) => json!(e.to_string()),
        };
    }
    report["ok"] = (!findings).into();
    emit_json(&report, a.out.as_deref())?;
    if findings {
        return Err(CliError::Runtime(anyhow!("check found problems")));
    }
    Ok(())
}

fn labelled<'a>(
    manifest: &DatasetManifest,
    store: &'a EmbeddingStore,
    split: Split,
) -> anyhow::Result<Vec<(&'a [f32], usize)>> {
    manifest
        .split_view(split)
        .into_iter()
        .map(|it| {
            let x = store
                .get(&it.id)
                .ok_or_else(|| anyhow!("item {:?} missing from store", it.id))?;
            let y = manifest.class_index(&it.class_id).expect("manifest class");
            Ok((x, y))
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let store = load_store(&a.store)?;
    let manifest = load_manifest(&a.manifest)?;
    let val_split = Split::from(a.val_split);
    let missing: Vec<&str> = manifest
        .items()
        .iter()
        .filter(|it| matches!(it.split, Split::Train) || it.split == val_split)
        .filter(|it| !store.contains(&it.id))
        .map(|it| it.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Runtime(anyhow!(
            "store is missing {} manifest ids: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    let train_set = labelled(&manifest, &store, Split::Train)?;
    if train_set.is_empty() {
        return Err(CliError::Runtime(anyhow!("train split is empty")));
    }
    let val_set = labelled(&manifest, &store, val_split)?;
    let cfg = TrainConfig {
        epochs: a.epochs as usize,
        batch_size: a.batch_size as usize,
        learning_rate: a.lr,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let p0 = ClassifierParams::init(store.dim(), a.hidden as usize, manifest.num_classes(), a.seed);
    let (params, epochs) = match classifier::train(&p0, &cfg, &train_set, Some(&val_set)) {
        Ok(r) => r,
        Err(crate::Error::Diverged { epoch, last_good }) => {
            last_good.save(&a.checkpoint)?;
            return Err(CliError::Runtime(anyhow!(
                "training diverged at epoch {epoch}; last good parameters written to {}",
                a.checkpoint.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    params.save(&a.checkpoint)?;
    let report = json!({
        "config": {
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "lr": cfg.learning_rate,
            "hidden": a.hidden,
            "seed": cfg.seed,
            "input_dim": store.dim(),
            "num_classes": manifest.num_classes(),
            "optimizer": {
                "name": "adam",
                "beta1": cfg.beta1,
                "beta2": cfg.beta2,
                "eps": cfg.adam_eps,
            },
            "val_split": val_split,
            "generator": synthetic::GENERATOR,
        },
        "epochs": epochs,
    });
    emit_json(&report, a.report.as_deref())?;
    Ok(())
}

fn cmd_eval_classify(a: EvalClassifyArgs) -> CliResult {
    let store = load_store(&a.store)?;
    let manifest = load_manifest(&a.manifest)?;
    let params = ClassifierParams::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    if params.num_classes() != manifest.num_classes() {
        return Err(CliError::Runtime(anyhow!(
            "checkpoint has {} classes, manifest has {}",
            params.num_classes(),
            manifest.num_classes()
        )));
    }
    let split = Split::from(a.split);
    let items = manifest.split_view(split);
    if items.is_empty() {
        return Err(CliError::Runtime(anyhow!("split {split} is empty")));
    }
    let ids: Vec<&str> = items.iter().map(|it| it.id.as_str()).collect();
    let probs = classifier::predict(&params, &store, &ids)?;
    let hits = items
        .iter()
        .filter(|it| probs[it.id.as_str()].predicted() == manifest.class_index(&it.class_id).unwrap())
        .count();
    let scores: IndexMap<String, Vec<f64>> = probs
        .into_iter()
        .map(|(id, p)| (id, p.probs.iter().map(|&v| v as f64).collect()))
        .collect();
    let mut report = classification_map(&scores, &manifest)?;
    report.mode = "classifier".into();
    report.accuracy = Some(hits as f64 / items.len() as f64);
    report.config = json!({
        "split": split,
        "num_items": items.len(),
        "input_dim": params.input_dim(),
        "hidden": params.hidden_dim(),
    });
    emit_report(&report, &a.output)?;
    Ok(())
}

fn cmd_zero_shot(a: ZeroShotArgs) -> CliResult {
    let Some(texts_path) = &a.texts else {
        return Err(CliError::Usage("zero-shot needs --texts".into()));
    };
    let store = load_store(&a.store)?;
    let texts = load_store(texts_path)?;
    let manifest = load_manifest(&a.manifest)?;
    let report = retrieval::zero_shot_benchmark(&store, &texts, &manifest, a.split.into())?;
    emit_report(&report, &a.output)?;
    Ok(())
}

fn cmd_retrieve(a: RetrieveArgs) -> CliResult {
    let mode = match a.mode {
        ModeArg::Visual => PipelineMode::Visual,
        ModeArg::ClassText => PipelineMode::ClassText,
        ModeArg::ClassTextRerank => PipelineMode::ClassTextRerank {
            depth: a.rerank_depth as usize,
        },
        ModeArg::Oracle => PipelineMode::OracleText,
    };
    if mode.needs_text() && a.texts.is_none() {
        return Err(CliError::Usage(format!("--mode {mode} needs --texts")));
    }
    let queries = load_store(&a.store)?;
    let index = a.index_store.as_deref().map(load_store).transpose()?;
    let texts = a.texts.as_deref().map(load_store).transpose()?;
    let manifest = load_manifest(&a.manifest)?;
    let corpus = Corpus {
        queries: &queries,
        index: index.as_ref().unwrap_or(&queries),
        class_texts: texts.as_ref(),
        manifest: &manifest,
    };
    let cfg = BenchmarkConfig {
        query_split: a.query_split.into(),
        index_split: a.index_split.into(),
        include_orphans: a.include_orphans,
    };
    let (report, lists) = retrieval::run_benchmark(mode, corpus, &cfg)?;
    if let Some(path) = &a.rankings {
        retrieval::save_rankings(&lists, path)?;
    }
    emit_report(&report, &a.output)?;
    Ok(())
}

fn cmd_report_diff(a: ReportDiffArgs) -> CliResult {
    let read = |p: &Path| -> anyhow::Result<EvalReport> {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing report {}", p.display()))
    };
    let ra = read(&a.a)?;
    let rb = read(&a.b)?;
    let diff = diff_reports(&ra, &rb, a.tolerance);
    emit_json(&diff, a.out.as_deref())?;
    if diff["equal"] == json!(true) {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow!("reports differ")))
    }
}

/// Metric-level comparison; mode and config echoes are ignored.
fn diff_reports(a: &EvalReport, b: &EvalReport, tol: f64) -> serde_json::Value {
    let close = |x: f64, y: f64| (x - y).abs() <= tol;
    let mut changed = Vec::new();
    let mut only_a = Vec::new();
    for (unit, &ap) in &a.per_unit_ap {
        match b.per_unit_ap.get(unit) {
            Some(&bp) if close(ap, bp) => {}
            Some(&bp) => changed.push(json!({ "unit": unit, "a": ap, "b": bp })),
            None => only_a.push(unit.clone()),
        }
    }
    let only_b: Vec<&String> = b
        .per_unit_ap
        .keys()
        .filter(|u| !a.per_unit_ap.contains_key(*u))
        .collect();
    let accuracy_equal = match (a.accuracy, b.accuracy) {
        (Some(x), Some(y)) => close(x, y),
        (None, None) => true,
        _ => false,
    };
    let equal = close(a.map, b.map)
        && accuracy_equal
        && changed.is_empty()
        && only_a.is_empty()
        && only_b.is_empty()
        && a.skipped == b.skipped;
    json!({
        "equal": equal,
        "tolerance": tol,
        "map": { "a": a.map, "b": b.map, "delta": b.map - a.map },
        "accuracy": { "a": a.accuracy, "b": b.accuracy },
        "changed_units": changed,
        "only_in_a": only_a,
        "only_in_b": only_b,
    })
}
