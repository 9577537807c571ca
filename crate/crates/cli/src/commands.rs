use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use riskner::corpus::{
    build_vocab, parse_conll, serialize_conll, split_corpus, Corpus, CorpusError, Strictness, TagScheme,
};
use riskner::ingest::{
    dedupe_store, fetch_articles, read_store, to_pretokenized, Backoff, FieldMapping, QuerySpec, API_KEY_ENV,
};
use riskner::metrics::MetricsTable;
use riskner::persistence::{
    append_run_record, corpus_hash, load_checkpoint, read_json, save_checkpoint, write_atomic, write_json, RunRecord,
    SplitManifest,
};
use riskner::report::{emit_f1_chart, emit_results_table, fixed6};
use riskner::tagcodec::decode_spans;
use riskner::trainer::{build_model, evaluate as score, train_with, Dataset, TrainConfig};
use riskner::tuner::{run_grid, summarize, summary_csv, GridSpace, SweepOptions, TrialSetup, TrialStatus};

use crate::args::{
    ConfigArgs, DataArgs, EvaluateArgs, IngestArgs, ReportArgs, SplitArgs, TrainArgs, TuneArgs, ValidateArgs,
};
use crate::transport::UreqTransport;

/// A bad combination of arguments that clap cannot see; exits with 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// What `evaluate --out` writes and `report` reads.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: String,
    pub metrics: MetricsTable,
}

fn print_resolved(value: serde_json::Value) {
    println!("resolved config: {value}");
}

fn scheme_from(types: &Option<Vec<String>>) -> Result<TagScheme> {
    match types {
        Some(t) => TagScheme::new(t).map_err(|e| UsageError(format!("--entity-types: {e}")).into()),
        None => Ok(TagScheme::default()),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_corpus(path: &Path, scheme: &TagScheme) -> Result<Corpus> {
    let parsed = parse_conll(&read_text(path)?, scheme, Strictness::Lenient)
        .with_context(|| format!("parsing {}", path.display()))?;
    for w in &parsed.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(parsed.corpus)
}

fn print_metrics(table: &MetricsTable) {
    println!("{:<10} {:>10} {:>10} {:>10}", "category", "precision", "recall", "f1");
    for (cat, p) in table.categories.iter().zip(&table.rows) {
        println!(
            "{cat:<10} {:>10} {:>10} {:>10}",
            fixed6(p.precision),
            fixed6(p.recall),
            fixed6(p.f1)
        );
    }
    let a = &table.average;
    println!(
        "{:<10} {:>10} {:>10} {:>10}",
        "Average",
        fixed6(a.precision),
        fixed6(a.recall),
        fixed6(a.f1)
    );
}

pub fn ingest(a: IngestArgs) -> Result<()> {
    let mapping: FieldMapping = match &a.mapping {
        Some(p) => read_json(p)?,
        None => FieldMapping::default(),
    };
    let query = QuerySpec {
        keywords: a.keywords.clone(),
        from: a.from,
        to: a.to,
        page_size: a.page_size as usize,
        max_articles: a.max_articles as usize,
    };
    print_resolved(json!({
        "verb": "ingest",
        "keywords": query.keywords,
        "from": query.from.to_string(),
        "to": query.to.to_string(),
        "page_size": query.page_size,
        "max_articles": query.max_articles,
        "endpoint": mapping.endpoint,
        "store": a.store,
    }));
    let key = std::env::var(API_KEY_ENV).map_err(|_| anyhow::anyhow!("{API_KEY_ENV} is not set"))?;
    let mut transport = UreqTransport::new();
    let report = fetch_articles(
        &query,
        &key,
        &mapping,
        &mut transport,
        Backoff::default(),
        &mut std::thread::sleep,
    )?;
    for (url, reason) in &report.dropped {
        log::warn!("skipped {url}: {reason}");
    }
    let stored = dedupe_store(&report.articles, &a.store)?;
    println!(
        "fetched {} articles in {} requests ({} retries, {} skipped); {} new, {} duplicates",
        report.articles.len(),
        report.requests,
        report.retries,
        report.dropped.len(),
        stored.added,
        stored.duplicates
    );
    if let Some(out) = &a.conll {
        let sentences = read_store(&a.store)?.iter().flat_map(to_pretokenized).collect();
        let text = serialize_conll(&Corpus::new(sentences), &TagScheme::default());
        write_atomic(out, text.as_bytes())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

pub fn validate(a: ValidateArgs) -> Result<()> {
    let scheme = scheme_from(&a.entity_types)?;
    print_resolved(json!({"verb": "validate", "corpus": a.corpus, "entity_types": scheme.entity_types()}));
    let parsed = parse_conll(&read_text(&a.corpus)?, &scheme, Strictness::Lenient)
        .with_context(|| format!("parsing {}", a.corpus.display()))?;
    let mut problems: Vec<String> = parsed.warnings.iter().map(|w| w.to_string()).collect();
    for (i, s) in parsed.corpus.sentences.iter().enumerate() {
        if let Err(e) = decode_spans(&s.tags()) {
            problems.push(format!("sentence {}: {e}", i + 1));
        }
    }
    let corpus = &parsed.corpus;
    println!("sentences: {}", corpus.len());
    println!("tokens: {}", corpus.token_count());
    for (cat, n) in scheme.entity_types().iter().zip(corpus.entity_counts(&scheme)) {
        println!("{cat}: {n}");
    }
    println!("entities: {}", corpus.entity_total(&scheme));
    for p in &problems {
        eprintln!("{}: {p}", a.corpus.display());
    }
    if !problems.is_empty() {
        bail!("{} problem(s) in {}", problems.len(), a.corpus.display());
    }
    Ok(())
}

pub fn split(a: SplitArgs) -> Result<()> {
    let ratios: [f64; 3] = a
        .ratios
        .as_slice()
        .try_into()
        .map_err(|_| UsageError(format!("--ratios needs exactly three values, got {}", a.ratios.len())))?;
    let scheme = scheme_from(&a.entity_types)?;
    print_resolved(json!({
        "verb": "split",
        "corpus": a.corpus,
        "ratios": ratios,
        "seed": a.seed,
        "out_dir": a.out_dir,
    }));
    let corpus = load_corpus(&a.corpus, &scheme)?;
    let set = split_corpus(&corpus, ratios, a.seed).map_err(|e| match e {
        CorpusError::InvalidRatios(_) => anyhow::Error::new(UsageError(format!("--ratios: {e}"))),
        other => other.into(),
    })?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for (name, part) in [
        ("train", &set.train),
        ("validation", &set.validation),
        ("test", &set.test),
    ] {
        let path = a.out_dir.join(format!("{name}.conll"));
        write_atomic(&path, serialize_conll(part, &scheme).as_bytes())?;
        println!("{name}: {} sentences -> {}", part.len(), path.display());
    }
    let manifest = SplitManifest::from_split(&set, corpus_hash(&corpus, &scheme), &scheme);
    write_json(&a.out_dir.join("split.json"), &manifest)?;
    let [tr, va, te] = manifest.entity_totals;
    println!("entities: train {tr}, validation {va}, test {te}");
    Ok(())
}

/// Defaults, then the config file, then flags.
fn resolve_config(h: &ConfigArgs, epochs: Option<u64>, seed: u64) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &h.config {
        cfg.apply_file(&read_text(path)?)
            .with_context(|| format!("in {}", path.display()))?;
    }
    if let Some(v) = h.lr {
        cfg.lr = v;
    }
    if let Some(v) = h.batch_size {
        cfg.batch_size = v as usize;
    }
    if let Some(v) = h.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = h.optimizer {
        cfg.optimizer = v;
    }
    if let Some(v) = h.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = h.dropout {
        cfg.dropout_rate = v;
    }
    if let Some(v) = h.max_len {
        cfg.max_len = v as usize;
    }
    if let Some(v) = h.grad_clip {
        cfg.grad_clip = v.0;
    }
    if let Some(v) = epochs {
        cfg.epochs = v as usize;
    }
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

struct Prepared {
    scheme: TagScheme,
    train_corpus: Corpus,
    vocab: riskner::Vocabulary,
    train: Dataset,
    validation: Dataset,
}

fn prepare(d: &DataArgs, max_len: usize) -> Result<Prepared> {
    let scheme = scheme_from(&d.entity_types)?;
    let train_corpus = load_corpus(&d.train, &scheme)?;
    let validation_corpus = load_corpus(&d.validation, &scheme)?;
    let vocab = build_vocab(&train_corpus, d.min_freq, d.max_vocab);
    let tok = d.tokenization.into();
    let train = Dataset::encode(&train_corpus, &vocab, max_len, tok)?;
    let validation = Dataset::encode(&validation_corpus, &vocab, max_len, tok)?;
    let dropped = train.dropped_entities() + validation.dropped_entities();
    if dropped > 0 {
        log::warn!("{dropped} entities cut off by max_len {max_len}");
    }
    Ok(Prepared {
        scheme,
        train_corpus,
        vocab,
        train,
        validation,
    })
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.hyper, a.epochs, a.seed)?;
    print_resolved(json!({
        "verb": "train",
        "train": a.data.train,
        "validation": a.data.validation,
        "tokenization": format!("{:?}", a.data.tokenization).to_lowercase(),
        "min_freq": a.data.min_freq,
        "max_vocab": a.data.max_vocab,
        "config": cfg,
        "out": a.out,
    }));
    let p = prepare(&a.data, cfg.max_len)?;
    if p.train.is_empty() {
        bail!("training corpus {} is empty", a.data.train.display());
    }
    let mut model = build_model(&p.vocab, &p.scheme, &cfg)?;
    log::info!("{} parameters, vocabulary {}", model.num_parameters(), p.vocab.len());
    let history = train_with(&mut model, &p.train, &p.validation, &p.scheme, &cfg, |r| {
        println!(
            "epoch {:>3}  loss {:.6}  val macro-F1 {:.4}  ({:.2}s)",
            r.epoch + 1,
            r.train_loss,
            r.val_macro_f1,
            r.seconds
        )
    })?;
    let metrics = score(&model, &p.validation, &p.scheme)?;
    save_checkpoint(&model, &p.vocab, &p.scheme, &a.out)?;
    println!("final loss {:.6}", history.final_loss().unwrap_or(f64::NAN));
    print_metrics(&metrics);
    println!("checkpoint: {}", a.out.display());
    if let Some(ledger) = &a.runs {
        let record = RunRecord::new(cfg, corpus_hash(&p.train_corpus, &p.scheme), history, Some(metrics));
        append_run_record(&record, ledger)?;
        println!("run {} appended to {}", record.run_id, ledger.display());
    }
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let name = a
        .name
        .clone()
        .or_else(|| a.checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "run".into());
    print_resolved(json!({
        "verb": "evaluate",
        "checkpoint": a.checkpoint,
        "data": a.data,
        "tokenization": format!("{:?}", a.tokenization).to_lowercase(),
        "name": name,
    }));
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.data, &ckpt.scheme)?;
    let data = Dataset::encode(&corpus, &ckpt.vocab, ckpt.model.config().max_len, a.tokenization.into())?;
    let metrics = score(&ckpt.model, &data, &ckpt.scheme)?;
    print_metrics(&metrics);
    if let Some(out) = &a.out {
        write_json(out, &RunMetrics { run: name, metrics })?;
        println!("metrics: {}", out.display());
    }
    Ok(())
}

pub fn tune(a: TuneArgs) -> Result<()> {
    let space: GridSpace = match &a.grid {
        Some(p) => read_json(p)?,
        None => GridSpace::table5(),
    };
    space.validate().map_err(|e| UsageError(format!("--grid: {e}")))?;
    let base = resolve_config(&a.hyper, Some(a.epochs), a.seed)?;
    let workers = a
        .workers
        .map(|w| w as usize)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    print_resolved(json!({
        "verb": "tune",
        "grid": space,
        "combinations": space.size(),
        "base": base,
        "trial_epochs": a.epochs,
        "seed": a.seed,
        "workers": workers,
        "ledger": a.ledger,
        "summary": a.summary,
    }));
    let p = prepare(&a.data, base.max_len)?;
    let setup = TrialSetup {
        model_name: a.model_name.clone(),
        train: p.train,
        validation: p.validation,
        vocab: p.vocab,
        scheme: p.scheme,
        base,
    };
    let options = SweepOptions {
        trial_epochs: a.epochs as usize,
        seed: a.seed,
        workers,
        ledger: Some(a.ledger.clone()),
    };
    let outcome = run_grid(&space, &setup, &options)?;
    let count = |s| outcome.records.iter().filter(|r| r.status == s).count();
    println!(
        "{} trials run now, {} total: {} done, {} diverged, {} failed",
        outcome.executed.len(),
        outcome.records.len(),
        count(TrialStatus::Done),
        count(TrialStatus::Diverged),
        count(TrialStatus::Failed)
    );
    let csv = summary_csv(&summarize(&outcome.records, a.top_k)?);
    write_atomic(&a.summary, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    print_resolved(json!({"verb": "report", "metrics": a.metrics, "table": a.table, "chart": a.chart}));
    let runs: Vec<(String, MetricsTable)> = a
        .metrics
        .iter()
        .map(|p| read_json::<RunMetrics>(p).map(|m| (m.run, m.metrics)))
        .collect::<Result<_, _>>()?;
    let table = emit_results_table(&runs)?;
    let chart = emit_f1_chart(&runs)?;
    write_atomic(&a.table, table.as_bytes())?;
    write_atomic(&a.chart, chart.as_bytes())?;
    print!("{table}");
    println!("table: {}\nchart: {}", a.table.display(), a.chart.display());
    Ok(())
}
