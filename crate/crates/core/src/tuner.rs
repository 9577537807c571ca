//! Full-factorial grid search with a resumable JSON-lines trial ledger.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TagScheme, Vocabulary};
use crate::optim::OptimizerKind;
use crate::persistence::{append_jsonl, read_jsonl, PersistenceError};
use crate::report::csv_field;
use crate::trainer::{build_model, evaluate, train, Dataset, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum TunerError {
    #[error("grid axis {0} is empty")]
    EmptyAxis(&'static str),
    #[error("grid axis {0} contains duplicate values")]
    DuplicateValue(&'static str),
    #[error("no completed trials to summarize")]
    NoCompletedTrials,
    #[error("trial epochs must be at least 1")]
    NoEpochs,
    #[error("invalid grid value: {0}")]
    InvalidValue(String),
    #[error("thread pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Persistence(#[from] PersistenceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpace {
    pub lr: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub optimizer: Vec<OptimizerKind>,
}

impl GridSpace {
    /// The reference search space: 8 learning rates, 3 epsilons, 3 batch
    /// sizes and both optimizers.
    pub fn table5() -> Self {
        Self {
            lr: vec![1e-6, 5e-6, 1e-5, 3e-5, 5e-5, 1e-4, 5e-4, 1e-3],
            epsilon: vec![1e-7, 1e-8, 1e-9],
            batch_size: vec![16, 32, 64],
            optimizer: vec![OptimizerKind::Adam, OptimizerKind::AdamW],
        }
    }

    pub fn validate(&self) -> Result<(), TunerError> {
        fn axis<T: PartialEq>(name: &'static str, xs: &[T]) -> Result<(), TunerError> {
            if xs.is_empty() {
                return Err(TunerError::EmptyAxis(name));
            }
            for (i, a) in xs.iter().enumerate() {
                if xs[..i].contains(a) {
                    return Err(TunerError::DuplicateValue(name));
                }
            }
            Ok(())
        }
        axis("lr", &self.lr)?;
        axis("epsilon", &self.epsilon)?;
        axis("batch_size", &self.batch_size)?;
        axis("optimizer", &self.optimizer)?;
        if let Some(x) = self
            .lr
            .iter()
            .chain(&self.epsilon)
            .find(|x| !(**x > 0.0 && x.is_finite()))
        {
            return Err(TunerError::InvalidValue(format!(
                "lr and epsilon must be positive, got {x}"
            )));
        }
        if self.batch_size.contains(&0) {
            return Err(TunerError::InvalidValue("batch size 0".into()));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.lr.len() * self.epsilon.len() * self.batch_size.len() * self.optimizer.len()
    }
}

/// Cartesian product with `lr` outermost and `optimizer` innermost, each
/// axis in list order. Other fields come from `base`.
pub fn enumerate_grid(space: &GridSpace, base: &TrainConfig) -> Result<Vec<TrainConfig>, TunerError> {
    space.validate()?;
    let mut out = Vec::with_capacity(space.size());
    for &lr in &space.lr {
        for &epsilon in &space.epsilon {
            for &batch_size in &space.batch_size {
                for &optimizer in &space.optimizer {
                    out.push(TrainConfig {
                        lr,
                        epsilon,
                        batch_size,
                        optimizer,
                        ..base.clone()
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Done,
    Diverged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub combo_id: usize,
    pub model: String,
    pub config: TrainConfig,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub efficiency_seconds: f64,
    pub status: TrialStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    /// Validation metrics of a done trial, for order-independent comparison.
    pub fn metrics(&self) -> (Option<f64>, Option<f64>, Option<f64>, TrialStatus) {
        (self.precision, self.recall, self.f1, self.status)
    }
}

/// Everything a trial needs besides its configuration.
#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub model_name: String,
    pub train: Dataset,
    pub validation: Dataset,
    pub vocab: Vocabulary,
    pub scheme: TagScheme,
    /// Supplies the non-grid fields (dropout, max_len, decay, clipping).
    pub base: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub trial_epochs: usize,
    pub seed: u64,
    pub workers: usize,
    pub ledger: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// One record per combo id, ascending.
    pub records: Vec<TrialRecord>,
    /// Combo ids trained by this invocation.
    pub executed: Vec<usize>,
}

/// Trains and validates one combination from a fresh model.
pub fn run_trial(setup: &TrialSetup, combo_id: usize, config: TrainConfig) -> TrialRecord {
    let started = Instant::now();
    let result = build_model(&setup.vocab, &setup.scheme, &config).and_then(|mut model| {
        train(&mut model, &setup.train, &Dataset::default(), &setup.scheme, &config)?;
        evaluate(&model, &setup.validation, &setup.scheme)
    });
    let efficiency_seconds = started.elapsed().as_secs_f64();
    let mut record = TrialRecord {
        combo_id,
        model: setup.model_name.clone(),
        config,
        precision: None,
        recall: None,
        f1: None,
        efficiency_seconds,
        status: TrialStatus::Done,
        error: None,
    };
    match result {
        Ok(table) => {
            record.precision = Some(table.average.precision);
            record.recall = Some(table.average.recall);
            record.f1 = Some(table.average.f1);
        }
        Err(TrainError::DivergedLoss { epoch, step }) => {
            record.status = TrialStatus::Diverged;
            record.error = Some(format!("loss diverged at epoch {epoch}, step {step}"));
        }
        Err(e) => {
            record.status = TrialStatus::Failed;
            record.error = Some(e.to_string());
        }
    }
    record
}

/// Runs every combination not already completed in the ledger. Done and
/// diverged records are kept; failed ones are retried.
pub fn run_grid(space: &GridSpace, setup: &TrialSetup, options: &SweepOptions) -> Result<SweepOutcome, TunerError> {
    if options.trial_epochs == 0 {
        return Err(TunerError::NoEpochs);
    }
    let base = TrainConfig {
        epochs: options.trial_epochs,
        seed: options.seed,
        ..setup.base.clone()
    };
    let configs = enumerate_grid(space, &base)?;

    let mut finished: BTreeMap<usize, TrialRecord> = BTreeMap::new();
    if let Some(path) = &options.ledger {
        for r in read_jsonl::<TrialRecord>(path)? {
            if r.combo_id < configs.len() && r.status != TrialStatus::Failed && r.config == configs[r.combo_id] {
                finished.insert(r.combo_id, r);
            }
        }
    }
    let pending: Vec<usize> = (0..configs.len()).filter(|i| !finished.contains_key(i)).collect();
    log::info!(
        "grid: {} combos, {} already complete, {} to run on {} workers",
        configs.len(),
        finished.len(),
        pending.len(),
        options.workers.max(1)
    );

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.max(1))
        .build()
        .map_err(|e| TunerError::Pool(e.to_string()))?;
    let fresh: Vec<Result<TrialRecord, TunerError>> = pool.install(|| {
        pending
            .par_iter()
            .map(|&id| {
                let record = run_trial(setup, id, configs[id].clone());
                log::info!(
                    "combo {id}: {:?} f1={:?} ({:.2}s)",
                    record.status,
                    record.f1,
                    record.efficiency_seconds
                );
                if let Some(path) = &options.ledger {
                    append_jsonl(path, &record)?;
                }
                Ok(record)
            })
            .collect()
    });
    for r in fresh {
        let r = r?;
        finished.insert(r.combo_id, r);
    }
    Ok(SweepOutcome {
        records: finished.into_values().collect(),
        executed: pending,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub record: TrialRecord,
    /// Marks the worst done trial of its model family.
    pub worst: bool,
}

fn rank(a: &TrialRecord, b: &TrialRecord) -> std::cmp::Ordering {
    let fa = a.f1.unwrap_or(f64::NEG_INFINITY);
    let fb = b.f1.unwrap_or(f64::NEG_INFINITY);
    fb.total_cmp(&fa)
        .then(a.efficiency_seconds.total_cmp(&b.efficiency_seconds))
        .then(a.combo_id.cmp(&b.combo_id))
}

/// Per model family (in first-appearance order): the top `k` done trials by
/// F1, then the worst done trial flagged. The worst row is never repeated.
pub fn summarize(records: &[TrialRecord], k: usize) -> Result<Vec<SummaryRow>, TunerError> {
    let mut families: Vec<&str> = Vec::new();
    for r in records {
        if r.status == TrialStatus::Done && !families.contains(&r.model.as_str()) {
            families.push(&r.model);
        }
    }
    if families.is_empty() {
        return Err(TunerError::NoCompletedTrials);
    }
    let mut rows = Vec::new();
    for family in families {
        let mut done: Vec<&TrialRecord> = records
            .iter()
            .filter(|r| r.status == TrialStatus::Done && r.model == family)
            .collect();
        done.sort_by(|a, b| rank(a, b));
        let worst = *done.last().expect("family has a done trial");
        let top = &done[..k.min(done.len())];
        let mut seen = HashSet::new();
        for r in top {
            seen.insert(r.combo_id);
            rows.push(SummaryRow {
                record: (*r).clone(),
                worst: r.combo_id == worst.combo_id,
            });
        }
        if !seen.contains(&worst.combo_id) {
            rows.push(SummaryRow {
                record: worst.clone(),
                worst: true,
            });
        }
    }
    Ok(rows)
}

pub const SUMMARY_HEADER: &str = "model,lr,batch,epsilon,optimizer,precision,recall,f1,efficiency_s,combo_id,flag";

/// Table-style CSV of summary rows.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    let num = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
    for row in rows {
        let r = &row.record;
        out.push_str(&format!(
            "{},{:e},{},{:e},{},{},{},{},{:.3},{},{}\n",
            csv_field(&r.model),
            r.config.lr,
            r.config.batch_size,
            r.config.epsilon,
            r.config.optimizer,
            num(r.precision),
            num(r.recall),
            num(r.f1),
            r.efficiency_seconds,
            r.combo_id,
            if row.worst { "worst" } else { "" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: usize, f1: f64, secs: f64) -> TrialRecord {
        TrialRecord {
            combo_id: id,
            model: "desk".into(),
            config: TrainConfig::default(),
            precision: Some(f1),
            recall: Some(f1),
            f1: Some(f1),
            efficiency_seconds: secs,
            status: TrialStatus::Done,
            error: None,
        }
    }

    #[test]
    fn table5_has_144_points() {
        let g = enumerate_grid(&GridSpace::table5(), &TrainConfig::default()).unwrap();
        assert_eq!(g.len(), 144);
    }

    #[test]
    fn singleton_and_small_products() {
        let one = GridSpace {
            lr: vec![1e-3],
            epsilon: vec![1e-8],
            batch_size: vec![8],
            optimizer: vec![OptimizerKind::Adam],
        };
        assert_eq!(enumerate_grid(&one, &TrainConfig::default()).unwrap().len(), 1);
        let two = GridSpace {
            lr: vec![1e-3, 1e-4],
            optimizer: vec![OptimizerKind::Adam, OptimizerKind::AdamW],
            ..one
        };
        let g = enumerate_grid(&two, &TrainConfig::default()).unwrap();
        let got: Vec<(f64, OptimizerKind)> = g.iter().map(|c| (c.lr, c.optimizer)).collect();
        assert_eq!(
            got,
            vec![
                (1e-3, OptimizerKind::Adam),
                (1e-3, OptimizerKind::AdamW),
                (1e-4, OptimizerKind::Adam),
                (1e-4, OptimizerKind::AdamW)
            ]
        );
    }

    #[test]
    fn invalid_spaces() {
        let mut s = GridSpace::table5();
        s.epsilon.clear();
        assert!(matches!(s.validate(), Err(TunerError::EmptyAxis("epsilon"))));
        let mut s = GridSpace::table5();
        s.batch_size.push(16);
        assert!(matches!(s.validate(), Err(TunerError::DuplicateValue("batch_size"))));
    }

    #[test]
    fn grid_space_json() {
        let s: GridSpace = serde_json::from_str(
            r#"{"lr":[1e-3],"epsilon":[1e-8,1e-9],"batch_size":[16],"optimizer":["Adam","AdamW"]}"#,
        )
        .unwrap();
        assert_eq!(s.size(), 4);
    }

    #[test]
    fn summarize_top_k_plus_worst() {
        let recs = vec![record(0, 0.81, 1.0), record(1, 0.79, 1.0), record(2, 0.14, 1.0)];
        let rows = summarize(&recs, 2).unwrap();
        let f: Vec<(f64, bool)> = rows.iter().map(|r| (r.record.f1.unwrap(), r.worst)).collect();
        assert_eq!(f, vec![(0.81, false), (0.79, false), (0.14, true)]);
    }

    #[test]
    fn summarize_ties_and_clamp() {
        let recs = vec![record(0, 0.5, 3.0), record(1, 0.5, 1.0), record(2, 0.5, 2.0)];
        let rows = summarize(&recs, 10).unwrap();
        let ids: Vec<usize> = rows.iter().map(|r| r.record.combo_id).collect();
        assert_eq!(ids, vec![1, 2, 0]);
        assert_eq!(rows.iter().filter(|r| r.worst).count(), 1);
        assert!(rows[2].worst);
    }

    #[test]
    fn summarize_needs_done_trials() {
        let mut r = record(0, 0.0, 0.0);
        r.status = TrialStatus::Diverged;
        r.f1 = None;
        assert!(matches!(summarize(&[r], 3), Err(TunerError::NoCompletedTrials)));
    }

    #[test]
    fn csv_layout() {
        let rows = summarize(&[record(0, 0.9, 1.5), record(1, 0.1, 2.0)], 1).unwrap();
        let csv = summary_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SUMMARY_HEADER);
        assert_eq!(lines[1], "desk,3e-5,32,1e-8,AdamW,0.900000,0.900000,0.900000,1.500,0,");
        assert!(lines[2].ends_with(",1,worst"));
    }
}
