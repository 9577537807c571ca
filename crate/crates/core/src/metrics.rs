//! Entity-level precision, recall and F1 with macro averaging.
//!
//! A prediction is a true positive only when a gold span in the same
//! sentence has the identical category, start and end. Any `0/0` ratio
//! evaluates to 0.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TagScheme;
use crate::tagcodec::EntitySpan;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("gold covers {gold} sentences but predictions cover {pred}")]
    SentenceIdMismatch { gold: usize, pred: usize },
    #[error("span category {0} is outside the scheme")]
    UnknownCategory(usize),
    #[error("cannot aggregate an empty table")]
    EmptyTable,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Per-category counters, indexed by scheme category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub per_category: Vec<Counts>,
}

impl MatchCounts {
    pub fn new(categories: usize) -> Self {
        Self {
            per_category: vec![Counts::default(); categories],
        }
    }

    pub fn merge(&mut self, other: &MatchCounts) {
        for (a, b) in self.per_category.iter_mut().zip(&other.per_category) {
            *a += *b;
        }
    }

    /// Adds one sentence's exact-match counts.
    pub fn add_sentence(&mut self, gold: &[EntitySpan], pred: &[EntitySpan]) -> Result<(), MetricsError> {
        let n = self.per_category.len();
        for s in gold.iter().chain(pred) {
            if s.category >= n {
                return Err(MetricsError::UnknownCategory(s.category));
            }
        }
        let gold_set: HashSet<&EntitySpan> = gold.iter().collect();
        let pred_set: HashSet<&EntitySpan> = pred.iter().collect();
        for p in &pred_set {
            let c = &mut self.per_category[p.category];
            if gold_set.contains(p) {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
        for g in gold_set.difference(&pred_set) {
            self.per_category[g.category].fn_ += 1;
        }
        Ok(())
    }
}

pub fn count_matches(
    gold: &[Vec<EntitySpan>],
    pred: &[Vec<EntitySpan>],
    categories: usize,
) -> Result<MatchCounts, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::SentenceIdMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let mut counts = MatchCounts::new(categories);
    for (g, p) in gold.iter().zip(pred) {
        counts.add_sentence(g, p)?;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall)
}

pub fn prf(c: Counts) -> Prf {
    let precision = ratio(c.tp as f64, (c.tp + c.fp) as f64);
    let recall = ratio(c.tp as f64, (c.tp + c.fn_) as f64);
    Prf {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

/// Column-wise arithmetic mean; the F1 column is averaged, not recomputed.
pub fn aggregate(rows: &[Prf]) -> Result<Prf, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyTable);
    }
    let n = rows.len() as f64;
    Ok(Prf {
        precision: rows.iter().map(|r| r.precision).sum::<f64>() / n,
        recall: rows.iter().map(|r| r.recall).sum::<f64>() / n,
        f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
    })
}

/// Per-category rows in scheme order plus the macro average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub categories: Vec<String>,
    pub rows: Vec<Prf>,
    pub average: Prf,
}

impl MetricsTable {
    pub fn from_rows(categories: Vec<String>, rows: Vec<Prf>) -> Result<Self, MetricsError> {
        let average = aggregate(&rows)?;
        Ok(Self {
            categories,
            rows,
            average,
        })
    }

    pub fn from_counts(scheme: &TagScheme, counts: &MatchCounts) -> Result<Self, MetricsError> {
        let rows = counts.per_category.iter().map(|&c| prf(c)).collect();
        Self::from_rows(scheme.entity_types().to_vec(), rows)
    }

    pub fn macro_f1(&self) -> f64 {
        self.average.f1
    }

    pub fn row(&self, category: &str) -> Option<&Prf> {
        self.categories
            .iter()
            .position(|c| c == category)
            .map(|i| &self.rows[i])
    }
}
