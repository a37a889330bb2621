//! Retrieval and generation metrics, collapse diagnostics and reports.

mod metrics;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{
    bleu4, collapse_diagnostics, ndcg_at_k, qrels_from_pairs, recall_at_k, retrieve, rouge_l,
    CollapseDiagnostics, Qrels, Ranking, RetrievalRun,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty retrieval run")]
    EmptyRun,
    #[error("k must be >= 1")]
    InvalidK,
    #[error("corpus dimension {corpus} differs from query dimension {query}")]
    DimensionMismatch { corpus: usize, query: usize },
    #[error("no qrels for query {0:?}")]
    MissingQrels(String),
    #[error("empty reference")]
    EmptyReference,
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("metric {0} is not finite")]
    NonFinite(String),
}

/// Revision string stamped into reports.
pub const REVISION: &str = concat!("lbr-", env!("CARGO_PKG_VERSION"));

/// Named scalar metrics plus the run metadata needed to reproduce them.
/// Wall-clock time is kept out of this record so reports from identical
/// runs are byte-identical; timings are written separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    pub revision: String,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new(label: impl Into<String>, seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            seed,
            config_hash: config_hash.into(),
            revision: REVISION.to_string(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: f64) -> Result<(), EvalError> {
        if !value.is_finite() {
            return Err(EvalError::NonFinite(name.to_string()));
        }
        self.metrics.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// Renders rows as aligned text columns: `key` first, then the union of
/// metric names in sorted order.
pub fn render_table(key: &str, rows: &[(String, &MetricReport)]) -> String {
    let mut names: Vec<&String> = rows.iter().flat_map(|(_, r)| r.metrics.keys()).collect();
    names.sort();
    names.dedup();
    let mut cells: Vec<Vec<String>> = vec![std::iter::once(key.to_string())
        .chain(names.iter().map(|n| n.to_string()))
        .collect()];
    for (k, r) in rows {
        cells.push(
            std::iter::once(k.clone())
                .chain(names.iter().map(|n| match r.metrics.get(*n) {
                    Some(v) => format!("{v:.4}"),
                    None => "-".to_string(),
                }))
                .collect(),
        );
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, w))| {
                if i == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
