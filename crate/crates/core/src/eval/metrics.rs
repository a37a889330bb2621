use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::train::EmbeddingMatrix;

/// Ranked passages for one query, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: String,
    pub hits: Vec<(String, f64)>,
}

pub type RetrievalRun = Vec<Ranking>;

/// Query id to the set of relevant passage ids.
pub type Qrels = BTreeMap<String, BTreeSet<String>>;

pub fn qrels_from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Qrels {
    let mut q = Qrels::new();
    for (query, passage) in pairs {
        q.entry(query.to_string())
            .or_default()
            .insert(passage.to_string());
    }
    q
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Exact top-`k` by dot product of unit vectors (cosine). Ties go to the
/// lexicographically smaller passage id.
pub fn retrieve(
    corpus: &EmbeddingMatrix,
    queries: &EmbeddingMatrix,
    k: usize,
) -> Result<RetrievalRun, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if corpus.dim() != queries.dim() {
        return Err(EvalError::DimensionMismatch {
            corpus: corpus.dim(),
            query: queries.dim(),
        });
    }
    let k = k.min(corpus.len());
    let mut run = Vec::with_capacity(queries.len());
    for (qi, qid) in queries.ids().iter().enumerate() {
        let q = queries.row(qi);
        let mut scored: Vec<(usize, f64)> = (0..corpus.len())
            .map(|i| (i, dot(q, corpus.row(i))))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| corpus.ids()[a.0].cmp(&corpus.ids()[b.0]))
        });
        run.push(Ranking {
            query_id: qid.clone(),
            hits: scored[..k]
                .iter()
                .map(|&(i, s)| (corpus.ids()[i].clone(), s))
                .collect(),
        });
    }
    Ok(run)
}

fn relevant_for<'q>(qrels: &'q Qrels, query: &str) -> Result<&'q BTreeSet<String>, EvalError> {
    match qrels.get(query) {
        Some(r) if !r.is_empty() => Ok(r),
        _ => Err(EvalError::MissingQrels(query.to_string())),
    }
}

fn mean_over(
    run: &RetrievalRun,
    mut f: impl FnMut(&Ranking) -> Result<f64, EvalError>,
) -> Result<f64, EvalError> {
    if run.is_empty() {
        return Err(EvalError::EmptyRun);
    }
    let mut total = 0.0;
    for r in run {
        total += f(r)?;
    }
    Ok(total / run.len() as f64)
}

/// Mean over queries of `|relevant ∩ top-k| / |relevant|`.
pub fn recall_at_k(run: &RetrievalRun, qrels: &Qrels, k: usize) -> Result<f64, EvalError> {
    mean_over(run, |r| {
        let rel = relevant_for(qrels, &r.query_id)?;
        let found = r
            .hits
            .iter()
            .take(k)
            .filter(|(id, _)| rel.contains(id))
            .count();
        Ok(found as f64 / rel.len() as f64)
    })
}

/// Binary-gain NDCG with `1 / log2(rank + 1)` discounts.
pub fn ndcg_at_k(run: &RetrievalRun, qrels: &Qrels, k: usize) -> Result<f64, EvalError> {
    mean_over(run, |r| {
        let rel = relevant_for(qrels, &r.query_id)?;
        let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
        let dcg: f64 = r
            .hits
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, (id, _))| rel.contains(id))
            .map(|(i, _)| discount(i))
            .sum();
        let idcg: f64 = (0..rel.len().min(k)).map(discount).sum();
        Ok(dcg / idcg)
    })
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU-4: clipped n-gram precisions for n = 1..4, uniform
/// weights, brevity penalty, no smoothing.
pub fn bleu4(candidate: &[usize], reference: &[usize]) -> Result<f64, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    if candidate.len() < 4 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let refs = ngram_counts(reference, n);
        let clipped: usize = cand
            .iter()
            .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / (candidate.len() + 1 - n) as f64).ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (log_sum / 4.0).exp())
}

fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1.
pub fn rouge_l(candidate: &[usize], reference: &[usize]) -> Result<f64, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseDiagnostics {
    pub mean_pairwise_cosine: f64,
    /// Participation ratio `(Σσ²)² / Σσ⁴` of the singular values.
    pub effective_rank: f64,
}

/// Anisotropy summary of a set of embeddings.
pub fn collapse_diagnostics(emb: &EmbeddingMatrix) -> Result<CollapseDiagnostics, EvalError> {
    let n = emb.len();
    if n < 2 {
        return Err(EvalError::TooFewRows(n));
    }
    let d = emb.dim();
    let norms: Vec<f64> = (0..n).map(|i| dot(emb.row(i), emb.row(i)).sqrt()).collect();
    let mut cos = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            cos += dot(emb.row(i), emb.row(j)) / (norms[i] * norms[j]);
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;

    // Σσ² = tr(AᵀA) and Σσ⁴ = ‖AᵀA‖_F², using the d x d Gram matrix
    let mut gram = vec![0.0f64; d * d];
    for i in 0..n {
        let r = emb.row(i);
        for a in 0..d {
            let ra = r[a] as f64;
            for b in 0..d {
                gram[a * d + b] += ra * r[b] as f64;
            }
        }
    }
    let trace: f64 = (0..d).map(|a| gram[a * d + a]).sum();
    let frob2: f64 = gram.iter().map(|g| g * g).sum();
    Ok(CollapseDiagnostics {
        mean_pairwise_cosine: cos / pairs,
        effective_rank: trace * trace / frob2,
    })
}
