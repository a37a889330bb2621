//! Brute-force reference implementations shared by the integration tests.
//! Deliberately naive: no hashing, no DP, products instead of log sums.

#![allow(dead_code)]

pub mod grad;

use lbr::eval::{Qrels, RetrievalRun};
use lbr::tensor::Tensor;
use lbr::train::EmbeddingMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random unit rows with ids `{prefix}{i}`.
pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, prefix: &str) -> EmbeddingMatrix {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    let ids = (0..n).map(|i| format!("{prefix}{i:03}")).collect();
    EmbeddingMatrix::new(ids, Tensor::from_f64_rows(&rows).unwrap()).unwrap()
}

fn score(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// 0-based rank of passage `p` for query `q`: passages that score higher,
/// or equal with a smaller id, come first.
pub fn rank_of(corpus: &EmbeddingMatrix, q: &[f32], p: usize) -> usize {
    let sp = score(q, corpus.row(p));
    (0..corpus.len())
        .filter(|&o| {
            let so = score(q, corpus.row(o));
            so > sp || (so == sp && corpus.ids()[o] < corpus.ids()[p])
        })
        .count()
}

pub fn recall_oracle(
    corpus: &EmbeddingMatrix,
    queries: &EmbeddingMatrix,
    qrels: &Qrels,
    k: usize,
) -> f64 {
    let mut total = 0.0;
    for (qi, qid) in queries.ids().iter().enumerate() {
        let rel = &qrels[qid];
        let mut hit = 0;
        for (pi, pid) in corpus.ids().iter().enumerate() {
            if rel.contains(pid) && rank_of(corpus, queries.row(qi), pi) < k {
                hit += 1;
            }
        }
        total += hit as f64 / rel.len() as f64;
    }
    total / queries.len() as f64
}

pub fn ndcg_oracle(
    corpus: &EmbeddingMatrix,
    queries: &EmbeddingMatrix,
    qrels: &Qrels,
    k: usize,
) -> f64 {
    let mut total = 0.0;
    for (qi, qid) in queries.ids().iter().enumerate() {
        let rel = &qrels[qid];
        let mut dcg = 0.0;
        for (pi, pid) in corpus.ids().iter().enumerate() {
            let r = rank_of(corpus, queries.row(qi), pi);
            if rel.contains(pid) && r < k {
                dcg += 1.0 / ((r + 2) as f64).log2();
            }
        }
        let mut idcg = 0.0;
        for r in 0..rel.len().min(k) {
            idcg += 1.0 / ((r + 2) as f64).log2();
        }
        total += dcg / idcg;
    }
    total / queries.len() as f64
}

/// Recall computed from an already materialized run.
pub fn run_recall_oracle(run: &RetrievalRun, qrels: &Qrels, k: usize) -> f64 {
    let mut total = 0.0;
    for r in run {
        let rel = &qrels[&r.query_id];
        let hits = r
            .hits
            .iter()
            .take(k)
            .filter(|(id, _)| rel.contains(id))
            .count();
        total += hits as f64 / rel.len() as f64;
    }
    total / run.len() as f64
}

fn count(seq: &[usize], gram: &[usize]) -> usize {
    if gram.len() > seq.len() {
        return 0;
    }
    (0..=seq.len() - gram.len())
        .filter(|&i| &seq[i..i + gram.len()] == gram)
        .count()
}

pub fn bleu4_oracle(cand: &[usize], reference: &[usize]) -> f64 {
    if cand.len() < 4 {
        return 0.0;
    }
    let mut product = 1.0;
    for n in 1..=4 {
        let total = cand.len() + 1 - n;
        // each distinct n-gram once, clipped against the reference
        let mut matched = 0;
        for i in 0..total {
            let g = &cand[i..i + n];
            let first = (0..i).all(|j| &cand[j..j + n] != g);
            if first {
                matched += count(cand, g).min(count(reference, g));
            }
        }
        product *= matched as f64 / total as f64;
    }
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * product.powf(0.25)
}

fn is_subsequence(sub: &[usize], seq: &[usize]) -> bool {
    let mut it = seq.iter();
    sub.iter().all(|s| it.any(|x| x == s))
}

/// LCS by enumerating every subsequence of `cand` (keep `cand` short).
pub fn lcs_oracle(cand: &[usize], reference: &[usize]) -> usize {
    assert!(cand.len() <= 16);
    let mut best = 0;
    for mask in 0u32..(1 << cand.len()) {
        let sub: Vec<usize> = (0..cand.len())
            .filter(|&i| mask >> i & 1 == 1)
            .map(|i| cand[i])
            .collect();
        if sub.len() > best && is_subsequence(&sub, reference) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_l_oracle(cand: &[usize], reference: &[usize]) -> f64 {
    let l = lcs_oracle(cand, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / cand.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Participation ratio from a full SVD.
pub fn effective_rank_oracle(emb: &EmbeddingMatrix) -> f64 {
    let m = nalgebra::DMatrix::from_fn(emb.len(), emb.dim(), |i, j| emb.row(i)[j] as f64);
    let s = m.singular_values();
    let s2: f64 = s.iter().map(|x| x * x).sum();
    let s4: f64 = s.iter().map(|x| x.powi(4)).sum();
    s2 * s2 / s4
}

pub fn mean_cosine_oracle(emb: &EmbeddingMatrix) -> f64 {
    let n = emb.len();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..n {
        for j in 0..n {
            if i < j {
                let a = emb.row(i);
                let b = emb.row(j);
                let na = score(a, a).sqrt();
                let nb = score(b, b).sqrt();
                total += score(a, b) / (na * nb);
                pairs += 1;
            }
        }
    }
    total / pairs as f64
}

/// Random token sequence over a small alphabet so n-grams repeat.
pub fn tokens(rng: &mut ChaCha8Rng, min: usize, max: usize, alphabet: usize) -> Vec<usize> {
    let n = rng.random_range(min..=max);
    (0..n).map(|_| rng.random_range(0..alphabet)).collect()
}
