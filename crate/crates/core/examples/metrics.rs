//! Retrieval, generation and collapse metrics on hand-made inputs.

use lbr::eval::{
    bleu4, collapse_diagnostics, ndcg_at_k, qrels_from_pairs, recall_at_k, retrieve, rouge_l,
};
use lbr::tensor::Tensor;
use lbr::train::EmbeddingMatrix;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let corpus = EmbeddingMatrix::new(
        vec!["p0".into(), "p1".into(), "p2".into()],
        Tensor::from_f64_rows(&[vec![1.0, 0.0], vec![s, s], vec![0.0, 1.0]])?,
    )?;
    let queries =
        EmbeddingMatrix::new(vec!["q0".into()], Tensor::from_f64_rows(&[vec![0.0, 1.0]])?)?;
    let run = retrieve(&corpus, &queries, 3)?;
    let qrels = qrels_from_pairs([("q0", "p1")]);
    println!("ranking {:?}", run[0].hits);
    println!(
        "recall@1 {:.3}  recall@2 {:.3}  ndcg@3 {:.4}",
        recall_at_k(&run, &qrels, 1)?,
        recall_at_k(&run, &qrels, 2)?,
        ndcg_at_k(&run, &qrels, 3)?
    );

    let reference = [1, 2, 3, 4, 6];
    let candidate = [1, 2, 3, 4, 5];
    println!(
        "bleu4 {:.4}  rouge_l {:.4}",
        bleu4(&candidate, &reference)?,
        rouge_l(&candidate, &reference)?
    );

    let d = collapse_diagnostics(&corpus)?;
    println!(
        "mean cosine {:.3}  effective rank {:.3}",
        d.mean_pairwise_cosine, d.effective_rank
    );
    Ok(())
}
