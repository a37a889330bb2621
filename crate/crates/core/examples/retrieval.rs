//! Contrastive training from scratch, then dense retrieval over the
//! held-out passages.

use lbr::config::RunConfig;
use lbr::eval::{qrels_from_pairs, recall_at_k, retrieve};
use lbr::pipeline::{build_datasets, init_model};
use lbr::train::{encode_all, run_stage2};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::new(0);
    cfg.corpus.n_entities = 60;
    cfg.model.d_model = 32;
    cfg.model.d_ff = 128;
    cfg.model.n_layers = 2;
    cfg.stage2.steps = 60;
    let ds = build_datasets(&cfg)?;
    let mut model = init_model(&cfg)?;
    let history = run_stage2(&mut model, &ds.pairs, &cfg.stage2, None)?;
    println!(
        "info-nce {:.3} -> {:.3}",
        history[0].loss,
        history.last().unwrap().loss
    );

    let eval = ds.eval.as_ref().unwrap();
    let policy = cfg.stage2.policy()?;
    let passages = encode_all(&model, &eval.passages, &policy, cfg.stage2.attention)?;
    let queries = encode_all(&model, &eval.queries, &policy, cfg.stage2.attention)?;
    let run = retrieve(&passages, &queries, 10)?;
    let qrels = qrels_from_pairs(eval.qrels.iter().map(|(q, p)| (q.as_str(), p.as_str())));
    println!(
        "alias queries: recall@10 {:.3}",
        recall_at_k(&run, &qrels, 10)?
    );
    Ok(())
}
