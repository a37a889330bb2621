//! Generates a small alias world and shows each kind of training record.

use lbr::corpus::{
    make_cl_pairs, make_eval_set, make_pt_examples, make_sft_examples, GenStyle, World, WorldConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let world = World::generate(WorldConfig {
        n_entities: 10,
        ..WorldConfig::default()
    })?;
    let v = &world.vocab;
    let e = &world.entities[0];
    println!("entity {} aliases {:?}", e.canonical, e.aliases);

    let sft = make_sft_examples(&world);
    println!(
        "sft:       {} -> {}",
        v.decode(&sft[0].x_tokens),
        v.decode(&sft[0].y_tokens)
    );
    let (recon, _) = make_pt_examples(&world.documents(), GenStyle::PtRecon, 0.5)?;
    println!(
        "pt-recon:  {} -> {}",
        v.decode(&recon[0].x_tokens),
        v.decode(&recon[0].y_tokens)
    );

    let eval = make_eval_set(&world, 0.3)?;
    let pairs = make_cl_pairs(&world, &eval.train_entities);
    println!(
        "pair:      {} => {}",
        v.decode(&pairs[0].query_tokens),
        v.decode(&pairs[0].positive_tokens)
    );
    let (qid, q) = &eval.queries[0];
    println!("eval query {qid}: {}", v.decode(q));
    println!(
        "{} train entities, {} held out",
        eval.train_entities.len(),
        eval.eval_entities.len()
    );
    Ok(())
}
