//! Saves a model, reloads it and compares logits bit for bit.

use lbr::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use lbr::model::{ModelConfig, TransformerModel};
use lbr::tensor::Mask;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig {
        vocab_size: 32,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        seed: 9,
    };
    let model = TransformerModel::<f32>::init(cfg)?;
    let dir = std::env::temp_dir().join("lbr-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.ckpt");
    save_checkpoint(&path, &Checkpoint::from_model(&model, 0, "example"))?;
    let restored = load_checkpoint(&path)?.to_model(Some(&cfg))?;

    let tokens = [4, 7, 1, 9];
    let positions = [0, 1, 2, 3];
    let a = model.forward(&tokens, &Mask::causal(4), &positions)?.logits;
    let b = restored
        .forward(&tokens, &Mask::causal(4), &positions)?
        .logits;
    let same = a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    println!(
        "{} bytes, {} parameters, logits identical: {same}",
        std::fs::metadata(&path)?.len(),
        model.num_parameters()
    );
    Ok(())
}
