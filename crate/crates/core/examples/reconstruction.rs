//! Bottleneck reconstruction on random passages at two compression
//! ratios, followed by a greedy decode.

use lbr::corpus::{copy_task, make_pt_examples, GenStyle};
use lbr::model::{ModelConfig, TransformerModel};
use lbr::optim::AdamWConfig;
use lbr::pipeline::final_loss;
use lbr::train::{greedy_decode, run_stage1, GenerativeMode, Stage1Config};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (vocab, passages) = copy_task(0, 128, 8, 8);
    let (examples, _) = make_pt_examples(&passages, GenStyle::PtRecon, 0.5)?;
    for ratio in [2.0, 8.0] {
        let mut model = TransformerModel::<f32>::init(ModelConfig {
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_seq_len: 32,
            seed: 0,
        })?;
        let cfg = Stage1Config {
            compression_ratio: ratio,
            style: GenStyle::PtRecon,
            steps: 150,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            ..Stage1Config::default()
        };
        let history = run_stage1(&mut model, &examples, &cfg, None)?;
        let x = &examples[0].x_tokens;
        let out = greedy_decode(&model, x, x.len() + 1, &cfg.policy()?, GenerativeMode::Ib)?;
        println!("R={ratio}: final loss {:.3}", final_loss(&history).unwrap());
        println!("  input  {}", vocab.decode(x));
        println!("  output {}", vocab.decode(&out));
    }
    Ok(())
}
