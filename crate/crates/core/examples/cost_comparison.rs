//! Wall-clock cost of generative training with short SFT targets versus
//! passage reconstruction, at equal step counts.

use lbr::config::RunConfig;
use lbr::corpus::GenStyle;
use lbr::pipeline::{build_datasets, init_model};
use lbr::train::run_stage1;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::new(0);
    cfg.corpus.n_entities = 60;
    cfg.stage1.steps = 40;
    cfg.stage1.mix_reconstruction = false;
    let mut secs = Vec::new();
    for style in [GenStyle::Sft, GenStyle::PtRecon] {
        cfg.stage1.style = style;
        let ds = build_datasets(&cfg)?;
        let tokens: usize = ds
            .gen
            .iter()
            .map(|e| e.x_tokens.len() + e.y_tokens.len())
            .sum();
        let mut model = init_model(&cfg)?;
        let start = std::time::Instant::now();
        run_stage1(&mut model, &ds.gen, &cfg.stage1, None)?;
        let s = start.elapsed().as_secs_f64();
        println!(
            "{:<9} {:.2}s for {} steps, {:.1} tokens per example",
            style.as_str(),
            s,
            cfg.stage1.steps,
            tokens as f64 / ds.gen.len() as f64
        );
        secs.push(s);
    }
    println!("pt-recon / sft time ratio: {:.2}", secs[1] / secs[0]);
    Ok(())
}
