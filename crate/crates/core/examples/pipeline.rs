//! Both stages and the full evaluation from a config file.
//!
//! cargo run --release --example pipeline -- configs/alias_benchmark.toml

use lbr::config::{load_config, RunConfig};
use lbr::eval::render_table;
use lbr::pipeline::run_pipeline;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => load_config(path)?,
        None => {
            let mut c = RunConfig::new(0);
            c.corpus.n_entities = 40;
            c.stage1.steps = 100;
            c.stage2.steps = 40;
            c
        }
    };
    let out = run_pipeline(&cfg)?;
    for (stage, secs) in &out.timings {
        println!("{stage}: {secs:.1}s");
    }
    print!(
        "{}",
        render_table("run", &[(out.report.label.clone(), &out.report)])
    );
    Ok(())
}
