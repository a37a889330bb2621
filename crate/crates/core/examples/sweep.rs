//! Compression-ratio sweep on a small alias world, printed as a table.

use lbr::config::RunConfig;
use lbr::eval::render_table;
use lbr::pipeline::{run_sweep, SweepKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut base = RunConfig::new(0);
    base.corpus.n_entities = 40;
    base.model.d_model = 32;
    base.model.d_ff = 128;
    base.model.n_layers = 2;
    base.stage1.steps = 80;
    base.stage2.steps = 30;
    base.eval.generation_samples = 0;
    let grid: Vec<String> = ["2", "8", "32"].map(String::from).to_vec();
    let rows = run_sweep(SweepKind::Compression, &grid, &base, &mut |g, o| {
        eprintln!(
            "ratio {g} done: recall@10 {:.3}",
            o.report.get("recall@10").unwrap()
        );
        Ok(())
    })?;
    let rows: Vec<(String, &_)> = rows.iter().map(|(g, r)| (g.clone(), r)).collect();
    print!("{}", render_table(SweepKind::Compression.key(), &rows));
    Ok(())
}
