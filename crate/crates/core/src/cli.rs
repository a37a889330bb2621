//! `lbr` command line: subcommands over a TOML run config, with every
//! artifact written under the configured output directory.
//!
//! Output layout:
//!
//! ```text
//! <out>/config.toml          resolved config
//! <out>/data/manifest.json   config hash, vocabulary, entity split
//! <out>/data/*.jsonl         gen, pairs, queries, passages, qrels, heldin, recon_eval
//! <out>/stage1.ckpt          after train-stage1 / pipeline
//! <out>/stage2.ckpt          after train-stage2 / pipeline
//! <out>/train_log.jsonl      one line per optimizer step
//! <out>/report.jsonl         metric reports
//! <out>/timings.jsonl        wall-clock seconds per stage
//! ```

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use crate::config::{load_config, ConfigError, RunConfig};
use crate::corpus::{
    read_jsonl, write_jsonl, CorpusError, EvalSet, GenExample, GenRecord, PairExample, PairRecord,
    QrelRecord, TextRecord, Vocabulary,
};
use crate::eval::{render_table, MetricReport};
use crate::ib_mask::{build_ib_mask, LayoutError, SegmentLayout};
use crate::model::TransformerModel;
use crate::pipeline::{
    build_datasets, evaluate, final_loss, init_model, plan_stages, run_label, run_pipeline_with,
    run_sweep, Datasets, PipelineError, PipelineOutcome, SweepKind,
};
use crate::train::{encode_all, run_stage1, run_stage2, StepRecord};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("checkpoint required")]
    CheckpointRequired,
    #[error("datasets not found in {0}; run gen-data first")]
    NoDatasets(PathBuf),
    #[error("config hash mismatch: {what} has {found}, config has {expected} (pass --allow-hash-mismatch to override)")]
    HashMismatch {
        what: String,
        found: String,
        expected: String,
    },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("io error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl From<crate::train::TrainError> for CliError {
    fn from(e: crate::train::TrainError) -> Self {
        CliError::Pipeline(e.into())
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(
    name = "lbr",
    version,
    about = "Bottleneck-first generative then contrastive training of a small decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate and write all datasets.
    GenData(ConfigArgs),
    /// Generative training under the bottleneck mask.
    TrainStage1(ConfigArgs),
    /// Contrastive training, starting from the stage-1 checkpoint if present.
    TrainStage2 {
        #[command(flatten)]
        args: ConfigArgs,
        /// Initial checkpoint (default: <out>/stage1.ckpt when it exists).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// gen-data, train-stage1, train-stage2 and eval with one seed.
    Pipeline(ConfigArgs),
    /// Evaluate a checkpoint on the generated datasets.
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also report generation metrics of this stage-1 checkpoint.
        #[arg(long)]
        stage1_checkpoint: Option<PathBuf>,
        #[arg(long)]
        allow_hash_mismatch: bool,
    },
    /// One full pipeline per grid value.
    Sweep {
        #[command(flatten)]
        args: ConfigArgs,
        /// compression, allocation or attention
        #[arg(long)]
        kind: String,
        /// Comma-separated grid, e.g. 2,8,32 or causal,bidirectional.
        #[arg(long)]
        grid: String,
    },
    /// Write eval-set embeddings as JSONL.
    ExportEmbed {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// passages or queries
        #[arg(long, default_value = "passages")]
        which: String,
        /// Output file (default: <out>/embeddings_<which>.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        allow_hash_mismatch: bool,
    },
    /// Print the bottleneck mask of a layout ('#' = may attend).
    InspectMask {
        #[arg(long)]
        x: usize,
        #[arg(long)]
        z: usize,
        #[arg(long)]
        y: usize,
        /// Diagnostic variant that also cuts Z off from X.
        #[arg(long)]
        block_z_to_x: bool,
    },
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout().lock())
}

/// [`run`] with subcommand output sent to `out`. Usage and runtime errors
/// still go to stderr.
pub fn run_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            1
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(io_err(Path::new("<stdout>")))
}

/// Config and output directory for a subcommand; the directory is created.
fn setup(args: &ConfigArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = load_config(&args.config)?;
    if let Some(d) = &args.output_dir {
        cfg.output_dir = Some(d.clone());
    }
    let dir = cfg.resolve_output_dir()?;
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(io_err(&path))?;
    Ok((cfg, dir))
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::InspectMask {
            x,
            z,
            y,
            block_z_to_x,
        } => {
            let mask = build_ib_mask(SegmentLayout::new(x, z, y)?, block_z_to_x)?;
            write_out(out, &mask.mask().to_ascii())
        }
        Command::GenData(args) => {
            let (cfg, dir) = setup(&args)?;
            let ds = build_datasets(&cfg)?;
            write_datasets(&dir.join("data"), &cfg, &ds)?;
            write_out(
                out,
                &format!("wrote datasets to {}\n", dir.join("data").display()),
            )
        }
        Command::TrainStage1(args) => {
            let (cfg, dir) = setup(&args)?;
            let ds = read_datasets(&dir.join("data"), &cfg, false)?;
            let plan = plan_stages(&cfg, &ds)?;
            let mut model = init_model(&cfg)?;
            let started = std::time::Instant::now();
            let mut log = Vec::new();
            let history = run_stage1(
                &mut model,
                &plan.gen,
                &plan.stage1,
                Some(&mut |r: &StepRecord, _: &TransformerModel<f32>| {
                    log.push(*r);
                    Ok(())
                }),
            )?;
            append_jsonl(&dir.join("train_log.jsonl"), &log)?;
            append_timing(&dir, "stage1", started.elapsed().as_secs_f64())?;
            let ck = Checkpoint::from_model(&model, history.len() as u64, &cfg.hash());
            save_checkpoint(dir.join("stage1.ckpt"), &ck)?;
            write_out(
                out,
                &format!(
                    "stage1: {} steps, final loss {:.4}\n",
                    history.len(),
                    final_loss(&history).unwrap_or(f64::NAN)
                ),
            )
        }
        Command::TrainStage2 { args, init } => {
            let (cfg, dir) = setup(&args)?;
            let ds = read_datasets(&dir.join("data"), &cfg, false)?;
            let plan = plan_stages(&cfg, &ds)?;
            let init = init.or_else(|| Some(dir.join("stage1.ckpt")).filter(|p| p.exists()));
            let mut model = match &init {
                Some(p) => load_checkpoint(p)?.to_model(Some(&cfg.model))?,
                None => init_model(&cfg)?,
            };
            let started = std::time::Instant::now();
            let mut log = Vec::new();
            let history = run_stage2(
                &mut model,
                &plan.pairs,
                &plan.stage2,
                Some(&mut |r: &StepRecord, _: &TransformerModel<f32>| {
                    log.push(*r);
                    Ok(())
                }),
            )?;
            append_jsonl(&dir.join("train_log.jsonl"), &log)?;
            append_timing(&dir, "stage2", started.elapsed().as_secs_f64())?;
            let ck = Checkpoint::from_model(&model, history.len() as u64, &cfg.hash());
            save_checkpoint(dir.join("stage2.ckpt"), &ck)?;
            write_out(
                out,
                &format!(
                    "stage2: {} steps, final loss {:.4}\n",
                    history.len(),
                    final_loss(&history).unwrap_or(f64::NAN)
                ),
            )
        }
        Command::Pipeline(args) => {
            let (cfg, dir) = setup(&args)?;
            let ds = build_datasets(&cfg)?;
            write_datasets(&dir.join("data"), &cfg, &ds)?;
            let outcome = run_pipeline_with(&cfg, None)?;
            persist_outcome(&dir, &cfg, &outcome)?;
            let path = dir.join("report.jsonl");
            write_jsonl(&path, std::slice::from_ref(&outcome.report))?;
            write_out(
                out,
                &render_table("run", &[(outcome.report.label.clone(), &outcome.report)]),
            )
        }
        Command::Eval {
            args,
            checkpoint,
            stage1_checkpoint,
            allow_hash_mismatch,
        } => {
            let checkpoint = checkpoint.ok_or(CliError::CheckpointRequired)?;
            let (cfg, dir) = setup(&args)?;
            let ds = read_datasets(&dir.join("data"), &cfg, allow_hash_mismatch)?;
            let model = load_model(&checkpoint, &cfg, allow_hash_mismatch)?;
            let stage1 = stage1_checkpoint
                .map(|p| load_model(&p, &cfg, allow_hash_mismatch))
                .transpose()?;
            let plan = plan_stages(&cfg, &ds)?;
            let mut report = MetricReport::new(run_label(&cfg, &plan), cfg.seed, cfg.hash());
            evaluate(&cfg, &ds, &model, true, stage1.as_ref(), &mut report)?;
            append_jsonl(&dir.join("report.jsonl"), std::slice::from_ref(&report))?;
            write_out(
                out,
                &render_table("checkpoint", &[(checkpoint.display().to_string(), &report)]),
            )
        }
        Command::Sweep { args, kind, grid } => {
            let (cfg, dir) = setup(&args)?;
            let kind: SweepKind = kind.parse().map_err(CliError::Usage)?;
            let grid: Vec<String> = grid
                .split(',')
                .map(|g| g.trim().to_string())
                .filter(|g| !g.is_empty())
                .collect();
            let path = dir.join(format!("sweep_{}.jsonl", kind.as_str()));
            fs::write(&path, "").map_err(io_err(&path))?;
            let rows = run_sweep(kind, &grid, &cfg, &mut |g: &str, o: &PipelineOutcome| {
                append_jsonl(&path, std::slice::from_ref(&o.report))
                    .map_err(|e| PipelineError::Invalid(e.to_string()))?;
                let sub = dir.join(format!("{}_{g}", kind.key()));
                fs::create_dir_all(&sub).map_err(|e| PipelineError::Invalid(e.to_string()))?;
                persist_outcome(&sub, &cfg, o).map_err(|e| PipelineError::Invalid(e.to_string()))
            })?;
            let table_rows: Vec<(String, &MetricReport)> =
                rows.iter().map(|(g, r)| (g.clone(), r)).collect();
            let table = render_table(kind.key(), &table_rows);
            let tpath = dir.join(format!("sweep_{}.txt", kind.as_str()));
            fs::write(&tpath, &table).map_err(io_err(&tpath))?;
            write_out(out, &table)
        }
        Command::ExportEmbed {
            args,
            checkpoint,
            which,
            out: target,
            allow_hash_mismatch,
        } => {
            let checkpoint = checkpoint.ok_or(CliError::CheckpointRequired)?;
            let (cfg, dir) = setup(&args)?;
            let ds = read_datasets(&dir.join("data"), &cfg, allow_hash_mismatch)?;
            let model = load_model(&checkpoint, &cfg, allow_hash_mismatch)?;
            let eval = ds
                .eval
                .as_ref()
                .ok_or_else(|| CliError::Usage("export-embed needs the alias task".into()))?;
            let items = match which.as_str() {
                "passages" => &eval.passages,
                "queries" => &eval.queries,
                other => {
                    return Err(CliError::Usage(format!(
                        "--which must be passages or queries, got {other:?}"
                    )))
                }
            };
            let emb = encode_all(
                &model,
                items,
                &cfg.stage1.policy().map_err(PipelineError::from)?,
                cfg.stage2.attention,
            )
            .map_err(PipelineError::from)?;
            let records: Vec<EmbeddingRecord> = (0..emb.len())
                .map(|i| EmbeddingRecord {
                    id: emb.ids()[i].clone(),
                    vector: emb.row(i).to_vec(),
                })
                .collect();
            let path = target.unwrap_or_else(|| dir.join(format!("embeddings_{which}.jsonl")));
            write_jsonl(&path, &records)?;
            write_out(
                out,
                &format!("wrote {} embeddings to {}\n", records.len(), path.display()),
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct TimingRecord<'a> {
    stage: &'a str,
    seconds: f64,
}

fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

fn append_timing(dir: &Path, stage: &str, seconds: f64) -> Result<()> {
    append_jsonl(
        &dir.join("timings.jsonl"),
        &[TimingRecord { stage, seconds }],
    )
}

fn persist_outcome(dir: &Path, cfg: &RunConfig, o: &PipelineOutcome) -> Result<()> {
    let log = dir.join("train_log.jsonl");
    write_jsonl(
        &log,
        &[o.stage1_history.as_slice(), o.stage2_history.as_slice()].concat(),
    )?;
    let timings = dir.join("timings.jsonl");
    fs::write(&timings, "").map_err(io_err(&timings))?;
    for (stage, secs) in &o.timings {
        append_timing(dir, stage, *secs)?;
    }
    if let Some(m) = &o.stage1_model {
        save_checkpoint(
            dir.join("stage1.ckpt"),
            &Checkpoint::from_model(m, o.stage1_history.len() as u64, &cfg.hash()),
        )?;
    }
    save_checkpoint(
        dir.join("stage2.ckpt"),
        &Checkpoint::from_model(&o.model, o.stage2_history.len() as u64, &cfg.hash()),
    )?;
    Ok(())
}

fn load_model(path: &Path, cfg: &RunConfig, allow_mismatch: bool) -> Result<TransformerModel<f32>> {
    let ck = load_checkpoint(path)?;
    if !allow_mismatch && ck.config_hash != cfg.hash() {
        return Err(CliError::HashMismatch {
            what: format!("checkpoint {}", path.display()),
            found: ck.config_hash,
            expected: cfg.hash(),
        });
    }
    Ok(ck.to_model(Some(&cfg.model))?)
}

/// Everything needed to rebuild [`Datasets`] from the JSONL files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub seed: u64,
    pub vocabulary: Vec<String>,
    pub train_entities: Vec<usize>,
    pub eval_entities: Vec<usize>,
    pub has_eval: bool,
}

const FILES: [&str; 7] = [
    "gen.jsonl",
    "pairs.jsonl",
    "queries.jsonl",
    "passages.jsonl",
    "qrels.jsonl",
    "heldin.jsonl",
    "recon_eval.jsonl",
];

pub fn write_datasets(dir: &Path, cfg: &RunConfig, ds: &Datasets) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let v = &ds.vocab;
    let gen = |xs: &[GenExample]| {
        xs.iter()
            .map(|e| e.to_record(v))
            .collect::<Vec<GenRecord>>()
    };
    write_jsonl(dir.join(FILES[0]), &gen(&ds.gen))?;
    write_jsonl(
        dir.join(FILES[1]),
        &ds.pairs.iter().map(|p| p.to_record(v)).collect::<Vec<_>>(),
    )?;
    let empty = EvalSet {
        train_entities: vec![],
        eval_entities: vec![],
        queries: vec![],
        passages: vec![],
        qrels: vec![],
    };
    let eval = ds.eval.as_ref().unwrap_or(&empty);
    write_jsonl(dir.join(FILES[2]), &eval.query_records(v))?;
    write_jsonl(dir.join(FILES[3]), &eval.passage_records(v))?;
    write_jsonl(dir.join(FILES[4]), &eval.qrel_records())?;
    write_jsonl(dir.join(FILES[5]), &gen(&ds.heldin))?;
    write_jsonl(dir.join(FILES[6]), &gen(&ds.recon_eval))?;
    let manifest = DatasetManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        vocabulary: v.tokens().to_vec(),
        train_entities: eval.train_entities.clone(),
        eval_entities: eval.eval_entities.clone(),
        has_eval: ds.eval.is_some(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

pub fn read_datasets(dir: &Path, cfg: &RunConfig, allow_mismatch: bool) -> Result<Datasets> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(CliError::NoDatasets(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| CliError::Io {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if !allow_mismatch && manifest.config_hash != cfg.hash() {
        return Err(CliError::HashMismatch {
            what: format!("datasets in {}", dir.display()),
            found: manifest.config_hash,
            expected: cfg.hash(),
        });
    }
    let vocab = Vocabulary::from_tokens(manifest.vocabulary)?;
    let gen = |name: &str| -> Result<Vec<GenExample>> {
        read_jsonl::<GenRecord>(dir.join(name))?
            .iter()
            .map(|r| GenExample::from_record(r, &vocab).map_err(CliError::from))
            .collect()
    };
    let texts = |name: &str| -> Result<Vec<(String, Vec<usize>)>> {
        read_jsonl::<TextRecord>(dir.join(name))?
            .into_iter()
            .map(|r| Ok((r.id, vocab.encode(&r.text)?)))
            .collect()
    };
    let pairs = read_jsonl::<PairRecord>(dir.join(FILES[1]))?
        .iter()
        .map(|r| PairExample::from_record(r, &vocab))
        .collect::<Result<Vec<_>, _>>()?;
    let eval = if manifest.has_eval {
        Some(EvalSet {
            train_entities: manifest.train_entities,
            eval_entities: manifest.eval_entities,
            queries: texts(FILES[2])?,
            passages: texts(FILES[3])?,
            qrels: read_jsonl::<QrelRecord>(dir.join(FILES[4]))?
                .into_iter()
                .map(|q| (q.query_id, q.passage_id))
                .collect(),
        })
    } else {
        None
    };
    Ok(Datasets {
        gen: gen(FILES[0])?,
        pairs,
        eval,
        heldin: gen(FILES[5])?,
        recon_eval: gen(FILES[6])?,
        world: None,
        vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inspect_mask_prints_rows() {
        let mut out = Vec::new();
        let cli = Cli::try_parse_from(["lbr", "inspect-mask", "--x", "3", "--z", "2", "--y", "2"])
            .unwrap();
        dispatch(cli.command, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "#......\n##.....\n###....\n####...\n#####..\n...###.\n...####\n"
        );
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["lbr", "frobnicate"]), 2);
        assert_eq!(run(["lbr", "inspect-mask", "--x", "3"]), 2);
        assert_eq!(
            run(["lbr", "inspect-mask", "--x", "0", "--z", "1", "--y", "1"]),
            0
        );
        assert_eq!(
            run(["lbr", "inspect-mask", "--x", "2", "--z", "0", "--y", "1"]),
            1
        );
    }

    #[test]
    fn eval_requires_checkpoint() {
        let cli = Cli::try_parse_from(["lbr", "eval", "--config", "missing.toml"]).unwrap();
        let err = dispatch(cli.command, &mut Vec::new()).unwrap_err();
        assert_eq!(err.to_string(), "checkpoint required");
    }
}
