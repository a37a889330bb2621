//! End-to-end orchestration: datasets, the two training stages, evaluation
//! and sweeps. Everything here is in memory; the CLI persists artifacts.

use std::collections::BTreeMap;
use std::time::Instant;

use thiserror::Error;

use crate::autograd::Tape;
use crate::config::{ConfigError, RunConfig, Task};
use crate::corpus::{
    copy_task, make_cl_pairs, make_eval_set, make_pt_examples, make_sft_examples, CorpusError,
    EvalSet, GenExample, GenStyle, PairExample, Vocabulary, World,
};
use crate::eval::{
    bleu4, collapse_diagnostics, ndcg_at_k, qrels_from_pairs, recall_at_k, retrieve, rouge_l,
    EvalError, MetricReport,
};
use crate::ib_mask::CompressionPolicy;
use crate::model::{AttentionMode, ModelError, TransformerModel};
use crate::train::{
    encode_all, greedy_decode, pack_stage1, run_stage1, run_stage2, split_allocation,
    stage1_loss_on, EmbeddingMatrix, GenerativeMode, Stage1Config, Stage2Config, StepObserver,
    StepRecord, TrainError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("vocabulary of {needed} tokens does not fit model vocab_size {limit}")]
    VocabTooLarge { needed: usize, limit: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Every dataset a run needs, derived from the config alone.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub vocab: Vocabulary,
    pub world: Option<World>,
    /// Generative examples for stage 1.
    pub gen: Vec<GenExample>,
    /// Contrastive pairs over training entities.
    pub pairs: Vec<PairExample>,
    pub eval: Option<EvalSet>,
    /// Held-in questions for generation metrics.
    pub heldin: Vec<GenExample>,
    /// Unseen passages for reconstruction loss (copy task).
    pub recon_eval: Vec<GenExample>,
}

pub fn build_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let c = &cfg.corpus;
    let ds = match c.task {
        Task::Copy => {
            let (vocab, passages) = copy_task(cfg.seed, c.copy_passages, c.copy_len, c.copy_pool);
            let (_, held) = copy_task(
                cfg.seed ^ 0xc0ff_ee00,
                c.copy_eval_passages,
                c.copy_len,
                c.copy_pool,
            );
            let (gen, _) = make_pt_examples(&passages, GenStyle::PtRecon, 0.5)?;
            let (recon_eval, _) = make_pt_examples(&held, GenStyle::PtRecon, 0.5)?;
            Datasets {
                vocab,
                world: None,
                gen,
                pairs: Vec::new(),
                eval: None,
                heldin: Vec::new(),
                recon_eval,
            }
        }
        Task::Alias => {
            let world = World::generate(cfg.world_config())?;
            let eval = make_eval_set(&world, c.holdout_fraction)?;
            let sft = make_sft_examples(&world);
            let docs = world.documents();
            let mut gen = match cfg.stage1.style {
                GenStyle::Sft => sft.clone(),
                style => make_pt_examples(&docs, style, cfg.stage1.split_fraction)?.0,
            };
            if cfg.stage1.mix_reconstruction && cfg.stage1.style != GenStyle::PtRecon {
                gen.extend(make_pt_examples(&docs, GenStyle::PtRecon, 0.5)?.0);
            }
            let pairs = make_cl_pairs(&world, &eval.train_entities);
            let facts_before = |e: usize| {
                world.entities[..e]
                    .iter()
                    .map(|x| x.facts.len())
                    .sum::<usize>()
            };
            let heldin = eval
                .train_entities
                .iter()
                .flat_map(|&e| {
                    let start = facts_before(e);
                    sft[start..start + world.entities[e].facts.len()].to_vec()
                })
                .take(cfg.eval.generation_samples)
                .collect();
            Datasets {
                vocab: world.vocab.clone(),
                world: Some(world),
                gen,
                pairs,
                eval: Some(eval),
                heldin,
                recon_eval: Vec::new(),
            }
        }
    };
    if ds.vocab.len() > cfg.model.vocab_size {
        return Err(PipelineError::VocabTooLarge {
            needed: ds.vocab.len(),
            limit: cfg.model.vocab_size,
        });
    }
    Ok(ds)
}

/// Training data and stage configs after applying the allocation budget.
#[derive(Debug, Clone)]
pub struct StagePlan {
    pub gen: Vec<GenExample>,
    pub pairs: Vec<PairExample>,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

fn steps_for(epochs: f64, n: usize, batch: usize) -> usize {
    (epochs * n as f64 / batch as f64).ceil() as usize
}

pub fn plan_stages(cfg: &RunConfig, ds: &Datasets) -> Result<StagePlan> {
    let mut stage1 = cfg.stage1;
    let mut stage2 = cfg.stage2;
    let (gen, pairs) = match &cfg.allocation {
        None => (ds.gen.clone(), ds.pairs.clone()),
        Some(a) => {
            let (gen, pairs) = split_allocation(&ds.gen, &ds.pairs, a.r_learn, a.budget, cfg.seed)?;
            stage1.steps = steps_for(a.epochs, gen.len(), stage1.batch_size);
            stage2.steps = if pairs.len() < 2 {
                0
            } else {
                steps_for(a.epochs, pairs.len(), stage2.batch_size)
            };
            (gen, pairs)
        }
    };
    if ds.pairs.is_empty() {
        stage2.steps = 0;
    }
    Ok(StagePlan {
        gen,
        pairs,
        stage1,
        stage2,
    })
}

pub fn init_model(cfg: &RunConfig) -> Result<TransformerModel<f32>> {
    Ok(TransformerModel::init(cfg.model)?)
}

/// Mean of the last tenth of a loss history.
pub fn final_loss(history: &[StepRecord]) -> Option<f64> {
    if history.is_empty() {
        return None;
    }
    let n = (history.len() / 10).max(1);
    let tail = &history[history.len() - n..];
    Some(tail.iter().map(|r| r.loss).sum::<f64>() / n as f64)
}

/// Mean generative loss over `examples` (no gradient).
pub fn mean_stage1_loss(
    model: &TransformerModel<f32>,
    examples: &[GenExample],
    policy: &CompressionPolicy,
    mode: GenerativeMode,
) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let packed = pack_stage1(ex, policy, mode, false)?;
        let mut tape = Tape::new();
        let vars = model.load(&mut tape);
        let loss = stage1_loss_on(model, &mut tape, &vars, &packed)?;
        total += tape.value(loss).data()[0] as f64;
    }
    Ok(total / examples.len().max(1) as f64)
}

/// Mean BLEU-4 and ROUGE-L of greedy answers against the references.
pub fn generation_scores(
    model: &TransformerModel<f32>,
    examples: &[GenExample],
    policy: &CompressionPolicy,
    mode: GenerativeMode,
) -> Result<(f64, f64)> {
    let (mut b, mut r) = (0.0, 0.0);
    for ex in examples {
        let out = greedy_decode(model, &ex.x_tokens, ex.y_tokens.len(), policy, mode)?;
        b += bleu4(&out, &ex.y_tokens)?;
        r += rouge_l(&out, &ex.y_tokens)?;
    }
    let n = examples.len().max(1) as f64;
    Ok((b / n, r / n))
}

/// Query and passage embeddings of an eval set.
pub fn embed_eval_set(
    model: &TransformerModel<f32>,
    eval: &EvalSet,
    policy: &CompressionPolicy,
    mode: AttentionMode,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    Ok((
        encode_all(model, &eval.queries, policy, mode)?,
        encode_all(model, &eval.passages, policy, mode)?,
    ))
}

/// Retrieval, collapse and reconstruction metrics for `model`, plus
/// generation metrics when `generation` is set. `stage1_model` adds the
/// generation metrics of the generative-stage model under a `stage1_`
/// prefix.
pub fn evaluate(
    cfg: &RunConfig,
    ds: &Datasets,
    model: &TransformerModel<f32>,
    generation: bool,
    stage1_model: Option<&TransformerModel<f32>>,
    report: &mut MetricReport,
) -> Result<()> {
    let policy = cfg.stage1.policy()?;
    let mode = cfg.stage1.mode;
    if let Some(eval) = &ds.eval {
        let (q, p) = embed_eval_set(model, eval, &policy, cfg.stage2.attention)?;
        let run = retrieve(&p, &q, cfg.eval.k)?;
        let qrels = qrels_from_pairs(eval.qrels.iter().map(|(a, b)| (a.as_str(), b.as_str())));
        let k = cfg.eval.k;
        report.insert(&format!("recall@{k}"), recall_at_k(&run, &qrels, k)?)?;
        report.insert(&format!("ndcg@{k}"), ndcg_at_k(&run, &qrels, k)?)?;
        let diag = collapse_diagnostics(&p)?;
        report.insert("mean_cosine", diag.mean_pairwise_cosine)?;
        report.insert("effective_rank", diag.effective_rank)?;
    }
    if !ds.recon_eval.is_empty() {
        report.insert(
            "recon_loss",
            mean_stage1_loss(model, &ds.recon_eval, &policy, mode)?,
        )?;
    }
    if !ds.heldin.is_empty() {
        let models = [
            ("", Some(model).filter(|_| generation)),
            ("stage1_", stage1_model),
        ];
        for (prefix, m) in models {
            if let Some(m) = m {
                let (b, r) = generation_scores(m, &ds.heldin, &policy, mode)?;
                report.insert(&format!("{prefix}bleu4"), b)?;
                report.insert(&format!("{prefix}rouge_l"), r)?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: MetricReport,
    /// Model after stage 1, when stage 1 ran.
    pub stage1_model: Option<TransformerModel<f32>>,
    pub model: TransformerModel<f32>,
    pub stage1_history: Vec<StepRecord>,
    pub stage2_history: Vec<StepRecord>,
    /// Seconds per stage. Not part of the report, which must be
    /// reproducible byte for byte.
    pub timings: BTreeMap<String, f64>,
}

/// Human-readable variant name of a run.
pub fn run_label(cfg: &RunConfig, plan: &StagePlan) -> String {
    let gl = match (plan.stage1.steps, cfg.stage1.mode) {
        (0, _) => None,
        (_, GenerativeMode::Ib) => Some("ib-gl"),
        (_, GenerativeMode::Naive) => Some("naive-gl"),
    };
    match (gl, plan.stage2.steps > 0) {
        (Some(g), true) => format!("{g}+cl"),
        (Some(g), false) => g.to_string(),
        (None, true) => "cl".to_string(),
        (None, false) => "untrained".to_string(),
    }
}

/// Datasets, stage 1, stage 2 and evaluation with one seed.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome> {
    run_pipeline_with(cfg, None)
}

pub fn run_pipeline_with(
    cfg: &RunConfig,
    observer: Option<&mut StepObserver<'_>>,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let ds = build_datasets(cfg)?;
    let plan = plan_stages(cfg, &ds)?;
    let mut timings = BTreeMap::new();
    let mut observer = observer;
    let mut model = init_model(cfg)?;

    log::info!(
        "{}: {} generative examples, {} pairs, {}+{} steps",
        run_label(cfg, &plan),
        plan.gen.len(),
        plan.pairs.len(),
        plan.stage1.steps,
        plan.stage2.steps
    );
    let t = Instant::now();
    let stage1_history = run_stage1(&mut model, &plan.gen, &plan.stage1, observer.as_deref_mut())?;
    timings.insert("stage1".to_string(), t.elapsed().as_secs_f64());
    let stage1_model = (!stage1_history.is_empty()).then(|| model.clone());

    let t = Instant::now();
    let stage2_history = run_stage2(
        &mut model,
        &plan.pairs,
        &plan.stage2,
        observer.as_deref_mut(),
    )?;
    timings.insert("stage2".to_string(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let mut report = MetricReport::new(run_label(cfg, &plan), cfg.seed, cfg.hash());
    if let Some(l) = final_loss(&stage1_history) {
        report.insert("stage1_final_loss", l)?;
    }
    if let Some(l) = final_loss(&stage2_history) {
        report.insert("stage2_final_loss", l)?;
    }
    evaluate(
        cfg,
        &ds,
        &model,
        stage1_model.is_some(),
        stage1_model.as_ref(),
        &mut report,
    )?;
    timings.insert("eval".to_string(), t.elapsed().as_secs_f64());
    log::info!("timings {timings:?}");

    Ok(PipelineOutcome {
        report,
        stage1_model,
        model,
        stage1_history,
        stage2_history,
        timings,
    })
}

/// Variable a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Compression,
    Allocation,
    Attention,
}

impl std::str::FromStr for SweepKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "compression" => Ok(Self::Compression),
            "allocation" => Ok(Self::Allocation),
            "attention" => Ok(Self::Attention),
            other => Err(format!("unknown sweep kind {other:?}")),
        }
    }
}

impl SweepKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepKind::Compression => "compression",
            SweepKind::Allocation => "allocation",
            SweepKind::Attention => "attention",
        }
    }

    /// Column name of the swept value.
    pub fn key(&self) -> &'static str {
        match self {
            SweepKind::Compression => "ratio",
            SweepKind::Allocation => "r_learn",
            SweepKind::Attention => "attention",
        }
    }
}

/// One config per grid point, in grid order, sharing the base seed.
pub fn sweep_configs(
    kind: SweepKind,
    grid: &[String],
    base: &RunConfig,
) -> Result<Vec<(String, RunConfig)>> {
    if grid.is_empty() {
        return Err(PipelineError::Invalid("sweep grid is empty".into()));
    }
    let number = |g: &str| {
        g.parse::<f64>()
            .map_err(|_| PipelineError::Invalid(format!("grid value {g:?} is not a number")))
    };
    grid.iter()
        .map(|g| {
            let mut c = base.clone();
            match kind {
                SweepKind::Compression => c.stage1.compression_ratio = number(g)?,
                SweepKind::Allocation => {
                    c.allocation.get_or_insert_with(Default::default).r_learn = number(g)?
                }
                SweepKind::Attention => {
                    c.stage2.attention = g.parse().map_err(PipelineError::Invalid)?
                }
            }
            c.derive_seeds();
            c.validate()?;
            Ok((g.clone(), c))
        })
        .collect()
}

/// Runs every grid point in order. `on_row` sees each finished run (for
/// persisting partial results); the first failure aborts the sweep.
pub fn run_sweep(
    kind: SweepKind,
    grid: &[String],
    base: &RunConfig,
    on_row: &mut dyn FnMut(&str, &PipelineOutcome) -> Result<()>,
) -> Result<Vec<(String, MetricReport)>> {
    let configs = sweep_configs(kind, grid, base)?;
    let mut rows = Vec::with_capacity(configs.len());
    for (g, cfg) in configs {
        let out = run_pipeline(&cfg)?;
        on_row(&g, &out)?;
        rows.push((g, out.report));
    }
    Ok(rows)
}
