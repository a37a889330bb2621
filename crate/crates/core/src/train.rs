//! Two-stage training: generative learning through the bottleneck, then
//! contrastive alignment of the last bottleneck token's hidden state.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::corpus::{GenExample, GenStyle, PairExample, BNK};
use crate::ib_mask::{
    build_ib_mask, build_stage2_layout, embedding_position, CompressionPolicy, LayoutError,
    SegmentLayout,
};
use crate::model::{attention_mask, AttentionMode, ModelError, ModelVars, TransformerModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Mask, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("example has an empty {0} segment")]
    EmptySegment(&'static str),
    #[error("contrastive batch of {0} has no negatives; need at least 2")]
    BatchTooSmall(usize),
    #[error("budget {budget} exceeds available data ({available})")]
    BudgetExceedsData { budget: usize, available: usize },
    #[error("{stage} diverged at step {step}: non-finite loss")]
    Diverged { stage: &'static str, step: usize },
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// How generative examples are packed for next-token prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GenerativeMode {
    /// `[X; Z; Y]` under the bottleneck mask.
    #[default]
    Ib,
    /// Plain causal `[X; Y]`, no bottleneck tokens.
    Naive,
}

impl std::str::FromStr for GenerativeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ib" => Ok(Self::Ib),
            "naive" => Ok(Self::Naive),
            other => Err(format!("unknown generative mode {other:?}")),
        }
    }
}

/// Linear warmup to `lr`, then constant.
pub fn learning_rate(base: f64, warmup_steps: usize, step: usize) -> f64 {
    if warmup_steps == 0 {
        base
    } else {
        base * ((step + 1) as f64 / warmup_steps as f64).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub compression_ratio: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub style: GenStyle,
    /// Also train on reconstruction of the domain corpus (`X = Y = D`)
    /// when `style` is not already `pt-recon`.
    pub mix_reconstruction: bool,
    /// Prefix length fraction for the `pt-prefix` style.
    pub split_fraction: f64,
    pub mode: GenerativeMode,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            compression_ratio: 32.0,
            batch_size: 8,
            steps: 200,
            warmup_steps: 20,
            style: GenStyle::Sft,
            mix_reconstruction: true,
            split_fraction: 0.5,
            mode: GenerativeMode::Ib,
            grad_clip: 1.0,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl Stage1Config {
    pub fn policy(&self) -> Result<CompressionPolicy> {
        Ok(CompressionPolicy::new(self.compression_ratio)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.policy()?;
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig(
                "stage1 batch_size must be >= 1".into(),
            ));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(TrainError::InvalidConfig("grad_clip must be >= 0".into()));
        }
        self.optimizer.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub temperature: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub attention: AttentionMode,
    pub compression_ratio: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            batch_size: 8,
            steps: 200,
            warmup_steps: 20,
            attention: AttentionMode::Causal,
            compression_ratio: 32.0,
            grad_clip: 1.0,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl Stage2Config {
    pub fn policy(&self) -> Result<CompressionPolicy> {
        Ok(CompressionPolicy::new(self.compression_ratio)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.policy()?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(TrainError::InvalidConfig("temperature must be > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::BatchTooSmall(self.batch_size));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(TrainError::InvalidConfig("grad_clip must be >= 0".into()));
        }
        self.optimizer.validate()?;
        Ok(())
    }
}

/// A generative example laid out for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSequence {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub mask: Mask,
    /// `targets[i]` is the token predicted from position `i`.
    pub targets: Vec<usize>,
    /// Positions whose prediction enters the loss.
    pub loss_positions: Vec<bool>,
    pub layout: SegmentLayout,
}

/// Packs `[X; BNK x z; Y]` (or `[X; Y]` in naive mode) with targets shifted
/// by one, so the first target token is predicted from the last `Z` slot.
pub fn pack_stage1(
    example: &GenExample,
    policy: &CompressionPolicy,
    mode: GenerativeMode,
    block_z_to_x: bool,
) -> Result<PackedSequence> {
    let (x, y) = (&example.x_tokens, &example.y_tokens);
    if x.is_empty() {
        return Err(TrainError::EmptySegment("input"));
    }
    if y.is_empty() {
        return Err(TrainError::EmptySegment("target"));
    }
    let z = match mode {
        GenerativeMode::Ib => policy.z_count(x.len())?,
        GenerativeMode::Naive => 0,
    };
    // naive packing has no bottleneck; its layout is one causal segment
    let (layout, mask) = match mode {
        GenerativeMode::Ib => {
            let layout = SegmentLayout::new(x.len(), z, y.len())?;
            (layout, build_ib_mask(layout, block_z_to_x)?.into_mask())
        }
        GenerativeMode::Naive => {
            let layout = SegmentLayout::new(x.len() + y.len(), 0, 0)?;
            (layout, Mask::causal(layout.total()))
        }
    };
    let mut tokens = x.clone();
    tokens.extend(std::iter::repeat_n(BNK, z));
    tokens.extend_from_slice(y);
    let n = tokens.len();
    let mut targets = vec![0; n];
    let mut loss_positions = vec![false; n];
    let first = x.len() + z - 1;
    for (t, &tok) in y.iter().enumerate() {
        targets[first + t] = tok;
        loss_positions[first + t] = true;
    }
    Ok(PackedSequence {
        positions: layout.positions(),
        tokens,
        mask,
        targets,
        loss_positions,
        layout,
    })
}

/// Records the generative loss of one packed sequence on `tape`.
pub fn stage1_loss_on<F: Scalar>(
    model: &TransformerModel<F>,
    tape: &mut Tape<F>,
    vars: &ModelVars,
    packed: &PackedSequence,
) -> Result<Var> {
    packed.layout.fits(model.config().max_seq_len)?;
    let out = model.forward_on(
        tape,
        vars,
        &packed.tokens,
        &packed.mask,
        &packed.positions,
        true,
        false,
    )?;
    let logits = out.logits.expect("logits requested");
    Ok(tape.cross_entropy(logits, &packed.targets, &packed.loss_positions)?)
}

/// Mean next-token loss over the target segment of `example`.
pub fn stage1_loss<F: Scalar>(
    model: &TransformerModel<F>,
    example: &GenExample,
    policy: &CompressionPolicy,
    mode: GenerativeMode,
) -> Result<f64> {
    let packed = pack_stage1(example, policy, mode, false)?;
    let mut tape = Tape::new();
    let vars = model.load(&mut tape);
    let loss = stage1_loss_on(model, &mut tape, &vars, &packed)?;
    Ok(tape.value(loss).data()[0].as_f64())
}

/// Gradient of the bottleneck loss with respect to the embedded input rows
/// (token plus position embeddings), as `[n, d_model]`. Rows `0..x_len`
/// belong to `X`.
pub fn input_embedding_gradient<F: Scalar>(
    model: &TransformerModel<F>,
    example: &GenExample,
    policy: &CompressionPolicy,
    block_z_to_x: bool,
) -> Result<(SegmentLayout, Tensor<F>)> {
    let packed = pack_stage1(example, policy, GenerativeMode::Ib, block_z_to_x)?;
    // embed on a scratch tape, then feed the result in as a leaf
    let embedded = {
        let mut tape = Tape::new();
        let vars = model.load(&mut tape);
        let tok = tape.embedding(vars.vars()[0], &packed.tokens)?;
        let pos = tape.embedding(vars.vars()[1], &packed.positions)?;
        let x = tape.add(tok, pos)?;
        tape.value(x).clone()
    };
    let mut tape = Tape::new();
    let vars = model.load(&mut tape);
    let x = tape.leaf(embedded);
    let out = model.forward_embedded(&mut tape, &vars, x, &packed.mask, true, false)?;
    let loss = tape.cross_entropy(
        out.logits.expect("logits requested"),
        &packed.targets,
        &packed.loss_positions,
    )?;
    let grads = tape.backward(loss)?;
    let shape = tape.value(x).shape().to_vec();
    let g = grads
        .get(x)
        .map(<[F]>::to_vec)
        .unwrap_or_else(|| vec![F::zero(); shape.iter().product()]);
    Ok((packed.layout, Tensor::new(shape, g)?))
}

/// Tokens, positions and mask for encoding `[X; Z]`, plus the row holding
/// the embedding.
pub fn pack_stage2(
    tokens: &[usize],
    policy: &CompressionPolicy,
    mode: AttentionMode,
) -> Result<(Vec<usize>, Vec<usize>, Mask, usize)> {
    if tokens.is_empty() {
        return Err(TrainError::EmptySegment("input"));
    }
    let layout = build_stage2_layout(tokens.len(), policy)?;
    let mut packed = tokens.to_vec();
    packed.extend(std::iter::repeat_n(BNK, layout.z_len()));
    Ok((
        packed,
        layout.positions(),
        attention_mask(mode, &layout),
        embedding_position(&layout)?,
    ))
}

/// Records the (unnormalized) embedding row of `tokens` on `tape`.
pub fn encode_on<F: Scalar>(
    model: &TransformerModel<F>,
    tape: &mut Tape<F>,
    vars: &ModelVars,
    tokens: &[usize],
    policy: &CompressionPolicy,
    mode: AttentionMode,
) -> Result<Var> {
    let (packed, positions, mask, row) = pack_stage2(tokens, policy, mode)?;
    let out = model.forward_on(tape, vars, &packed, &mask, &positions, false, false)?;
    Ok(tape.select_row(out.hidden, row)?)
}

/// Unit-norm embedding: final hidden state at the last bottleneck token.
pub fn encode<F: Scalar>(
    model: &TransformerModel<F>,
    tokens: &[usize],
    policy: &CompressionPolicy,
    mode: AttentionMode,
) -> Result<Vec<F>> {
    let (packed, positions, mask, row) = pack_stage2(tokens, policy, mode)?;
    let hidden = model.hidden_states(&packed, &mask, &positions)?;
    let mut v: Vec<F> = hidden.row(row).to_vec();
    let norm = v
        .iter()
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 {
        return Err(TensorError::NonFinite {
            op: "encode",
            node: row,
        }
        .into());
    }
    let inv = F::from_f64(1.0 / norm);
    v.iter_mut().for_each(|x| *x *= inv);
    Ok(v)
}

/// Unit-norm rows with their ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    rows: Tensor<f32>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, rows: Tensor<f32>) -> Result<Self> {
        if rows.shape().len() != 2 || rows.rows() != ids.len() {
            return Err(TrainError::InvalidConfig(format!(
                "{} ids for embedding matrix of shape {:?}",
                ids.len(),
                rows.shape()
            )));
        }
        for i in 0..rows.rows() {
            let norm = rows
                .row(i)
                .iter()
                .map(|&x| (x as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(TrainError::InvalidConfig(format!(
                    "row {i} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self { ids, rows })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &Tensor<f32> {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.rows.row(i)
    }
}

/// Encodes every `(id, tokens)` item in order.
pub fn encode_all(
    model: &TransformerModel<f32>,
    items: &[(String, Vec<usize>)],
    policy: &CompressionPolicy,
    mode: AttentionMode,
) -> Result<EmbeddingMatrix> {
    let d = model.config().d_model;
    let mut data = Vec::with_capacity(items.len() * d);
    for (_, tokens) in items {
        data.extend(encode(model, tokens, policy, mode)?);
    }
    let ids = items.iter().map(|(id, _)| id.clone()).collect();
    EmbeddingMatrix::new(ids, Tensor::new(vec![items.len(), d], data)?)
}

/// One-directional InfoNCE with in-batch negatives and cosine similarity.
/// `q` and `p` are `[B, d]`; row `i` of `p` is the positive for query `i`.
pub fn info_nce_on<F: Scalar>(tape: &mut Tape<F>, q: Var, p: Var, temperature: f64) -> Result<Var> {
    let b = tape.value(q).rows();
    if b < 2 {
        return Err(TrainError::BatchTooSmall(b));
    }
    let qn = tape.l2_normalize_rows(q)?;
    let pn = tape.l2_normalize_rows(p)?;
    let sims = tape.matmul_nt(qn, pn)?;
    let logits = tape.scale(sims, F::from_f64(1.0 / temperature));
    let targets: Vec<usize> = (0..b).collect();
    Ok(tape.cross_entropy(logits, &targets, &vec![true; b])?)
}

pub fn info_nce<F: Scalar>(q: &Tensor<F>, p: &Tensor<F>, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (qv, pv) = (tape.leaf(q.clone()), tape.leaf(p.clone()));
    let loss = info_nce_on(&mut tape, qv, pv, temperature)?;
    Ok(tape.value(loss).data()[0].as_f64())
}

/// Contrastive loss of one batch of pairs.
pub fn stage2_loss<F: Scalar>(
    model: &TransformerModel<F>,
    batch: &[&PairExample],
    config: &Stage2Config,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.load(&mut tape);
    let loss = stage2_loss_on(model, &mut tape, &vars, batch, config)?;
    Ok(tape.value(loss).data()[0].as_f64())
}

fn stage2_loss_on<F: Scalar>(
    model: &TransformerModel<F>,
    tape: &mut Tape<F>,
    vars: &ModelVars,
    batch: &[&PairExample],
    config: &Stage2Config,
) -> Result<Var> {
    if batch.len() < 2 {
        return Err(TrainError::BatchTooSmall(batch.len()));
    }
    let policy = config.policy()?;
    let mut qs = Vec::with_capacity(batch.len());
    let mut ps = Vec::with_capacity(batch.len());
    for pair in batch {
        qs.push(encode_on(
            model,
            tape,
            vars,
            &pair.query_tokens,
            &policy,
            config.attention,
        )?);
        ps.push(encode_on(
            model,
            tape,
            vars,
            &pair.positive_tokens,
            &policy,
            config.attention,
        )?);
    }
    let q = tape.concat_rows(&qs)?;
    let p = tape.concat_rows(&ps)?;
    info_nce_on(tape, q, p, config.temperature)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Called after every optimizer step; an error aborts training.
pub type StepObserver<'a> = dyn FnMut(&StepRecord, &TransformerModel<f32>) -> Result<()> + 'a;

/// Cycles through a seeded permutation of `0..n`, reshuffling every epoch.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            rng,
            order,
            cursor: 0,
        }
    }

    /// `size` distinct indices (fewer only if `size` exceeds the dataset).
    fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let i = self.order[self.cursor];
            self.cursor += 1;
            if !out.contains(&i) {
                out.push(i);
            }
        }
        out
    }
}

fn apply_update(
    model: &mut TransformerModel<f32>,
    opt: &mut AdamW<f32>,
    tape: &Tape<f32>,
    vars: &ModelVars,
    loss: Var,
    lr: f64,
    clip: f64,
) -> Result<()> {
    let mut grads = tape.backward(loss)?;
    let mut tensors: Vec<Tensor<f32>> = vars
        .vars()
        .iter()
        .zip(model.params())
        .map(|(&v, p)| {
            let g = grads.take(v).unwrap_or_else(|| vec![0.0; p.len()]);
            Tensor::new(p.shape().to_vec(), g)
        })
        .collect::<std::result::Result<_, _>>()?;
    if clip > 0.0 {
        let norm = tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|&g| (g as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if norm > clip {
            let s = (clip / norm) as f32;
            tensors
                .iter_mut()
                .for_each(|t| t.data_mut().iter_mut().for_each(|g| *g *= s));
        }
    }
    opt.step(model.params_mut(), &tensors, lr)?;
    Ok(())
}

/// Generative training through the bottleneck (or plain causal in naive
/// mode). Returns the per-step loss history.
pub fn run_stage1(
    model: &mut TransformerModel<f32>,
    data: &[GenExample],
    config: &Stage1Config,
    observer: Option<&mut StepObserver<'_>>,
) -> Result<Vec<StepRecord>> {
    config.validate()?;
    if config.steps == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let policy = config.policy()?;
    let packed: Vec<PackedSequence> = data
        .iter()
        .map(|ex| {
            let p = pack_stage1(ex, &policy, config.mode, false)?;
            p.layout.fits(model.config().max_seq_len)?;
            Ok(p)
        })
        .collect::<Result<_>>()?;
    let mut opt = AdamW::new(config.optimizer, &model.param_shapes(), model.decay_flags())?;
    let mut sampler = BatchSampler::new(data.len(), config.seed);
    let mut observer = observer;
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let lr = learning_rate(config.optimizer.lr, config.warmup_steps, step);
        let mut tape = Tape::new();
        let vars = model.load(&mut tape);
        let losses = sampler
            .next(config.batch_size)
            .into_iter()
            .map(|i| stage1_loss_on(model, &mut tape, &vars, &packed[i]))
            .collect::<Result<Vec<_>>>()?;
        let loss = tape.mean(&losses)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(TrainError::Diverged {
                stage: "stage1",
                step,
            });
        }
        apply_update(model, &mut opt, &tape, &vars, loss, lr, config.grad_clip)?;
        let rec = StepRecord {
            stage: 1,
            step,
            loss: value,
            lr,
        };
        if let Some(obs) = observer.as_deref_mut() {
            obs(&rec, model)?;
        }
        history.push(rec);
    }
    Ok(history)
}

/// Contrastive training with in-batch negatives.
pub fn run_stage2(
    model: &mut TransformerModel<f32>,
    data: &[PairExample],
    config: &Stage2Config,
    observer: Option<&mut StepObserver<'_>>,
) -> Result<Vec<StepRecord>> {
    config.validate()?;
    if config.steps == 0 {
        return Ok(Vec::new());
    }
    if data.len() < 2 {
        return Err(if data.is_empty() {
            TrainError::EmptyDataset
        } else {
            TrainError::BatchTooSmall(1)
        });
    }
    let mut opt = AdamW::new(config.optimizer, &model.param_shapes(), model.decay_flags())?;
    let mut sampler = BatchSampler::new(data.len(), config.seed);
    let mut observer = observer;
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let lr = learning_rate(config.optimizer.lr, config.warmup_steps, step);
        let batch: Vec<&PairExample> = sampler
            .next(config.batch_size)
            .into_iter()
            .map(|i| &data[i])
            .collect();
        let mut tape = Tape::new();
        let vars = model.load(&mut tape);
        let loss = stage2_loss_on(model, &mut tape, &vars, &batch, config)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(TrainError::Diverged {
                stage: "stage2",
                step,
            });
        }
        apply_update(model, &mut opt, &tape, &vars, loss, lr, config.grad_clip)?;
        let rec = StepRecord {
            stage: 2,
            step,
            loss: value,
            lr,
        };
        if let Some(obs) = observer.as_deref_mut() {
            obs(&rec, model)?;
        }
        history.push(rec);
    }
    Ok(history)
}

/// Splits a fixed example budget between the two stages:
/// `round(r_learn * budget)` generative examples, the rest contrastive,
/// each sampled without replacement.
pub fn split_allocation(
    gen_data: &[GenExample],
    pair_data: &[PairExample],
    r_learn: f64,
    budget: usize,
    seed: u64,
) -> Result<(Vec<GenExample>, Vec<PairExample>)> {
    if !(0.0..=1.0).contains(&r_learn) {
        return Err(TrainError::InvalidConfig(format!(
            "r_learn {r_learn} outside [0, 1]"
        )));
    }
    let n_gen = (r_learn * budget as f64).round() as usize;
    let n_pair = budget - n_gen;
    for (need, have) in [(n_gen, gen_data.len()), (n_pair, pair_data.len())] {
        if need > have {
            return Err(TrainError::BudgetExceedsData {
                budget: need,
                available: have,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = rand::seq::index::sample(&mut rng, gen_data.len(), n_gen)
        .into_iter()
        .map(|i| gen_data[i].clone())
        .collect();
    let pairs = rand::seq::index::sample(&mut rng, pair_data.len(), n_pair)
        .into_iter()
        .map(|i| pair_data[i].clone())
        .collect();
    Ok((gen, pairs))
}

/// Greedy continuation of `x` for up to `max_new` tokens, read off the
/// bottleneck in `Ib` mode. Stops early at EOS (which is not returned).
pub fn greedy_decode<F: Scalar>(
    model: &TransformerModel<F>,
    x: &[usize],
    max_new: usize,
    policy: &CompressionPolicy,
    mode: GenerativeMode,
) -> Result<Vec<usize>> {
    if x.is_empty() {
        return Err(TrainError::EmptySegment("input"));
    }
    let z = match mode {
        GenerativeMode::Ib => policy.z_count(x.len())?,
        GenerativeMode::Naive => 0,
    };
    let mut out = Vec::new();
    while out.len() < max_new {
        let layout = match mode {
            GenerativeMode::Ib => SegmentLayout::new(x.len(), z, out.len())?,
            GenerativeMode::Naive => SegmentLayout::new(x.len() + out.len(), 0, 0)?,
        };
        layout.fits(model.config().max_seq_len)?;
        let mask = match mode {
            GenerativeMode::Ib => build_ib_mask(layout, false)?.into_mask(),
            GenerativeMode::Naive => Mask::causal(layout.total()),
        };
        let mut tokens = x.to_vec();
        tokens.extend(std::iter::repeat_n(BNK, z));
        tokens.extend_from_slice(&out);
        let logits = model.forward(&tokens, &mask, &layout.positions())?.logits;
        let last = logits.row(tokens.len() - 1);
        let mut best = 0;
        for (i, v) in last.iter().enumerate() {
            if *v > last[best] {
                best = i;
            }
        }
        if best == crate::corpus::EOS {
            break;
        }
        out.push(best);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 24,
            seed,
        }
    }

    fn example(x: &[usize], y: &[usize]) -> GenExample {
        GenExample {
            x_tokens: x.to_vec(),
            y_tokens: y.to_vec(),
            style: GenStyle::Sft,
        }
    }

    #[test]
    fn packing_shifts_targets_onto_last_bottleneck_slot() {
        let ex = example(&[4, 5, 6], &[7, 8]);
        let policy = CompressionPolicy::new(2.0).unwrap();
        let p = pack_stage1(&ex, &policy, GenerativeMode::Ib, false).unwrap();
        assert_eq!(p.tokens, vec![4, 5, 6, BNK, BNK, 7, 8]);
        assert_eq!(p.positions, (0..7).collect::<Vec<_>>());
        // first target predicted from the last Z row, second from Y1
        assert_eq!(
            p.loss_positions,
            vec![false, false, false, false, true, true, false]
        );
        assert_eq!((p.targets[4], p.targets[5]), (7, 8));
        assert_eq!(p.loss_positions.iter().filter(|&&b| b).count(), 2);

        let naive = pack_stage1(&ex, &policy, GenerativeMode::Naive, false).unwrap();
        assert_eq!(naive.tokens, vec![4, 5, 6, 7, 8]);
        assert_eq!(naive.loss_positions, vec![false, false, true, true, false]);

        assert!(matches!(
            pack_stage1(&example(&[4], &[]), &policy, GenerativeMode::Ib, false),
            Err(TrainError::EmptySegment("target"))
        ));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let cfg = ModelConfig {
            vocab_size: 4,
            ..tiny(0)
        };
        let mut model = TransformerModel::<f64>::init(cfg).unwrap();
        // zero token embeddings make the tied output projection all zero
        model.params_mut()[0]
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let policy = CompressionPolicy::new(2.0).unwrap();
        let loss = stage1_loss(
            &model,
            &example(&[1, 2, 3], &[2, 1, 3]),
            &policy,
            GenerativeMode::Ib,
        )
        .unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_is_mean_of_independent_target_cross_entropies() {
        let model = TransformerModel::<f64>::init(tiny(4)).unwrap();
        let ex = example(&[4, 5, 6], &[7, 8]);
        let policy = CompressionPolicy::new(2.0).unwrap();
        let loss = stage1_loss(&model, &ex, &policy, GenerativeMode::Ib).unwrap();
        let p = pack_stage1(&ex, &policy, GenerativeMode::Ib, false).unwrap();
        let logits = model
            .forward(&p.tokens, &p.mask, &p.positions)
            .unwrap()
            .logits;
        let mut total = 0.0;
        for (row, target) in [(4usize, 7usize), (5, 8)] {
            let r = logits.row(row);
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - r[target];
        }
        assert!((loss - total / 2.0).abs() < 1e-12);
    }

    #[test]
    fn blocked_bottleneck_cuts_input_gradient() {
        let model = TransformerModel::<f64>::init(tiny(9)).unwrap();
        let ex = example(&[4, 5, 6, 9], &[7, 8, 10]);
        let policy = CompressionPolicy::new(2.0).unwrap();
        let (layout, g) = input_embedding_gradient(&model, &ex, &policy, true).unwrap();
        assert!(g.data()[..layout.x_len() * 8].iter().all(|&v| v == 0.0));
        let (_, g) = input_embedding_gradient(&model, &ex, &policy, false).unwrap();
        assert!(g.data()[..layout.x_len() * 8].iter().any(|&v| v != 0.0));

        // and the loss ignores X when Z cannot read it
        let perturbed = example(&[9, 9, 4, 4], &[7, 8, 10]);
        let loss = |e: &GenExample| {
            let p = pack_stage1(e, &policy, GenerativeMode::Ib, true).unwrap();
            let mut tape = Tape::new();
            let vars = model.load(&mut tape);
            let l = stage1_loss_on(&model, &mut tape, &vars, &p).unwrap();
            tape.value(l).data()[0]
        };
        assert_eq!(loss(&ex), loss(&perturbed));
    }

    #[test]
    fn info_nce_examples() {
        let q = Tensor::from_f64_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l: f64 = info_nce::<f64>(&q, &q, 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);

        let same = Tensor::from_f64_rows(&vec![vec![0.3, -0.2, 0.5]; 4]).unwrap();
        assert!((info_nce::<f64>(&same, &same, 0.05).unwrap() - 4f64.ln()).abs() < 1e-12);

        let sharp = info_nce::<f64>(&q, &q, 1e-3).unwrap();
        assert!(sharp < 1e-12);

        let one = Tensor::from_f64_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            info_nce::<f64>(&one, &one, 1.0),
            Err(TrainError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn encoder_output_is_unit_and_deterministic() {
        let model = TransformerModel::<f32>::init(tiny(2)).unwrap();
        let policy = CompressionPolicy::new(2.0).unwrap();
        let v = encode(&model, &[4, 5, 6], &policy, AttentionMode::Causal).unwrap();
        let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        assert_eq!(
            v,
            encode(&model, &[4, 5, 6], &policy, AttentionMode::Causal).unwrap()
        );
        assert_ne!(
            v,
            encode(&model, &[4, 5, 6], &policy, AttentionMode::Bidirectional).unwrap()
        );
        let (packed, _, _, row) = pack_stage2(&[4, 5, 6], &policy, AttentionMode::Causal).unwrap();
        assert_eq!(row, packed.len() - 1);
        assert!(encode(&model, &[], &policy, AttentionMode::Causal).is_err());
    }

    #[test]
    fn null_runs_leave_model_unchanged() {
        let mut model = TransformerModel::<f32>::init(tiny(1)).unwrap();
        let before = model.clone();
        let cfg = Stage1Config {
            steps: 0,
            ..Stage1Config::default()
        };
        assert!(run_stage1(&mut model, &[], &cfg, None).unwrap().is_empty());
        let cfg2 = Stage2Config {
            steps: 0,
            ..Stage2Config::default()
        };
        assert!(run_stage2(&mut model, &[], &cfg2, None).unwrap().is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn stage1_is_seeded_and_learns() {
        let data: Vec<GenExample> = (0..6).map(|i| example(&[4 + i, 5], &[4 + i, 11])).collect();
        let cfg = Stage1Config {
            compression_ratio: 1.0,
            batch_size: 3,
            steps: 60,
            warmup_steps: 5,
            optimizer: AdamWConfig {
                lr: 1e-2,
                ..AdamWConfig::default()
            },
            ..Stage1Config::default()
        };
        let run = || {
            let mut m = TransformerModel::<f32>::init(tiny(5)).unwrap();
            let h = run_stage1(&mut m, &data, &cfg, None).unwrap();
            (m, h)
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert_eq!(h1.len(), 60);
        assert!(
            h1.last().unwrap().loss < h1[0].loss * 0.5,
            "{:?}",
            h1.last()
        );
    }

    #[test]
    fn stage2_rejects_single_pair_batches() {
        let cfg = Stage2Config {
            batch_size: 1,
            ..Stage2Config::default()
        };
        let mut model = TransformerModel::<f32>::init(tiny(1)).unwrap();
        let pair = PairExample {
            query_tokens: vec![4],
            positive_tokens: vec![5],
        };
        assert!(matches!(
            run_stage2(&mut model, &[pair.clone(), pair], &cfg, None),
            Err(TrainError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn allocation_split() {
        let gen: Vec<GenExample> = (0..100).map(|i| example(&[i], &[i])).collect();
        let pairs: Vec<PairExample> = (0..100)
            .map(|i| PairExample {
                query_tokens: vec![i],
                positive_tokens: vec![i],
            })
            .collect();
        let (g, p) = split_allocation(&gen, &pairs, 0.4, 100, 3).unwrap();
        assert_eq!((g.len(), p.len()), (40, 60));
        let (g0, p0) = split_allocation(&gen, &pairs, 0.0, 100, 3).unwrap();
        assert_eq!((g0.len(), p0.len()), (0, 100));
        let (g1, p1) = split_allocation(&gen, &pairs, 1.0, 100, 3).unwrap();
        assert_eq!((g1.len(), p1.len()), (100, 0));
        assert_eq!(split_allocation(&gen, &pairs, 0.4, 100, 3).unwrap(), (g, p));
        let unique: std::collections::HashSet<_> = g1.iter().map(|e| e.x_tokens[0]).collect();
        assert_eq!(unique.len(), 100);
        assert!(matches!(
            split_allocation(&gen, &pairs, 0.5, 300, 3),
            Err(TrainError::BudgetExceedsData { .. })
        ));
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(learning_rate(1.0, 0, 0), 1.0);
        assert_eq!(learning_rate(1.0, 4, 0), 0.25);
        assert_eq!(learning_rate(1.0, 4, 3), 1.0);
        assert_eq!(learning_rate(1.0, 4, 10), 1.0);
    }
}
