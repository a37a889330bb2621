//! Pre-norm decoder-only transformer whose attention takes an explicit
//! boolean mask and explicit position ids.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::ib_mask::{build_ib_mask, SegmentLayout};
use crate::tensor::{Mask, Scalar, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("length mismatch: {tokens} tokens, {positions} positions, mask {rows}x{cols}")]
    LengthMismatch {
        tokens: usize,
        positions: usize,
        rows: usize,
        cols: usize,
    },
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },
    #[error("position id {pos} outside max_seq_len {max}")]
    PositionOutOfRange { pos: usize, max: usize },
    #[error("empty token sequence")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.vocab_size < 4 {
            return Err(ModelError::InvalidConfig(
                "vocab_size must be >= 4 to hold the special tokens".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `V·d + S·d + L·(2d + 4d² + 2·d·d_ff) + d`; the output projection is
    /// tied to the token embedding.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        self.vocab_size * d
            + self.max_seq_len * d
            + self.n_layers * (2 * d + 4 * d * d + 2 * d * self.d_ff)
            + d
    }

    /// Names and shapes of every parameter in registry order.
    pub fn parameter_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut specs = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            specs.push((p("attn_norm"), vec![d]));
            specs.push((p("wq"), vec![d, d]));
            specs.push((p("wk"), vec![d, d]));
            specs.push((p("wv"), vec![d, d]));
            specs.push((p("wo"), vec![d, d]));
            specs.push((p("ffn_norm"), vec![d]));
            specs.push((p("w1"), vec![d, self.d_ff]));
            specs.push((p("w2"), vec![self.d_ff, d]));
        }
        specs.push(("final_norm".to_string(), vec![d]));
        specs
    }
}

/// Attention pattern used when encoding `[X; Z]` sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    #[default]
    Causal,
    Bidirectional,
}

impl std::str::FromStr for AttentionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "causal" => Ok(Self::Causal),
            "bidirectional" => Ok(Self::Bidirectional),
            other => Err(format!("unknown attention mode {other:?}")),
        }
    }
}

/// Mask for an encoding layout: the layout's own (causal) mask, or all-true
/// for the bidirectional ablation.
pub fn attention_mask(mode: AttentionMode, layout: &SegmentLayout) -> Mask {
    match mode {
        AttentionMode::Bidirectional => Mask::full(layout.total()),
        AttentionMode::Causal => match build_ib_mask(*layout, false) {
            Ok(m) => m.into_mask(),
            // a layout without bottleneck and without target is plain causal
            Err(_) => Mask::causal(layout.total()),
        },
    }
}

const PER_LAYER: usize = 8;

#[derive(Debug, Clone, Copy)]
struct LayerVars {
    attn_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ffn_norm: Var,
    w1: Var,
    w2: Var,
}

/// Model parameters registered as leaves of one tape.
#[derive(Debug, Clone)]
pub struct ModelVars {
    all: Vec<Var>,
}

impl ModelVars {
    /// Wraps caller-registered leaves, one per parameter in registry order.
    pub fn from_vars<F: Scalar>(model: &TransformerModel<F>, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), model.params.len(), "one var per parameter");
        Self { all: vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.all
    }

    fn tok_emb(&self) -> Var {
        self.all[0]
    }

    fn pos_emb(&self) -> Var {
        self.all[1]
    }

    fn layer(&self, l: usize) -> LayerVars {
        let s = &self.all[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
        LayerVars {
            attn_norm: s[0],
            wq: s[1],
            wk: s[2],
            wv: s[3],
            wo: s[4],
            ffn_norm: s[5],
            w1: s[6],
            w2: s[7],
        }
    }

    fn final_norm(&self) -> Var {
        *self.all.last().expect("non-empty")
    }
}

/// Nodes produced by [`TransformerModel::forward_on`].
#[derive(Debug, Clone)]
pub struct TapeOutput {
    pub logits: Option<Var>,
    pub hidden: Var,
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    pub logits: Tensor<F>,
    pub final_hidden: Tensor<F>,
    /// Per layer, per head attention probabilities when requested.
    pub attention: Option<Vec<Vec<Tensor<F>>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel<F> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<F>>,
}

impl<F: Scalar> TransformerModel<F> {
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let base = Normal::new(0.0, 0.02).expect("valid std");
        let residual =
            Normal::new(0.0, 0.02 / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.parameter_specs() {
            let n: usize = shape.iter().product();
            let data: Vec<F> = if name.ends_with("norm") {
                vec![F::one(); n]
            } else {
                let dist = if name.ends_with("wo") || name.ends_with("w2") {
                    &residual
                } else {
                    &base
                };
                (0..n).map(|_| F::from_f64(dist.sample(&mut rng))).collect()
            };
            params.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    /// Rebuilds a model from named tensors; names and shapes must match the
    /// registry for `config` exactly.
    pub fn from_parts(config: ModelConfig, params: Vec<Tensor<F>>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = config.parameter_specs();
        if specs.len() != params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in specs.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(ModelError::InvalidConfig(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self {
            config,
            names: specs.into_iter().map(|(n, _)| n).collect(),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|p| p.shape().to_vec()).collect()
    }

    /// Weight decay applies to matrices, not to norm gains.
    pub fn decay_flags(&self) -> Vec<bool> {
        self.params.iter().map(|p| p.shape().len() >= 2).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn load(&self, tape: &mut Tape<F>) -> ModelVars {
        ModelVars {
            all: self.params.iter().map(|p| tape.leaf(p.clone())).collect(),
        }
    }

    fn validate_inputs(
        &self,
        tokens: &[usize],
        mask: &Mask,
        positions: &[usize],
    ) -> Result<(), ModelError> {
        let n = tokens.len();
        if n == 0 {
            return Err(ModelError::Empty);
        }
        if positions.len() != n || mask.rows() != n || mask.cols() != n {
            return Err(ModelError::LengthMismatch {
                tokens: n,
                positions: positions.len(),
                rows: mask.rows(),
                cols: mask.cols(),
            });
        }
        if n > self.config.max_seq_len {
            return Err(ModelError::TooLong {
                len: n,
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfVocab {
                id,
                vocab: self.config.vocab_size,
            });
        }
        if let Some(&pos) = positions.iter().find(|&&p| p >= self.config.max_seq_len) {
            return Err(ModelError::PositionOutOfRange {
                pos,
                max: self.config.max_seq_len,
            });
        }
        mask.validate()?;
        Ok(())
    }

    /// Records one sequence's forward pass on `tape`.
    pub fn forward_on(
        &self,
        tape: &mut Tape<F>,
        vars: &ModelVars,
        tokens: &[usize],
        mask: &Mask,
        positions: &[usize],
        with_logits: bool,
        keep_attention: bool,
    ) -> Result<TapeOutput, ModelError> {
        self.validate_inputs(tokens, mask, positions)?;
        let tok = tape.embedding(vars.tok_emb(), tokens)?;
        let pos = tape.embedding(vars.pos_emb(), positions)?;
        let x = tape.add(tok, pos)?;
        self.forward_embedded(tape, vars, x, mask, with_logits, keep_attention)
    }

    /// Runs the blocks on already-embedded inputs `x` (`[n, d_model]`).
    pub fn forward_embedded(
        &self,
        tape: &mut Tape<F>,
        vars: &ModelVars,
        x: Var,
        mask: &Mask,
        with_logits: bool,
        keep_attention: bool,
    ) -> Result<TapeOutput, ModelError> {
        let cfg = &self.config;
        let n = tape.value(x).rows();
        if tape.value(x).shape() != [n, cfg.d_model] || mask.rows() != n || mask.cols() != n {
            return Err(ModelError::LengthMismatch {
                tokens: n,
                positions: n,
                rows: mask.rows(),
                cols: mask.cols(),
            });
        }
        mask.validate()?;
        let hd = cfg.head_dim();
        let inv_sqrt = F::from_f64(1.0 / (hd as f64).sqrt());
        let mut attention = Vec::new();
        let mut x = x;
        for l in 0..cfg.n_layers {
            let lv = vars.layer(l);
            let h = tape.rms_norm(x, lv.attn_norm)?;
            let q = tape.matmul(h, lv.wq)?;
            let k = tape.matmul(h, lv.wk)?;
            let v = tape.matmul(h, lv.wv)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, head * hd, hd)?;
                let kh = tape.slice_cols(k, head * hd, hd)?;
                let vh = tape.slice_cols(v, head * hd, hd)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, inv_sqrt);
                let probs = tape.masked_softmax(scores, mask)?;
                if keep_attention {
                    attention.push(probs);
                }
                heads.push(tape.matmul(probs, vh)?);
            }
            let merged = tape.concat_cols(&heads)?;
            let attn_out = tape.matmul(merged, lv.wo)?;
            x = tape.add(x, attn_out)?;

            let h = tape.rms_norm(x, lv.ffn_norm)?;
            let up = tape.matmul(h, lv.w1)?;
            let act = tape.gelu(up);
            let down = tape.matmul(act, lv.w2)?;
            x = tape.add(x, down)?;
        }
        let hidden = tape.rms_norm(x, vars.final_norm())?;
        let logits = if with_logits {
            Some(tape.matmul_nt(hidden, vars.tok_emb())?)
        } else {
            None
        };
        Ok(TapeOutput {
            logits,
            hidden,
            attention,
        })
    }

    pub fn forward(
        &self,
        tokens: &[usize],
        mask: &Mask,
        positions: &[usize],
    ) -> Result<ForwardOutput<F>, ModelError> {
        self.forward_impl(tokens, mask, positions, false)
    }

    pub fn forward_with_attention(
        &self,
        tokens: &[usize],
        mask: &Mask,
        positions: &[usize],
    ) -> Result<ForwardOutput<F>, ModelError> {
        self.forward_impl(tokens, mask, positions, true)
    }

    fn forward_impl(
        &self,
        tokens: &[usize],
        mask: &Mask,
        positions: &[usize],
        keep_attention: bool,
    ) -> Result<ForwardOutput<F>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.load(&mut tape);
        let out = self.forward_on(
            &mut tape,
            &vars,
            tokens,
            mask,
            positions,
            true,
            keep_attention,
        )?;
        tape.check_finite()?;
        let attention = keep_attention.then(|| {
            out.attention
                .chunks(self.config.n_heads)
                .map(|layer| layer.iter().map(|&v| tape.value(v).clone()).collect())
                .collect()
        });
        Ok(ForwardOutput {
            logits: tape.value(out.logits.expect("requested")).clone(),
            final_hidden: tape.value(out.hidden).clone(),
            attention,
        })
    }

    /// Final-layer hidden states only, skipping the vocabulary projection.
    pub fn hidden_states(
        &self,
        tokens: &[usize],
        mask: &Mask,
        positions: &[usize],
    ) -> Result<Tensor<F>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.load(&mut tape);
        let out = self.forward_on(&mut tape, &vars, tokens, mask, positions, false, false)?;
        tape.check_finite()?;
        Ok(tape.value(out.hidden).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 12,
            seed: 3,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let cfg = ModelConfig {
            d_model: 64,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.head_dim(), 16);
        assert!(ModelConfig {
            n_heads: 3,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            vocab_size: 3,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            n_layers: 0,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(TransformerModel::<f32>::init(ModelConfig { d_ff: 0, ..tiny() }).is_err());
    }

    #[test]
    fn parameter_count_closed_form() {
        // hand-expanded for three configs
        let desk = ModelConfig::default();
        assert_eq!(
            desk.parameter_count(),
            512 * 128 + 256 * 128 + 4 * (256 + 65536 + 131072) + 128
        );
        assert_eq!(
            tiny().parameter_count(),
            16 * 8 + 12 * 8 + 2 * (16 + 256 + 256) + 8
        );
        let small = ModelConfig {
            vocab_size: 100,
            d_model: 32,
            n_layers: 1,
            n_heads: 4,
            d_ff: 64,
            max_seq_len: 20,
            seed: 0,
        };
        assert_eq!(
            small.parameter_count(),
            3200 + 640 + (64 + 4096 + 4096) + 32
        );
        for cfg in [desk, tiny(), small] {
            let m = TransformerModel::<f32>::init(cfg).unwrap();
            assert_eq!(m.num_parameters(), cfg.parameter_count());
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = TransformerModel::<f32>::init(tiny()).unwrap();
        let b = TransformerModel::<f32>::init(tiny()).unwrap();
        assert_eq!(a, b);
        let c = TransformerModel::<f32>::init(ModelConfig { seed: 4, ..tiny() }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn residual_projections_use_smaller_scale() {
        let m = TransformerModel::<f64>::init(ModelConfig::default()).unwrap();
        let std = |name: &str| {
            let i = m.param_names().iter().position(|n| n == name).unwrap();
            let d = m.params()[i].data();
            (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt()
        };
        assert!((std("layers.0.wq") - 0.02).abs() < 1e-3);
        assert!((std("layers.0.wo") - 0.02 / 8f64.sqrt()).abs() < 1e-3);
        assert_eq!(std("layers.1.ffn_norm"), 1.0);
    }

    #[test]
    fn output_shapes_and_input_errors() {
        let m = TransformerModel::<f32>::init(tiny()).unwrap();
        let out = m
            .forward(&[1, 2, 3, 4, 5], &Mask::causal(5), &[0, 1, 2, 3, 4])
            .unwrap();
        assert_eq!(out.logits.shape(), &[5, 16]);
        assert_eq!(out.final_hidden.shape(), &[5, 8]);

        assert!(matches!(
            m.forward(&[1, 2], &Mask::causal(3), &[0, 1]),
            Err(ModelError::LengthMismatch { .. })
        ));
        assert!(matches!(
            m.forward(&[1, 99], &Mask::causal(2), &[0, 1]),
            Err(ModelError::TokenOutOfVocab { id: 99, .. })
        ));
        let mut holes = Mask::causal(2);
        holes.set(0, 0, false);
        assert!(matches!(
            m.forward(&[1, 2], &holes, &[0, 1]),
            Err(ModelError::Tensor(TensorError::FullyMaskedRow { row: 0 }))
        ));
        let long: Vec<usize> = (0..13).map(|i| i % 16).collect();
        assert!(matches!(
            m.forward(&long, &Mask::causal(13), &(0..13).collect::<Vec<_>>()),
            Err(ModelError::TooLong { .. })
        ));
    }

    #[test]
    fn causal_prefix_is_unaffected_by_later_tokens() {
        let m = TransformerModel::<f64>::init(tiny()).unwrap();
        let pos: Vec<usize> = (0..6).collect();
        let a = m
            .forward(&[4, 5, 6, 7, 8, 9], &Mask::causal(6), &pos)
            .unwrap();
        let b = m
            .forward(&[4, 5, 6, 7, 1, 2], &Mask::causal(6), &pos)
            .unwrap();
        for i in 0..4 {
            assert_eq!(a.logits.row(i), b.logits.row(i));
        }
        assert_ne!(a.logits.row(4), b.logits.row(4));
    }

    #[test]
    fn attention_modes() {
        let l = SegmentLayout::new(2, 1, 0).unwrap();
        assert_eq!(
            attention_mask(AttentionMode::Bidirectional, &l),
            Mask::full(3)
        );
        let causal = attention_mask(AttentionMode::Causal, &l);
        assert_eq!(causal, Mask::causal(3));
        for i in 0..3 {
            assert_eq!(causal.allowed_in_row(i), (0..=i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn degenerate_layout_matches_plain_causal_forward() {
        let m = TransformerModel::<f32>::init(tiny()).unwrap();
        let l = SegmentLayout::new(4, 0, 0).unwrap();
        let ib = build_ib_mask(l, false).unwrap();
        let toks = [5, 6, 7, 8];
        let a = m.forward(&toks, ib.mask(), &l.positions()).unwrap();
        let b = m.forward(&toks, &Mask::causal(4), &l.positions()).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn attention_probabilities_are_exposed() {
        let m = TransformerModel::<f32>::init(tiny()).unwrap();
        let out = m
            .forward_with_attention(&[1, 2, 3], &Mask::causal(3), &[0, 1, 2])
            .unwrap();
        let att = out.attention.unwrap();
        assert_eq!(att.len(), 2);
        assert_eq!(att[0].len(), 2);
        assert_eq!(att[1][1].get2(0, 2), 0.0);
    }
}
