//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward rule. Parents always precede children, so the
//! backward pass is a single reverse sweep that visits each node once.

use crate::tensor::{Mask, Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const RMS_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<F>,
    },
    MaskedSoftmax(Var),
    Gelu(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRow {
        x: Var,
        row: usize,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        selected: Vec<usize>,
        probs: Vec<F>,
    },
    Sum(Var),
    Mean(Vec<Var>),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Embedding { .. } => "embedding",
            Op::RmsNorm { .. } => "rms_norm",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::Gelu(..) => "gelu",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SelectRow { .. } => "select_row",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    non_finite: Option<(usize, &'static str)>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_matrix<F: Scalar>(op: &'static str, t: &Tensor<F>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::ShapeMismatch {
            op,
            left: other.to_vec(),
            right: vec![0, 0],
        }),
    }
}

/// Softmax of `row` restricted to the allowed entries; blocked entries are
/// exactly zero.
fn softmax_row<F: Scalar>(row: &[F], allowed: &[bool], out: &mut [F]) -> bool {
    let mut max = F::neg_infinity();
    for (&v, &a) in row.iter().zip(allowed) {
        if a && v > max {
            max = v;
        }
    }
    if max == F::neg_infinity() && !allowed.iter().any(|&a| a) {
        return false;
    }
    let mut sum = F::zero();
    for ((o, &v), &a) in out.iter_mut().zip(row).zip(allowed) {
        *o = if a { (v - max).exp() } else { F::zero() };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
    true
}

/// Row-wise softmax after applying `mask` as a 0 / -inf additive bias.
pub fn masked_softmax<F: Scalar>(logits: &Tensor<F>, mask: &Mask) -> Result<Tensor<F>> {
    let (r, c) = require_matrix("masked_softmax", logits)?;
    if mask.rows() != r || mask.cols() != c {
        return Err(TensorError::ShapeMismatch {
            op: "masked_softmax",
            left: vec![r, c],
            right: vec![mask.rows(), mask.cols()],
        });
    }
    let mut out = Tensor::zeros(vec![r, c]);
    for i in 0..r {
        let dst = &mut out.data_mut()[i * c..(i + 1) * c];
        if !softmax_row(logits.row(i), mask.row(i), dst) {
            return Err(TensorError::FullyMaskedRow { row: i });
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood over the selected rows.
pub fn cross_entropy<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[usize],
    position_mask: &[bool],
) -> Result<F> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = tape.cross_entropy(l, targets, position_mask)?;
    tape.value(loss).as_scalar()
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let id = self.nodes.len();
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((id, op.name()));
        }
        self.nodes.push(Node { value, op });
        Var(id)
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Fails with the first node that produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((node, op)) => Err(TensorError::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`, with `b` stored as `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul", av)?;
        let (br, bc) = require_matrix("matmul", bv)?;
        let (kb, n, b_strides) = if trans_b {
            (bc, br, (1, bc as isize))
        } else {
            (br, bc, (bc as isize, 1))
        };
        if k != kb {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        F::gemm(
            m,
            k,
            n,
            F::one(),
            av.data(),
            (k as isize, 1),
            bv.data(),
            b_strides,
            F::zero(),
            out.data_mut(),
            (n as isize, 1),
        );
        Ok(self.push(out, Op::MatMul { a, b, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mul", av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * factor).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(a, factor))
    }

    /// Gathers rows of `table` (`[vocab, d]`) into `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = require_matrix("embedding", tv)?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, len: v });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let (r, c) = require_matrix("rms_norm", xv)?;
        if gv.len() != c {
            return Err(mismatch("rms_norm", xv, gv));
        }
        let eps = F::from_f64(RMS_EPS);
        let cf = F::from_f64(c as f64);
        let mut out = Tensor::zeros(vec![r, c]);
        let mut inv_rms = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let ms = row.iter().fold(F::zero(), |acc, &v| acc + v * v) / cf;
            let inv = (ms + eps).sqrt().recip();
            inv_rms.push(inv);
            let dst = &mut out.data_mut()[i * c..(i + 1) * c];
            for ((o, &v), &g) in dst.iter_mut().zip(row).zip(gv.data()) {
                *o = v * inv * g;
            }
        }
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }))
    }

    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let out = masked_softmax(self.value(x), mask)?;
        Ok(self.push(out, Op::MaskedSoftmax(x)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, a, half) = (F::from_f64(GELU_C), F::from_f64(GELU_A), F::from_f64(0.5));
        let data = xv
            .data()
            .iter()
            .map(|&v| half * v * (F::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = require_matrix("slice_cols", xv)?;
        if start + width > c {
            return Err(TensorError::IndexOutOfRange {
                index: start + width,
                len: c,
            });
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + width]);
        }
        let out = Tensor::new(vec![r, width], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let (r, _) = require_matrix("concat_cols", self.value(*first))?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = require_matrix("concat_cols", self.value(p))?;
            if pr != r {
                return Err(mismatch("concat_cols", self.value(*first), self.value(p)));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Empty("concat_rows"))?;
        let (_, c) = require_matrix("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = require_matrix("concat_rows", self.value(p))?;
            if pc != c {
                return Err(mismatch("concat_rows", self.value(*first), self.value(p)));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Row `row` of a matrix as a `[1, cols]` matrix.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = require_matrix("select_row", xv)?;
        if row >= r {
            return Err(TensorError::IndexOutOfRange { index: row, len: r });
        }
        let out = Tensor::new(vec![1, c], xv.row(row).to_vec())?;
        Ok(self.push(out, Op::SelectRow { x, row }))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = require_matrix("l2_normalize_rows", xv)?;
        let mut out = Tensor::zeros(vec![r, c]);
        let mut norms = Vec::with_capacity(r);
        let tiny = F::from_f64(1e-12);
        for i in 0..r {
            let row = xv.row(i);
            let norm = row
                .iter()
                .fold(F::zero(), |acc, &v| acc + v * v)
                .sqrt()
                .max(tiny);
            norms.push(norm);
            for (o, &v) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }))
    }

    /// Mean cross-entropy of `logits` rows against `targets`, counting only
    /// rows where `position_mask` is true.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        position_mask: &[bool],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, classes) = require_matrix("cross_entropy", lv)?;
        if targets.len() != n || position_mask.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![n],
                right: vec![targets.len(), position_mask.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::TargetOutOfRange { target: t, classes });
        }
        let selected: Vec<usize> = (0..n).filter(|&i| position_mask[i]).collect();
        if selected.is_empty() {
            return Err(TensorError::EmptySelection);
        }
        let all = vec![true; classes];
        let mut probs = vec![F::zero(); selected.len() * classes];
        let mut total = F::zero();
        for (s, &i) in selected.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row
                .iter()
                .fold(F::zero(), |acc, &v| acc + (v - max).exp())
                .ln()
                + max;
            total += lse - row[targets[i]];
            softmax_row(row, &all, &mut probs[s * classes..(s + 1) * classes]);
        }
        let loss = total / F::from_f64(selected.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                selected,
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(F::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::Empty("mean"));
        }
        let mut s = F::zero();
        for &x in xs {
            s += self.value(x).as_scalar()?;
        }
        let m = s / F::from_f64(xs.len() as f64);
        Ok(self.push(Tensor::scalar(m), Op::Mean(xs.to_vec())))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads: Vec<Option<Vec<F>>> = grads;
        if let Some((node, _)) = grads
            .iter()
            .enumerate()
            .find(|(_, g)| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        {
            return Err(TensorError::NonFinite {
                op: "backward",
                node,
            });
        }
        Ok(Gradients { grads })
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> &'g mut Vec<F> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = node.value.shape()[1];
                // dA = dC · B'  where B' = B (trans_b) or Bᵀ
                let b_strides = if *trans_b {
                    (k as isize, 1)
                } else {
                    (1, n as isize)
                };
                let da = self.accumulate(grads, *a);
                F::gemm(
                    m,
                    n,
                    k,
                    F::one(),
                    g,
                    (n as isize, 1),
                    bv.data(),
                    b_strides,
                    F::one(),
                    da,
                    (k as isize, 1),
                );
                let db = self.accumulate(grads, *b);
                if *trans_b {
                    // dB[n×k] = dCᵀ · A
                    F::gemm(
                        n,
                        m,
                        k,
                        F::one(),
                        g,
                        (1, n as isize),
                        av.data(),
                        (k as isize, 1),
                        F::one(),
                        db,
                        (k as isize, 1),
                    );
                } else {
                    // dB[k×n] = Aᵀ · dC
                    F::gemm(
                        k,
                        m,
                        n,
                        F::one(),
                        av.data(),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        F::one(),
                        db,
                        (n as isize, 1),
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let d = self.accumulate(grads, v);
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = self.accumulate(grads, *a);
                for ((d, &g), &y) in da.iter_mut().zip(g).zip(bv.data()) {
                    *d += g * y;
                }
                let db = self.accumulate(grads, *b);
                for ((d, &g), &x) in db.iter_mut().zip(g).zip(av.data()) {
                    *d += g * x;
                }
            }
            Op::Scale(a, f) => {
                let d = self.accumulate(grads, *a);
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *f);
            }
            Op::Embedding { table, ids } => {
                let dim = node.value.cols();
                let d = self.accumulate(grads, *table);
                for (i, &id) in ids.iter().enumerate() {
                    let src = &g[i * dim..(i + 1) * dim];
                    for (d, &g) in d[id * dim..(id + 1) * dim].iter_mut().zip(src) {
                        *d += g;
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let (r, c) = (xv.rows(), xv.cols());
                let cf = F::from_f64(c as f64);
                let mut dgain = vec![F::zero(); c];
                let dx = self.accumulate(grads, *x);
                for i in 0..r {
                    let row = xv.row(i);
                    let gr = &g[i * c..(i + 1) * c];
                    let inv = inv_rms[i];
                    let dot = row
                        .iter()
                        .zip(gr)
                        .zip(gv.data())
                        .fold(F::zero(), |acc, ((&x, &g), &w)| acc + x * g * w);
                    let coef = inv * inv * inv * dot / cf;
                    for j in 0..c {
                        dx[i * c + j] += inv * gv.data()[j] * gr[j] - coef * row[j];
                        dgain[j] += gr[j] * row[j] * inv;
                    }
                }
                let dg = self.accumulate(grads, *gain);
                dg.iter_mut().zip(&dgain).for_each(|(d, &v)| *d += v);
            }
            Op::MaskedSoftmax(x) => {
                let p = &node.value;
                let c = p.cols();
                let dx = self.accumulate(grads, *x);
                for i in 0..p.rows() {
                    let pr = p.row(i);
                    let gr = &g[i * c..(i + 1) * c];
                    let dot = pr
                        .iter()
                        .zip(gr)
                        .fold(F::zero(), |acc, (&p, &g)| acc + p * g);
                    for j in 0..c {
                        dx[i * c + j] += pr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let (c, a, half) = (F::from_f64(GELU_C), F::from_f64(GELU_A), F::from_f64(0.5));
                let three = F::from_f64(3.0);
                let dx = self.accumulate(grads, *x);
                for ((d, &g), &v) in dx.iter_mut().zip(g).zip(xv.data()) {
                    let t = (c * (v + a * v * v * v)).tanh();
                    let deriv = half * (F::one() + t)
                        + half * v * (F::one() - t * t) * c * (F::one() + three * a * v * v);
                    *d += g * deriv;
                }
            }
            Op::SliceCols { x, start } => {
                let width = node.value.cols();
                let c = self.value(*x).cols();
                let dx = self.accumulate(grads, *x);
                for i in 0..node.value.rows() {
                    for j in 0..width {
                        dx[i * c + start + j] += g[i * width + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let dp = self.accumulate(grads, p);
                    for i in 0..rows {
                        for j in 0..w {
                            dp[i * w + j] += g[i * total + offset + j];
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let dp = self.accumulate(grads, p);
                    dp.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(d, &g)| *d += g);
                    offset += len;
                }
            }
            Op::SelectRow { x, row } => {
                let c = node.value.cols();
                let dx = self.accumulate(grads, *x);
                dx[row * c..(row + 1) * c]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &g)| *d += g);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let c = y.cols();
                let dx = self.accumulate(grads, *x);
                for (i, &norm) in norms.iter().enumerate() {
                    let yr = y.row(i);
                    let gr = &g[i * c..(i + 1) * c];
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .fold(F::zero(), |acc, (&y, &g)| acc + y * g);
                    for j in 0..c {
                        dx[i * c + j] += (gr[j] - yr[j] * dot) / norm;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                selected,
                probs,
            } => {
                let classes = self.value(*logits).cols();
                let scale = g[0] / F::from_f64(selected.len() as f64);
                let dl = self.accumulate(grads, *logits);
                for (s, &i) in selected.iter().enumerate() {
                    let p = &probs[s * classes..(s + 1) * classes];
                    let dst = &mut dl[i * classes..(i + 1) * classes];
                    for (d, &p) in dst.iter_mut().zip(p) {
                        *d += scale * p;
                    }
                    dst[targets[i]] -= scale;
                }
            }
            Op::Sum(x) => {
                let dx = self.accumulate(grads, *x);
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(xs) => {
                let share = g[0] / F::from_f64(xs.len() as f64);
                for &x in xs {
                    self.accumulate(grads, x)[0] += share;
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`]. Nodes the loss does not depend
/// on have no entry.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_f64_rows(rows).unwrap()
    }

    #[test]
    fn square_has_derivative_two_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(tape.value(y).data(), &[9.0]);
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::scalar(5.0));
        let y = tape.scale(x, 4.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[4.0]);
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[vec![1.0, 2.0]]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn matmul_shape_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[vec![1.0, 2.0]]));
        let b = tape.leaf(t(&[vec![1.0, 2.0]]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(tape.matmul_nt(a, b).is_ok());
    }

    #[test]
    fn masked_softmax_examples() {
        let p = masked_softmax(
            &t(&[vec![0.0, 0.0, 7.0]]),
            &Mask::new(1, 3, vec![true, true, false]).unwrap(),
        )
        .unwrap();
        assert_eq!(p.data(), &[0.5, 0.5, 0.0]);
        let single = masked_softmax(
            &t(&[vec![3.0, -1.0]]),
            &Mask::new(1, 2, vec![false, true]).unwrap(),
        )
        .unwrap();
        assert_eq!(single.data(), &[0.0, 1.0]);
        let err = masked_softmax(
            &t(&[vec![1.0, 2.0]]),
            &Mask::new(1, 2, vec![false, false]).unwrap(),
        );
        assert_eq!(err, Err(TensorError::FullyMaskedRow { row: 0 }));
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = t(&[vec![0.0; 4], vec![0.0; 4]]);
        let l = cross_entropy(&uniform, &[1, 3], &[true, true]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        let confident = t(&[vec![50.0, 0.0, 0.0]]);
        assert!(cross_entropy(&confident, &[0], &[true]).unwrap() < 1e-12);

        // per-position losses ln 2 and ln 8 from two- and eight-way uniform rows
        let mut rows = vec![vec![-1e9; 8], vec![0.0; 8]];
        rows[0][0] = 0.0;
        rows[0][1] = 0.0;
        let l = cross_entropy(&t(&rows), &[0, 5], &[true, true]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        assert_eq!(
            cross_entropy(&uniform, &[0, 0], &[false, false]),
            Err(TensorError::EmptySelection)
        );
        assert_eq!(
            cross_entropy(&uniform, &[0, 4], &[true, true]),
            Err(TensorError::TargetOutOfRange {
                target: 4,
                classes: 4
            })
        );
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(f64::MAX));
        let y = tape.scale(x, 10.0);
        let s = tape.sum(y);
        assert!(matches!(
            tape.backward(s),
            Err(TensorError::NonFinite { op: "scale", .. })
        ));
    }
}
