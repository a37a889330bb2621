//! Finite-difference harness and random graph builders.

use lbr::autograd::{Tape, Var};
use lbr::tensor::{Mask, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-5;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Mask {
    let bits: Vec<bool> = (0..n * n).map(|_| rng.random_bool(0.5)).collect();
    let mut m = Mask::new(n, n, bits).unwrap();
    for i in 0..n {
        if m.find_empty_row() == Some(i) {
            let j = rng.random_range(0..n);
            m.set(i, j, true);
        }
    }
    m.validate().unwrap();
    m
}

/// A graph builder: records a scalar loss on the tape from the given leaves.
pub type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

pub fn loss_value(build: &Build, leaves: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.value(loss).data()[0]
}

/// ‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖) over all leaves.
pub fn relative_error(build: &Build, leaves: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(vars[li])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; leaf.len()]);
        for e in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[e] += STEP;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[e] -= STEP;
            let numeric = (loss_value(build, &plus) - loss_value(build, &minus)) / (2.0 * STEP);
            diff += (analytic[e] - numeric).powi(2);
            na += analytic[e].powi(2);
            nn += numeric.powi(2);
        }
    }
    diff.sqrt() / (na.sqrt() + nn.sqrt()).max(1e-12)
}

/// matmul → masked softmax → matmul → cross entropy
pub fn attention_graph(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor<f64>>) {
    let n = rng.random_range(2..5);
    let d = rng.random_range(2..5);
    let classes = rng.random_range(2..6);
    let mask = random_mask(rng, n);
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let mut sel: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
    sel[0] = true;
    let leaves = vec![
        random_tensor(rng, &[n, d]),
        random_tensor(rng, &[d, d]),
        random_tensor(rng, &[d, classes]),
    ];
    let build: Build = Box::new(move |t, v| {
        let q = t.matmul(v[0], v[1]).unwrap();
        let s = t.matmul_nt(q, v[0]).unwrap();
        let p = t.masked_softmax(s, &mask).unwrap();
        let h = t.matmul(p, v[0]).unwrap();
        let logits = t.matmul(h, v[2]).unwrap();
        t.cross_entropy(logits, &targets, &sel).unwrap()
    });
    (build, leaves)
}

/// embedding → rms norm → gelu → slices/concat → cross entropy
pub fn block_graph(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor<f64>>) {
    let vocab = rng.random_range(3..7);
    let d = 2 * rng.random_range(1..4);
    let n = rng.random_range(1..5);
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
    let mut gain = random_tensor(rng, &[d]);
    gain.data_mut().iter_mut().for_each(|g| *g += 1.5);
    let leaves = vec![
        random_tensor(rng, &[vocab, d]),
        gain,
        random_tensor(rng, &[d, d]),
    ];
    let build: Build = Box::new(move |t, v| {
        let x = t.embedding(v[0], &ids).unwrap();
        let h = t.rms_norm(x, v[1]).unwrap();
        let u = t.matmul(h, v[2]).unwrap();
        let a = t.gelu(u);
        let left = t.slice_cols(a, 0, d / 2).unwrap();
        let right = t.slice_cols(a, d / 2, d / 2).unwrap();
        let swapped = t.concat_cols(&[right, left]).unwrap();
        let r = t.add(swapped, x).unwrap();
        let logits = t.matmul_nt(r, v[0]).unwrap();
        t.cross_entropy(logits, &targets, &vec![true; targets.len()])
            .unwrap()
    });
    (build, leaves)
}

/// select rows → l2 normalize → similarity → scaled InfoNCE
pub fn contrastive_graph(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor<f64>>) {
    let b = rng.random_range(2..5);
    let d = rng.random_range(2..5);
    let tau = rng.random_range(0.1..1.0);
    let leaves = vec![random_tensor(rng, &[b + 1, d]), random_tensor(rng, &[b, d])];
    let build: Build = Box::new(move |t, v| {
        let rows: Vec<Var> = (0..b).map(|i| t.select_row(v[0], i + 1).unwrap()).collect();
        let q = t.concat_rows(&rows).unwrap();
        let qn = t.l2_normalize_rows(q).unwrap();
        let pn = t.l2_normalize_rows(v[1]).unwrap();
        let s = t.matmul_nt(qn, pn).unwrap();
        let s = t.scale(s, 1.0 / tau);
        let targets: Vec<usize> = (0..b).collect();
        t.cross_entropy(s, &targets, &vec![true; b]).unwrap()
    });
    (build, leaves)
}

/// elementwise products, sums and means of scalars
pub fn elementwise_graph(rng: &mut ChaCha8Rng) -> (Build, Vec<Tensor<f64>>) {
    let r = rng.random_range(1..4);
    let c = rng.random_range(1..4);
    let leaves = vec![random_tensor(rng, &[r, c]), random_tensor(rng, &[r, c])];
    let build: Build = Box::new(move |t, v| {
        let p = t.mul(v[0], v[1]).unwrap();
        let sq = t.mul(p, v[0]).unwrap();
        let g = t.gelu(sq);
        let s1 = t.sum(g);
        let s2 = t.sum(v[1]);
        let s2 = t.scale(s2, 0.3);
        let prod = t.mul(s1, s2).unwrap();
        t.mean(&[prod, s1]).unwrap()
    });
    (build, leaves)
}

pub type GraphMaker = fn(&mut ChaCha8Rng) -> (Build, Vec<Tensor<f64>>);

pub const GRAPH_KINDS: [GraphMaker; 4] = [
    attention_graph,
    block_graph,
    contrastive_graph,
    elementwise_graph,
];
