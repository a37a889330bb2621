//! Reverse-mode gradients of a tiny softmax classifier.

use lbr::autograd::Tape;
use lbr::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(
        vec![2, 3],
        vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7],
    )?);
    let w = tape.leaf(Tensor::new(
        vec![3, 2],
        vec![0.2, -0.4, 0.9, 0.1, -0.3, 0.6],
    )?);
    let logits = tape.matmul(x, w)?;
    let loss = tape.cross_entropy(logits, &[1, 0], &[true, true])?;
    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss).data()[0]);
    println!("dL/dW = {:?}", grads.get(w).unwrap());
    Ok(())
}
