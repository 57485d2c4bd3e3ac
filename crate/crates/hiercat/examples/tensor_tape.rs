//! The autodiff engine on its own: build a computation on the tape, run
//! backward once, read gradients for every gradient-carrying leaf.
//!
//! Everything else in the crate sits on this: values are handles into a
//! tape of recorded operations, and `backward` walks the tape in reverse
//! accumulating adjoints at tensor granularity.

use hiercat::tensor::{Tape, Tensor};

fn entropy(w_data: &[f64]) -> f64 {
    let tape = Tape::new();
    let x = tape.constant(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5]);
    let w = tape.leaf(&Tensor::new(vec![3, 2], w_data.to_vec()).with_grad());
    let b = tape.constant(vec![2], vec![0.05, -0.05]);
    let y = x.matmul(w).add_bias(b).relu().softmax_rows();
    // Entropy of the softmax rows: -sum(y log y).
    y.log_clamped().mul(y).sum().scale(-1.0).item()
}

fn main() {
    let w_data = vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6];

    let tape = Tape::new();
    let x = tape.constant(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5]);
    let w = tape.leaf(&Tensor::new(vec![3, 2], w_data.clone()).with_grad());
    let b = tape.constant(vec![2], vec![0.05, -0.05]);
    let y = x.matmul(w).add_bias(b).relu().softmax_rows();
    let loss = y.log_clamped().mul(y).sum().scale(-1.0);
    println!("forward: entropy = {:.6}", loss.item());

    let grads = tape.backward(loss);
    let gw = grads.wrt(w).to_vec();
    println!("d(entropy)/dW = {gw:?}");

    // The tape's gradient predicts the effect of a small nudge.
    let h = 1e-6;
    let mut nudged = w_data.clone();
    nudged[0] += h;
    let numeric = (entropy(&nudged) - entropy(&w_data)) / h;
    println!("analytic {:.8} vs one-sided numeric {numeric:.8}", gw[0]);
}
