//! Reverse-mode differentiation on the tape: a two-layer perceptron's
//! gradients, checked against central finite differences.
//!
//! `cargo run --release --example autodiff`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use linequant::tensorcore::{grad_check, Graph, Tensor};

fn main() -> linequant::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut random = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let (x, w1, w2) = (random(&[4, 3]), random(&[3, 5]), random(&[5, 2]));
    let targets = [0usize, 1, 1, 0];

    let mut g = Graph::new();
    let (xv, w1v, w2v) = (g.constant(x.clone()), g.param(w1.clone()), g.param(w2.clone()));
    let h = g.matmul(xv, w1v)?;
    let h = g.gelu(h);
    let logits = g.matmul(h, w2v)?;
    let loss = g.cross_entropy(logits, &targets, &[1.0; 4])?;
    g.backward(loss)?;
    println!("loss {:.6} over {} recorded ops", g.value(loss).item(), g.num_ops());
    println!("dL/dW2 = {:?}", g.grad(w2v).expect("W2 is a parameter"));

    let err = grad_check(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.gelu(h);
            let logits = g.matmul(h, v[2])?;
            g.cross_entropy(logits, &targets, &[1.0; 4])
        },
        &[x, w1, w2],
        1e-5,
    )?;
    println!("max relative error against finite differences: {err:.2e}");
    Ok(())
}
