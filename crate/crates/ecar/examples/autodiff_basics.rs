//! Record a small computation on the tape, differentiate it, and verify the
//! gradients against central finite differences.
//!
//! ```bash
//! cargo run --release --example autodiff_basics
//! ```

use ecar::gradcheck;
use ecar::rng::Rng;
use ecar::tape::{Engine, Tape, Var};
use ecar::tensor::Tensor;

fn main() {
    let mut rng = Rng::new(7);
    let x = Tensor::randn(vec![4, 6], 0.4, &mut rng);
    let w1 = Tensor::randn(vec![6, 8], 0.4, &mut rng);
    let w2 = Tensor::randn(vec![8, 3], 0.4, &mut rng);
    let target = Tensor::randn(vec![4, 3], 0.4, &mut rng);

    let forward = |tape: &Tape, x: Var, w1: Var, w2: Var| -> Var {
        let h = tape.gelu(&tape.matmul(&x, &w1));
        let y = tape.matmul(&tape.layernorm(&h, 1, 1e-5), &w2);
        let t = tape.constant(&target);
        tape.mean_sq(&y, &t)
    };

    let tape = Tape::new();
    let (vx, v1, v2) = (tape.leaf(&x), tape.leaf(&w1), tape.leaf(&w2));
    let loss = forward(&tape, vx, v1, v2);
    println!("loss = {:.6}", tape.scalar_f64(loss));

    tape.backward(loss);
    let analytic = tape.grad(v1);

    // finite differences on w1, everything else held fixed
    let f = |theta: &[f32]| -> f64 {
        let tape = Tape::new();
        let vx = tape.leaf(&x);
        let v1 = tape.leaf(&Tensor::new(vec![6, 8], theta.to_vec()));
        let v2 = tape.leaf(&w2);
        tape.scalar_f64(forward(&tape, vx, v1, v2))
    };
    let indices = gradcheck::sample_indices(w1.len(), 12);
    let report = gradcheck::compare(&f, &analytic, w1.data(), &indices, 1e-3);
    println!(
        "checked {} coordinates of w1: max relative error {:.2e}",
        report.checked, report.max_rel_err
    );
    assert!(report.max_rel_err < 1e-3);
    println!("analytic gradients agree with finite differences");
}
