//! Analytic token-generation cost: exact counters, fitted scaling exponents,
//! and the instrumented-transformer cross-check.
//!
//! ```bash
//! cargo run --release --example complexity_counts
//! ```

use ecar::bench::{
    count_multistage, count_token_ar, count_token_ar_loop, fit_exponent, pure_doubling_sizes,
    BenchConfig, BenchModel,
};

fn main() {
    // closed forms against term-by-term sums
    for n in [1u64, 4, 64, 1024, 4096] {
        assert_eq!(count_token_ar(n), count_token_ar_loop(n));
    }
    println!("closed form matches the loop sum up to n = 4096");

    let token: Vec<(u64, f64)> =
        (3..=12).map(|k| (1u64 << k, count_token_ar(1 << k) as f64)).collect();
    let multi: Vec<(u64, f64)> =
        (3..=12).map(|k| (1u64 << k, count_multistage(k) as f64)).collect();
    println!("token-by-token exponent: {:.3} (cubic)", fit_exponent(&token));
    println!("multistage exponent:     {:.3} (quadratic)", fit_exponent(&multi));

    for k in [4u32, 8, 12] {
        let n = (1u64 << k) - 1;
        let ratio = count_multistage(k) as f64 / count_token_ar(n) as f64;
        println!("n = {n:>5}: multistage / token-by-token = {ratio:.5}");
    }

    // instrumented transformer versus the closed form
    let cfg = BenchConfig { width: 16, layers: 2, heads: 2, token_dim: 4, seed: 5 };
    let per_pass = (cfg.layers * cfg.heads) as u64;
    let model = BenchModel::build(&cfg, &pure_doubling_sizes(6));
    let (_, measured) = model.staged_forward();
    println!(
        "measured score pairs at K=6: {measured} = layers*heads*{} (closed form {})",
        measured / per_pass,
        count_multistage(6)
    );
    assert_eq!(measured, per_pass * count_multistage(6));
}
