//! Wall-clock comparison of token-by-token versus multistage generation with
//! identical transformer weights, single-threaded.
//!
//! ```bash
//! cargo run --release --example speedup_benchmark
//! ```

use ecar::bench::{wallclock_bench, BenchConfig};

fn main() {
    let cfg = BenchConfig::default();
    println!(
        "transformer: width {}, layers {}, heads {} (single-threaded timing)",
        cfg.width, cfg.layers, cfg.heads
    );
    let rows = wallclock_bench(&cfg, &[64, 256, 1024], 5);
    println!("{:<16} {:>6} {:>14} {:>12}", "variant", "n", "score pairs", "median ms");
    for r in &rows {
        println!("{:<16} {:>6} {:>14} {:>12.2}", r.variant, r.n, r.ops, r.median_ms);
    }
    for pair in rows.chunks(2) {
        let ratio = pair[1].median_ms / pair[0].median_ms;
        println!("n = {:>4}: multistage / token-by-token = {:.4}", pair[0].n, ratio);
    }
}
