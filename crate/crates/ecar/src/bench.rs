//! Token-generation complexity: exact operation counters and wall-clock
//! comparison of token-by-token versus multistage generation.
//!
//! The counting model matches a transformer that re-runs the full prefix for
//! every autoregressive step (no key/value cache): producing step k over a
//! cumulative prefix of S_k tokens costs S_k^2 attention score evaluations
//! per layer and head.
//!
//! * token-by-token: one token per step, S_i = i, total sum over i of i^2,
//!   cubic in the token count.
//! * multistage with doubling stage sizes n_k = 2^(k-1): S_k = 2^k - 1,
//!   total sum of (2^k - 1)^2, quadratic in the token count.
//!
//! The measured counter of the shared transformer trunk is compared against
//! these closed forms exactly; wall-clock timings corroborate but never gate.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use crate::ar::{self, ArConfig, ArParams, StageMask};
use crate::error::{EcarError, Result};
use crate::kernels;
use crate::params::{Binding, ParamSet};
use crate::rng::Rng;
use crate::tape::{Engine, Eval};
use crate::tensor::Tensor;

/// Cost of token-by-token generation over n tokens: sum_{i=1..n} i^2,
/// in closed form n(n+1)(2n+1)/6.
pub fn count_token_ar(n: u64) -> u64 {
    let n = n as u128;
    (n * (n + 1) * (2 * n + 1) / 6) as u64
}

/// The same sum evaluated term by term (independent route for testing).
pub fn count_token_ar_loop(n: u64) -> u64 {
    (1..=n).map(|i| i * i).sum()
}

/// Cost of multistage generation over K doubling stages:
/// sum_{k=1..K} (2^k - 1)^2.
pub fn count_multistage(stages: u32) -> u64 {
    (1..=stages)
        .map(|k| {
            let s = (1u64 << k) - 1;
            s * s
        })
        .sum()
}

/// The same sum in closed form: (4^(K+1) - 4)/3 - (2^(K+2) - 4) + K.
pub fn count_multistage_closed(stages: u32) -> u64 {
    let k = stages as u64;
    let four_pow = 1u64 << (2 * (k + 1)); // 4^(K+1)
    let two_pow = 1u64 << (k + 2); // 2^(K+2)
    (four_pow - 4) / 3 - (two_pow - 4) + k
}

/// Log-log least-squares slope over the top half of the series.
/// The series must have at least 4 strictly increasing n with positive cost.
pub fn fit_exponent(series: &[(u64, f64)]) -> f64 {
    assert!(series.len() >= 4, "need at least 4 points, got {}", series.len());
    for w in series.windows(2) {
        assert!(w[0].0 < w[1].0, "n values must strictly increase");
    }
    assert!(series.iter().all(|&(_, c)| c > 0.0), "costs must be positive");
    let top = &series[series.len() / 2..];
    let xs: Vec<f64> = top.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let ys: Vec<f64> = top.iter().map(|&(_, c)| c.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(&x, &y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|&x| (x - mx) * (x - mx)).sum();
    if var == 0.0 {
        return 0.0;
    }
    cov / var
}

/// Doubling stage sizes 1, 2, 4, ... with the remainder added to the final
/// stage so the total equals `n` (mirrors the sampler's remainder rule).
pub fn doubling_stage_sizes(n: usize) -> Vec<usize> {
    assert!(n >= 1);
    let mut sizes = Vec::new();
    let mut total = 0usize;
    let mut next = 1usize;
    while total + next <= n {
        sizes.push(next);
        total += next;
        next *= 2;
    }
    if sizes.is_empty() {
        sizes.push(n);
    } else {
        *sizes.last_mut().unwrap() += n - total;
    }
    sizes
}

/// Exact doubling sizes 1, 2, ..., 2^(K-1) (total 2^K - 1), the schedule the
/// closed form [`count_multistage`] describes.
pub fn pure_doubling_sizes(stages: u32) -> Vec<usize> {
    (0..stages).map(|k| 1usize << k).collect()
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub token_dim: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { width: 32, layers: 2, heads: 2, token_dim: 8, seed: 1234 }
    }
}

/// A transformer instance over explicit stage sizes, plus fixed random
/// stage inputs.
pub struct BenchModel {
    pub params: ParamSet,
    pub ar: ArParams,
    pub inputs: Vec<Tensor>,
}

impl BenchModel {
    pub fn build(cfg: &BenchConfig, stage_sizes: &[usize]) -> BenchModel {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(cfg.seed);
        let ar = ArParams::init_with_tokens(
            ArConfig {
                width: cfg.width,
                layers: cfg.layers,
                heads: cfg.heads,
                token_dim: cfg.token_dim,
                num_classes: 1,
                channels: 3,
            },
            stage_sizes,
            &mut ps,
            &mut rng,
        );
        let inputs = stage_sizes
            .iter()
            .map(|&n| Tensor::randn(vec![n, cfg.width], 0.5, &mut rng))
            .collect();
        BenchModel { params: ps, ar, inputs }
    }

    /// Full-recompute staged generation: stage k re-runs the trunk over the
    /// whole prefix (the counting model above). Returns the final stage's
    /// token map and the measured score-pair count.
    pub fn staged_forward(&self) -> (Tensor, u64) {
        let e = Eval;
        let b: Binding<Eval> = self.params.bind(&e);
        ar::reset_attn_pairs();
        let sizes: Vec<usize> = self.inputs.iter().map(|t| t.rows()).collect();
        let mut last = None;
        for k in 0..sizes.len() {
            let parts: Vec<Arc<Tensor>> =
                self.inputs[..=k].iter().map(|t| e.constant(t)).collect();
            let x = e.concat_rows(&parts);
            let mask = StageMask::from_stage_sizes(&sizes[..=k]);
            let h = ar::trunk_dense(&e, &b, &self.ar, &x, mask.limits());
            let offset: usize = sizes[..k].iter().sum();
            let rows = e.slice_rows(&h, offset, sizes[k]);
            last = Some(e.matmul(&rows, b.get(self.ar.output_proj_id())));
        }
        ((*last.expect("at least one stage")).clone(), ar::attn_pairs())
    }
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub variant: &'static str,
    pub n: u64,
    /// Measured attention score pairs (per layer and head, summed).
    pub ops: u64,
    pub median_ms: f64,
    pub reps: usize,
}

/// Median-of-repetitions wall-clock comparison at each token count, strictly
/// single-threaded, one warm-up run excluded per variant.
pub fn wallclock_bench(cfg: &BenchConfig, token_counts: &[usize], reps: usize) -> Vec<BenchRow> {
    assert!(reps >= 1);
    let was_parallel = kernels::parallel_enabled();
    kernels::set_parallel(false);
    let mut rows = Vec::new();
    for &n in token_counts {
        for (variant, sizes) in [
            ("token_by_token", vec![1usize; n]),
            ("multistage", doubling_stage_sizes(n)),
        ] {
            let model = BenchModel::build(cfg, &sizes);
            let (out, ops) = model.staged_forward(); // warm-up, also checks output
            assert!(out.data().iter().all(|v| v.is_finite()), "non-finite bench output");
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let t0 = Instant::now();
                let (_, _) = model.staged_forward();
                times.push(t0.elapsed().as_secs_f64() * 1e3);
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            rows.push(BenchRow {
                variant,
                n: n as u64,
                ops,
                median_ms: times[times.len() / 2],
                reps,
            });
        }
    }
    kernels::set_parallel(was_parallel);
    rows
}

/// `variant,n,ops,median_ms,reps` CSV.
pub fn write_bench_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut out = String::from("variant,n,ops,median_ms,reps\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.3},{}\n", r.variant, r.n, r.ops, r.median_ms, r.reps));
    }
    std::fs::write(path, out).map_err(|e| EcarError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_ar_counts() {
        assert_eq!(count_token_ar(1), 1);
        assert_eq!(count_token_ar(4), 30); // 1 + 4 + 9 + 16
        for n in 1..=10_000u64 {
            debug_assert_eq!(count_token_ar(n), count_token_ar_loop(n));
        }
        // spot checks at release speed
        for n in [10u64, 100, 1000, 10_000] {
            assert_eq!(count_token_ar(n), count_token_ar_loop(n), "n={n}");
        }
    }

    #[test]
    fn multistage_counts() {
        assert_eq!(count_multistage(1), 1);
        assert_eq!(count_multistage(3), 1 + 9 + 49);
        for k in 1..=12 {
            assert_eq!(count_multistage(k), count_multistage_closed(k), "K={k}");
        }
        // ratio to token-by-token at n = 2^K - 1 shrinks like 1/n
        let r = |k: u32| {
            let n = (1u64 << k) - 1;
            count_multistage(k) as f64 / count_token_ar(n) as f64
        };
        let mut prev = r(3);
        for k in 4..=12 {
            let cur = r(k);
            assert!(cur < prev, "ratio must decrease with k");
            prev = cur;
        }
        // r(k) * n approaches a constant (the 1/n law)
        let c8 = r(8) * ((1u64 << 8) - 1) as f64;
        let c12 = r(12) * ((1u64 << 12) - 1) as f64;
        assert!((c8 - c12).abs() / c12 < 0.05, "c8={c8} c12={c12}");
    }

    #[test]
    fn exponent_fits() {
        let cubic: Vec<(u64, f64)> = (3..=12).map(|k| {
            let n = 1u64 << k;
            (n, (n as f64).powi(3))
        }).collect();
        assert!((fit_exponent(&cubic) - 3.0).abs() < 0.01);
        let quad: Vec<(u64, f64)> = (3..=12).map(|k| {
            let n = 1u64 << k;
            (n, 7.5 * (n as f64).powi(2))
        }).collect();
        assert!((fit_exponent(&quad) - 2.0).abs() < 0.01);
        let constant: Vec<(u64, f64)> = (1..=8).map(|i| (i, 42.0)).collect();
        assert_eq!(fit_exponent(&constant), 0.0);
    }

    #[test]
    #[should_panic(expected = "at least 4 points")]
    fn fit_needs_enough_points() {
        fit_exponent(&[(1, 1.0), (2, 2.0)]);
    }

    #[test]
    fn doubling_sizes_sum_to_n() {
        assert_eq!(doubling_stage_sizes(64), vec![1, 2, 4, 8, 16, 33]);
        assert_eq!(doubling_stage_sizes(1), vec![1]);
        assert_eq!(doubling_stage_sizes(7), vec![1, 2, 4]);
        for n in [3usize, 64, 100, 256, 1024] {
            assert_eq!(doubling_stage_sizes(n).iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn instrumented_counter_matches_closed_forms() {
        let cfg = BenchConfig { width: 16, layers: 2, heads: 2, token_dim: 4, seed: 5 };
        let per_pass = (cfg.layers * cfg.heads) as u64;

        // pure doubling schedule: counter == layers*heads*count_multistage(K)
        for k in [1u32, 3, 5] {
            let model = BenchModel::build(&cfg, &pure_doubling_sizes(k));
            let (_, pairs) = model.staged_forward();
            assert_eq!(pairs, per_pass * count_multistage(k), "K={k}");
        }

        // one token per stage: counter == layers*heads*count_token_ar(n)
        for n in [1u64, 4, 16] {
            let model = BenchModel::build(&cfg, &vec![1usize; n as usize]);
            let (_, pairs) = model.staged_forward();
            assert_eq!(pairs, per_pass * count_token_ar(n), "n={n}");
        }
    }

    #[test]
    fn smoke_wallclock_small() {
        let cfg = BenchConfig { width: 16, layers: 1, heads: 2, token_dim: 4, seed: 2 };
        let rows = wallclock_bench(&cfg, &[8, 16], 3);
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert!(r.median_ms >= 0.0);
            assert!(r.ops > 0);
        }
        // multistage at the same n does strictly less counted work
        assert!(rows[1].ops < rows[0].ops);
        assert!(rows[3].ops < rows[2].ops);
    }
}
