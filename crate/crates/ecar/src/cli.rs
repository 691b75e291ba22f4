//! Command implementations behind the `ecar` binary.
//!
//! Every command writes its artifacts under one output directory and records
//! them in a `manifest.txt` of `sha256  filename` lines. Failures map to
//! exit codes: 0 ok, 2 usage, 3 I/O, 4 validation.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::bench::{self, BenchConfig};
use crate::checkpoint::Checkpoint;
use crate::config::{Config, ConfigFlags, ContinuationMode};
use crate::data::{self, SynthSpec};
use crate::error::{EcarError, Result};
use crate::sampler::{self, SampleConfig};
use crate::trainer::{self, Model, ModelConfig, TrainConfig};

/// defaults < config file < flags.
pub fn resolve_config(path: Option<&Path>, flags: &ConfigFlags) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    flags.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Write `manifest.txt` listing the artifacts (paths relative to `out_dir`).
pub fn write_manifest(out_dir: &Path, files: &[PathBuf]) -> Result<PathBuf> {
    let mut lines = Vec::new();
    for f in files {
        let bytes = std::fs::read(f).map_err(|e| EcarError::io(f, e))?;
        let digest = Sha256::digest(&bytes);
        let rel = f.strip_prefix(out_dir).unwrap_or(f);
        lines.push(format!("{:x}  {}", digest, rel.display()));
    }
    lines.sort();
    let path = out_dir.join("manifest.txt");
    std::fs::write(&path, lines.join("\n") + "\n").map_err(|e| EcarError::io(&path, e))?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| EcarError::io(dir, e))
}

pub fn cmd_gen_data(spec_path: Option<&Path>, flags: &ConfigFlags, out_dir: &Path) -> Result<()> {
    let cfg = resolve_config(spec_path, flags)?;
    let spec = SynthSpec::from_config(&cfg);
    spec.validate()?;
    ensure_dir(out_dir)?;
    let dataset = data::generate(&spec);
    let path = out_dir.join("dataset.ecds");
    data::write_dataset(&dataset, &path)?;
    write_manifest(out_dir, &[path.clone()])?;
    println!(
        "wrote {} samples ({} classes x {}) to {}",
        dataset.len(),
        spec.num_classes,
        spec.samples_per_class,
        path.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn run_training(
    config_path: Option<&Path>,
    flags: &ConfigFlags,
    data_path: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    pass_through: bool,
) -> Result<()> {
    let cfg = resolve_config(config_path, flags)?;
    let dataset = data::read_dataset(data_path)?;
    if dataset.spec.height != cfg.final_res || dataset.spec.width != cfg.final_res {
        return Err(EcarError::validation(format!(
            "dataset resolution {}x{} does not match configured final_res {}",
            dataset.spec.height, dataset.spec.width, cfg.final_res
        )));
    }
    if dataset.spec.num_classes != cfg.num_classes {
        return Err(EcarError::validation(format!(
            "dataset has {} classes, config expects {}",
            dataset.spec.num_classes, cfg.num_classes
        )));
    }
    let resume_ck = match resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let expected: Vec<(u32, u32)> = (0..cfg.stages)
                .map(|s| {
                    let r = (cfg.final_res >> (cfg.stages - 1 - s)) as u32;
                    (r, r)
                })
                .collect();
            if ck.resolutions != expected {
                return Err(EcarError::validation(
                    "checkpoint schedule does not match configuration",
                ));
            }
            Some(ck)
        }
        None => None,
    };
    ensure_dir(out_dir)?;
    let model_cfg = ModelConfig::from_config(&cfg, pass_through);
    let tcfg = TrainConfig::from_config(&cfg);
    let outcome = trainer::train(model_cfg, tcfg, &dataset, out_dir, resume_ck.as_ref())?;
    let mut files = outcome.checkpoints.clone();
    files.push(outcome.metrics.clone());
    write_manifest(out_dir, &files)?;
    if let Some(last) = outcome.reports.last() {
        let losses: Vec<String> =
            last.per_stage_loss.iter().map(|l| format!("{l:.5}")).collect();
        println!("step {}: stage losses [{}]", last.step, losses.join(", "));
    }
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}

pub fn cmd_train(
    config_path: Option<&Path>,
    flags: &ConfigFlags,
    data_path: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    run_training(config_path, flags, data_path, out_dir, resume, false)
}

/// Training variant with the autoregressive conditioner replaced by a
/// pass-through of the projected upsampled previous-stage map.
pub fn cmd_ablate(
    config_path: Option<&Path>,
    flags: &ConfigFlags,
    data_path: &Path,
    out_dir: &Path,
) -> Result<()> {
    run_training(config_path, flags, data_path, out_dir, None, true)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sample(
    ckpt: &Path,
    class: usize,
    count: usize,
    steps: usize,
    cfg_scale: f32,
    seed: u64,
    mode: ContinuationMode,
    out_dir: &Path,
) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let (model, _) = Model::from_checkpoint(&ck)?;
    ensure_dir(out_dir)?;
    let defaults = Config::default();
    let base = SampleConfig {
        total_steps: steps,
        cfg_scale,
        class_id: class,
        seed,
        renoise_blend: defaults.renoise_blend,
        mode,
        reentry_tau: defaults.reentry_tau,
    };
    let mut files = Vec::new();
    for i in 0..count {
        let mut cfg = base.clone();
        cfg.seed = seed.wrapping_add(i as u64);
        let (map, stats) = sampler::sample(&model, &cfg)?;
        if i == 0 {
            let split: Vec<String> =
                stats.per_stage_steps.iter().map(|s| s.to_string()).collect();
            println!("per-stage steps: {}", split.join("/"));
        }
        let path = out_dir.join(format!("sample_c{class}_{i:04}.ppm"));
        sampler::write_ppm(&map, &path)?;
        files.push(path);
    }
    write_manifest(out_dir, &files)?;
    println!("wrote {count} sample(s) to {}", out_dir.display());
    Ok(())
}

pub fn cmd_eval(
    ckpt: &Path,
    data_path: &Path,
    per_class: usize,
    cfg_scale: f32,
    steps: usize,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let (model, _) = Model::from_checkpoint(&ck)?;
    let dataset = data::read_dataset(data_path)?;
    let defaults = Config::default();
    let base = SampleConfig {
        total_steps: steps,
        cfg_scale,
        class_id: 0,
        seed,
        renoise_blend: defaults.renoise_blend,
        mode: defaults.mode,
        reentry_tau: defaults.reentry_tau,
    };
    let report = data::eval_samples(&model, &base, per_class, &dataset)?;
    print!("{report}");
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        let path = dir.join("eval_report.txt");
        std::fs::write(&path, report.to_string()).map_err(|e| EcarError::io(&path, e))?;
        write_manifest(dir, &[path])?;
    }
    Ok(())
}

pub fn cmd_bench(max_n: usize, reps: usize, out_dir: &Path) -> Result<()> {
    if max_n < 8 {
        return Err(EcarError::validation("max_n must be at least 8"));
    }
    ensure_dir(out_dir)?;
    // counted complexity over powers of two
    let mut analytic: Vec<(u64, f64)> = Vec::new();
    let mut k = 3u32;
    while (1usize << k) <= max_n.min(1 << 12) {
        let n = 1u64 << k;
        analytic.push((n, bench::count_token_ar(n) as f64));
        k += 1;
    }
    let cubic = bench::fit_exponent(&analytic);
    let multi: Vec<(u64, f64)> = analytic
        .iter()
        .map(|&(n, _)| (n, bench::count_multistage(n.trailing_zeros()) as f64))
        .collect();
    let quad = bench::fit_exponent(&multi);
    println!("analytic exponents: token_by_token {cubic:.3}, multistage {quad:.3}");

    let mut sizes = Vec::new();
    let mut n = 64usize;
    while n <= max_n {
        sizes.push(n);
        n *= 4;
    }
    let rows = bench::wallclock_bench(&BenchConfig::default(), &sizes, reps);
    for pair in rows.chunks(2) {
        let ratio = pair[1].median_ms / pair[0].median_ms.max(1e-9);
        println!(
            "n={}: token_by_token {:.2} ms, multistage {:.2} ms, ratio {:.4}",
            pair[0].n, pair[0].median_ms, pair[1].median_ms, ratio
        );
    }
    let path = out_dir.join("bench.csv");
    bench::write_bench_csv(&rows, &path)?;
    write_manifest(out_dir, &[path.clone()])?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_dump_config(config_path: Option<&Path>, flags: &ConfigFlags) -> Result<()> {
    let cfg = resolve_config(config_path, flags)?;
    print!("{}", cfg.dump());
    Ok(())
}
