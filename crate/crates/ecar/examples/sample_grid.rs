//! Load a checkpoint and draw a grid of conditional samples per class.
//!
//! ```bash
//! cargo run --release --example sample_grid -- <checkpoint.ecar> [out_dir]
//! ```

use std::path::PathBuf;

use ecar::checkpoint::Checkpoint;
use ecar::config::{Config, ContinuationMode};
use ecar::data::oracle_classify;
use ecar::sampler::{clamp_unit, sample, write_ppm, SampleConfig};
use ecar::trainer::Model;

fn main() {
    let mut args = std::env::args().skip(1);
    let ckpt_path = PathBuf::from(args.next().expect("usage: sample_grid <checkpoint> [out_dir]"));
    let out_dir =
        args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ecar_grid"));
    std::fs::create_dir_all(&out_dir).expect("create output dir");

    let ck = Checkpoint::load(&ckpt_path).expect("load checkpoint");
    let (model, _) = Model::from_checkpoint(&ck).expect("rebuild model");
    println!("checkpoint from step {}", ck.step);

    let defaults = Config::default();
    for class in 0..model.cfg.num_classes {
        for i in 0..4u64 {
            let cfg = SampleConfig {
                total_steps: defaults.sample_steps,
                cfg_scale: 2.0,
                class_id: class,
                seed: 1000 * class as u64 + i,
                renoise_blend: defaults.renoise_blend,
                mode: ContinuationMode::ConditioningOnly,
                reentry_tau: defaults.reentry_tau,
            };
            let (map, stats) = sample(&model, &cfg).expect("sample");
            let predicted = oracle_classify(&clamp_unit(&map));
            let path = out_dir.join(format!("c{class}_{i}.ppm"));
            write_ppm(&map, &path).expect("write ppm");
            println!(
                "class {class} sample {i}: oracle says {predicted} ({} velocity position evals) -> {}",
                stats.velocity_position_evals,
                path.display()
            );
        }
    }
}
