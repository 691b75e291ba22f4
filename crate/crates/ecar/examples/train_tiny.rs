//! Short end-to-end training run on a reduced configuration: watch the
//! per-stage losses fall and the stage weights rebalance.
//!
//! ```bash
//! cargo run --release --example train_tiny
//! ```

use ecar::config::WeightMode;
use ecar::data::{self, SynthSpec};
use ecar::trainer::{Model, ModelConfig, TrainConfig, Trainer};

fn main() {
    let spec = SynthSpec {
        num_classes: 4,
        height: 16,
        width: 16,
        channels: 3,
        samples_per_class: 64,
        phase_jitter: 0.0,
        pos_jitter: 1.0,
        hue_jitter: 0.08,
        seed: 3,
    };
    let dataset = data::generate(&spec);

    let model = Model::init(
        ModelConfig {
            stages: 2,
            final_res: 16,
            channels: 3,
            ar_width: 32,
            ar_layers: 1,
            ar_heads: 2,
            token_dim: 8,
            vel_width: 32,
            vel_blocks: 1,
            vel_heads: 1,
            vel_per_stage: false,
            num_classes: 4,
            pass_through: false,
        },
        11,
    )
    .expect("model init");
    println!("parameters: {}", model.params.trainable_scalar_count());

    let tcfg = TrainConfig {
        lr: 1e-3,
        weight_decay: 0.0,
        batch_size: 2,
        steps: 200,
        cfg_dropout: 0.1,
        gradnorm_alpha: 1.5,
        gradnorm_rate: 0.1,
        weight_mode: WeightMode::GradNorm,
        seed: 1,
        checkpoint_every: 0,
        renoise_blend: ecar::pyramid::DEFAULT_RENOISE_BLEND,
    };
    let mut trainer = Trainer::new(model, tcfg);
    for _ in 0..200 {
        let report = trainer.step(&dataset);
        if report.step % 25 == 0 || report.step == 1 {
            let losses: Vec<String> =
                report.per_stage_loss.iter().map(|l| format!("{l:.4}")).collect();
            let weights: Vec<String> =
                report.weights.iter().map(|w| format!("{w:.3}")).collect();
            println!(
                "step {:>4}: losses [{}] weights [{}] ({:.0} ms)",
                report.step,
                losses.join(", "),
                weights.join(", "),
                report.wallclock_ms
            );
        }
    }
}
