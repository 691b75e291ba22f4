//! Operator CLI: dataset synthesis, training, sampling, evaluation,
//! complexity benchmarks, and the conditioning ablation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ecar::cli;
use ecar::config::{ConfigFlags, ContinuationMode};

#[derive(Parser)]
#[command(name = "ecar", version, about = "Multistage continuous autoregressive image generation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic class-conditional dataset.
    GenData {
        /// Config file providing the dataset keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Train the pipeline on a dataset.
    Train {
        /// Config file (key = value lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Draw conditional samples from a checkpoint.
    Sample {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Class id to condition on.
        #[arg(long)]
        class: usize,
        /// Number of images [default: 1]
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Total integration steps [default: 250]
        #[arg(long, default_value_t = 250)]
        steps: usize,
        /// Guidance scale [default: 1.0]
        #[arg(long, default_value_t = 1.0)]
        cfg: f32,
        /// Sampling seed [default: 0]
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stage continuation: conditioning_only|renoise_continuation
        #[arg(long, default_value = "conditioning_only")]
        mode: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate sample quality against a dataset.
    Eval {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset file.
        #[arg(long)]
        data: PathBuf,
        /// Samples per class [default: 50]
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        /// Guidance scale [default: 1.0]
        #[arg(long, default_value_t = 1.0)]
        cfg: f32,
        /// Total integration steps [default: 250]
        #[arg(long, default_value_t = 250)]
        steps: usize,
        /// Evaluation seed [default: 0]
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional directory for the written report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Complexity counters and wall-clock generation benchmark.
    Bench {
        /// Largest token count [default: 1024]
        #[arg(long, default_value_t = 1024)]
        max_n: usize,
        /// Timing repetitions per point [default: 5]
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with the autoregressive conditioner replaced by a pass-through.
    Ablate {
        /// Config file (key = value lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Print the effective configuration (defaults, file, flags applied).
    DumpConfig {
        /// Config file (key = value lines).
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: ConfigFlags,
    },
}

fn run(cmd: Cmd) -> ecar::Result<()> {
    match cmd {
        Cmd::GenData { spec, out, flags } => cli::cmd_gen_data(spec.as_deref(), &flags, &out),
        Cmd::Train { config, data, out, resume, flags } => {
            cli::cmd_train(config.as_deref(), &flags, &data, &out, resume.as_deref())
        }
        Cmd::Sample { ckpt, class, n, steps, cfg, seed, mode, out } => {
            let mode = ContinuationMode::parse(&mode)?;
            cli::cmd_sample(&ckpt, class, n, steps, cfg, seed, mode, &out)
        }
        Cmd::Eval { ckpt, data, per_class, cfg, steps, seed, out } => {
            cli::cmd_eval(&ckpt, &data, per_class, cfg, steps, seed, out.as_deref())
        }
        Cmd::Bench { max_n, reps, out } => cli::cmd_bench(max_n, reps, &out),
        Cmd::Ablate { config, data, out, flags } => {
            cli::cmd_ablate(config.as_deref(), &flags, &data, &out)
        }
        Cmd::DumpConfig { config, flags } => cli::cmd_dump_config(config.as_deref(), &flags),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
