//! Multistage continuous autoregressive image generation with pyramid
//! rectified flow, at desk scale.
//!
//! The pipeline couples two models trained end to end:
//!
//! * an autoregressive transformer that emits a continuous token map per
//!   resolution stage under a block-causal mask ([`ar`]), and
//! * a velocity network conditioned per spatial position on those token maps
//!   ([`velocity`]), trained with a per-stage rectified-flow objective
//!   ([`trainer`]) and integrated stage by stage with forward Euler
//!   ([`sampler`]).
//!
//! Everything runs on a minimal deterministic f32 tensor core with reverse-mode
//! differentiation ([`tape`], [`kernels`]), against synthetic class-conditional
//! datasets with a rule-based oracle classifier ([`data`]). The [`bench`]
//! module validates the token-generation complexity claims with exact
//! operation counters and wall-clock measurements.
//!
//! See the `examples/` directory for runnable entry points per capability,
//! and the `ecar` binary for the operator CLI.

pub mod ar;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod pyramid;
pub mod rng;
pub mod sampler;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod velocity;

pub use error::{EcarError, Result};
pub use pyramid::{FeatureMap, StageSchedule};
pub use rng::Rng;
pub use tensor::Tensor;
