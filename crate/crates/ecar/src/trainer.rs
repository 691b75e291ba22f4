//! End-to-end optimization.
//!
//! One training step, per sample of the batch: teacher-forced token maps for
//! every stage, one draw of the stage noise chain, one local time per stage,
//! the per-stage flow-matching losses against the interpolant velocity, and a
//! single backward pass through velocity network and conditioner alike. Stage
//! losses are combined with adaptive weights balanced by the gradient norms
//! measured at the velocity output projection; parameters step with AdamW.
//!
//! Everything stochastic draws from one master generator in a fixed order,
//! so runs are bit-reproducible and checkpoint resume continues the exact
//! trajectory.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::ar::{self, ArConfig, ArParams, StageMask};
use crate::checkpoint::Checkpoint;
use crate::config::{Config, WeightMode};
use crate::data::Dataset;
use crate::error::{EcarError, Result};
use crate::kernels;
use crate::params::{Binding, ParamId, ParamSet};
use crate::pyramid::{
    interpolant, interpolant_velocity, noise_chain, stage_targets, FeatureMap, StageSchedule,
};
use crate::rng::Rng;
use crate::tape::{Engine, Tape};
use crate::tensor::Tensor;
use crate::velocity::{velocity_forward, VelocityConfig, VelocityParams};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Stage weights never collapse below this.
pub const WEIGHT_FLOOR: f32 = 1e-3;

pub const METRICS_HEADER: &str = "step,stage,loss,weight,lr,wallclock_ms";

// ── model bundle ─────────────────────────────────────────────────────

/// How stage conditions are produced.
#[derive(Debug, Clone)]
pub enum Conditioner {
    /// The autoregressive transformer ("next-stage prediction").
    Ar(ArParams),
    /// Ablation: forward the projected upsampled previous-stage map directly,
    /// with only a class row at the first stage.
    PassThrough { proj: ParamId, class_table: ParamId },
}

/// Model dimensions, persisted in checkpoints as meta scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stages: usize,
    pub final_res: usize,
    pub channels: usize,
    pub ar_width: usize,
    pub ar_layers: usize,
    pub ar_heads: usize,
    pub token_dim: usize,
    pub vel_width: usize,
    pub vel_blocks: usize,
    pub vel_heads: usize,
    pub vel_per_stage: bool,
    pub num_classes: usize,
    pub pass_through: bool,
}

impl ModelConfig {
    pub fn from_config(cfg: &Config, pass_through: bool) -> ModelConfig {
        ModelConfig {
            stages: cfg.stages,
            final_res: cfg.final_res,
            channels: cfg.channels,
            ar_width: cfg.ar_width,
            ar_layers: cfg.ar_layers,
            ar_heads: cfg.ar_heads,
            token_dim: cfg.token_dim,
            vel_width: cfg.vel_width,
            vel_blocks: cfg.vel_blocks,
            vel_heads: cfg.vel_heads,
            vel_per_stage: cfg.vel_per_stage,
            num_classes: cfg.num_classes,
            pass_through,
        }
    }

    fn meta_entries(&self) -> Vec<(String, f32)> {
        vec![
            ("meta/stages".into(), self.stages as f32),
            ("meta/final_res".into(), self.final_res as f32),
            ("meta/channels".into(), self.channels as f32),
            ("meta/ar_width".into(), self.ar_width as f32),
            ("meta/ar_layers".into(), self.ar_layers as f32),
            ("meta/ar_heads".into(), self.ar_heads as f32),
            ("meta/token_dim".into(), self.token_dim as f32),
            ("meta/vel_width".into(), self.vel_width as f32),
            ("meta/vel_blocks".into(), self.vel_blocks as f32),
            ("meta/vel_heads".into(), self.vel_heads as f32),
            ("meta/vel_per_stage".into(), self.vel_per_stage as u8 as f32),
            ("meta/num_classes".into(), self.num_classes as f32),
            ("meta/pass_through".into(), self.pass_through as u8 as f32),
        ]
    }

    fn from_meta(ck: &Checkpoint) -> Result<ModelConfig> {
        let get = |name: &str| -> Result<f32> {
            ck.tensor(name)
                .map(|t| t.data()[0])
                .ok_or_else(|| EcarError::validation(format!("checkpoint lacks {name}")))
        };
        Ok(ModelConfig {
            stages: get("meta/stages")? as usize,
            final_res: get("meta/final_res")? as usize,
            channels: get("meta/channels")? as usize,
            ar_width: get("meta/ar_width")? as usize,
            ar_layers: get("meta/ar_layers")? as usize,
            ar_heads: get("meta/ar_heads")? as usize,
            token_dim: get("meta/token_dim")? as usize,
            vel_width: get("meta/vel_width")? as usize,
            vel_blocks: get("meta/vel_blocks")? as usize,
            vel_heads: get("meta/vel_heads")? as usize,
            vel_per_stage: get("meta/vel_per_stage")? != 0.0,
            num_classes: get("meta/num_classes")? as usize,
            pass_through: get("meta/pass_through")? != 0.0,
        })
    }
}

/// Parameters, schedule, and conditioning mode of one pipeline instance.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub sched: StageSchedule,
    pub params: ParamSet,
    pub cond: Conditioner,
    pub vel: VelocityParams,
    pub stage_weights: ParamId,
    pub init_losses: ParamId,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        let sched = StageSchedule::make(cfg.stages, (cfg.final_res, cfg.final_res), 250)?;
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(seed ^ 0x6d6f64656c);
        let cond = if cfg.pass_through {
            Conditioner::PassThrough {
                proj: ps.add(
                    "pass/proj",
                    Tensor::randn(vec![cfg.channels, cfg.token_dim], 0.02, &mut rng),
                ),
                class_table: ps.add(
                    "pass/class_table",
                    Tensor::randn(vec![cfg.num_classes + 1, cfg.token_dim], 0.02, &mut rng),
                ),
            }
        } else {
            Conditioner::Ar(ArParams::init(
                ArConfig {
                    width: cfg.ar_width,
                    layers: cfg.ar_layers,
                    heads: cfg.ar_heads,
                    token_dim: cfg.token_dim,
                    num_classes: cfg.num_classes,
                    channels: cfg.channels,
                },
                &sched,
                &mut ps,
                &mut rng,
            ))
        };
        let vel = VelocityParams::init(
            VelocityConfig {
                width: cfg.vel_width,
                blocks: cfg.vel_blocks,
                heads: cfg.vel_heads,
                token_dim: cfg.token_dim,
                channels: cfg.channels,
                num_classes: cfg.num_classes,
                stages: cfg.stages,
                per_stage: cfg.vel_per_stage,
                ablate_attention: false,
            },
            &mut ps,
            &mut rng,
        );
        let stage_weights =
            ps.add_buffer("trainer/stage_weights", Tensor::full(vec![cfg.stages], 1.0));
        let init_losses = ps.add_buffer("trainer/init_losses", Tensor::full(vec![cfg.stages], 1.0));
        Ok(Model { cfg, sched, params: ps, cond, vel, stage_weights, init_losses })
    }

    pub fn null_class(&self) -> usize {
        self.cfg.num_classes
    }

    pub fn mask(&self) -> StageMask {
        StageMask::build(&self.sched)
    }

    /// Schedule copy with a different sampler step budget.
    pub fn sched_with_steps(&self, total_steps: usize) -> StageSchedule {
        let mut s = self.sched.clone();
        s.reallocate_steps(total_steps).expect("step budget >= stage count");
        s
    }

    /// Teacher-forced conditioning rows for every stage.
    pub fn teacher_token_maps<E: Engine>(
        &self,
        e: &E,
        b: &Binding<E>,
        mask: &StageMask,
        full: &FeatureMap,
        class_id: usize,
    ) -> Vec<E::Val> {
        match &self.cond {
            Conditioner::Ar(p) => {
                let inputs = ar::teacher_inputs(e, b, p, &self.sched, full, class_id);
                ar::forward_all_stages(e, b, p, &inputs, mask)
            }
            Conditioner::PassThrough { proj, class_table } => {
                let targets = stage_targets(full, &self.sched);
                let n0 = self.sched.stage_tokens(0);
                let mut maps = vec![e.gather_rows(b.get(*class_table), &vec![class_id; n0])];
                for s in 1..self.sched.stages() {
                    let up = crate::pyramid::upsample(&targets[s - 1]);
                    maps.push(e.matmul(&e.constant(&up.as_rows()), b.get(*proj)));
                }
                maps
            }
        }
    }

    pub fn stage_weight_values(&self) -> Vec<f32> {
        self.params.get(self.stage_weights).data().to_vec()
    }

    pub fn init_loss_values(&self) -> Vec<f32> {
        self.params.get(self.init_losses).data().to_vec()
    }

    /// Assemble a checkpoint from the current state.
    pub fn to_checkpoint(&self, opt: Option<&AdamState>, rng_state: u64, step: u64) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .cfg
            .meta_entries()
            .into_iter()
            .map(|(n, v)| (n, Tensor::scalar(v)))
            .collect();
        for entry in self.params.entries() {
            tensors.push((entry.name.clone(), entry.tensor.clone()));
        }
        if let Some(opt) = opt {
            for (i, entry) in self.params.entries().iter().enumerate() {
                if entry.trainable {
                    tensors.push((
                        format!("opt/m/{}", entry.name),
                        Tensor::new(entry.tensor.shape().to_vec(), opt.m[i].clone()),
                    ));
                    tensors.push((
                        format!("opt/v/{}", entry.name),
                        Tensor::new(entry.tensor.shape().to_vec(), opt.v[i].clone()),
                    ));
                }
            }
        }
        Checkpoint {
            resolutions: self
                .sched
                .resolutions()
                .iter()
                .map(|&(h, w)| (h as u32, w as u32))
                .collect(),
            boundaries: self.sched.boundaries().to_vec(),
            tensors,
            rng_state,
            step,
        }
    }

    /// Rebuild a model (and optimizer state if present) from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Model, Option<AdamState>)> {
        let cfg = ModelConfig::from_meta(ck)?;
        let mut model = Model::init(cfg, 0)?;
        model.sched = ck.schedule(250)?;
        for entry in model.params.entries_mut() {
            let Some(t) = ck.tensor(&entry.name) else {
                return Err(EcarError::validation(format!("checkpoint lacks tensor {}", entry.name)));
            };
            if t.shape() != entry.tensor.shape() {
                return Err(EcarError::validation(format!(
                    "checkpoint tensor {} has shape {:?}, expected {:?}",
                    entry.name,
                    t.shape(),
                    entry.tensor.shape()
                )));
            }
            entry.tensor = t.clone();
        }
        let has_moments = model
            .params
            .entries()
            .iter()
            .any(|e| ck.tensor(&format!("opt/m/{}", e.name)).is_some());
        let opt = if has_moments {
            let mut state = AdamState::new(&model.params);
            for (i, entry) in model.params.entries().iter().enumerate() {
                if !entry.trainable {
                    continue;
                }
                let m = ck
                    .tensor(&format!("opt/m/{}", entry.name))
                    .ok_or_else(|| EcarError::validation(format!("missing moment m for {}", entry.name)))?;
                let v = ck
                    .tensor(&format!("opt/v/{}", entry.name))
                    .ok_or_else(|| EcarError::validation(format!("missing moment v for {}", entry.name)))?;
                state.m[i] = m.data().to_vec();
                state.v[i] = v.data().to_vec();
            }
            Some(state)
        } else {
            None
        };
        Ok((model, opt))
    }
}

// ── flow losses ──────────────────────────────────────────────────────

/// Flow-matching loss of one stage under an arbitrary velocity oracle:
/// draws the local time and the noise chain from `seed`, builds the stage
/// interpolant, and returns mean ||(F1 - F0) - v(F_hat, t)||^2.
pub fn flow_loss_with<F>(
    full: &FeatureMap,
    sched: &StageSchedule,
    stage: usize,
    seed: u64,
    blend: f32,
    velocity: F,
) -> f64
where
    F: FnOnce(&Tensor, f64) -> Tensor,
{
    let mut rng = Rng::new(seed);
    let tau = rng.uniform();
    let chain = noise_chain(&mut rng, sched, full.channels(), blend);
    let targets = stage_targets(full, sched);
    let x_hat = interpolant(&chain[stage], &targets[stage], tau);
    let v_target = interpolant_velocity(&chain[stage], &targets[stage]);
    let t = sched.global_time(stage, tau);
    let v = velocity(&x_hat.as_rows(), t);
    assert_eq!(v.shape(), v_target.as_rows().shape(), "velocity shape mismatch");
    kernels::mean_sq(v.data(), v_target.as_rows().data())
}

/// Stage flow loss of the real model (teacher-forced conditioning), without
/// gradients. The trainer's in-graph version lives in [`Trainer::step`].
pub fn flow_loss_stage(
    model: &Model,
    full: &FeatureMap,
    stage: usize,
    class_id: usize,
    seed: u64,
    blend: f32,
) -> f64 {
    let e = crate::tape::Eval;
    let b = model.params.bind(&e);
    let mask = model.mask();
    let maps = model.teacher_token_maps(&e, &b, &mask, full, class_id);
    flow_loss_with(full, &model.sched, stage, seed, blend, |rows, t| {
        let v = velocity_forward(
            &e,
            &b,
            &model.params,
            &model.vel,
            stage,
            &e.constant(&rows.clone()),
            t,
            &maps[stage],
            class_id,
        );
        (*v).clone()
    })
}

/// The same single-sample stage loss as [`flow_loss_stage`] (identical draws
/// and arithmetic), recorded on a tape so gradients can be taken. Returns
/// the tape, the parameter binding, and the scalar loss.
pub fn stage_loss_graph(
    model: &Model,
    full: &FeatureMap,
    stage: usize,
    class_id: usize,
    seed: u64,
    blend: f32,
) -> (Tape, Binding<Tape>, crate::tape::Var) {
    let tape = Tape::new();
    let b = model.params.bind(&tape);
    let mask = model.mask();
    let maps = model.teacher_token_maps(&tape, &b, &mask, full, class_id);

    let mut rng = Rng::new(seed);
    let tau = rng.uniform();
    let chain = noise_chain(&mut rng, &model.sched, full.channels(), blend);
    let targets = stage_targets(full, &model.sched);
    let x_hat = interpolant(&chain[stage], &targets[stage], tau);
    let v_target = interpolant_velocity(&chain[stage], &targets[stage]);
    let t = model.sched.global_time(stage, tau);
    let v = velocity_forward(
        &tape,
        &b,
        &model.params,
        &model.vel,
        stage,
        &tape.constant(&x_hat.as_rows()),
        t,
        &maps[stage],
        class_id,
    );
    let loss = tape.mean_sq(&v, &tape.constant(&v_target.as_rows()));
    (tape, b, loss)
}

// ── stage weights ────────────────────────────────────────────────────

/// Multiplicative stage-weight balancing. Each weight moves toward equalizing
/// its measured gradient norm against the mean, scaled by the relative
/// inverse training rate raised to `alpha`; weights are floored and
/// renormalized to sum to the stage count.
pub fn gradnorm_update(
    weights: &mut [f32],
    grad_norms: &[f64],
    loss_ratios: &[f64],
    alpha: f64,
    rate: f64,
) {
    let s = weights.len();
    assert_eq!(grad_norms.len(), s);
    assert_eq!(loss_ratios.len(), s);
    if grad_norms.iter().all(|&g| g == 0.0) {
        return;
    }
    let g_mean = grad_norms.iter().sum::<f64>() / s as f64;
    let r_mean = loss_ratios.iter().sum::<f64>() / s as f64;
    for i in 0..s {
        let rel_rate = loss_ratios[i] / r_mean.max(1e-12);
        let target = g_mean * rel_rate.powf(alpha);
        let ratio = target / grad_norms[i].max(1e-12);
        weights[i] = ((weights[i] as f64) * ratio.powf(rate)) as f32;
    }
    renormalize_weights(weights);
}

/// Clamp to the floor and rescale so the weights sum to the stage count.
pub fn renormalize_weights(weights: &mut [f32]) {
    let s = weights.len() as f64;
    for w in weights.iter_mut() {
        *w = w.max(WEIGHT_FLOOR);
    }
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    for w in weights.iter_mut() {
        *w = ((*w as f64) * s / total) as f32;
    }
}

// ── optimizer ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f32, weight_decay: f32) -> AdamConfig {
        AdamConfig { lr, weight_decay, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS }
    }
}

/// First/second moment buffers aligned with the parameter entries.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> AdamState {
        let m = params
            .entries()
            .iter()
            .map(|e| if e.trainable { vec![0.0; e.tensor.len()] } else { Vec::new() })
            .collect::<Vec<_>>();
        AdamState { v: m.clone(), m }
    }
}

/// Bias-corrected AdamW update with decoupled weight decay. `step` is the
/// 1-based update count after this call.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[Vec<f32>],
    state: &mut AdamState,
    step: u64,
    cfg: &AdamConfig,
) {
    assert!(step >= 1, "adamw step count is 1-based");
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (i, entry) in params.entries_mut().iter_mut().enumerate() {
        if !entry.trainable {
            continue;
        }
        let g = &grads[i];
        if g.is_empty() {
            continue;
        }
        let data = entry.tensor.data_mut();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..data.len() {
            let gj = g[j] as f64;
            let mj = cfg.beta1 * m[j] as f64 + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j] as f64 + (1.0 - cfg.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let m_hat = mj / bc1;
            let v_hat = vj / bc2;
            let mut x = data[j] as f64;
            x -= cfg.lr as f64 * (m_hat / (v_hat.sqrt() + cfg.eps));
            x -= cfg.lr as f64 * cfg.weight_decay as f64 * data[j] as f64;
            data[j] = x as f32;
        }
    }
}

// ── training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub steps: usize,
    pub cfg_dropout: f64,
    pub gradnorm_alpha: f64,
    pub gradnorm_rate: f64,
    pub weight_mode: WeightMode,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub renoise_blend: f32,
}

impl TrainConfig {
    pub fn from_config(cfg: &Config) -> TrainConfig {
        TrainConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            batch_size: cfg.batch_size,
            steps: cfg.train_steps,
            cfg_dropout: cfg.cfg_dropout,
            gradnorm_alpha: cfg.gradnorm_alpha,
            gradnorm_rate: cfg.gradnorm_rate,
            weight_mode: cfg.weight_mode,
            seed: cfg.seed,
            checkpoint_every: cfg.checkpoint_every,
            renoise_blend: cfg.renoise_blend,
        }
    }
}

/// Per-step observables (unweighted batch-mean stage losses).
#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    pub per_stage_loss: Vec<f64>,
    pub weights: Vec<f32>,
    pub grad_norms: Vec<f64>,
    pub wallclock_ms: f64,
}

pub struct Trainer {
    pub model: Model,
    pub opt: AdamState,
    pub rng: Rng,
    pub step: u64,
    pub tcfg: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model, tcfg: TrainConfig) -> Trainer {
        let opt = AdamState::new(&model.params);
        let rng = Rng::new(tcfg.seed);
        Trainer { model, opt, rng, step: 0, tcfg }
    }

    /// Continue from a checkpoint produced by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, tcfg: TrainConfig) -> Result<Trainer> {
        let (model, opt) = Model::from_checkpoint(ck)?;
        let opt = opt.unwrap_or_else(|| AdamState::new(&model.params));
        Ok(Trainer { model, opt, rng: Rng::restore(ck.rng_state), step: ck.step, tcfg })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint(Some(&self.opt), self.rng.state(), self.step)
    }

    /// One optimizer step over a freshly assembled batch.
    pub fn step(&mut self, dataset: &Dataset) -> StepReport {
        let t0 = Instant::now();
        let stages = self.model.sched.stages();
        let batch = self.tcfg.batch_size;
        let null_class = self.model.null_class();

        // All stochastic choices for the step, drawn in a fixed order.
        struct Draw {
            index: usize,
            class: usize,
            noise_seed: u64,
            taus: Vec<f64>,
        }
        let draws: Vec<Draw> = (0..batch)
            .map(|_| {
                let index = self.rng.below(dataset.len() as u64) as usize;
                let dropped = self.rng.uniform() < self.tcfg.cfg_dropout;
                let class =
                    if dropped { null_class } else { dataset.labels()[index] as usize };
                let noise_seed = self.rng.next_u64();
                let taus = (0..stages).map(|_| self.rng.uniform()).collect();
                Draw { index, class, noise_seed, taus }
            })
            .collect();

        let weights = self.model.stage_weight_values();
        let mask = self.model.mask();
        let n_entries = self.model.params.len();
        let mut grad_acc: Vec<Vec<f32>> = self
            .model
            .params
            .entries()
            .iter()
            .map(|e| if e.trainable { vec![0.0; e.tensor.len()] } else { Vec::new() })
            .collect();
        let mut stage_out_grads: Vec<Vec<f32>> = (0..stages)
            .map(|s| vec![0.0; self.model.params.get(self.model.vel.out_proj_id(s)).len()])
            .collect();
        let mut stage_loss = vec![0.0f64; stages];

        for draw in &draws {
            let full = dataset.feature_map(draw.index, stages - 1);
            let tape = Tape::new();
            // One binding per stage so the velocity gradient of each stage's
            // loss is attributable; the conditioner uses binding 0.
            let bindings: Vec<Binding<Tape>> =
                (0..stages).map(|_| self.model.params.bind(&tape)).collect();
            let maps =
                self.model.teacher_token_maps(&tape, &bindings[0], &mask, &full, draw.class);

            let mut chain_rng = Rng::new(draw.noise_seed);
            let chain =
                noise_chain(&mut chain_rng, &self.model.sched, full.channels(), self.tcfg.renoise_blend);
            let targets = stage_targets(&full, &self.model.sched);

            let mut total: Option<crate::tape::Var> = None;
            for s in 0..stages {
                let tau = draw.taus[s];
                let x_hat = interpolant(&chain[s], &targets[s], tau);
                let v_target = interpolant_velocity(&chain[s], &targets[s]);
                let t = self.model.sched.global_time(s, tau);
                let v = velocity_forward(
                    &tape,
                    &bindings[s],
                    &self.model.params,
                    &self.model.vel,
                    s,
                    &tape.constant(&x_hat.as_rows()),
                    t,
                    &maps[s],
                    draw.class,
                );
                let l = tape.mean_sq(&v, &tape.constant(&v_target.as_rows()));
                stage_loss[s] += tape.scalar_f64(l);
                let weighted = tape.scale(&l, weights[s] / batch as f32);
                total = Some(match total {
                    Some(acc) => tape.add(&acc, &weighted),
                    None => weighted,
                });
            }
            let total = total.expect("at least one stage");
            assert!(
                tape.scalar_f64(total).is_finite(),
                "non-finite loss at step {}",
                self.step + 1
            );
            tape.backward(total);

            for i in 0..n_entries {
                if grad_acc[i].is_empty() {
                    continue;
                }
                for binding in &bindings {
                    tape.add_grad_into(binding.vals()[i], &mut grad_acc[i]);
                }
            }
            for s in 0..stages {
                let out_var = bindings[s].get(self.model.vel.out_proj_id(s));
                tape.add_grad_into(*out_var, &mut stage_out_grads[s]);
            }
        }

        for l in stage_loss.iter_mut() {
            *l /= batch as f64;
        }
        let grad_norms: Vec<f64> = stage_out_grads.iter().map(|g| kernels::l2_norm(g)).collect();

        // First step: record the per-stage loss scale used for ratios.
        if self.step == 0 {
            let init = self.model.params.get_mut(self.model.init_losses).data_mut();
            for s in 0..stages {
                init[s] = stage_loss[s].max(1e-12) as f32;
            }
        }

        if self.tcfg.weight_mode == WeightMode::GradNorm {
            let init = self.model.init_loss_values();
            let ratios: Vec<f64> = (0..stages)
                .map(|s| stage_loss[s] / (init[s] as f64).max(1e-12))
                .collect();
            let mut w = self.model.stage_weight_values();
            gradnorm_update(
                &mut w,
                &grad_norms,
                &ratios,
                self.tcfg.gradnorm_alpha,
                self.tcfg.gradnorm_rate,
            );
            self.model
                .params
                .get_mut(self.model.stage_weights)
                .data_mut()
                .copy_from_slice(&w);
        }

        self.step += 1;
        let adam_cfg = AdamConfig::new(self.tcfg.lr, self.tcfg.weight_decay);
        adamw_step(&mut self.model.params, &grad_acc, &mut self.opt, self.step, &adam_cfg);

        StepReport {
            step: self.step,
            per_stage_loss: stage_loss,
            weights,
            grad_norms,
            wallclock_ms: t0.elapsed().as_secs_f64() * 1e3,
        }
    }
}

/// Per-stage loss of the freshly initialized model (velocity identically
/// zero) over a batch, for calibration against the analytic anchor.
pub fn measure_init_losses(model: &Model, dataset: &Dataset, batch: usize, seed: u64) -> Vec<f64> {
    let stages = model.sched.stages();
    let mut rng = Rng::new(seed);
    let mut sums = vec![0.0f64; stages];
    for _ in 0..batch {
        let index = rng.below(dataset.len() as u64) as usize;
        let class = dataset.labels()[index] as usize;
        let noise_seed = rng.next_u64();
        let full = dataset.feature_map(index, stages - 1);
        for s in 0..stages {
            let seed_s = noise_seed ^ (s as u64).wrapping_mul(0x9e37);
            sums[s] += flow_loss_stage(model, &full, s, class, seed_s, DEFAULT_BLEND);
        }
    }
    sums.iter().map(|&x| x / batch as f64).collect()
}

const DEFAULT_BLEND: f32 = crate::pyramid::DEFAULT_RENOISE_BLEND;

// ── file-emitting entry point ────────────────────────────────────────

/// Artifacts produced by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub reports: Vec<StepReport>,
}

/// Run (or resume) training: checkpoints every `checkpoint_every` steps plus
/// a final one, and a metrics CSV with one row per stage per step.
pub fn train(
    model_cfg: ModelConfig,
    tcfg: TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| EcarError::io(out_dir, e))?;
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(ck, tcfg.clone())?,
        None => Trainer::new(Model::init(model_cfg, tcfg.seed)?, tcfg.clone()),
    };
    if dataset.is_empty() {
        return Err(EcarError::validation("dataset is empty"));
    }

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics =
        std::fs::File::create(&metrics_path).map_err(|e| EcarError::io(&metrics_path, e))?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| EcarError::io(&metrics_path, e))?;

    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();
    let target = trainer.step + tcfg.steps as u64;
    while trainer.step < target {
        let report = trainer.step(dataset);
        for s in 0..report.per_stage_loss.len() {
            writeln!(
                metrics,
                "{},{},{},{},{},{:.3}",
                report.step,
                s,
                report.per_stage_loss[s],
                report.weights[s],
                tcfg.lr,
                report.wallclock_ms
            )
            .map_err(|e| EcarError::io(&metrics_path, e))?;
        }
        if tcfg.checkpoint_every > 0
            && trainer.step % tcfg.checkpoint_every as u64 == 0
            && trainer.step != target
        {
            let path = out_dir.join(format!("ckpt_step{}.ecar", trainer.step));
            trainer.checkpoint().save(&path)?;
            checkpoints.push(path);
        }
        reports.push(report);
    }
    metrics.flush().map_err(|e| EcarError::io(&metrics_path, e))?;

    let final_path = out_dir.join("ckpt_final.ecar");
    trainer.checkpoint().save(&final_path)?;
    checkpoints.push(final_path.clone());
    Ok(TrainOutcome { final_checkpoint: final_path, metrics: metrics_path, checkpoints, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthSpec};

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            stages: 2,
            final_res: 8,
            channels: 3,
            ar_width: 8,
            ar_layers: 1,
            ar_heads: 2,
            token_dim: 4,
            vel_width: 8,
            vel_blocks: 1,
            vel_heads: 2,
            vel_per_stage: false,
            num_classes: 4,
            pass_through: false,
        }
    }

    fn tiny_dataset() -> Dataset {
        let spec = SynthSpec {
            num_classes: 4,
            height: 8,
            width: 8,
            channels: 3,
            samples_per_class: 4,
            phase_jitter: 0.0,
            pos_jitter: 0.0,
            hue_jitter: 0.05,
            seed: 7,
        };
        generate(&spec)
    }

    fn tiny_train_config(steps: usize) -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 2,
            steps,
            cfg_dropout: 0.1,
            gradnorm_alpha: 1.5,
            gradnorm_rate: 0.1,
            weight_mode: WeightMode::GradNorm,
            seed: 5,
            checkpoint_every: 0,
            renoise_blend: DEFAULT_BLEND,
        }
    }

    #[test]
    fn adamw_zero_grads_leave_params_unchanged() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 3.0]));
        let mut state = AdamState::new(&ps);
        let grads = vec![vec![0.0; 3]];
        adamw_step(&mut ps, &grads, &mut state, 1, &AdamConfig::new(0.1, 0.0));
        assert_eq!(ps.entries()[0].tensor.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn adamw_unit_grad_first_step_moves_by_lr() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::scalar(0.5));
        let mut state = AdamState::new(&ps);
        adamw_step(&mut ps, &[vec![1.0]], &mut state, 1, &AdamConfig::new(0.01, 0.0));
        let got = ps.entries()[0].tensor.data()[0];
        // bias-corrected m_hat/sqrt(v_hat) = 1, so the step is -lr (up to eps)
        assert!((got - 0.49).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn adamw_determinism() {
        let run = || {
            let mut ps = ParamSet::new();
            ps.add("w", Tensor::new(vec![4], vec![0.4, -0.3, 0.2, 0.9]));
            let mut state = AdamState::new(&ps);
            for step in 1..=10 {
                let g: Vec<f32> = ps.entries()[0].tensor.data().iter().map(|&x| x * 0.5).collect();
                adamw_step(&mut ps, &[g], &mut state, step, &AdamConfig::new(0.01, 0.01));
            }
            ps.entries()[0].tensor.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradnorm_symmetric_case_is_fixed_point() {
        let mut w = vec![1.0f32, 1.0];
        gradnorm_update(&mut w, &[3.0, 3.0], &[1.0, 1.0], 1.5, 0.1);
        assert!((w[0] - 1.0).abs() < 1e-6);
        assert!((w[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gradnorm_shifts_weight_toward_weaker_gradient() {
        // Reference step computed from the update rule by hand:
        // g = (2, 1), equal ratios -> targets (1.5, 1.5);
        // w1 *= (1.5/2)^0.1 = 0.9716..., w2 *= 1.5^0.1 = 1.0414...;
        // renormalize to sum 2 -> (0.9653, 1.0347).
        let mut w = vec![1.0f32, 1.0];
        gradnorm_update(&mut w, &[2.0, 1.0], &[1.0, 1.0], 1.5, 0.1);
        assert!((w[0] - 0.96532).abs() < 1e-4, "w0 {w:?}");
        assert!((w[1] - 1.03468).abs() < 1e-4, "w1 {w:?}");
        assert!((w[0] + w[1] - 2.0).abs() < 1e-6);
        assert!(w[0] < 1.0 && w[1] > 1.0);
    }

    #[test]
    fn gradnorm_all_zero_grads_is_noop() {
        let mut w = vec![0.7f32, 1.3];
        gradnorm_update(&mut w, &[0.0, 0.0], &[1.0, 1.0], 1.5, 0.1);
        assert_eq!(w, vec![0.7, 1.3]);
    }

    #[test]
    fn flow_loss_zero_velocity_anchor() {
        // v == 0: the loss equals mean ||F1 - F0||^2 on the same draws.
        let sched = StageSchedule::make(2, (8, 8), 10).unwrap();
        let mut full = FeatureMap::zeros(1, 8, 8, 3);
        Rng::new(3).fill_normal(full.data_mut());
        for stage in 0..2 {
            let zero_loss = flow_loss_with(&full, &sched, stage, 42, DEFAULT_BLEND, |rows, _| {
                Tensor::zeros(rows.shape().to_vec())
            });
            let mut rng = Rng::new(42);
            let _tau = rng.uniform();
            let chain = noise_chain(&mut rng, &sched, 3, DEFAULT_BLEND);
            let targets = stage_targets(&full, &sched);
            // the in-graph route squares the f32-rounded difference, the
            // direct route subtracts in f64; equal to f32 resolution
            let expect = kernels::mean_sq(targets[stage].data(), chain[stage].data());
            let rel = (zero_loss - expect).abs() / expect;
            assert!(rel < 1e-6, "stage {stage}: {zero_loss} vs {expect}");
        }
    }

    #[test]
    fn flow_loss_oracle_velocity_is_zero() {
        let sched = StageSchedule::make(2, (8, 8), 10).unwrap();
        let mut full = FeatureMap::zeros(1, 8, 8, 3);
        Rng::new(4).fill_normal(full.data_mut());
        for stage in 0..2 {
            // oracle reproduces the exact draw by replaying the seed
            let loss = flow_loss_with(&full, &sched, stage, 77, DEFAULT_BLEND, |_, _| {
                let mut rng = Rng::new(77);
                let _tau = rng.uniform();
                let chain = noise_chain(&mut rng, &sched, 3, DEFAULT_BLEND);
                let targets = stage_targets(&full, &sched);
                let v = interpolant_velocity(&chain[stage], &targets[stage]);
                v.as_rows()
            });
            assert_eq!(loss, 0.0, "stage {stage}");
        }
    }

    #[test]
    fn model_checkpoint_roundtrip_bit_exact() {
        let model = Model::init(tiny_model_config(), 9).unwrap();
        let opt = AdamState::new(&model.params);
        let ck = model.to_checkpoint(Some(&opt), 123, 7);
        let (back, restored_opt) = Model::from_checkpoint(&ck).unwrap();
        assert!(restored_opt.is_some());
        for (a, b) in model.params.entries().iter().zip(back.params.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        assert_eq!(ck.encode(), back.to_checkpoint(Some(&AdamState::new(&back.params)), 123, 7).encode());
    }

    #[test]
    fn one_step_decreases_nothing_but_runs_and_is_deterministic() {
        let dataset = tiny_dataset();
        let run = || {
            let model = Model::init(tiny_model_config(), 11).unwrap();
            let mut trainer = Trainer::new(model, tiny_train_config(2));
            let r1 = trainer.step(&dataset);
            let r2 = trainer.step(&dataset);
            (r1.per_stage_loss, r2.per_stage_loss, trainer.checkpoint().encode())
        };
        let (a1, a2, abytes) = run();
        let (b1, b2, bbytes) = run();
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
        assert_eq!(abytes, bbytes);
    }

    #[test]
    fn resume_matches_uninterrupted_run_bit_exact() {
        let dataset = tiny_dataset();
        // uninterrupted: 3 steps
        let model = Model::init(tiny_model_config(), 13).unwrap();
        let mut full_run = Trainer::new(model, tiny_train_config(3));
        for _ in 0..3 {
            full_run.step(&dataset);
        }
        let full_bytes = full_run.checkpoint().encode();

        // interrupted: 2 steps, checkpoint, resume, 1 step
        let model = Model::init(tiny_model_config(), 13).unwrap();
        let mut first = Trainer::new(model, tiny_train_config(3));
        first.step(&dataset);
        first.step(&dataset);
        let ck = first.checkpoint();
        let decoded = Checkpoint::decode(&ck.encode()).unwrap();
        let mut resumed = Trainer::resume(&decoded, tiny_train_config(3)).unwrap();
        resumed.step(&dataset);
        assert_eq!(resumed.checkpoint().encode(), full_bytes);
    }

    #[test]
    fn stage_weights_stay_normalized_and_positive() {
        let dataset = tiny_dataset();
        let model = Model::init(tiny_model_config(), 17).unwrap();
        let stages = model.sched.stages();
        let mut trainer = Trainer::new(model, tiny_train_config(5));
        for _ in 0..5 {
            trainer.step(&dataset);
            let w = trainer.model.stage_weight_values();
            let sum: f32 = w.iter().sum();
            assert!((sum - stages as f32).abs() < 1e-4, "sum {sum}");
            assert!(w.iter().all(|&x| x >= WEIGHT_FLOOR));
        }
    }

    #[test]
    fn uniform_mode_keeps_weights_at_one() {
        let dataset = tiny_dataset();
        let model = Model::init(tiny_model_config(), 19).unwrap();
        let mut tcfg = tiny_train_config(3);
        tcfg.weight_mode = WeightMode::Uniform;
        let mut trainer = Trainer::new(model, tcfg);
        for _ in 0..3 {
            trainer.step(&dataset);
            assert!(trainer.model.stage_weight_values().iter().all(|&w| w == 1.0));
        }
    }

    #[test]
    fn end_to_end_gradient_reaches_conditioner() {
        // Perturbing a conditioner parameter changes the total loss: gradient
        // flows through the whole pipeline.
        // Zero initialization staggers the opening of the gradient path:
        // step 1 moves the velocity head, step 2 the gate projections,
        // step 3 reaches the conditioning (and with it the AR head), and
        // step 4 the AR trunk behind it.
        let dataset = tiny_dataset();
        let model = Model::init(tiny_model_config(), 23).unwrap();
        let mut trainer = Trainer::new(model, tiny_train_config(4));
        for _ in 0..3 {
            trainer.step(&dataset);
        }
        let head = trainer.model.params.id_by_name("ar/output_proj").unwrap();
        assert!(trainer.opt.m[head.0].iter().any(|&x| x != 0.0), "AR head got no gradient");
        trainer.step(&dataset);
        let id = trainer.model.params.id_by_name("ar/input_proj").unwrap();
        let m = &trainer.opt.m[id.0];
        assert!(m.iter().any(|&x| x != 0.0), "conditioner got no gradient");
    }

    #[test]
    fn train_zero_steps_writes_checkpoint_and_empty_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_dataset();
        let mut tcfg = tiny_train_config(0);
        tcfg.checkpoint_every = 10;
        let outcome =
            train(tiny_model_config(), tcfg, &dataset, dir.path(), None).unwrap();
        assert!(outcome.final_checkpoint.exists());
        let metrics = std::fs::read_to_string(&outcome.metrics).unwrap();
        assert_eq!(metrics.trim_end(), METRICS_HEADER);
    }

    #[test]
    fn train_one_step_emits_one_row_per_stage() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_dataset();
        let outcome =
            train(tiny_model_config(), tiny_train_config(1), &dataset, dir.path(), None).unwrap();
        let metrics = std::fs::read_to_string(&outcome.metrics).unwrap();
        let lines: Vec<&str> = metrics.trim_end().lines().collect();
        assert_eq!(lines.len(), 1 + 2, "header plus one row per stage");
        assert!(lines[1].starts_with("1,0,"));
        assert!(lines[2].starts_with("1,1,"));
    }
}
