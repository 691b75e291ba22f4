//! Stage-by-stage flow sampling.
//!
//! For each stage: decode that stage's token map from the conditioner (with
//! a second null-class stream when classifier-free guidance is active), pick
//! the stage's start state, and integrate the velocity field with forward
//! Euler over the stage's local time and step budget.
//!
//! Two stage-transition modes:
//! * `conditioning_only` (default): every stage starts from its element of
//!   the renoised noise chain and integrates the full local interval, which
//!   matches the training interpolant exactly; information moves across
//!   stages only through the conditioning.
//! * `renoise_continuation`: stage s > 0 starts from the renoised upsampled
//!   previous output and re-enters at a configurable local time.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::ar::{self, ArCache};
use crate::config::{Config, ContinuationMode};
use crate::error::{EcarError, Result};
use crate::pyramid::{noise_chain, upsample, upsample_renoise, FeatureMap};
use crate::rng::Rng;
use crate::tape::{Engine, Eval};
use crate::tensor::Tensor;
use crate::trainer::{Conditioner, Model};
use crate::velocity::{condition_static, velocity_forward_with_cond};

#[derive(Debug, Clone)]
pub struct SampleConfig {
    /// Total integration steps across all stages.
    pub total_steps: usize,
    /// Guidance scale w; 1 disables the unconditional branch entirely.
    pub cfg_scale: f32,
    pub class_id: usize,
    pub seed: u64,
    pub renoise_blend: f32,
    pub mode: ContinuationMode,
    /// Local re-entry time for `renoise_continuation`.
    pub reentry_tau: f64,
}

impl SampleConfig {
    pub fn from_config(cfg: &Config, class_id: usize, seed: u64) -> SampleConfig {
        SampleConfig {
            total_steps: cfg.sample_steps,
            cfg_scale: cfg.cfg_scale,
            class_id,
            seed,
            renoise_blend: cfg.renoise_blend,
            mode: cfg.mode,
            reentry_tau: cfg.reentry_tau,
        }
    }
}

/// Counters reported alongside a sample.
#[derive(Debug, Clone, Default)]
pub struct SampleStats {
    /// Number of (position x velocity-net forward) evaluations.
    pub velocity_position_evals: u64,
    pub per_stage_steps: Vec<usize>,
}

/// Forward Euler over local time [tau_start, 1] with a uniform step.
/// Exact for velocity fields constant along the path.
pub fn euler_integrate<F>(x0: &FeatureMap, steps: usize, tau_start: f64, mut velocity: F) -> FeatureMap
where
    F: FnMut(&FeatureMap, f64) -> FeatureMap,
{
    assert!(steps >= 1, "euler integration needs at least one step");
    assert!((0.0..1.0).contains(&tau_start), "tau_start {tau_start} outside [0,1)");
    let dtau = (1.0 - tau_start) / steps as f64;
    let mut x = x0.clone();
    for k in 0..steps {
        let tau = tau_start + k as f64 * dtau;
        let v = velocity(&x, tau);
        assert_eq!(v.grid().shape(), x.grid().shape(), "velocity shape mismatch");
        for (xv, &vv) in x.data_mut().iter_mut().zip(v.data()) {
            *xv = (*xv as f64 + dtau * vv as f64) as f32;
        }
    }
    x
}

/// Classifier-free guidance combination: v_u + w (v_c - v_u).
pub fn cfg_combine(v_cond: &[f32], v_uncond: &[f32], w: f32) -> Vec<f32> {
    assert_eq!(v_cond.len(), v_uncond.len());
    v_cond
        .iter()
        .zip(v_uncond)
        .map(|(&c, &u)| (u as f64 + w as f64 * (c as f64 - u as f64)) as f32)
        .collect()
}

/// Conditioning streams during sampling: the class-conditional one, plus a
/// null-class stream when guidance is active.
struct CondStream<'m> {
    model: &'m Model,
    cache: Option<ArCache>,
    class_id: usize,
}

impl<'m> CondStream<'m> {
    fn new(model: &'m Model, class_id: usize) -> CondStream<'m> {
        let cache = match &model.cond {
            Conditioner::Ar(p) => Some(ArCache::new(p)),
            Conditioner::PassThrough { .. } => None,
        };
        CondStream { model, cache, class_id }
    }

    /// Token map for `stage`, given the previous stage's flow output.
    fn token_map(
        &mut self,
        e: &Eval,
        b: &crate::params::Binding<Eval>,
        stage: usize,
        prev: Option<&FeatureMap>,
    ) -> Arc<Tensor> {
        match &self.model.cond {
            Conditioner::Ar(p) => {
                let input = if stage == 0 {
                    ar::stage_input_class(e, b, p, self.class_id)
                } else {
                    ar::stage_input_from_prev(e, b, p, stage, prev.expect("previous stage output"))
                };
                let cache = self.cache.as_mut().expect("AR cache");
                let map = ar::generate_stage(b, p, cache, &input, stage);
                Arc::new(map.tokens)
            }
            Conditioner::PassThrough { proj, class_table } => {
                if stage == 0 {
                    let n0 = self.model.sched.stage_tokens(0);
                    e.gather_rows(b.get(*class_table), &vec![self.class_id; n0])
                } else {
                    let up = upsample(prev.expect("previous stage output"));
                    e.matmul(&e.constant(&up.as_rows()), b.get(*proj))
                }
            }
        }
    }
}

/// Draw one image. Deterministic in (checkpointed parameters, config).
pub fn sample(model: &Model, cfg: &SampleConfig) -> Result<(FeatureMap, SampleStats)> {
    if cfg.class_id > model.cfg.num_classes {
        return Err(EcarError::validation(format!(
            "class id {} out of range (null class is {})",
            cfg.class_id,
            model.cfg.num_classes
        )));
    }
    if cfg.cfg_scale < 0.0 {
        return Err(EcarError::validation("cfg_scale must be >= 0"));
    }
    let mut sched = model.sched.clone();
    sched.reallocate_steps(cfg.total_steps)?;
    let stages = sched.stages();
    let channels = model.cfg.channels;

    let e = Eval;
    let b = model.params.bind(&e);
    let mut rng = Rng::new(cfg.seed);
    let chain = noise_chain(&mut rng, &sched, channels, cfg.renoise_blend);

    let guided = cfg.cfg_scale != 1.0;
    let mut cond_stream = CondStream::new(model, cfg.class_id);
    let mut uncond_stream =
        if guided { Some(CondStream::new(model, model.null_class())) } else { None };

    let mut stats =
        SampleStats { velocity_position_evals: 0, per_stage_steps: sched.steps_per_stage().to_vec() };
    let mut prev: Option<FeatureMap> = None;

    for s in 0..stages {
        let m_cond = cond_stream.token_map(&e, &b, s, prev.as_ref());
        let m_uncond =
            uncond_stream.as_mut().map(|stream| stream.token_map(&e, &b, s, prev.as_ref()));

        let (start, tau_start) = if s == 0 {
            (chain[0].clone(), 0.0)
        } else {
            match cfg.mode {
                ContinuationMode::ConditioningOnly => (chain[s].clone(), 0.0),
                ContinuationMode::RenoiseContinuation => {
                    let mut renoised =
                        upsample_renoise(prev.as_ref().unwrap(), cfg.renoise_blend, &mut rng);
                    renoised.stage = s;
                    (renoised, cfg.reentry_tau)
                }
            }
        };

        let steps = sched.steps_per_stage()[s];
        let (h, w) = sched.resolution(s);
        let null_class = model.null_class();
        // conditioning is time-independent: build it once per stage
        let cond_c = condition_static(&e, &b, &model.vel, s, &m_cond, cfg.class_id);
        let cond_u = m_uncond
            .as_ref()
            .map(|m_u| condition_static(&e, &b, &model.vel, s, m_u, null_class));
        let mut evals = 0u64;
        let out = euler_integrate(&start, steps, tau_start, |state, tau| {
            let t = sched.global_time(s, tau);
            let rows = e.constant(&state.as_rows());
            let v_c = velocity_forward_with_cond(
                &e,
                &b,
                &model.params,
                &model.vel,
                s,
                &rows,
                t,
                &cond_c,
            );
            evals += (h * w) as u64;
            let v_data = if let Some(cond_u) = &cond_u {
                let v_u = velocity_forward_with_cond(
                    &e,
                    &b,
                    &model.params,
                    &model.vel,
                    s,
                    &rows,
                    t,
                    cond_u,
                );
                evals += (h * w) as u64;
                cfg_combine(v_c.data(), v_u.data(), cfg.cfg_scale)
            } else {
                v_c.data().to_vec()
            };
            FeatureMap::new(s, Tensor::new(vec![h, w, channels], v_data))
        });
        stats.velocity_position_evals += evals;
        prev = Some(out);
    }

    Ok((prev.expect("at least one stage"), stats))
}

/// Clamp to [0,1]; applied at export and evaluation only.
pub fn clamp_unit(map: &FeatureMap) -> Tensor {
    let data: Vec<f32> = map.data().iter().map(|&v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(map.grid().shape().to_vec(), data)
}

/// Binary PPM (P6), 8-bit RGB, value = round(clamp(x, 0, 1) * 255).
pub fn write_ppm(map: &FeatureMap, path: &Path) -> Result<()> {
    if map.channels() != 3 {
        return Err(EcarError::validation("PPM export requires 3 channels"));
    }
    let (h, w) = (map.h(), map.w());
    let mut out = Vec::with_capacity(32 + h * w * 3);
    write!(out, "P6\n{w} {h}\n255\n").expect("in-memory write");
    for &v in map.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, out).map_err(|e| EcarError::io(path, e))
}
