//! Stage-conditioned velocity field.
//!
//! A small transformer over spatial positions predicting the flow velocity of
//! the current stage. Conditioning is spatially variant: each position's
//! condition row is the projected token-map row for that position, plus the
//! timestep embedding and the class embedding, and it drives adaptive
//! layer-norm modulation (shift/scale/gate for the attention and MLP paths)
//! computed per position.
//!
//! Modulation projections and the output projection start at zero, so each
//! block is an identity residual and the predicted velocity is identically
//! zero at initialization; the flow loss then equals the mean squared norm
//! of the interpolant velocity, a useful calibration anchor.
//!
//! By default one weight set is shared across stages (stage identity enters
//! through the global time embedding and the conditioning resolution); a
//! per-stage weight copy is available behind a config flag.

use crate::ar::LN_EPS;
use crate::params::{Binding, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tape::Engine;
use crate::tensor::Tensor;

const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone)]
pub struct VelocityConfig {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Token map dimensionality D of the conditioning rows.
    pub token_dim: usize,
    /// Channels of the feature maps being transported.
    pub channels: usize,
    pub num_classes: usize,
    /// Number of schedule stages (for per-stage weights).
    pub stages: usize,
    /// One shared weight set (false) or a copy per stage (true).
    pub per_stage: bool,
    /// Test hook: replace attention mixing with a per-position identity,
    /// making the network strictly local.
    pub ablate_attention: bool,
}

impl VelocityConfig {
    pub fn head_dim(&self) -> usize {
        assert_eq!(self.width % self.heads, 0, "width must divide into heads");
        self.width / self.heads
    }

    pub fn null_class(&self) -> usize {
        self.num_classes
    }
}

#[derive(Debug, Clone)]
struct HeadIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

/// shift/scale/gate projections for the attention and MLP paths.
#[derive(Debug, Clone)]
struct ModIds {
    shift_attn: ParamId,
    scale_attn: ParamId,
    gate_attn: ParamId,
    shift_mlp: ParamId,
    scale_mlp: ParamId,
    gate_mlp: ParamId,
}

#[derive(Debug, Clone)]
struct BlockIds {
    heads: Vec<HeadIds>,
    w1: ParamId,
    w2: ParamId,
    mods: ModIds,
}

#[derive(Debug, Clone)]
struct WeightSet {
    patch_proj: ParamId,
    token_proj: ParamId,
    class_table: ParamId,
    /// Fixed sinusoid frequency ladder (buffer, not optimized).
    time_freq: ParamId,
    blocks: Vec<BlockIds>,
    out_proj: ParamId,
}

#[derive(Debug, Clone)]
pub struct VelocityParams {
    pub cfg: VelocityConfig,
    sets: Vec<WeightSet>,
}

impl VelocityParams {
    pub fn init(cfg: VelocityConfig, ps: &mut ParamSet, rng: &mut Rng) -> VelocityParams {
        assert!(cfg.width % 2 == 0, "velocity width must be even for the sinusoid embedding");
        let copies = if cfg.per_stage { cfg.stages } else { 1 };
        let sets = (0..copies).map(|c| Self::init_set(&cfg, c, ps, rng)).collect();
        VelocityParams { cfg, sets }
    }

    fn init_set(cfg: &VelocityConfig, copy: usize, ps: &mut ParamSet, rng: &mut Rng) -> WeightSet {
        let w = cfg.width;
        let hd = cfg.head_dim();
        let pre = if cfg.per_stage { format!("vel/s{copy}") } else { "vel".to_string() };
        let freq = time_frequencies(w);
        WeightSet {
            patch_proj: ps.add(format!("{pre}/patch_proj"), Tensor::randn(vec![cfg.channels, w], INIT_STD, rng)),
            token_proj: ps.add(format!("{pre}/token_proj"), Tensor::randn(vec![cfg.token_dim, w], INIT_STD, rng)),
            class_table: ps.add(format!("{pre}/class_table"), Tensor::randn(vec![cfg.num_classes + 1, w], INIT_STD, rng)),
            time_freq: ps.add_buffer(format!("{pre}/time_freq"), Tensor::new(vec![w / 2], freq)),
            blocks: (0..cfg.blocks)
                .map(|l| BlockIds {
                    heads: (0..cfg.heads)
                        .map(|h| HeadIds {
                            wq: ps.add(format!("{pre}/b{l}/h{h}/wq"), Tensor::randn(vec![w, hd], INIT_STD, rng)),
                            wk: ps.add(format!("{pre}/b{l}/h{h}/wk"), Tensor::randn(vec![w, hd], INIT_STD, rng)),
                            wv: ps.add(format!("{pre}/b{l}/h{h}/wv"), Tensor::randn(vec![w, hd], INIT_STD, rng)),
                            wo: ps.add(format!("{pre}/b{l}/h{h}/wo"), Tensor::randn(vec![hd, w], INIT_STD, rng)),
                        })
                        .collect(),
                    w1: ps.add(format!("{pre}/b{l}/mlp_w1"), Tensor::randn(vec![w, 4 * w], INIT_STD, rng)),
                    w2: ps.add(format!("{pre}/b{l}/mlp_w2"), Tensor::randn(vec![4 * w, w], INIT_STD, rng)),
                    // adaLN-style zero init: identity residual at start
                    mods: ModIds {
                        shift_attn: ps.add(format!("{pre}/b{l}/mod_shift_attn"), Tensor::zeros(vec![w, w])),
                        scale_attn: ps.add(format!("{pre}/b{l}/mod_scale_attn"), Tensor::zeros(vec![w, w])),
                        gate_attn: ps.add(format!("{pre}/b{l}/mod_gate_attn"), Tensor::zeros(vec![w, w])),
                        shift_mlp: ps.add(format!("{pre}/b{l}/mod_shift_mlp"), Tensor::zeros(vec![w, w])),
                        scale_mlp: ps.add(format!("{pre}/b{l}/mod_scale_mlp"), Tensor::zeros(vec![w, w])),
                        gate_mlp: ps.add(format!("{pre}/b{l}/mod_gate_mlp"), Tensor::zeros(vec![w, w])),
                    },
                })
                .collect(),
            // zero init: v == 0 everywhere at start
            out_proj: ps.add(format!("{pre}/out_proj"), Tensor::zeros(vec![w, cfg.channels])),
        }
    }

    fn set_for_stage(&self, stage: usize) -> &WeightSet {
        if self.cfg.per_stage {
            &self.sets[stage]
        } else {
            &self.sets[0]
        }
    }

    /// The output projection parameter used for a given stage; gradients at
    /// this tensor are what the stage-weight balancing measures.
    pub fn out_proj_id(&self, stage: usize) -> ParamId {
        self.set_for_stage(stage).out_proj
    }

    /// Deterministic sinusoidal features of a global time in [0, 1].
    pub fn timestep_embed(&self, ps: &ParamSet, stage: usize, t: f64) -> Vec<f32> {
        let set = self.set_for_stage(stage);
        let freq = ps.get(set.time_freq);
        timestep_embed_with(freq.data(), t)
    }
}

/// Geometric frequency ladder spanning wavelengths 1e0 .. 1e4.
pub fn time_frequencies(width: usize) -> Vec<f32> {
    let half = width / 2;
    (0..half)
        .map(|i| {
            let exponent = i as f64 / half.max(1) as f64;
            (1000.0 * (10_000f64).powf(-exponent)) as f32
        })
        .collect()
}

/// [cos(t f_i) .. sin(t f_i)] features; deterministic in t.
pub fn timestep_embed_with(freq: &[f32], t: f64) -> Vec<f32> {
    assert!((0.0..=1.0).contains(&t), "global time {t} outside [0,1]");
    let mut out = Vec::with_capacity(freq.len() * 2);
    for &f in freq {
        out.push((t * f as f64).cos() as f32);
    }
    for &f in freq {
        out.push((t * f as f64).sin() as f32);
    }
    out
}

/// h * (1 + scale) + shift, all per position.
fn modulate<E: Engine>(e: &E, h: &E::Val, scale: &E::Val, shift: &E::Val) -> E::Val {
    e.add(&e.add(&e.mul(h, scale), h), shift)
}

/// The time-independent part of the per-position condition: projected token
/// rows plus the class embedding. Computed once per stage and reused across
/// integration steps.
pub fn condition_static<E: Engine>(
    e: &E,
    b: &Binding<E>,
    p: &VelocityParams,
    stage: usize,
    token_map: &E::Val,
    class_id: usize,
) -> E::Val {
    let cfg = &p.cfg;
    assert!(class_id <= cfg.num_classes, "unknown class id {class_id}");
    let set = p.set_for_stage(stage);
    let n = e.shape_of(token_map)[0];
    let class_rows = e.gather_rows(b.get(set.class_table), &vec![class_id; n]);
    e.add(&e.matmul(token_map, b.get(set.token_proj)), &class_rows)
}

/// Evaluate the velocity field for one stage.
///
/// * `f_t_rows`: current state as (h_s*w_s, C) rows (not differentiated).
/// * `t`: global time within the stage's interval.
/// * `token_map`: conditioning rows (h_s*w_s, D); differentiable, which is
///   what couples the autoregressive model into the flow loss.
/// * `class_id`: class index, or the null row for unconditional paths.
pub fn velocity_forward<E: Engine>(
    e: &E,
    b: &Binding<E>,
    ps: &ParamSet,
    p: &VelocityParams,
    stage: usize,
    f_t_rows: &E::Val,
    t: f64,
    token_map: &E::Val,
    class_id: usize,
) -> E::Val {
    let tshape = e.shape_of(token_map);
    let n = e.shape_of(f_t_rows)[0];
    assert_eq!(
        tshape,
        vec![n, p.cfg.token_dim],
        "token map rows must match state positions: {tshape:?} vs n={n}"
    );
    let cond_static = condition_static(e, b, p, stage, token_map, class_id);
    velocity_forward_with_cond(e, b, ps, p, stage, f_t_rows, t, &cond_static)
}

/// Velocity evaluation against a precomputed static condition.
pub fn velocity_forward_with_cond<E: Engine>(
    e: &E,
    b: &Binding<E>,
    ps: &ParamSet,
    p: &VelocityParams,
    stage: usize,
    f_t_rows: &E::Val,
    t: f64,
    cond_static: &E::Val,
) -> E::Val {
    let cfg = &p.cfg;
    let set = p.set_for_stage(stage);
    let shape = e.shape_of(f_t_rows);
    let n = shape[0];
    assert_eq!(shape[1], cfg.channels, "state channel mismatch");
    assert_eq!(e.shape_of(cond_static), vec![n, cfg.width], "condition shape mismatch");

    // Per-position condition: static part + timestep embedding.
    let temb = p.timestep_embed(ps, stage, t);
    let mut trows = Vec::with_capacity(n * cfg.width);
    for _ in 0..n {
        trows.extend_from_slice(&temb);
    }
    let time_rows = e.constant(&Tensor::new(vec![n, cfg.width], trows));
    let cond = e.add(cond_static, &time_rows);

    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();
    let full_limits = vec![n; n];

    let mut x = e.matmul(f_t_rows, b.get(set.patch_proj));
    for block in &set.blocks {
        let shift_a = e.matmul(&cond, b.get(block.mods.shift_attn));
        let scale_a = e.matmul(&cond, b.get(block.mods.scale_attn));
        let gate_a = e.matmul(&cond, b.get(block.mods.gate_attn));
        let shift_m = e.matmul(&cond, b.get(block.mods.shift_mlp));
        let scale_m = e.matmul(&cond, b.get(block.mods.scale_mlp));
        let gate_m = e.matmul(&cond, b.get(block.mods.gate_mlp));

        let h = e.layernorm(&x, 1, LN_EPS);
        let hm = modulate(e, &h, &scale_a, &shift_a);
        let mixed = if cfg.ablate_attention {
            hm.clone()
        } else {
            let mut attn: Option<E::Val> = None;
            for head in &block.heads {
                let q = e.matmul(&hm, b.get(head.wq));
                let k = e.matmul(&hm, b.get(head.wk));
                let v = e.matmul(&hm, b.get(head.wv));
                let scores = e.scale(&e.matmul_bt(&q, &k), scale);
                let probs = e.masked_softmax(&scores, &full_limits);
                let mix = e.matmul(&probs, &v);
                let out = e.matmul(&mix, b.get(head.wo));
                attn = Some(match attn {
                    Some(acc) => e.add(&acc, &out),
                    None => out,
                });
            }
            attn.expect("at least one head")
        };
        x = e.add(&x, &e.mul(&mixed, &gate_a));

        let h2 = e.layernorm(&x, 1, LN_EPS);
        let hm2 = modulate(e, &h2, &scale_m, &shift_m);
        let m = e.matmul(&e.gelu(&e.matmul(&hm2, b.get(block.w1))), b.get(block.w2));
        x = e.add(&x, &e.mul(&m, &gate_m));
    }
    let h = e.layernorm(&x, 1, LN_EPS);
    e.matmul(&h, b.get(set.out_proj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Eval;

    fn toy(per_stage: bool, ablate: bool) -> (ParamSet, VelocityParams) {
        let mut ps = ParamSet::new();
        let cfg = VelocityConfig {
            width: 16,
            blocks: 2,
            heads: 2,
            token_dim: 6,
            channels: 3,
            num_classes: 4,
            stages: 3,
            per_stage,
            ablate_attention: ablate,
        };
        let mut rng = Rng::new(7);
        let p = VelocityParams::init(cfg, &mut ps, &mut rng);
        (ps, p)
    }

    fn rows(n: usize, c: usize, seed: u64) -> Tensor {
        let mut t = Tensor::zeros(vec![n, c]);
        Rng::new(seed).fill_normal(t.data_mut());
        t
    }

    #[test]
    fn timestep_embed_properties() {
        let (ps, p) = toy(false, false);
        let e0 = p.timestep_embed(&ps, 0, 0.0);
        let e0b = p.timestep_embed(&ps, 0, 0.0);
        let e1 = p.timestep_embed(&ps, 0, 1.0);
        assert_eq!(e0, e0b, "identical t must embed identically");
        assert_eq!(e0.len(), 16, "embedding dimension equals width");
        let diff: f64 = e0.iter().zip(&e1).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
        assert!(diff.sqrt() > 0.0, "t=0 and t=1 embeddings must differ");
    }

    #[test]
    #[should_panic(expected = "outside [0,1]")]
    fn timestep_embed_rejects_out_of_range() {
        let (ps, p) = toy(false, false);
        p.timestep_embed(&ps, 0, 1.5);
    }

    #[test]
    fn zero_init_velocity_is_zero() {
        let (ps, p) = toy(false, false);
        let e = Eval;
        let b = ps.bind(&e);
        let f = e.constant(&rows(64, 3, 1));
        let m = e.constant(&rows(64, 6, 2));
        let v = velocity_forward(&e, &b, &ps, &p, 2, &f, 0.9, &m, 1);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_preserved_across_stages() {
        let (mut ps, p) = toy(false, false);
        let mut rng = Rng::new(3);
        // non-trivial weights
        for name in ["vel/out_proj"] {
            let id = ps.id_by_name(name).unwrap();
            ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.normal() as f32 * 0.05);
        }
        let e = Eval;
        let b = ps.bind(&e);
        for (stage, n) in [(0usize, 64usize), (1, 256), (2, 1024)] {
            let f = e.constant(&rows(n, 3, stage as u64));
            let m = e.constant(&rows(n, 6, 10 + stage as u64));
            let t = (stage as f64 + 0.5) / 3.0;
            let v = velocity_forward(&e, &b, &ps, &p, stage, &f, t, &m, 0);
            assert_eq!(v.shape(), &[n, 3], "stage {stage}");
            assert!(v.data().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn deterministic_forward() {
        let (mut ps, p) = toy(false, false);
        let mut rng = Rng::new(4);
        let id = ps.id_by_name("vel/out_proj").unwrap();
        ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.normal() as f32 * 0.05);
        let e = Eval;
        let b = ps.bind(&e);
        let f = e.constant(&rows(16, 3, 5));
        let m = e.constant(&rows(16, 6, 6));
        let v1 = velocity_forward(&e, &b, &ps, &p, 0, &f, 0.1, &m, 2);
        let v2 = velocity_forward(&e, &b, &ps, &p, 0, &f, 0.1, &m, 2);
        assert_eq!(v1.data(), v2.data());
    }

    /// With attention ablated the network is strictly per-position: changing
    /// one token row changes only that position's velocity.
    #[test]
    fn conditioning_is_local_without_attention() {
        let (mut ps, p) = toy(false, true);
        let mut rng = Rng::new(8);
        // make every projection non-trivial so the condition actually matters
        for e in ps.entries_mut() {
            if e.trainable {
                e.tensor.data_mut().iter_mut().for_each(|v| *v = rng.normal() as f32 * 0.05);
            }
        }
        let e = Eval;
        let b = ps.bind(&e);
        let f = e.constant(&rows(16, 3, 9));
        let m0 = rows(16, 6, 10);
        let mut m1 = m0.clone();
        m1.data_mut()[5 * 6 + 2] += 1.0; // perturb position 5
        let v0 = velocity_forward(&e, &b, &ps, &p, 0, &f, 0.2, &e.constant(&m0), 1);
        let v1 = velocity_forward(&e, &b, &ps, &p, 0, &f, 0.2, &e.constant(&m1), 1);
        for pos in 0..16 {
            let changed = (0..3).any(|c| v0.data()[pos * 3 + c] != v1.data()[pos * 3 + c]);
            if pos == 5 {
                assert!(changed, "perturbed position must change");
            } else {
                assert!(!changed, "position {pos} must be unaffected");
            }
        }
    }

    #[test]
    fn per_stage_weights_are_distinct() {
        let (ps, p) = toy(true, false);
        assert_ne!(p.out_proj_id(0), p.out_proj_id(1));
        assert_ne!(p.out_proj_id(1), p.out_proj_id(2));
        assert!(ps.id_by_name("vel/s0/out_proj").is_some());
        assert!(ps.id_by_name("vel/s2/out_proj").is_some());
    }
}
