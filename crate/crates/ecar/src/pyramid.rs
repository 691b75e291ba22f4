//! Stage schedule and resolution-pyramid operators.
//!
//! A schedule partitions flow time [0,1] into `S` stages whose spatial
//! resolution doubles per stage, ending at the data resolution. The operators
//! here are the pieces the multistage interpolation is built from:
//!
//! * `downsample` is the non-overlapping block mean; `upsample` nearest-neighbor
//!   2x duplication. The pair satisfies downsample(upsample(x), 2) == x
//!   exactly, which keeps the pyramid invariants testable without tolerance.
//! * `stage_targets`: per-stage ground truth maps.
//! * `noise_chain`: the stage-0 Gaussian draw followed by upsample-renoise
//!   transitions, preserving standard-normal per-pixel marginals.
//! * `interpolant`: the straight-line path between a stage's noise and
//!   target, with constant velocity target - noise.
//!
//! Stages are indexed 0-based throughout; stage `s` covers global time
//! `[s/S, (s+1)/S)`, the final interval closed at 1.

use crate::error::EcarError;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Default blend for upsample-renoise: a^2 + (1-a^2) = 1 keeps unit variance,
/// and a = sqrt(1/2) splits the variance evenly between structure and noise.
pub const DEFAULT_RENOISE_BLEND: f32 = std::f32::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, PartialEq)]
pub struct StageSchedule {
    /// Per-stage (height, width), strictly doubling, last equals data resolution.
    resolutions: Vec<(usize, usize)>,
    /// Upper time boundary of each stage: t_s = (s+1)/S. Stored as f32 to
    /// match the checkpoint encoding exactly.
    boundaries: Vec<f32>,
    /// Sampler step allocation per stage; sums to the configured total.
    steps_per_stage: Vec<usize>,
}

impl StageSchedule {
    /// Build a schedule with `stages` levels ending at `final_res`, splitting
    /// `total_steps` evenly with the remainder assigned to the final stage.
    pub fn make(
        stages: usize,
        final_res: (usize, usize),
        total_steps: usize,
    ) -> Result<StageSchedule, EcarError> {
        if stages == 0 {
            return Err(EcarError::validation("schedule needs at least one stage"));
        }
        let (h, w) = final_res;
        let div = 1usize << (stages - 1);
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(EcarError::validation(format!(
                "resolution {h}x{w} is not divisible by 2^{}",
                stages - 1
            )));
        }
        if total_steps < stages {
            return Err(EcarError::validation(format!(
                "total steps {total_steps} < stage count {stages}"
            )));
        }
        let resolutions: Vec<(usize, usize)> = (0..stages)
            .map(|s| (h >> (stages - 1 - s), w >> (stages - 1 - s)))
            .collect();
        let boundaries: Vec<f32> =
            (0..stages).map(|s| (s + 1) as f32 / stages as f32).collect();
        let base = total_steps / stages;
        let mut steps_per_stage = vec![base; stages];
        *steps_per_stage.last_mut().unwrap() += total_steps - base * stages;
        Ok(StageSchedule { resolutions, boundaries, steps_per_stage })
    }

    /// Rebuild from persisted parts (checkpoint loading).
    pub fn from_parts(
        resolutions: Vec<(usize, usize)>,
        boundaries: Vec<f32>,
        total_steps: usize,
    ) -> Result<StageSchedule, EcarError> {
        let stages = resolutions.len();
        if stages == 0 || boundaries.len() != stages {
            return Err(EcarError::validation("inconsistent schedule parts"));
        }
        for s in 1..stages {
            if resolutions[s].0 != resolutions[s - 1].0 * 2
                || resolutions[s].1 != resolutions[s - 1].1 * 2
            {
                return Err(EcarError::validation("resolutions must double per stage"));
            }
            if boundaries[s] <= boundaries[s - 1] {
                return Err(EcarError::validation("boundaries must strictly increase"));
            }
        }
        let mut sched = StageSchedule { resolutions, boundaries, steps_per_stage: vec![] };
        sched.reallocate_steps(total_steps)?;
        Ok(sched)
    }

    /// Re-split the sampler step budget (remainder to the final stage).
    pub fn reallocate_steps(&mut self, total_steps: usize) -> Result<(), EcarError> {
        let stages = self.stages();
        if total_steps < stages {
            return Err(EcarError::validation(format!(
                "total steps {total_steps} < stage count {stages}"
            )));
        }
        let base = total_steps / stages;
        self.steps_per_stage = vec![base; stages];
        *self.steps_per_stage.last_mut().unwrap() += total_steps - base * stages;
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.resolutions.len()
    }

    pub fn resolution(&self, stage: usize) -> (usize, usize) {
        self.resolutions[stage]
    }

    pub fn resolutions(&self) -> &[(usize, usize)] {
        &self.resolutions
    }

    pub fn final_resolution(&self) -> (usize, usize) {
        *self.resolutions.last().unwrap()
    }

    pub fn boundaries(&self) -> &[f32] {
        &self.boundaries
    }

    pub fn steps_per_stage(&self) -> &[usize] {
        &self.steps_per_stage
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_stage.iter().sum()
    }

    /// Token count of one stage.
    pub fn stage_tokens(&self, stage: usize) -> usize {
        let (h, w) = self.resolutions[stage];
        h * w
    }

    /// Total token count across stages.
    pub fn seq_len(&self) -> usize {
        (0..self.stages()).map(|s| self.stage_tokens(s)).sum()
    }

    /// Row offset of a stage in the concatenated sequence.
    pub fn stage_offset(&self, stage: usize) -> usize {
        (0..stage).map(|s| self.stage_tokens(s)).sum()
    }

    /// Map global time to (stage, local time). Stage intervals are half-open
    /// [t_{s-1}, t_s) with the final interval closed at 1.
    pub fn rescale_time(&self, t: f64) -> (usize, f64) {
        assert!((0.0..=1.0).contains(&t), "global time {t} outside [0,1]");
        let stages = self.stages();
        for s in 0..stages {
            let hi = self.boundaries[s] as f64;
            if t < hi || s == stages - 1 {
                let lo = if s == 0 { 0.0 } else { self.boundaries[s - 1] as f64 };
                return (s, (t - lo) / (hi - lo));
            }
        }
        unreachable!()
    }

    /// Inverse of `rescale_time`: global time of (stage, local time).
    pub fn global_time(&self, stage: usize, tau: f64) -> f64 {
        let hi = self.boundaries[stage] as f64;
        let lo = if stage == 0 { 0.0 } else { self.boundaries[stage - 1] as f64 };
        lo + tau * (hi - lo)
    }
}

/// A real-valued grid (h, w, C) tagged with the stage it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub stage: usize,
    grid: Tensor,
}

impl FeatureMap {
    pub fn new(stage: usize, grid: Tensor) -> Self {
        assert_eq!(grid.shape().len(), 3, "feature map grid must be rank-3 (h, w, c)");
        FeatureMap { stage, grid }
    }

    pub fn zeros(stage: usize, h: usize, w: usize, c: usize) -> Self {
        FeatureMap::new(stage, Tensor::zeros(vec![h, w, c]))
    }

    pub fn h(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn data(&self) -> &[f32] {
        self.grid.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.grid.data_mut()
    }

    /// The same storage viewed as (h*w, C) rows.
    pub fn as_rows(&self) -> Tensor {
        self.grid.reshaped(vec![self.h() * self.w(), self.channels()])
    }

    pub fn from_rows(stage: usize, h: usize, w: usize, rows: &Tensor) -> Self {
        assert_eq!(rows.shape(), &[h * w, rows.shape()[1]], "row matrix shape mismatch");
        FeatureMap::new(stage, rows.reshaped(vec![h, w, rows.shape()[1]]))
    }
}

/// Non-overlapping block mean by `factor` in both spatial dimensions.
pub fn downsample(f: &FeatureMap, factor: usize) -> FeatureMap {
    assert!(factor > 0 && factor.is_power_of_two(), "factor must be a power of two");
    if factor == 1 {
        return f.clone();
    }
    let (h, w, c) = (f.h(), f.w(), f.channels());
    assert!(h % factor == 0 && w % factor == 0, "factor {factor} does not divide {h}x{w}");
    let (oh, ow) = (h / factor, w / factor);
    let src = f.data();
    let mut out = vec![0.0f32; oh * ow * c];
    let norm = 1.0 / (factor * factor) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let y = oy * factor + dy;
                        let x = ox * factor + dx;
                        acc += src[(y * w + x) * c + ch] as f64;
                    }
                }
                out[(oy * ow + ox) * c + ch] = (acc * norm) as f32;
            }
        }
    }
    FeatureMap::new(f.stage, Tensor::new(vec![oh, ow, c], out))
}

/// Nearest-neighbor 2x duplication.
pub fn upsample(f: &FeatureMap) -> FeatureMap {
    let (h, w, c) = (f.h(), f.w(), f.channels());
    let src = f.data();
    let mut out = vec![0.0f32; 4 * h * w * c];
    let ow = 2 * w;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = src[(y * w + x) * c + ch];
                for dy in 0..2 {
                    for dx in 0..2 {
                        out[((2 * y + dy) * ow + 2 * x + dx) * c + ch] = v;
                    }
                }
            }
        }
    }
    FeatureMap::new(f.stage + 1, Tensor::new(vec![2 * h, 2 * w, c], out))
}

/// Ground-truth target per stage: block-mean pyramid of the full-resolution
/// map, the final stage being the map itself.
pub fn stage_targets(full: &FeatureMap, sched: &StageSchedule) -> Vec<FeatureMap> {
    let stages = sched.stages();
    assert_eq!(
        (full.h(), full.w()),
        sched.final_resolution(),
        "full-resolution map does not match schedule"
    );
    (0..stages)
        .map(|s| {
            let mut t = downsample(full, 1 << (stages - 1 - s));
            t.stage = s;
            t
        })
        .collect()
}

/// Blend an upsampled map with fresh Gaussian noise:
/// a * Up(x) + sqrt(1 - a^2) * eps. For a unit-variance zero-mean input the
/// output keeps unit per-pixel variance for any a in [0, 1].
pub fn upsample_renoise(x: &FeatureMap, blend: f32, rng: &mut Rng) -> FeatureMap {
    assert!((0.0..=1.0).contains(&blend), "blend {blend} outside [0,1]");
    let mut up = upsample(x);
    let noise_scale = (1.0 - (blend as f64) * (blend as f64)).sqrt();
    for v in up.data_mut().iter_mut() {
        *v = (blend as f64 * *v as f64 + noise_scale * rng.normal()) as f32;
    }
    up
}

/// The per-stage initial noise maps: an i.i.d. standard normal draw at the
/// coarsest resolution, then upsample-renoise transitions. Every element has
/// standard-normal per-pixel marginals.
pub fn noise_chain(
    rng: &mut Rng,
    sched: &StageSchedule,
    channels: usize,
    blend: f32,
) -> Vec<FeatureMap> {
    let stages = sched.stages();
    let (h0, w0) = sched.resolution(0);
    let mut first = FeatureMap::zeros(0, h0, w0, channels);
    rng.fill_normal(first.data_mut());
    let mut chain = vec![first];
    for s in 1..stages {
        let mut next = upsample_renoise(&chain[s - 1], blend, rng);
        next.stage = s;
        chain.push(next);
    }
    chain
}

/// (1 - tau) * f0 + tau * f1 at one stage.
pub fn interpolant(f0: &FeatureMap, f1: &FeatureMap, tau: f64) -> FeatureMap {
    assert_eq!(f0.grid().shape(), f1.grid().shape(), "interpolant shape mismatch");
    assert!((0.0..=1.0).contains(&tau), "tau {tau} outside [0,1]");
    let data: Vec<f32> = f0
        .data()
        .iter()
        .zip(f1.data())
        .map(|(&a, &b)| ((1.0 - tau) * a as f64 + tau * b as f64) as f32)
        .collect();
    FeatureMap::new(f0.stage, Tensor::new(f0.grid().shape().to_vec(), data))
}

/// d/dtau of the linear interpolant: f1 - f0, independent of tau.
pub fn interpolant_velocity(f0: &FeatureMap, f1: &FeatureMap) -> FeatureMap {
    assert_eq!(f0.grid().shape(), f1.grid().shape(), "velocity shape mismatch");
    let data: Vec<f32> = f0.data().iter().zip(f1.data()).map(|(&a, &b)| b - a).collect();
    FeatureMap::new(f0.stage, Tensor::new(f0.grid().shape().to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_from(h: usize, w: usize, c: usize, data: Vec<f32>) -> FeatureMap {
        FeatureMap::new(0, Tensor::new(vec![h, w, c], data))
    }

    #[test]
    fn schedule_resolutions_double() {
        let s = StageSchedule::make(3, (32, 32), 250).unwrap();
        assert_eq!(s.resolutions(), &[(8, 8), (16, 16), (32, 32)]);
        assert_eq!(s.boundaries().len(), 3);
        assert!((s.boundaries()[0] - 1.0 / 3.0).abs() < 1e-7);
        assert!((s.boundaries()[1] - 2.0 / 3.0).abs() < 1e-7);
        assert_eq!(s.boundaries()[2], 1.0);
        assert_eq!(s.steps_per_stage(), &[83, 83, 84]);
    }

    #[test]
    fn schedule_single_stage() {
        let s = StageSchedule::make(1, (16, 16), 10).unwrap();
        assert_eq!(s.resolutions(), &[(16, 16)]);
        assert_eq!(s.boundaries(), &[1.0]);
        assert_eq!(s.steps_per_stage(), &[10]);
    }

    #[test]
    fn schedule_rejects_non_divisible() {
        assert!(StageSchedule::make(3, (18, 32), 250).is_err());
        assert!(StageSchedule::make(2, (32, 32), 1).is_err());
    }

    #[test]
    fn rescale_time_boundaries() {
        let s = StageSchedule::make(3, (32, 32), 250).unwrap();
        assert_eq!(s.rescale_time(0.0), (0, 0.0));
        let (stage, tau) = s.rescale_time(1.0);
        assert_eq!(stage, 2);
        assert!((tau - 1.0).abs() < 1e-12);
        let (stage, tau) = s.rescale_time(0.5);
        assert_eq!(stage, 1);
        assert!((tau - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rescale_time_inverts_global_time() {
        let s = StageSchedule::make(3, (32, 32), 250).unwrap();
        for i in 0..100 {
            let t = i as f64 / 99.0;
            let (stage, tau) = s.rescale_time(t);
            let back = s.global_time(stage, tau);
            assert!((back - t).abs() < 1e-12, "t={t} back={back}");
        }
    }

    #[test]
    fn downsample_block_mean() {
        let f = map_from(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let d = downsample(&f, 2);
        assert_eq!(d.data(), &[2.5]);
        // factor 1 is the identity
        assert_eq!(downsample(&f, 1).data(), f.data());
    }

    #[test]
    fn downsample_constant_stays_constant() {
        let f = map_from(4, 4, 2, vec![0.7; 32]);
        let d = downsample(&f, 2);
        assert!(d.data().iter().all(|&v| (v - 0.7).abs() < 1e-7));
    }

    #[test]
    fn upsample_duplicates() {
        let f = map_from(1, 1, 1, vec![0.3]);
        let u = upsample(&f);
        assert_eq!(u.data(), &[0.3; 4]);
        assert_eq!((u.h(), u.w()), (2, 2));
    }

    #[test]
    fn down_of_up_is_identity_exactly() {
        let mut rng = Rng::new(11);
        let mut f = FeatureMap::zeros(0, 6, 4, 3);
        rng.fill_normal(f.data_mut());
        let back = downsample(&upsample(&f), 2);
        assert_eq!(back.data(), f.data());
    }

    #[test]
    fn stage_targets_sizes_and_constant() {
        let sched = StageSchedule::make(3, (32, 32), 250).unwrap();
        let full = FeatureMap::new(2, Tensor::full(vec![32, 32, 3], 0.25));
        let targets = stage_targets(&full, &sched);
        assert_eq!(targets.len(), 3);
        assert_eq!((targets[0].h(), targets[0].w()), (8, 8));
        assert_eq!((targets[1].h(), targets[1].w()), (16, 16));
        assert_eq!((targets[2].h(), targets[2].w()), (32, 32));
        for t in &targets {
            assert!(t.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        }
        // single stage: the map itself
        let s1 = StageSchedule::make(1, (32, 32), 10).unwrap();
        let t1 = stage_targets(&full, &s1);
        assert_eq!(t1.len(), 1);
        assert_eq!(t1[0].data(), full.data());
    }

    #[test]
    fn interpolant_endpoints_and_affine() {
        let mut rng = Rng::new(3);
        let mut f0 = FeatureMap::zeros(0, 4, 4, 2);
        let mut f1 = FeatureMap::zeros(0, 4, 4, 2);
        rng.fill_normal(f0.data_mut());
        rng.fill_normal(f1.data_mut());
        assert_eq!(interpolant(&f0, &f1, 0.0).data(), f0.data());
        assert_eq!(interpolant(&f0, &f1, 1.0).data(), f1.data());
        let mid = interpolant(&f0, &f1, 0.5);
        for ((&a, &b), &m) in f0.data().iter().zip(f1.data()).zip(mid.data()) {
            assert!((m - 0.5 * (a + b)).abs() < 1e-6);
        }
        // finite difference of the path equals f1 - f0 at several tau
        let v = interpolant_velocity(&f0, &f1);
        for &tau in &[0.2, 0.5, 0.8] {
            let h = 1e-3;
            let up = interpolant(&f0, &f1, tau + h);
            let down = interpolant(&f0, &f1, tau - h);
            for ((&u, &d), &vel) in up.data().iter().zip(down.data()).zip(v.data()) {
                let fd = (u as f64 - d as f64) / (2.0 * h);
                assert!((fd - vel as f64).abs() < 1e-3, "fd={fd} vel={vel}");
            }
        }
    }

    #[test]
    fn renoise_extremes() {
        let mut rng = Rng::new(5);
        let mut x = FeatureMap::zeros(0, 4, 4, 1);
        rng.fill_normal(x.data_mut());
        // a = 1: exactly the upsample
        let pure = upsample_renoise(&x, 1.0, &mut Rng::new(99));
        assert_eq!(pure.data(), upsample(&x).data());
        // a = 0: fresh noise independent of x
        let a = upsample_renoise(&x, 0.0, &mut Rng::new(99));
        let zero = FeatureMap::zeros(0, 4, 4, 1);
        let b = upsample_renoise(&zero, 0.0, &mut Rng::new(99));
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn renoise_preserves_unit_variance() {
        // Monte-Carlo oracle: ~1e5 pixels pooled, a = 1/sqrt(2).
        let mut rng = Rng::new(21);
        let mut n = 0usize;
        let (mut sum, mut sum2) = (0.0f64, 0.0f64);
        for _ in 0..400 {
            let mut x = FeatureMap::zeros(0, 8, 8, 1);
            rng.fill_normal(x.data_mut());
            let y = upsample_renoise(&x, DEFAULT_RENOISE_BLEND, &mut rng);
            for &v in y.data() {
                sum += v as f64;
                sum2 += (v as f64) * (v as f64);
                n += 1;
            }
        }
        assert!(n >= 100_000);
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn upsample_preserves_marginal_variance() {
        // Per-pixel variance of Up(x) for i.i.d. input, pooled Monte-Carlo.
        let mut rng = Rng::new(77);
        let mut n = 0usize;
        let (mut sum, mut sum2) = (0.0f64, 0.0f64);
        for _ in 0..400 {
            let mut x = FeatureMap::zeros(0, 8, 8, 1);
            rng.fill_normal(x.data_mut());
            let y = upsample(&x);
            for &v in y.data() {
                sum += v as f64;
                sum2 += (v as f64) * (v as f64);
                n += 1;
            }
        }
        assert!(n >= 100_000);
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn noise_chain_is_deterministic_and_normal() {
        let sched = StageSchedule::make(3, (32, 32), 250).unwrap();
        let chain1 = noise_chain(&mut Rng::new(8), &sched, 3, DEFAULT_RENOISE_BLEND);
        let chain2 = noise_chain(&mut Rng::new(8), &sched, 3, DEFAULT_RENOISE_BLEND);
        assert_eq!(chain1.len(), 3);
        for (a, b) in chain1.iter().zip(&chain2) {
            assert_eq!(a.data(), b.data());
        }
        // marginals per stage, pooled over repeated draws
        for stage in 0..3 {
            let mut rng = Rng::new(1000 + stage as u64);
            let (mut sum, mut sum2, mut n) = (0.0f64, 0.0f64, 0usize);
            while n < 100_000 {
                let chain = noise_chain(&mut rng, &sched, 3, DEFAULT_RENOISE_BLEND);
                for &v in chain[stage].data() {
                    sum += v as f64;
                    sum2 += (v as f64) * (v as f64);
                    n += 1;
                }
            }
            let mean = sum / n as f64;
            let var = sum2 / n as f64 - mean * mean;
            assert!(mean.abs() < 0.02, "stage {stage} mean {mean}");
            assert!((var - 1.0).abs() < 0.02, "stage {stage} var {var}");
        }
    }

    #[test]
    fn single_stage_chain_is_one_normal_map() {
        let sched = StageSchedule::make(1, (8, 8), 8).unwrap();
        let chain = noise_chain(&mut Rng::new(2), &sched, 3, DEFAULT_RENOISE_BLEND);
        assert_eq!(chain.len(), 1);
        assert_eq!((chain[0].h(), chain[0].w()), (8, 8));
    }
}
