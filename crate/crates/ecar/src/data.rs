//! Deterministic synthetic class-conditional datasets and a rule-based
//! oracle classifier.
//!
//! Four structurally distinct classes at the data resolution, values in
//! [0, 1]:
//!
//! | id | pattern            | discriminating statistic            |
//! |----|--------------------|--------------------------------------|
//! | 0  | horizontal stripes | row-direction gradient dominates     |
//! | 1  | vertical stripes   | column-direction gradient dominates  |
//! | 2  | centered disk      | center brighter than the border ring |
//! | 3  | checkerboard       | both gradient directions high        |
//!
//! The oracle scores all four statistics and takes the argmax, breaking ties
//! toward the lowest class id (a uniform image therefore classifies as 0).
//! On clean generated data it is exact by construction, which makes label
//! accuracy of model samples a meaningful quality metric without importing a
//! learned feature extractor.
//!
//! Dataset wire format (little-endian):
//!
//! ```text
//! magic "ECDS" | u32 version | u32 num_classes | u32 h | u32 w | u32 c
//! u32 samples_per_class | f32 phase_jitter | f32 pos_jitter | f32 hue_jitter
//! u64 seed | records: { u16 label | h*w*c x f32 pixels }
//! ```

use std::io::Read;
use std::path::Path;

use crate::error::{EcarError, Result};
use crate::pyramid::FeatureMap;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"ECDS";
pub const DATASET_VERSION: u32 = 1;

/// Stripe period and checkerboard cell size in pixels.
const PERIOD: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub samples_per_class: usize,
    /// Fraction of the pattern period used for phase offsets (0 disables).
    pub phase_jitter: f32,
    /// Disk center displacement range in pixels.
    pub pos_jitter: f32,
    /// Per-channel color jitter range.
    pub hue_jitter: f32,
    pub seed: u64,
}

impl SynthSpec {
    pub fn from_config(cfg: &crate::config::Config) -> SynthSpec {
        SynthSpec {
            num_classes: cfg.num_classes,
            height: cfg.final_res,
            width: cfg.final_res,
            channels: cfg.channels,
            samples_per_class: cfg.samples_per_class,
            phase_jitter: cfg.phase_jitter,
            pos_jitter: cfg.pos_jitter,
            hue_jitter: cfg.hue_jitter,
            seed: cfg.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 4 {
            return Err(EcarError::validation("num_classes must lie in 1..=4"));
        }
        if self.channels != 3 {
            return Err(EcarError::validation("datasets are RGB (channels = 3)"));
        }
        if self.height < 2 * PERIOD || self.width < 2 * PERIOD {
            return Err(EcarError::validation("resolution too small for the patterns"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SynthSpec,
    images: Vec<Tensor>,
    labels: Vec<u16>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    /// Image `i` wrapped as a full-resolution feature map.
    pub fn feature_map(&self, i: usize, stage: usize) -> FeatureMap {
        FeatureMap::new(stage, self.images[i].clone())
    }
}

fn fg_base() -> [f32; 3] {
    [0.85, 0.80, 0.70]
}

fn bg_base() -> [f32; 3] {
    [0.12, 0.15, 0.20]
}

fn jitter_color(base: [f32; 3], jitter: f32, rng: &mut Rng) -> [f32; 3] {
    let mut out = [0.0f32; 3];
    for (o, b) in out.iter_mut().zip(base) {
        *o = (b + rng.uniform_in(-jitter as f64, jitter as f64) as f32).clamp(0.0, 1.0);
    }
    out
}

/// Render one sample of `class`. Deterministic given the generator state.
pub fn render_class(spec: &SynthSpec, class: usize, rng: &mut Rng) -> Tensor {
    assert!(class < spec.num_classes, "class {class} out of range");
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let fg = jitter_color(fg_base(), spec.hue_jitter, rng);
    let bg = jitter_color(bg_base(), spec.hue_jitter, rng);
    let phase_range = (spec.phase_jitter as f64 * PERIOD as f64).max(0.0);
    let mut data = vec![0.0f32; h * w * c];
    match class {
        0 | 1 => {
            let offset = rng.uniform_in(0.0, phase_range.max(1e-9)).floor() as usize % PERIOD;
            for y in 0..h {
                for x in 0..w {
                    let axis = if class == 0 { y } else { x };
                    let bright = (axis + offset) % PERIOD < PERIOD / 2;
                    let col = if bright { fg } else { bg };
                    for ch in 0..c {
                        data[(y * w + x) * c + ch] = col[ch];
                    }
                }
            }
        }
        2 => {
            let jx = rng.uniform_in(-spec.pos_jitter as f64, spec.pos_jitter as f64);
            let jy = rng.uniform_in(-spec.pos_jitter as f64, spec.pos_jitter as f64);
            let cx = w as f64 / 2.0 + jx;
            let cy = h as f64 / 2.0 + jy;
            let radius = h.min(w) as f64 * 0.28;
            for y in 0..h {
                for x in 0..w {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let inside = dx * dx + dy * dy <= radius * radius;
                    let col = if inside { fg } else { bg };
                    for ch in 0..c {
                        data[(y * w + x) * c + ch] = col[ch];
                    }
                }
            }
        }
        3 => {
            let ox = rng.uniform_in(0.0, phase_range.max(1e-9)).floor() as usize % PERIOD;
            let oy = rng.uniform_in(0.0, phase_range.max(1e-9)).floor() as usize % PERIOD;
            for y in 0..h {
                for x in 0..w {
                    let bright = (((x + ox) / PERIOD) + ((y + oy) / PERIOD)) % 2 == 0;
                    let col = if bright { fg } else { bg };
                    for ch in 0..c {
                        data[(y * w + x) * c + ch] = col[ch];
                    }
                }
            }
        }
        _ => unreachable!("validated class range"),
    }
    Tensor::new(vec![h, w, c], data)
}

/// Deterministic dataset: class-major order, one generator stream.
pub fn generate(spec: &SynthSpec) -> Dataset {
    spec.validate().expect("invalid dataset spec");
    let mut rng = Rng::new(spec.seed);
    let mut images = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for class in 0..spec.num_classes {
        for _ in 0..spec.samples_per_class {
            images.push(render_class(spec, class, &mut rng));
            labels.push(class as u16);
        }
    }
    Dataset { spec: spec.clone(), images, labels }
}

// ── wire format ──────────────────────────────────────────────────────

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.spec.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&(ds.spec.height as u32).to_le_bytes());
    out.extend_from_slice(&(ds.spec.width as u32).to_le_bytes());
    out.extend_from_slice(&(ds.spec.channels as u32).to_le_bytes());
    out.extend_from_slice(&(ds.spec.samples_per_class as u32).to_le_bytes());
    out.extend_from_slice(&ds.spec.phase_jitter.to_le_bytes());
    out.extend_from_slice(&ds.spec.pos_jitter.to_le_bytes());
    out.extend_from_slice(&ds.spec.hue_jitter.to_le_bytes());
    out.extend_from_slice(&ds.spec.seed.to_le_bytes());
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        out.extend_from_slice(&label.to_le_bytes());
        for &v in img.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| EcarError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut f = std::fs::File::open(path).map_err(|e| EcarError::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| EcarError::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if bytes.len() < *pos + n {
            return Err(EcarError::validation("truncated dataset file"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != DATASET_MAGIC {
        return Err(EcarError::validation("bad dataset magic"));
    }
    let u32_at = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    let version = u32_at(&mut pos)?;
    if version != DATASET_VERSION {
        return Err(EcarError::validation(format!("unsupported dataset version {version}")));
    }
    let num_classes = u32_at(&mut pos)? as usize;
    let height = u32_at(&mut pos)? as usize;
    let width = u32_at(&mut pos)? as usize;
    let channels = u32_at(&mut pos)? as usize;
    let samples_per_class = u32_at(&mut pos)? as usize;
    let phase_jitter = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let pos_jitter = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let hue_jitter = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let seed = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let spec = SynthSpec {
        num_classes,
        height,
        width,
        channels,
        samples_per_class,
        phase_jitter,
        pos_jitter,
        hue_jitter,
        seed,
    };
    spec.validate()?;
    let count = num_classes * samples_per_class;
    let pixels = height * width * channels;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        let raw = take(&mut pos, pixels * 4)?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        images.push(Tensor::new(vec![height, width, channels], data));
        labels.push(label);
    }
    if pos != bytes.len() {
        return Err(EcarError::validation("trailing bytes in dataset file"));
    }
    Ok(Dataset { spec, images, labels })
}

// ── oracle classifier ────────────────────────────────────────────────

/// Summary statistics of one image (luminance-based plus channel means).
/// Used both by the classifier and as the feature vector for the set-level
/// evaluation metrics.
pub fn image_stats(img: &Tensor) -> Vec<f64> {
    let shape = img.shape();
    assert_eq!(shape.len(), 3, "image must be (h, w, c)");
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let d = img.data();
    let lum = |y: usize, x: usize| -> f64 {
        let mut s = 0.0;
        for ch in 0..c {
            s += d[(y * w + x) * c + ch] as f64;
        }
        s / c as f64
    };

    let mut channel_means = vec![0.0f64; 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c.min(3) {
                channel_means[ch] += d[(y * w + x) * c + ch] as f64;
            }
        }
    }
    for m in channel_means.iter_mut() {
        *m /= (h * w) as f64;
    }

    let (mut lsum, mut lsum2) = (0.0f64, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            let v = lum(y, x);
            lsum += v;
            lsum2 += v * v;
        }
    }
    let lmean = lsum / (h * w) as f64;
    let lstd = (lsum2 / (h * w) as f64 - lmean * lmean).max(0.0).sqrt();

    // mean absolute gradient along each axis
    let mut gx = 0.0f64;
    for y in 0..h {
        for x in 0..w - 1 {
            gx += (lum(y, x + 1) - lum(y, x)).abs();
        }
    }
    gx /= (h * (w - 1)) as f64;
    let mut gy = 0.0f64;
    for y in 0..h - 1 {
        for x in 0..w {
            gy += (lum(y + 1, x) - lum(y, x)).abs();
        }
    }
    gy /= ((h - 1) * w) as f64;

    // center box vs border ring
    let (qh, qw) = (h / 4, w / 4);
    let (mut center, mut ncenter) = (0.0f64, 0usize);
    for y in (h / 2 - qh / 2)..(h / 2 + qh.div_ceil(2)) {
        for x in (w / 2 - qw / 2)..(w / 2 + qw.div_ceil(2)) {
            center += lum(y, x);
            ncenter += 1;
        }
    }
    let (mut ring, mut nring) = (0.0f64, 0usize);
    for y in 0..h {
        for x in 0..w {
            if y < 2 || y >= h - 2 || x < 2 || x >= w - 2 {
                ring += lum(y, x);
                nring += 1;
            }
        }
    }
    let center_contrast = center / ncenter as f64 - ring / nring as f64;

    // row/column mean variances
    let mut row_means = vec![0.0f64; h];
    let mut col_means = vec![0.0f64; w];
    for y in 0..h {
        for x in 0..w {
            let v = lum(y, x);
            row_means[y] += v / w as f64;
            col_means[x] += v / h as f64;
        }
    }
    let var = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / xs.len() as f64
    };

    vec![
        channel_means[0],
        channel_means[1],
        channel_means[2],
        lstd,
        gx,
        gy,
        var(&row_means),
        var(&col_means),
        center_contrast,
    ]
}

/// Deterministic rule-based classification by pattern statistics.
/// Ties break toward the lowest class id.
pub fn oracle_classify(img: &Tensor) -> usize {
    let stats = image_stats(img);
    let (gx, gy, center_contrast) = (stats[4], stats[5], stats[8]);
    let scores = [
        gy - gx,              // horizontal stripes: vertical-direction gradient dominates
        gx - gy,              // vertical stripes
        2.0 * center_contrast, // centered disk
        2.0 * gx.min(gy) - (gx - gy).abs(), // checkerboard: both directions active
    ];
    let mut best = 0usize;
    for i in 1..4 {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    best
}

// ── set-level evaluation ─────────────────────────────────────────────

/// Biased (V-statistic) RBF maximum mean discrepancy between two sets of
/// feature vectors, with the median-heuristic bandwidth over the pooled
/// pairwise distances. Identical sets give exactly zero.
pub fn mmd_rbf(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    assert!(!xs.is_empty() && !ys.is_empty(), "mmd needs non-empty sets");
    let sqdist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
    };
    let mut pooled: Vec<&Vec<f64>> = xs.iter().collect();
    pooled.extend(ys.iter());
    let mut dists = Vec::new();
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            dists.push(sqdist(pooled[i], pooled[j]));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if dists.is_empty() { 1.0 } else { dists[dists.len() / 2] };
    let gamma = if median > 1e-12 { 1.0 / median } else { 1.0 };
    let kernel_mean = |aset: &[Vec<f64>], bset: &[Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for a in aset {
            for b in bset {
                s += (-gamma * sqdist(a, b)).exp();
            }
        }
        s / (aset.len() * bset.len()) as f64
    };
    kernel_mean(xs, xs) + kernel_mean(ys, ys) - 2.0 * kernel_mean(xs, ys)
}

/// Euclidean distance between the means of two stat sets, and the Frobenius
/// distance between their covariance matrices.
pub fn mean_cov_distance(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> (f64, f64) {
    let dim = xs[0].len();
    let mean = |set: &[Vec<f64>]| -> Vec<f64> {
        let mut m = vec![0.0; dim];
        for v in set {
            for i in 0..dim {
                m[i] += v[i];
            }
        }
        m.iter().map(|&x| x / set.len() as f64).collect()
    };
    let cov = |set: &[Vec<f64>], m: &[f64]| -> Vec<f64> {
        let mut c = vec![0.0; dim * dim];
        for v in set {
            for i in 0..dim {
                for j in 0..dim {
                    c[i * dim + j] += (v[i] - m[i]) * (v[j] - m[j]);
                }
            }
        }
        c.iter().map(|&x| x / set.len() as f64).collect()
    };
    let (mx, my) = (mean(xs), mean(ys));
    let mean_dist = mx.iter().zip(&my).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let (cx, cy) = (cov(xs, &mx), cov(ys, &my));
    let cov_dist = cx.iter().zip(&cy).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    (mean_dist, cov_dist)
}

// ── model evaluation ─────────────────────────────────────────────────

/// Desk-scale sample-quality report: oracle label accuracy of conditional
/// samples, per-class statistic distances to the dataset, and the pooled
/// RBF maximum mean discrepancy between sample and data statistics.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub cfg_scale: f32,
    pub samples_per_class: usize,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub per_class_mean_dist: Vec<f64>,
    pub per_class_cov_dist: Vec<f64>,
    pub mmd: f64,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "cfg_scale: {}", self.cfg_scale)?;
        writeln!(f, "samples_per_class: {}", self.samples_per_class)?;
        writeln!(f, "accuracy: {:.4}", self.accuracy)?;
        for (c, acc) in self.per_class_accuracy.iter().enumerate() {
            writeln!(
                f,
                "class {c}: accuracy {:.4} mean_dist {:.4} cov_dist {:.4}",
                acc, self.per_class_mean_dist[c], self.per_class_cov_dist[c]
            )?;
        }
        writeln!(f, "mmd: {:.6}", self.mmd)
    }
}

/// Generate `per_class` conditional samples per class and score them against
/// the dataset. Deterministic given the base seed.
pub fn eval_samples(
    model: &crate::trainer::Model,
    base: &crate::sampler::SampleConfig,
    per_class: usize,
    dataset: &Dataset,
) -> Result<EvalReport> {
    let classes = model.cfg.num_classes;
    if dataset.spec.num_classes != classes {
        return Err(EcarError::validation(format!(
            "dataset has {} classes, model expects {classes}",
            dataset.spec.num_classes
        )));
    }
    // Samples are independent given their derived seeds; draw them in
    // parallel and reduce in index order, which keeps the report identical
    // to a serial run.
    use rayon::prelude::*;
    let jobs: Vec<(usize, u64)> = (0..classes * per_class)
        .map(|j| {
            let seed =
                base.seed.wrapping_add((j as u64).wrapping_mul(0x9e3779b97f4a7c15));
            (j / per_class, seed)
        })
        .collect();
    let results: Vec<crate::error::Result<(usize, bool, Vec<f64>)>> = jobs
        .par_iter()
        .map(|&(class, seed)| {
            let mut cfg = base.clone();
            cfg.class_id = class;
            cfg.seed = seed;
            let (map, _) = crate::sampler::sample(model, &cfg)?;
            let img = crate::sampler::clamp_unit(&map);
            let hit = oracle_classify(&img) == class;
            Ok((class, hit, image_stats(&img)))
        })
        .collect();

    let mut sample_stats: Vec<Vec<f64>> = Vec::new();
    let mut per_class_stats: Vec<Vec<Vec<f64>>> = vec![Vec::new(); classes];
    let mut per_class_hits = vec![0usize; classes];
    for r in results {
        let (class, hit, stats) = r?;
        if hit {
            per_class_hits[class] += 1;
        }
        per_class_stats[class].push(stats.clone());
        sample_stats.push(stats);
    }

    let mut data_stats: Vec<Vec<f64>> = Vec::new();
    let mut data_class_stats: Vec<Vec<Vec<f64>>> = vec![Vec::new(); classes];
    for i in 0..dataset.len() {
        let stats = image_stats(dataset.image(i));
        data_class_stats[dataset.labels()[i] as usize].push(stats.clone());
        data_stats.push(stats);
    }

    let mut per_class_mean_dist = Vec::with_capacity(classes);
    let mut per_class_cov_dist = Vec::with_capacity(classes);
    for c in 0..classes {
        let (md, cd) = mean_cov_distance(&per_class_stats[c], &data_class_stats[c]);
        per_class_mean_dist.push(md);
        per_class_cov_dist.push(cd);
    }
    let per_class_accuracy: Vec<f64> =
        per_class_hits.iter().map(|&h| h as f64 / per_class as f64).collect();
    let accuracy = per_class_hits.iter().sum::<usize>() as f64 / (classes * per_class) as f64;
    let mmd = mmd_rbf(&sample_stats, &data_stats);

    Ok(EvalReport {
        cfg_scale: base.cfg_scale,
        samples_per_class: per_class,
        accuracy,
        per_class_accuracy,
        per_class_mean_dist,
        per_class_cov_dist,
        mmd,
    })
}

/// Evaluate the dataset against itself: oracle accuracy on clean data and
/// the self-MMD (identically zero for the biased estimator).
pub fn self_check(dataset: &Dataset) -> (f64, f64) {
    let mut hits = 0usize;
    let mut stats = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        if oracle_classify(dataset.image(i)) == dataset.labels()[i] as usize {
            hits += 1;
        }
        stats.push(image_stats(dataset.image(i)));
    }
    (hits as f64 / dataset.len() as f64, mmd_rbf(&stats, &stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            num_classes: 4,
            height: 32,
            width: 32,
            channels: 3,
            samples_per_class: 8,
            phase_jitter: 0.0,
            pos_jitter: 2.0,
            hue_jitter: 0.08,
            seed: 42,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&spec());
        let b = generate(&spec());
        assert_eq!(a.len(), b.len());
        for i in 0..a.len() {
            assert_eq!(a.image(i).data(), b.image(i).data());
        }
    }

    #[test]
    fn zero_jitter_makes_class_samples_identical() {
        let mut s = spec();
        s.pos_jitter = 0.0;
        s.hue_jitter = 0.0;
        s.phase_jitter = 0.0;
        let ds = generate(&s);
        for class in 0..4 {
            let base = ds.image(class * s.samples_per_class);
            for i in 1..s.samples_per_class {
                assert_eq!(
                    ds.image(class * s.samples_per_class + i).data(),
                    base.data(),
                    "class {class} sample {i}"
                );
            }
        }
    }

    #[test]
    fn values_stay_in_unit_interval() {
        let ds = generate(&spec());
        for i in 0..ds.len() {
            assert!(ds.image(i).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn oracle_is_exact_on_clean_samples() {
        let mut s = spec();
        s.samples_per_class = 250; // 1000 jittered samples
        s.phase_jitter = 1.0;
        s.pos_jitter = 2.0;
        s.hue_jitter = 0.08;
        let ds = generate(&s);
        let mut correct = 0usize;
        for i in 0..ds.len() {
            if oracle_classify(ds.image(i)) == ds.labels()[i] as usize {
                correct += 1;
            }
        }
        assert_eq!(correct, ds.len(), "oracle must be exact on clean data");
    }

    #[test]
    fn uniform_gray_ties_to_class_zero() {
        let img = Tensor::full(vec![32, 32, 3], 0.5);
        assert_eq!(oracle_classify(&img), 0);
    }

    #[test]
    fn oracle_deterministic() {
        let ds = generate(&spec());
        let a = oracle_classify(ds.image(3));
        let b = oracle_classify(ds.image(3));
        assert_eq!(a, b);
    }

    #[test]
    fn file_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.ecds");
        let ds = generate(&spec());
        write_dataset(&ds, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.spec, ds.spec);
        assert_eq!(back.len(), ds.len());
        for i in 0..ds.len() {
            assert_eq!(back.image(i).data(), ds.image(i).data());
            assert_eq!(back.labels()[i], ds.labels()[i]);
        }
        write_dataset(&back, &path).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn mmd_of_identical_sets_is_zero() {
        let ds = generate(&spec());
        let stats: Vec<Vec<f64>> = (0..ds.len()).map(|i| image_stats(ds.image(i))).collect();
        let m = mmd_rbf(&stats, &stats);
        assert!(m.abs() < 1e-9, "mmd {m}");
        let (md, cd) = mean_cov_distance(&stats, &stats);
        assert_eq!(md, 0.0);
        assert_eq!(cd, 0.0);
    }

    #[test]
    fn mmd_separates_different_classes() {
        let ds = generate(&spec());
        let per = ds.spec.samples_per_class;
        let s0: Vec<Vec<f64>> = (0..per).map(|i| image_stats(ds.image(i))).collect();
        let s2: Vec<Vec<f64>> = (0..per).map(|i| image_stats(ds.image(2 * per + i))).collect();
        assert!(mmd_rbf(&s0, &s2) > 0.1);
    }
}
