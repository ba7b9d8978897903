//! Deterministic procedural generator of small multi-class segmentation
//! scenes.
//!
//! Each sample is a pure function of `(seed, split, index)`. Scenes contain
//! overlapping colored shapes over a textured background; images are blurred
//! around label boundaries (labels stay crisp) so boundary pixels are
//! genuinely ambiguous, and a fraction of labels is flipped to a wrong class
//! to stand in for noisy annotations. Clean labels are retained for analysis.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::LabelGrid;
use crate::imgio;
use crate::tensor::{DiffTensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
        }
    }
}

/// Generator parameters. Class 0 is the background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Probability that a pixel's label is flipped to a uniform wrong class.
    pub noise_rate: f64,
    /// Radius (pixels) of the image-space blur applied around label
    /// boundaries.
    pub boundary_blur: usize,
    /// Random horizontal flip of training samples at batch assembly.
    #[serde(default)]
    pub hflip: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 5,
            shapes_min: 2,
            shapes_max: 5,
            noise_rate: 0.05,
            boundary_blur: 1,
            hflip: false,
            seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.image_size < 4 {
            return Err(DataError::InvalidConfig(format!(
                "image_size must be >= 4, got {}",
                self.image_size
            )));
        }
        if self.num_classes < 2 {
            return Err(DataError::InvalidConfig(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.shapes_min == 0 || self.shapes_min > self.shapes_max {
            return Err(DataError::InvalidConfig(format!(
                "need 1 <= shapes_min <= shapes_max, got {}..{}",
                self.shapes_min, self.shapes_max
            )));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(DataError::InvalidConfig(format!(
                "noise_rate must lie in [0, 0.5), got {}",
                self.noise_rate
            )));
        }
        Ok(())
    }
}

/// One generated sample: planar `[3, H, W]` image in `[0, 1]`, noisy labels,
/// and the pre-noise ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: DiffTensor,
    pub labels: LabelGrid,
    pub clean_labels: LabelGrid,
}

/// A stack of scenes ready for a forward pass. `indices`/`flipped` record
/// each sample's provenance, which keyed caches rely on.
#[derive(Debug, Clone)]
pub struct SegBatch {
    pub images: DiffTensor,
    pub labels: LabelGrid,
    pub clean_labels: LabelGrid,
    pub indices: Vec<usize>,
    pub flipped: Vec<bool>,
}

impl SegBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p));
    }
    h
}

/// Fixed per-class palette: dark background, hue-spaced foreground colors.
fn class_color(class: u32, num_classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.12, 0.12, 0.16];
    }
    let fg = (num_classes - 1).max(1) as f64;
    let hue = (class as f64 - 1.0) / fg;
    hsv_to_rgb(hue, 0.65, 0.8)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

enum ShapeKind {
    Ellipse,
    Rect,
    Triangle([(f64, f64); 3]),
}

struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    hx: f64,
    hy: f64,
    class: u32,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match &self.kind {
            ShapeKind::Ellipse => {
                let dx = (x - self.cx) / self.hx;
                let dy = (y - self.cy) / self.hy;
                dx * dx + dy * dy <= 1.0
            }
            ShapeKind::Rect => (x - self.cx).abs() <= self.hx && (y - self.cy).abs() <= self.hy,
            ShapeKind::Triangle(v) => {
                let sign = |a: (f64, f64), b: (f64, f64)| {
                    (x - b.0) * (a.1 - b.1) - (a.0 - b.0) * (y - b.1)
                };
                let d0 = sign(v[0], v[1]);
                let d1 = sign(v[1], v[2]);
                let d2 = sign(v[2], v[0]);
                let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

/// Generate one sample deterministically from `(config.seed, split, index)`.
pub fn generate(config: &SceneConfig, split: Split, index: usize) -> Result<Scene, DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[config.seed, split.id(), index as u64]));
    let size = config.image_size;
    let plane = size * size;

    let mut labels = vec![0u32; plane];
    let mut image = vec![0.0f64; 3 * plane];
    let bg = class_color(0, config.num_classes);
    for p in 0..plane {
        for c in 0..3 {
            image[c * plane + p] = bg[c];
        }
    }

    let n_shapes = rng.gen_range(config.shapes_min..=config.shapes_max);
    for _ in 0..n_shapes {
        let class = rng.gen_range(1..config.num_classes as u32);
        let cx = rng.gen_range(0.0..size as f64);
        let cy = rng.gen_range(0.0..size as f64);
        let lo = (size as f64 / 10.0).max(2.0);
        let hi = size as f64 / 4.0;
        let hx = rng.gen_range(lo..hi);
        let hy = rng.gen_range(lo..hi);
        let kind = match rng.gen_range(0..3u8) {
            0 => ShapeKind::Ellipse,
            1 => ShapeKind::Rect,
            _ => {
                // Re-draw near-degenerate triangles a few times.
                let mut verts = [(0.0, 0.0); 3];
                for _ in 0..8 {
                    for v in &mut verts {
                        *v = (cx + rng.gen_range(-hx..hx), cy + rng.gen_range(-hy..hy));
                    }
                    let area = ((verts[1].0 - verts[0].0) * (verts[2].1 - verts[0].1)
                        - (verts[2].0 - verts[0].0) * (verts[1].1 - verts[0].1))
                        .abs()
                        / 2.0;
                    if area >= hx * hy / 2.0 {
                        break;
                    }
                }
                ShapeKind::Triangle(verts)
            }
        };
        let shape = Shape { kind, cx, cy, hx, hy, class };
        let base = class_color(class, config.num_classes);
        let jitter = [
            rng.gen_range(-0.08..0.08),
            rng.gen_range(-0.08..0.08),
            rng.gen_range(-0.08..0.08),
        ];
        paint_shape(&mut labels, &mut image, size, &shape, &base, &jitter);
    }

    blur_label_boundaries(&labels, &mut image, size, config.boundary_blur);

    // Additive texture noise, clamped; applied after the blur so every
    // region carries the same texture statistics.
    for v in image.iter_mut() {
        *v = (*v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
    }

    let clean = LabelGrid::new(1, size, size, labels);
    let noisy = inject_label_noise(
        &clean,
        config.num_classes as u32,
        config.noise_rate,
        mix(&[config.seed, split.id(), index as u64, 0x6e6f_6973]),
    );
    Ok(Scene {
        image: DiffTensor::new(vec![3, size, size], image)?,
        labels: noisy,
        clean_labels: clean,
    })
}

fn paint_shape(
    labels: &mut [u32],
    image: &mut [f64],
    size: usize,
    shape: &Shape,
    base: &[f64; 3],
    jitter: &[f64; 3],
) {
    let plane = size * size;
    let x0 = ((shape.cx - shape.hx).floor().max(0.0)) as usize;
    let x1 = ((shape.cx + shape.hx).ceil().min(size as f64 - 1.0)) as usize;
    let y0 = ((shape.cy - shape.hy).floor().max(0.0)) as usize;
    let y1 = ((shape.cy + shape.hy).ceil().min(size as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                let p = y * size + x;
                labels[p] = shape.class;
                for c in 0..3 {
                    image[c * plane + p] = (base[c] + jitter[c]).clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Box-blur the image within `radius` (chebyshev) of any label boundary.
/// Labels are untouched; only their appearance becomes ambiguous.
fn blur_label_boundaries(labels: &[u32], image: &mut [f64], size: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let plane = size * size;
    let mut boundary = vec![false; plane];
    for y in 0..size {
        for x in 0..size {
            let l = labels[y * size + x];
            let differs = (x + 1 < size && labels[y * size + x + 1] != l)
                || (x > 0 && labels[y * size + x - 1] != l)
                || (y + 1 < size && labels[(y + 1) * size + x] != l)
                || (y > 0 && labels[(y - 1) * size + x] != l);
            boundary[y * size + x] = differs;
        }
    }
    let mut mask = vec![false; plane];
    let r = radius as isize;
    for y in 0..size as isize {
        for x in 0..size as isize {
            'search: for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0
                        && nx >= 0
                        && ny < size as isize
                        && nx < size as isize
                        && boundary[ny as usize * size + nx as usize]
                    {
                        mask[y as usize * size + x as usize] = true;
                        break 'search;
                    }
                }
            }
        }
    }
    let source = image.to_vec();
    for c in 0..3 {
        let src = &source[c * plane..(c + 1) * plane];
        for y in 0..size as isize {
            for x in 0..size as isize {
                if !mask[y as usize * size + x as usize] {
                    continue;
                }
                let mut acc = 0.0;
                let mut count = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny >= 0 && nx >= 0 && ny < size as isize && nx < size as isize {
                            acc += src[ny as usize * size + nx as usize];
                            count += 1.0;
                        }
                    }
                }
                image[c * plane + (y * size as isize + x) as usize] = acc / count;
            }
        }
    }
}

/// Reassign each pixel to a uniformly chosen wrong class (out of
/// `num_classes`) with probability `rate`. Deterministic per seed; flipped
/// pixels always differ from the input.
pub fn inject_label_noise(labels: &LabelGrid, num_classes: u32, rate: f64, seed: u64) -> LabelGrid {
    assert!(num_classes >= 2, "need at least 2 classes to flip labels");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = labels.clone();
    for v in out.labels_mut() {
        if rng.gen::<f64>() < rate {
            let offset = rng.gen_range(1..num_classes);
            *v = (*v + offset) % num_classes;
        }
    }
    out
}

/// An indexable split of `count` generated samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    config: SceneConfig,
    split: Split,
    count: usize,
}

impl Dataset {
    pub fn new(config: SceneConfig, split: Split, count: usize) -> Result<Self, DataError> {
        config.validate()?;
        if count == 0 {
            return Err(DataError::InvalidConfig("dataset count must be >= 1".into()));
        }
        Ok(Self { config, split, count })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn scene(&self, index: usize) -> Result<Scene, DataError> {
        generate(&self.config, self.split, index)
    }

    /// Batches for one epoch. The train split is shuffled by a per-epoch
    /// seed (further salted by `salt`, typically the run seed) and may flip
    /// samples horizontally; the val split is in index order and never
    /// flipped. The final batch may be partial.
    pub fn batches(&self, batch_size: usize, epoch: u64, salt: u64) -> Result<Vec<SegBatch>, DataError> {
        if batch_size == 0 {
            return Err(DataError::InvalidConfig("batch_size must be >= 1".into()));
        }
        let mut order: Vec<usize> = (0..self.count).collect();
        let mut flips = vec![false; self.count];
        if self.split == Split::Train {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[
                self.config.seed,
                self.split.id(),
                epoch,
                salt,
                0x7368_7566,
            ]));
            order.shuffle(&mut rng);
            if self.config.hflip {
                for f in &mut flips {
                    *f = rng.gen_bool(0.5);
                }
            }
        }
        let mut out = Vec::with_capacity(self.count.div_ceil(batch_size));
        for chunk in order.chunks(batch_size) {
            let start = out.len() * batch_size;
            let flip_slice = &flips[start..start + chunk.len()];
            out.push(self.assemble(chunk, flip_slice)?);
        }
        Ok(out)
    }

    fn assemble(&self, indices: &[usize], flips: &[bool]) -> Result<SegBatch, DataError> {
        let size = self.config.image_size;
        let plane = size * size;
        let mut images = Vec::with_capacity(indices.len() * 3 * plane);
        let mut labels = Vec::with_capacity(indices.len() * plane);
        let mut clean = Vec::with_capacity(indices.len() * plane);
        for (&index, &flip) in indices.iter().zip(flips) {
            let scene = self.scene(index)?;
            if flip {
                for c in 0..3 {
                    let src = &scene.image.data()[c * plane..(c + 1) * plane];
                    for row in src.chunks(size) {
                        images.extend(row.iter().rev());
                    }
                }
                for row in scene.labels.labels().chunks(size) {
                    labels.extend(row.iter().rev());
                }
                for row in scene.clean_labels.labels().chunks(size) {
                    clean.extend(row.iter().rev());
                }
            } else {
                images.extend_from_slice(scene.image.data());
                labels.extend_from_slice(scene.labels.labels());
                clean.extend_from_slice(scene.clean_labels.labels());
            }
        }
        Ok(SegBatch {
            images: DiffTensor::new(vec![indices.len(), 3, size, size], images)?,
            labels: LabelGrid::new(indices.len(), size, size, labels),
            clean_labels: LabelGrid::new(indices.len(), size, size, clean),
            indices: indices.to_vec(),
            flipped: flips.to_vec(),
        })
    }
}

/// Endless batch source for iteration-driven training; re-shuffles the train
/// split at each epoch boundary.
pub struct BatchStream<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    salt: u64,
    epoch: u64,
    pending: std::vec::IntoIter<SegBatch>,
}

impl<'a> BatchStream<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, salt: u64) -> Result<Self, DataError> {
        let pending = dataset.batches(batch_size, 0, salt)?.into_iter();
        Ok(Self { dataset, batch_size, salt, epoch: 0, pending })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Result<SegBatch, DataError> {
        if let Some(batch) = self.pending.next() {
            return Ok(batch);
        }
        self.epoch += 1;
        self.pending = self.dataset.batches(self.batch_size, self.epoch, self.salt)?.into_iter();
        Ok(self.pending.next().expect("non-empty dataset yields at least one batch"))
    }
}

/// Dump `count` samples of a split as PNG images and PGM label maps holding
/// raw class ids (one image/label pair per sample).
pub fn dump_dataset(
    config: &SceneConfig,
    split: Split,
    count: usize,
    dir: &Path,
) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let size = config.image_size;
    for index in 0..count {
        let scene = generate(config, split, index)?;
        let png = dir.join(format!("{}_{index}_image.png", split.as_str()));
        imgio::write_png_rgb(&png, size, size, scene.image.data())?;
        let pgm = dir.join(format!("{}_{index}_label.pgm", split.as_str()));
        let bytes: Vec<u8> = scene.labels.labels().iter().map(|&l| l as u8).collect();
        imgio::write_pgm(&pgm, size, size, &bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_bit_deterministic() {
        let config = SceneConfig::default();
        let a = generate(&config, Split::Train, 3).unwrap();
        let b = generate(&config, Split::Train, 3).unwrap();
        let bits = |t: &DiffTensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.image), bits(&b.image));
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.clean_labels, b.clean_labels);
        let c = generate(&config, Split::Val, 3).unwrap();
        assert_ne!(bits(&a.image), bits(&c.image), "splits must differ");
    }

    #[test]
    fn zero_noise_keeps_labels_clean() {
        let config = SceneConfig { noise_rate: 0.0, ..Default::default() };
        let scene = generate(&config, Split::Train, 0).unwrap();
        assert_eq!(scene.labels, scene.clean_labels);
    }

    #[test]
    fn full_frame_rectangle_paints_every_pixel() {
        let size = 16;
        let mut labels = vec![0u32; size * size];
        let mut image = vec![0.0; 3 * size * size];
        let shape = Shape {
            kind: ShapeKind::Rect,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            hx: size as f64,
            hy: size as f64,
            class: 1,
        };
        paint_shape(&mut labels, &mut image, size, &shape, &[0.5, 0.5, 0.5], &[0.0, 0.0, 0.0]);
        assert!(labels.iter().all(|&l| l == 1), "histogram must be 100% class 1");
    }

    #[test]
    fn noise_identity_and_disjointness() {
        let labels = LabelGrid::new(1, 8, 8, (0..64).map(|v| (v % 5) as u32).collect());
        assert_eq!(inject_label_noise(&labels, 5, 0.0, 42), labels);
        let noisy = inject_label_noise(&labels, 5, 0.3, 42);
        for (a, b) in labels.labels().iter().zip(noisy.labels()) {
            if a != b {
                assert!(*b < 5);
            }
        }
        let flipped = labels
            .labels()
            .iter()
            .zip(noisy.labels())
            .filter(|(a, b)| a != b)
            .count();
        assert!(flipped > 0);
    }

    #[test]
    fn noise_rate_concentrates() {
        // 10^6 pixels at rate 0.05: empirical fraction within +-0.002.
        let labels = LabelGrid::new(1, 1000, 1000, vec![2u32; 1_000_000]);
        let noisy = inject_label_noise(&labels, 5, 0.05, 9001);
        let flipped = labels
            .labels()
            .iter()
            .zip(noisy.labels())
            .filter(|(a, b)| a != b)
            .count() as f64
            / 1e6;
        assert!((flipped - 0.05).abs() < 0.002, "flip fraction {flipped}");
        for (a, b) in labels.labels().iter().zip(noisy.labels()) {
            if a != b {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn val_iteration_is_stable_and_train_shuffles() {
        let config = SceneConfig { image_size: 16, ..Default::default() };
        let val = Dataset::new(config.clone(), Split::Val, 10).unwrap();
        let a: Vec<usize> = val.batches(4, 0, 0).unwrap().iter().flat_map(|b| b.indices.clone()).collect();
        let b: Vec<usize> = val.batches(4, 7, 0).unwrap().iter().flat_map(|b| b.indices.clone()).collect();
        assert_eq!(a, b);
        assert_eq!(a, (0..10).collect::<Vec<_>>());

        let train = Dataset::new(config, Split::Train, 10).unwrap();
        let e0: Vec<usize> = train.batches(4, 0, 0).unwrap().iter().flat_map(|b| b.indices.clone()).collect();
        let e1: Vec<usize> = train.batches(4, 1, 0).unwrap().iter().flat_map(|b| b.indices.clone()).collect();
        assert_ne!(e0, e1, "epochs must reorder");
        let mut s0 = e0.clone();
        let mut s1 = e1.clone();
        s0.sort_unstable();
        s1.sort_unstable();
        assert_eq!(s0, s1, "same multiset across epochs");
    }

    #[test]
    fn partial_batch_allowed() {
        let config = SceneConfig { image_size: 16, ..Default::default() };
        let ds = Dataset::new(config, Split::Val, 1).unwrap();
        let batches = ds.batches(4, 0, 0).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 1);
        assert_eq!(batches[0].images.shape(), &[1, 3, 16, 16]);
    }

    #[test]
    fn class_coverage_over_many_images() {
        // Every class must collect at least 1% of pixels over 500 training
        // images with defaults.
        let config = SceneConfig::default();
        let mut counts = vec![0u64; config.num_classes];
        let mut total = 0u64;
        for index in 0..500 {
            let scene = generate(&config, Split::Train, index).unwrap();
            for &l in scene.clean_labels.labels() {
                counts[l as usize] += 1;
                total += 1;
            }
        }
        for (class, &count) in counts.iter().enumerate() {
            let share = count as f64 / total as f64;
            assert!(share >= 0.01, "class {class} covers only {share:.4}");
        }
    }

    #[test]
    fn images_stay_in_unit_range() {
        let scene = generate(&SceneConfig::default(), Split::Train, 11).unwrap();
        assert!(scene.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(scene.labels.labels().iter().all(|&l| l < 5));
    }

    #[test]
    fn hflip_mirrors_images_and_labels() {
        let config = SceneConfig { image_size: 16, hflip: true, ..Default::default() };
        let ds = Dataset::new(config.clone(), Split::Train, 32).unwrap();
        let batches = ds.batches(8, 0, 0).unwrap();
        let flipped_any = batches.iter().any(|b| b.flipped.iter().any(|&f| f));
        assert!(flipped_any, "with hflip on, some samples should flip");
        for batch in &batches {
            for (slot, (&index, &flip)) in batch.indices.iter().zip(&batch.flipped).enumerate() {
                if !flip {
                    continue;
                }
                let scene = ds.scene(index).unwrap();
                let size = 16;
                for y in 0..size {
                    for x in 0..size {
                        assert_eq!(
                            batch.labels.get(slot, y, x),
                            scene.labels.get(0, y, size - 1 - x)
                        );
                    }
                }
            }
        }
    }
}
