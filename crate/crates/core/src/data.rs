//! Synthetic segmentation tasks, preprocessing and augmentation.
//!
//! Each sample holds one textured shape of a named class on a textured
//! background. Images are rendered at a source resolution, quantized to 8-bit
//! levels (so fixture files round-trip exactly) and resized to the model
//! resolution with bicubic interpolation; masks go through nearest-neighbour.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const COLORS: [(&str, [f64; 3]); 10] = [
    ("red", [0.85, 0.15, 0.15]),
    ("blue", [0.15, 0.25, 0.85]),
    ("green", [0.15, 0.7, 0.2]),
    ("gold", [0.9, 0.75, 0.1]),
    ("pink", [0.95, 0.5, 0.7]),
    ("teal", [0.1, 0.55, 0.55]),
    ("gray", [0.55, 0.55, 0.55]),
    ("navy", [0.1, 0.1, 0.4]),
    ("lime", [0.6, 0.95, 0.2]),
    ("plum", [0.55, 0.25, 0.55]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Stripe,
}

const SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Stripe];

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Stripe => "stripe",
        }
    }
}

/// Rendering style; `Medical` is a grayscale, low-contrast, speckled look
/// that creates a domain shift away from `Natural`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    #[default]
    Natural,
    Medical,
}

pub fn class_name(class_id: usize) -> String {
    format!("{} {}", COLORS[class_id].0, class_shape(class_id).name())
}

pub fn class_shape(class_id: usize) -> Shape {
    SHAPES[class_id % SHAPES.len()]
}

/// A binary mask stored as 0/1 bytes, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask", &[height, width], &[data.len()]));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::config("mask values must be 0 or 1"));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Thresholds probabilities (or logits with `threshold = 0`).
    pub fn from_scores(height: usize, width: usize, scores: &[f64], threshold: f64) -> Result<Self> {
        Self::new(height, width, scores.iter().map(|&s| (s > threshold) as u8).collect())
    }

    /// Centroid as (x, y); `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let n = self.count();
        if n == 0 {
            return None;
        }
        let (mut sx, mut sy) = (0.0, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) == 1 {
                    sx += x as f64;
                    sy += y as f64;
                }
            }
        }
        Some((sx / n as f64, sy / n as f64))
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                data.push(self.get(sy, sx));
            }
        }
        Mask { height, width, data }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    /// `[3, H, W]` with values in `[0, 1]`.
    pub image: Tensor,
    pub phrase: String,
    pub mask: Mask,
    pub class_id: usize,
}

impl SegmentationSample {
    pub fn new(image: Tensor, phrase: String, mask: Mask, class_id: usize) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != mask.height || s[2] != mask.width {
            return Err(Error::shape("sample", s, &[mask.height, mask.width]));
        }
        if phrase.is_empty() {
            return Err(Error::config("sample phrase must be nonempty"));
        }
        Ok(Self {
            image,
            phrase,
            mask,
            class_id,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub n_classes: usize,
    /// Classes are `first_class .. first_class + n_classes` of the fixed palette.
    pub first_class: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Resolution the scene is rendered at before resizing.
    pub source_size: usize,
    pub image_size: usize,
    pub domain: Domain,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            n_classes: 2,
            first_class: 0,
            train: 64,
            val: 16,
            test: 16,
            source_size: 80,
            image_size: 64,
            domain: Domain::Natural,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=COLORS.len()).contains(&self.n_classes) {
            return Err(Error::config(format!("n_classes {} outside [2, 10]", self.n_classes)));
        }
        if self.first_class + self.n_classes > COLORS.len() {
            return Err(Error::config(format!(
                "classes {}..{} exceed the 10-class palette",
                self.first_class,
                self.first_class + self.n_classes
            )));
        }
        if self.image_size < 4 || self.source_size < 16 {
            return Err(Error::config("image sizes too small"));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (self.first_class..self.first_class + self.n_classes).map(class_name).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<SegmentationSample>,
    pub val: Vec<SegmentationSample>,
    pub test: Vec<SegmentationSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SegmentationSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Renders all three splits; each split draws from its own RNG stream.
pub fn generate_dataset(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut out = Dataset::default();
    for split in Split::ALL {
        let n = match split {
            Split::Train => spec.train,
            Split::Val => spec.val,
            Split::Test => spec.test,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(split.stream());
        let mut classes: Vec<usize> = (0..n).map(|i| spec.first_class + i % spec.n_classes).collect();
        classes.shuffle(&mut rng);
        let samples = classes
            .into_iter()
            .map(|c| render_sample(spec, c, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        match split {
            Split::Train => out.train = samples,
            Split::Val => out.val = samples,
            Split::Test => out.test = samples,
        }
    }
    Ok(out)
}

fn inside(shape: Shape, dx: f64, dy: f64, r: f64, angle: f64) -> bool {
    let (s, c) = angle.sin_cos();
    let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => u.abs() <= 0.8 * r && v.abs() <= 0.8 * r,
        Shape::Triangle => {
            // apex at v = -r, base at v = r / 2
            let t = (v + r) / (1.5 * r);
            (0.0..=1.0).contains(&t) && u.abs() <= t * r
        }
        Shape::Stripe => u.abs() <= 1.1 * r && v.abs() <= 0.35 * r,
    }
}

fn render_sample(spec: &SyntheticTaskSpec, class_id: usize, rng: &mut ChaCha8Rng) -> Result<SegmentationSample> {
    let s = spec.source_size;
    let sf = s as f64;
    let shape = class_shape(class_id);
    let color = COLORS[class_id].1;
    let r = rng.random_range(sf / 6.0..sf / 3.6);
    let margin = 1.15 * r + 1.0;
    let cx = rng.random_range(margin..sf - margin);
    let cy = rng.random_range(margin..sf - margin);
    let angle = if shape == Shape::Circle { 0.0 } else { rng.random_range(-0.6..0.6) };
    let tex_freq = 0.35 + 0.12 * class_id as f64;
    let tex_phase = rng.random_range(0.0..2.0 * PI);

    // background: a few random low-frequency waves per channel plus noise
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.02..0.12),
                rng.random_range(0.02..0.12),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.05..0.15),
            ]
        })
        .collect();
    let bg_base: [f64; 3] = [
        rng.random_range(0.25..0.6),
        rng.random_range(0.25..0.6),
        rng.random_range(0.25..0.6),
    ];

    let mut image = vec![0.0; 3 * s * s];
    let mut mask = vec![0u8; s * s];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let fg = inside(shape, px - cx, py - cy, r, angle);
            let wave: f64 = waves
                .iter()
                .map(|w| w[3] * (w[0] * px + w[1] * py + w[2]).sin())
                .sum();
            let noise = rng.random_range(-0.04..0.04);
            let texture = 0.08 * (tex_freq * (px + py) + tex_phase).sin();
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                rgb[c] = if fg {
                    color[c] + texture + noise
                } else {
                    bg_base[c] + wave * (1.0 + 0.3 * c as f64) + noise
                };
            }
            if spec.domain == Domain::Medical {
                let lum = 0.3 * rgb[0] + 0.59 * rgb[1] + 0.11 * rgb[2];
                let speckle = rng.random_range(-0.08..0.08);
                let v = if fg { 0.55 + 0.4 * lum } else { 0.15 + 0.4 * lum };
                rgb = [v + speckle, v + speckle, 0.95 * (v + speckle)];
            }
            for c in 0..3 {
                image[(c * s + y) * s + x] = quantize(rgb[c]);
            }
            mask[y * s + x] = fg as u8;
        }
    }
    let image = Tensor::new(&[3, s, s], image)?;
    let mask = Mask::new(s, s, mask)?;
    let (image, mask) = if spec.image_size != s {
        let resized = resize_bicubic(&image, spec.image_size)?;
        let q: Vec<f64> = resized.data().iter().map(|&v| quantize(v)).collect();
        (
            Tensor::new(resized.shape(), q)?,
            mask.resize_nearest(spec.image_size, spec.image_size),
        )
    } else {
        (image, mask)
    };
    SegmentationSample::new(image, class_name(class_id), mask, class_id)
}

/// Clamps to `[0, 1]` and snaps to the nearest 8-bit level.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Catmull-Rom cubic convolution kernel (a = −0.5).
pub fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// (taps, weights) per output coordinate, half-pixel aligned, edge-clamped.
fn bicubic_taps(n_in: usize, n_out: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let mut idx = [0usize; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let i = base as i64 - 1 + k as i64;
                idx[k] = i.clamp(0, n_in as i64 - 1) as usize;
                w[k] = cubic_weight(t + 1.0 - k as f64);
            }
            (idx, w)
        })
        .collect()
}

/// Bicubic resize of a `[c, h, w]` image to `[c, target, target]`.
pub fn resize_bicubic(image: &Tensor, target: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("resize_bicubic", s, &[3]));
    }
    if target < 4 {
        return Err(Error::config("resize target must be >= 4"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h < 2 || w < 2 {
        return Err(Error::config(format!("cannot resize a degenerate {h}x{w} image")));
    }
    if h == target && w == target {
        return Ok(image.clone());
    }
    let ys = bicubic_taps(h, target);
    let xs = bicubic_taps(w, target);
    let d = image.data();
    // horizontal pass then vertical pass
    let mut tmp = vec![0.0; c * h * target];
    for ch in 0..c {
        for y in 0..h {
            let row = &d[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (ox, (idx, wt)) in xs.iter().enumerate() {
                tmp[(ch * h + y) * target + ox] = (0..4).map(|k| row[idx[k]] * wt[k]).sum();
            }
        }
    }
    let mut out = vec![0.0; c * target * target];
    for ch in 0..c {
        for (oy, (idx, wt)) in ys.iter().enumerate() {
            for ox in 0..target {
                out[(ch * target + oy) * target + ox] =
                    (0..4).map(|k| tmp[(ch * h + idx[k]) * target + ox] * wt[k]).sum();
            }
        }
    }
    Tensor::new(&[c, target, target], out)
}

/// Per-channel mean and standard deviation over a set of images.
pub fn channel_stats<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> ([f64; 3], [f64; 3]) {
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut n = 0usize;
    for img in images {
        let plane = img.numel() / 3;
        for c in 0..3 {
            for &v in &img.data()[c * plane..(c + 1) * plane] {
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        n += plane;
    }
    let mut mean = [0.0; 3];
    let mut std = [1.0; 3];
    if n > 0 {
        for c in 0..3 {
            mean[c] = sum[c] / n as f64;
            std[c] = (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6);
        }
    }
    (mean, std)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (mean, std) = channel_stats(images);
        Self { mean, std }
    }
}

pub fn normalize(image: &Tensor, mean: &[f64; 3], std: &[f64; 3]) -> Result<Tensor> {
    per_channel(image, |c, v| (v - mean[c]) / std[c])
}

pub fn denormalize(image: &Tensor, mean: &[f64; 3], std: &[f64; 3]) -> Result<Tensor> {
    per_channel(image, |c, v| v * std[c] + mean[c])
}

fn per_channel(image: &Tensor, f: impl Fn(usize, f64) -> f64) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("normalize", s, &[3]));
    }
    let plane = s[1] * s[2];
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| f(i / plane, v))
        .collect();
    Tensor::new(s, data)
}

/// One draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    /// Translation as a fraction of width / height.
    pub translate: (f64, f64),
    pub rotate_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        scale: 1.0,
        translate: (0.0, 0.0),
        rotate_deg: 0.0,
        brightness: 0.0,
        contrast: 1.0,
    };

    /// Scale ±2%, translate ±2%, rotate ±5°, brightness and contrast ±10%.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            scale: rng.random_range(0.98..=1.02),
            translate: (rng.random_range(-0.02..=0.02), rng.random_range(-0.02..=0.02)),
            rotate_deg: rng.random_range(-5.0..=5.0),
            brightness: rng.random_range(-0.1..=0.1),
            contrast: rng.random_range(0.9..=1.1),
        }
    }
}

pub fn augment<R: Rng + ?Sized>(sample: &SegmentationSample, rng: &mut R) -> Result<SegmentationSample> {
    augment_with(sample, &AugmentParams::sample(rng))
}

/// Applies the same affine map to image (bilinear) and mask (nearest), then
/// brightness/contrast jitter to the image only.
pub fn augment_with(sample: &SegmentationSample, p: &AugmentParams) -> Result<SegmentationSample> {
    let (h, w) = (sample.mask.height, sample.mask.width);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (sin, cos) = p.rotate_deg.to_radians().sin_cos();
    let (tx, ty) = (p.translate.0 * w as f64, p.translate.1 * h as f64);
    // inverse map from output pixel to source coordinates
    let source = |x: f64, y: f64| {
        let (u, v) = (x - cx - tx, y - cy - ty);
        let (u, v) = ((cos * u + sin * v) / p.scale, (-sin * u + cos * v) / p.scale);
        (u + cx, v + cy)
    };
    let src = sample.image.data();
    let mut image = vec![0.0; 3 * h * w];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source(x as f64, y as f64);
            let (mx, my) = (sx.round(), sy.round());
            if mx >= 0.0 && my >= 0.0 && (mx as usize) < w && (my as usize) < h {
                mask[y * w + x] = sample.mask.get(my as usize, mx as usize);
            }
            let x0 = sx.floor().clamp(0.0, (w - 1) as f64);
            let y0 = sy.floor().clamp(0.0, (h - 1) as f64);
            let (fx, fy) = ((sx - x0).clamp(0.0, 1.0), (sy - y0).clamp(0.0, 1.0));
            let (x0, y0) = (x0 as usize, y0 as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            for c in 0..3 {
                let at = |yy: usize, xx: usize| src[(c * h + yy) * w + xx];
                let v = if fx == 0.0 && fy == 0.0 {
                    at(y0, x0)
                } else {
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    top * (1.0 - fy) + bot * fy
                };
                image[(c * h + y) * w + x] = v;
            }
        }
    }
    if p.contrast != 1.0 || p.brightness != 0.0 {
        for v in image.iter_mut() {
            *v = (p.contrast * *v + p.brightness).clamp(0.0, 1.0);
        }
    }
    SegmentationSample::new(
        Tensor::new(&[3, h, w], image)?,
        sample.phrase.clone(),
        Mask::new(h, w, mask)?,
        sample.class_id,
    )
}

// ---- fixture files --------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub mask_path: String,
    pub phrase: String,
    pub class_id: usize,
    pub split: Split,
}

/// Plain-text PPM (P3) with 8-bit levels.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P3\n{w} {h}\n255\n");
    let d = image.data();
    for y in 0..h {
        let row: Vec<String> = (0..w)
            .flat_map(|x| (0..3).map(move |c| (c, x)))
            .map(|(c, x)| ((d[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u32).to_string())
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_netpbm(path: &Path, magic: &str) -> Result<(usize, usize, u32, Vec<u32>)> {
    let text = fs::read_to_string(path)?;
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    if tokens.next() != Some(magic) {
        return Err(bad(&format!("expected {magic} header")));
    }
    let mut num = || -> Result<u32> {
        tokens
            .next()
            .ok_or_else(|| bad("truncated"))?
            .parse()
            .map_err(|_| bad("bad number"))
    };
    let w = num()? as usize;
    let h = num()? as usize;
    let max = num()?;
    let channels = if magic == "P3" { 3 } else { 1 };
    let values = (0..w * h * channels).map(|_| num()).collect::<Result<Vec<_>>>()?;
    Ok((w, h, max, values))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let (w, h, max, values) = read_netpbm(path, "P3")?;
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = values[(y * w + x) * 3 + c] as f64 / max as f64;
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Plain-text PGM (P2) with maxval 1.
pub fn write_pgm_mask(path: &Path, mask: &Mask) -> Result<()> {
    let mut out = format!("P2\n{} {}\n1\n", mask.width, mask.height);
    for row in mask.data.chunks(mask.width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm_mask(path: &Path) -> Result<Mask> {
    let (w, h, max, values) = read_netpbm(path, "P2")?;
    Mask::new(h, w, values.iter().map(|&v| (v * 2 > max) as u8).collect())
}

/// Writes every sample as PPM/PGM plus a `manifest.jsonl` index.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = fs::File::create(&manifest_path)?;
    for split in Split::ALL {
        for (i, s) in data.split(split).iter().enumerate() {
            let image_path = format!("{}_{i:04}.ppm", split.as_str());
            let mask_path = format!("{}_{i:04}_mask.pgm", split.as_str());
            write_ppm(&dir.join(&image_path), &s.image)?;
            write_pgm_mask(&dir.join(&mask_path), &s.mask)?;
            let entry = ManifestEntry {
                image_path,
                mask_path,
                phrase: s.phrase.clone(),
                class_id: s.class_id,
                split,
            };
            writeln!(manifest, "{}", serde_json::to_string(&entry)?)?;
        }
    }
    Ok(manifest_path)
}

/// Loads a dataset from a manifest; relative paths resolve against its directory.
pub fn load_manifest(manifest: &Path) -> Result<Dataset> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(fs::File::open(manifest)?);
    let mut data = Dataset::default();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line)?;
        let sample = SegmentationSample::new(
            read_ppm(&base.join(&e.image_path))?,
            e.phrase,
            read_pgm_mask(&base.join(&e.mask_path))?,
            e.class_id,
        )?;
        match e.split {
            Split::Train => data.train.push(sample),
            Split::Val => data.val.push(sample),
            Split::Test => data.test.push(sample),
        }
    }
    Ok(data)
}
