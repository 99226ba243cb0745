//! Synthetic underwater detection data and the on-disk dataset format.
//!
//! Scenes are rendered clean, then pushed through a Beer–Lambert style
//! attenuation with additive backscatter, blur, noise and contrast loss.
//! Datasets use one text label file per image (`class cx cy w h`, normalized,
//! 6 decimals) so real exports in the same format load unchanged.
//!
//! Layout under a dataset root:
//!
//! ```text
//! <root>/images/{train,test}/<id>.png        degraded (underwater) images
//! <root>/labels/{train,test}/<id>.txt
//! <root>/clear/images/{train,test}/<id>.png  mildly degraded "clear" pool
//! <root>/clear/labels/{train,test}/<id>.txt
//! <root>/manifest.json
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use bgdet_tensor::Tensor;
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::BBox;
use crate::{Error, Result};

/// Required divisor of image height and width (largest detector stride).
pub const SIZE_DIVISOR: usize = 32;

/// Class names mirroring the four URPC2020 categories.
pub const DEFAULT_CLASSES: [&str; 4] = ["holothurian", "echinus", "scallop", "starfish"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Underwater,
    Clear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub class_id: usize,
    #[serde(flatten)]
    pub bbox: BBox,
}

/// An RGB image (`[3, h, w]`, values in `[0, 1]`) with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Tensor<f32>,
    pub boxes: Vec<BoxAnnotation>,
    pub domain: Domain,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn flipped_horizontally(&self) -> Self {
        let (h, w) = (self.height(), self.width());
        let mut px = self.pixels.clone();
        let src = self.pixels.data();
        for (i, row) in px.data_mut().chunks_mut(w).enumerate() {
            let s = &src[i * w..(i + 1) * w];
            for (x, v) in row.iter_mut().enumerate() {
                *v = s[w - 1 - x];
            }
        }
        debug_assert_eq!(px.numel(), 3 * h * w);
        Self {
            id: self.id.clone(),
            pixels: px,
            boxes: self
                .boxes
                .iter()
                .map(|b| BoxAnnotation {
                    class_id: b.class_id,
                    bbox: b.bbox.flipped_horizontally(),
                })
                .collect(),
            domain: self.domain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationParams {
    /// Per-channel (R, G, B) attenuation per unit depth.
    pub beta: [f64; 3],
    pub depth: f64,
    /// Per-channel backscatter colour.
    pub ambient: [f64; 3],
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Contrast scale about 0.5, in (0, 1].
    pub contrast: f64,
}

impl DegradationParams {
    /// Leaves pixels unchanged.
    pub fn identity() -> Self {
        Self {
            beta: [0.0; 3],
            depth: 0.0,
            ambient: [0.0; 3],
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            contrast: 1.0,
        }
    }

    /// Strong green-blue cast, blur and noise.
    pub fn underwater() -> Self {
        Self {
            beta: [0.9, 0.35, 0.25],
            depth: 1.6,
            ambient: [0.05, 0.35, 0.42],
            blur_sigma: 0.9,
            noise_sigma: 0.03,
            contrast: 0.65,
        }
    }

    /// Mild cast used for the "clear underwater" target pool.
    pub fn clear_water() -> Self {
        Self {
            beta: [0.3, 0.1, 0.08],
            depth: 0.5,
            ambient: [0.1, 0.3, 0.35],
            blur_sigma: 0.0,
            noise_sigma: 0.005,
            contrast: 0.95,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .beta
            .iter()
            .chain(&self.ambient)
            .chain([&self.depth, &self.blur_sigma, &self.noise_sigma, &self.contrast]);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::Config("degradation parameters must be finite".into()));
        }
        if self.beta.iter().any(|&b| b < 0.0) || self.depth < 0.0 {
            return Err(Error::Config("attenuation beta and depth must be non-negative".into()));
        }
        if self.ambient.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("ambient colour must lie in [0, 1]".into()));
        }
        if self.blur_sigma < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("blur and noise sigma must be non-negative".into()));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::Config("contrast must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub classes: Vec<String>,
    /// Inclusive `[min, max]`.
    pub objects_per_image: [usize; 2],
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 500,
            n_test: 100,
            image_size: [64, 64],
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            objects_per_image: [1, 4],
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be positive".into()));
        }
        let [h, w] = self.image_size;
        if h == 0 || w == 0 || h % SIZE_DIVISOR != 0 || w % SIZE_DIVISOR != 0 {
            return Err(Error::Config(format!(
                "image_size {h}x{w} must be positive multiples of {SIZE_DIVISOR}"
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        let [lo, hi] = self.objects_per_image;
        if lo > hi || hi == 0 {
            return Err(Error::Config(format!("objects_per_image [{lo}, {hi}] is empty")));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_test
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.n_train {
            Split::Train
        } else {
            Split::Test
        }
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn id_seed(id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Silhouette of one shape family in object-local polar coordinates.
/// Returns whether the unit-radius-normalized point `(u, v)` is inside.
fn inside_shape(class_family: usize, u: f64, v: f64, wobble: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    let phi = v.atan2(u);
    match class_family % 4 {
        // elongated blob
        0 => {
            let half_width = 0.38 * (1.0 + 0.12 * (5.0 * u + wobble).sin());
            (u * u) + (v / half_width).powi(2) <= 1.0
        }
        // spiky disc
        1 => {
            let spikes = (14.0 * phi + wobble).cos().max(0.0).powi(3);
            r <= 0.62 + 0.38 * spikes
        }
        // fan opening upward (v < 0 is up) with ridged rim and a hinge
        2 => {
            let ang = (-v).atan2(u) - PI / 2.0;
            let rim = 0.92 + 0.08 * (16.0 * ang).cos();
            let shell = ang.abs() <= 1.15 && r <= rim && v <= 0.25;
            let hinge = v > 0.15 && v <= 0.45 && u.abs() <= 0.28;
            shell || hinge
        }
        // five-armed star
        _ => {
            let arm = ((5.0 * (phi + wobble)) / 2.0).cos().abs().powf(2.5);
            r <= 0.3 + 0.7 * arm
        }
    }
}

struct ObjectPlan {
    class_id: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
    wobble: f64,
    color: [f64; 3],
    pattern: f64,
}

fn shade(plan: &ObjectPlan, u: f64, v: f64) -> [f64; 3] {
    let r = (u * u + v * v).sqrt();
    let t = match plan.class_id % 4 {
        0 => 0.75 + 0.25 * ((9.0 * u + plan.pattern).sin() * (9.0 * v).cos()),
        1 => 0.7 + 0.3 * (1.0 - r),
        2 => 0.75 + 0.25 * ((18.0 * v.atan2(u) + plan.pattern).sin()),
        _ => 0.8 + 0.2 * ((12.0 * r + plan.pattern).cos()),
    };
    plan.color.map(|c| (c * t).clamp(0.0, 1.0))
}

fn base_color(class_id: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let base = match class_id % 4 {
        0 => [0.30, 0.20, 0.14],
        1 => [0.28, 0.12, 0.32],
        2 => [0.92, 0.74, 0.52],
        _ => [0.95, 0.42, 0.18],
    };
    base.map(|c: f64| (c + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0))
}

/// Clean (domain `Clear`) scene for dataset position `index`. Deterministic in
/// `(spec.seed, index)`.
pub fn render_scene(spec: &DatasetSpec, index: usize) -> Result<ImageSample> {
    spec.validate()?;
    if index >= spec.total() {
        return Err(Error::Config(format!(
            "scene index {index} out of range for {} images",
            spec.total()
        )));
    }
    let [h, w] = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, index as u64));

    // Seabed: vertical gradient plus low-frequency ripples and grain.
    let sand = [
        rng.random_range(0.55..0.75),
        rng.random_range(0.5..0.68),
        rng.random_range(0.38..0.55),
    ];
    let ripples: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.25),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let mut img = vec![[0.0f64; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64 / h as f64;
            let mut t = 0.85 + 0.2 * fy;
            for &(freq, phase, tilt) in &ripples {
                t += 0.04 * (freq * (x as f64 + tilt * y as f64) + phase).sin();
            }
            let grain = rng.random_range(-0.03..0.03);
            img[y * w + x] = sand.map(|c| (c * t + grain).clamp(0.0, 1.0));
        }
    }

    let n_classes = spec.classes.len();
    let [lo, hi] = spec.objects_per_image;
    let count = rng.random_range(lo..=hi);
    let min_side = h.min(w) as f64;
    let mut plans: Vec<ObjectPlan> = Vec::new();
    for _ in 0..count {
        let class_id = rng.random_range(0..n_classes);
        let radius = rng.random_range(0.08..0.22) * min_side;
        let angle = rng.random_range(0.0..2.0 * PI);
        let wobble = rng.random_range(0.0..2.0 * PI);
        let color = base_color(class_id, &mut rng);
        let pattern = rng.random_range(0.0..2.0 * PI);
        // Rejection-sample a centre whose disc stays inside the frame and
        // does not swallow earlier objects.
        let mut placed = None;
        for _ in 0..30 {
            let cx = rng.random_range(radius + 1.0..w as f64 - radius - 1.0);
            let cy = rng.random_range(radius + 1.0..h as f64 - radius - 1.0);
            let clash = plans.iter().any(|p| {
                let d = ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt();
                d < 0.8 * (p.radius + radius)
            });
            if !clash {
                placed = Some((cx, cy));
                break;
            }
        }
        if let Some((cx, cy)) = placed {
            plans.push(ObjectPlan {
                class_id,
                cx,
                cy,
                radius,
                angle,
                wobble,
                color,
                pattern,
            });
        }
    }
    if plans.is_empty() && lo > 0 {
        // The first object always fits: no earlier objects can clash.
        unreachable!("first object placement cannot fail");
    }

    let mut boxes = Vec::with_capacity(plans.len());
    const SS: usize = 3;
    for plan in &plans {
        let (sin, cos) = plan.angle.sin_cos();
        let x0 = (plan.cx - plan.radius - 1.0).floor().max(0.0) as usize;
        let x1 = ((plan.cx + plan.radius + 1.0).ceil() as usize).min(w);
        let y0 = (plan.cy - plan.radius - 1.0).floor().max(0.0) as usize;
        let y1 = ((plan.cy + plan.radius + 1.0).ceil() as usize).min(h);
        let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                let mut acc = [0.0; 3];
                for sy in 0..SS {
                    for sx in 0..SS {
                        let px = x as f64 + (sx as f64 + 0.5) / SS as f64 - plan.cx;
                        let py = y as f64 + (sy as f64 + 0.5) / SS as f64 - plan.cy;
                        let u = (cos * px + sin * py) / plan.radius;
                        let v = (-sin * px + cos * py) / plan.radius;
                        if inside_shape(plan.class_id, u, v, plan.wobble) {
                            hits += 1;
                            let c = shade(plan, u, v);
                            for k in 0..3 {
                                acc[k] += c[k];
                            }
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let alpha = hits as f64 / (SS * SS) as f64;
                let px = &mut img[y * w + x];
                for k in 0..3 {
                    px[k] = (1.0 - alpha) * px[k] + acc[k] / (SS * SS) as f64;
                }
                if alpha >= 0.5 {
                    bx0 = bx0.min(x);
                    by0 = by0.min(y);
                    bx1 = bx1.max(x + 1);
                    by1 = by1.max(y + 1);
                }
            }
        }
        if bx0 < bx1 && by0 < by1 {
            boxes.push(BoxAnnotation {
                class_id: plan.class_id,
                bbox: BBox::from_corners(
                    bx0 as f64 / w as f64,
                    by0 as f64 / h as f64,
                    bx1 as f64 / w as f64,
                    by1 as f64 / h as f64,
                ),
            });
        }
    }

    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in img.iter().enumerate() {
        for k in 0..3 {
            data[k * h * w + i] = px[k] as f32;
        }
    }
    Ok(ImageSample {
        id: format!("{index:06}"),
        pixels: Tensor::from_vec(&[3, h, w], data)?,
        boxes,
        domain: Domain::Clear,
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of one plane with clamp-to-edge borders.
fn blur_plane(plane: &mut [f64], h: usize, w: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * plane[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            plane[y * w + x] = acc;
        }
    }
}

/// Attenuation `J·t + A·(1 − t)` with `t = exp(−β·depth)` per channel, then blur,
/// clipped additive noise and contrast scaling about 0.5. Boxes are unchanged.
/// The noise stream is seeded from the image id.
pub fn degrade(img: &ImageSample, p: &DegradationParams) -> Result<ImageSample> {
    p.validate()?;
    if img.domain != Domain::Clear {
        return Err(Error::Contract(format!("degrade expects a clear image, got {:?} ({})", img.domain, img.id)));
    }
    let (h, w) = (img.height(), img.width());
    let mut rng = ChaCha8Rng::seed_from_u64(id_seed(&img.id));
    let mut out = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        let t = (-p.beta[c] * p.depth).exp();
        let a = p.ambient[c];
        let src = &img.pixels.data()[c * h * w..(c + 1) * h * w];
        let mut plane: Vec<f64> = src.iter().map(|&j| j as f64 * t + a * (1.0 - t)).collect();
        if p.blur_sigma > 0.0 {
            blur_plane(&mut plane, h, w, p.blur_sigma);
        }
        if p.noise_sigma > 0.0 {
            for v in plane.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v = (*v + p.noise_sigma * n).clamp(0.0, 1.0);
            }
        }
        for (o, v) in out[c * h * w..(c + 1) * h * w].iter_mut().zip(&plane) {
            *o = ((v - 0.5) * p.contrast + 0.5).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(ImageSample {
        id: img.id.clone(),
        pixels: Tensor::from_vec(&[3, h, w], out)?,
        boxes: img.boxes.clone(),
        domain: Domain::Underwater,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: DatasetSpec,
    pub classes: Vec<String>,
    pub seed: u64,
    pub counts: SplitCounts,
    pub splits: SplitIds,
    pub underwater: DegradationParams,
    pub clear: DegradationParams,
    /// SHA-256 over every written image and label file, in write order.
    pub content_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

/// Root of the clear-domain pool inside a dataset root.
pub fn clear_root(root: &Path) -> PathBuf {
    root.join("clear")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_png(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    let mut raw = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            raw.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized for image");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Numerical(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

pub fn format_labels(boxes: &[BoxAnnotation]) -> String {
    let mut s = String::new();
    for b in boxes {
        s.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6}\n",
            b.class_id, b.bbox.cx, b.bbox.cy, b.bbox.w, b.bbox.h
        ));
    }
    s
}

/// Renders, degrades and writes the whole dataset; returns the manifest
/// (also written to `<out_dir>/manifest.json`).
pub fn generate_dataset(
    spec: &DatasetSpec,
    underwater: &DegradationParams,
    clear: &DegradationParams,
    out_dir: &Path,
) -> Result<Manifest> {
    spec.validate()?;
    underwater.validate()?;
    clear.validate()?;
    let mut digest = Sha256::new();
    let mut splits = SplitIds {
        train: Vec::new(),
        test: Vec::new(),
    };
    let clear_dir = clear_root(out_dir);
    for index in 0..spec.total() {
        let split = spec.split_of(index);
        let scene = render_scene(spec, index)?;
        let labels = format_labels(&scene.boxes);
        for (root, params) in [(out_dir, underwater), (clear_dir.as_path(), clear)] {
            let img = degrade(&scene, params)?;
            let png = encode_png(&img.pixels)?;
            write_file(&root.join("images").join(split.as_str()).join(format!("{}.png", img.id)), &png)?;
            write_file(
                &root.join("labels").join(split.as_str()).join(format!("{}.txt", img.id)),
                labels.as_bytes(),
            )?;
            digest.update(&png);
            digest.update(labels.as_bytes());
        }
        match split {
            Split::Train => splits.train.push(scene.id),
            Split::Test => splits.test.push(scene.id),
        }
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        spec: spec.clone(),
        classes: spec.classes.clone(),
        seed: spec.seed,
        counts: SplitCounts {
            train: splits.train.len(),
            test: splits.test.len(),
        },
        splits,
        underwater: underwater.clone(),
        clear: clear.clone(),
        content_digest: hex::encode(digest.finalize()),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&out_dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::artifact(&path, e.to_string()))
}

/// Parses one label file. Boxes are validated and clipped to the image.
pub fn parse_labels(text: &str, file: &Path) -> Result<Vec<BoxAnnotation>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Format {
            file: file.to_path_buf(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| bad(format!("class id {:?} is not a non-negative integer", fields[0])))?;
        let mut v = [0.0f64; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f.parse().map_err(|_| bad(format!("{f:?} is not a number")))?;
            if !v[k].is_finite() {
                return Err(bad(format!("{f:?} is not finite")));
            }
        }
        let [cx, cy, w, h] = v;
        if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
            return Err(bad(format!("box size {w}x{h} outside (0, 1]")));
        }
        let bbox = BBox::new(cx, cy, w, h).clipped();
        if bbox.area() <= 0.0 {
            return Err(bad("box lies outside the image".into()));
        }
        boxes.push(BoxAnnotation { class_id, bbox });
    }
    Ok(boxes)
}

fn decode_image(path: &Path, resize: Option<[usize; 2]>) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::artifact(path, e.to_string()))?;
    let mut rgb = img.to_rgb8();
    if let Some([h, w]) = resize {
        if rgb.height() as usize != h || rgb.width() as usize != w {
            rgb = image::imageops::resize(&rgb, w as u32, h as u32, image::imageops::FilterType::Triangle);
        }
    }
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if h % SIZE_DIVISOR != 0 || w % SIZE_DIVISOR != 0 {
        return Err(Error::artifact(
            path,
            format!("image is {h}x{w}; sides must be multiples of {SIZE_DIVISOR} (pass a resize)"),
        ));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data)?)
}

/// Loads one split from a dataset root in lexicographic id order. Images
/// without a label file are skipped with a warning.
pub fn load_dataset(root: &Path, split: Split, domain: Domain, resize: Option<[usize; 2]>) -> Result<Vec<ImageSample>> {
    let img_dir = root.join("images").join(split.as_str());
    let label_dir = root.join("labels").join(split.as_str());
    let entries = fs::read_dir(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&img_dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            files.push(path);
        }
    }
    files.sort();
    let mut samples = Vec::with_capacity(files.len());
    for path in files {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::artifact(&path, "non UTF-8 file name"))?
            .to_string();
        let label_path = label_dir.join(format!("{id}.txt"));
        let text = match fs::read_to_string(&label_path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                warn!("skipping {}: no label file {}", path.display(), label_path.display());
                continue;
            }
            Err(e) => return Err(Error::io(&label_path, e)),
        };
        let boxes = parse_labels(&text, &label_path)?;
        samples.push(ImageSample {
            id,
            pixels: decode_image(&path, resize)?,
            boxes,
            domain,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            n_train: 6,
            n_test: 2,
            image_size: [64, 64],
            objects_per_image: [1, 3],
            seed: 11,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn render_is_deterministic() {
        let spec = small_spec();
        let a = render_scene(&spec, 3).unwrap();
        let b = render_scene(&spec, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.pixels, render_scene(&spec, 4).unwrap().pixels);
        assert_eq!(a.domain, Domain::Clear);
    }

    #[test]
    fn single_object_config_gives_one_box() {
        let spec = DatasetSpec {
            objects_per_image: [1, 1],
            ..small_spec()
        };
        for i in 0..spec.total() {
            assert_eq!(render_scene(&spec, i).unwrap().boxes.len(), 1);
        }
    }

    #[test]
    fn boxes_inside_and_pixels_in_range() {
        let spec = small_spec();
        for i in 0..spec.total() {
            let s = render_scene(&spec, i).unwrap();
            assert!(s.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for b in &s.boxes {
                let (x1, y1, x2, y2) = b.bbox.corners();
                assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0, "{b:?}");
                assert!(b.bbox.w > 0.0 && b.bbox.h > 0.0);
            }
        }
    }

    #[test]
    fn every_class_appears_over_200_images() {
        let spec = DatasetSpec {
            n_train: 150,
            n_test: 50,
            ..small_spec()
        };
        let mut counts = [0usize; 4];
        for i in 0..spec.total() {
            for b in render_scene(&spec, i).unwrap().boxes {
                counts[b.class_id] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small_spec();
        s.image_size = [60, 64];
        assert!(matches!(render_scene(&s, 0), Err(Error::Config(_))));
        let mut s = small_spec();
        s.classes.clear();
        assert!(matches!(render_scene(&s, 0), Err(Error::Config(_))));
        assert!(render_scene(&small_spec(), 8).is_err());
    }

    #[test]
    fn identity_degradation_is_exact() {
        let s = render_scene(&small_spec(), 0).unwrap();
        let d = degrade(&s, &DegradationParams::identity()).unwrap();
        assert_eq!(d.pixels, s.pixels);
        assert_eq!(d.boxes, s.boxes);
        assert_eq!(d.domain, Domain::Underwater);
    }

    #[test]
    fn attenuation_matches_hand_value() {
        // J = 1, beta_R = depth = 1, A_R = 0.2: e⁻¹ + 0.2(1 − e⁻¹)
        let expect = (-1.0f64).exp() + 0.2 * (1.0 - (-1.0f64).exp());
        assert!((expect - 0.4943).abs() < 1e-4);
        let img = ImageSample {
            id: "x".into(),
            pixels: Tensor::full(&[3, 32, 32], 1.0),
            boxes: vec![],
            domain: Domain::Clear,
        };
        let p = DegradationParams {
            beta: [1.0, 0.0, 0.0],
            depth: 1.0,
            ambient: [0.2, 0.0, 0.0],
            ..DegradationParams::identity()
        };
        let out = degrade(&img, &p).unwrap();
        assert!((out.pixels.data()[0] as f64 - expect).abs() < 1e-6);
        assert_eq!(out.pixels.data()[32 * 32], 1.0);
    }

    #[test]
    fn deep_water_converges_to_ambient() {
        let s = render_scene(&small_spec(), 1).unwrap();
        let p = DegradationParams {
            beta: [1.0, 1.0, 1.0],
            depth: 60.0,
            ambient: [0.1, 0.4, 0.6],
            ..DegradationParams::identity()
        };
        let d = degrade(&s, &p).unwrap();
        let hw = 64 * 64;
        for c in 0..3 {
            for v in &d.pixels.data()[c * hw..(c + 1) * hw] {
                assert!((*v as f64 - p.ambient[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn degradation_stays_in_range_and_keeps_boxes() {
        let s = render_scene(&small_spec(), 2).unwrap();
        let p = DegradationParams {
            noise_sigma: 0.5,
            blur_sigma: 2.0,
            ..DegradationParams::underwater()
        };
        let d = degrade(&s, &p).unwrap();
        assert!(d.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(d.boxes, s.boxes);
        assert_eq!(degrade(&s, &p).unwrap(), d);
    }

    #[test]
    fn bad_degradation_params() {
        let s = render_scene(&small_spec(), 0).unwrap();
        let mut p = DegradationParams::identity();
        p.beta[1] = -0.1;
        assert!(matches!(degrade(&s, &p), Err(Error::Config(_))));
        let mut p = DegradationParams::identity();
        p.depth = -1.0;
        assert!(matches!(degrade(&s, &p), Err(Error::Config(_))));
        let u = degrade(&s, &DegradationParams::identity()).unwrap();
        assert!(matches!(degrade(&u, &DegradationParams::identity()), Err(Error::Contract(_))));
    }

    #[test]
    fn label_parsing() {
        let f = Path::new("x.txt");
        assert!(parse_labels("", f).unwrap().is_empty());
        let b = parse_labels("2 0.5 0.5 0.25 0.25\n", f).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].class_id, 2);
        assert_eq!(b[0].bbox, BBox::new(0.5, 0.5, 0.25, 0.25));
        match parse_labels("0 0.5 0.5 0.1 0.1\n1 0.5 0.5 0.1\n", f) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_labels("-1 0.5 0.5 0.1 0.1", f).is_err());
        assert!(parse_labels("0 0.5 0.5 0 0.1", f).is_err());
        let clipped = parse_labels("0 0.95 0.5 0.2 0.2", f).unwrap();
        assert!((clipped[0].bbox.w - 0.15).abs() < 1e-12);
    }
}
