//! Procedural segmentation domains.
//!
//! A sample is a score field over the image (higher means "more
//! foreground") thresholded at the quantile that yields a drawn target
//! area, so the foreground fraction always lands inside the domain's
//! range. Colour comes from the palette, a texture pattern, per-sample
//! colour jitter and pixel noise.

use std::f64::consts::PI;
use std::path::Path;

use mpa_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dmp::{Episode, Sample};
use crate::error::{MpaError, Result};

pub const DEFAULT_IMAGE_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    pub fg: [f64; 3],
    pub bg: [f64; 3],
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Half-width of the per-sample colour shift shared by fg and bg.
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Flat,
    PerlinLike,
    Stripes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Blob,
    Ring,
    MultiBlob,
    ThinStructure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub palette: Palette,
    pub texture: Texture,
    /// Amplitude of the texture pattern added to both regions.
    #[serde(default = "default_texture_amplitude")]
    pub texture_amplitude: f64,
    pub shape_family: ShapeFamily,
    pub fg_area_range: [f64; 2],
    pub rng_seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default)]
    pub domain_id: u32,
}

fn default_texture_amplitude() -> f64 {
    0.15
}

fn default_image_size() -> usize {
    DEFAULT_IMAGE_SIZE
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.fg_area_range;
        if !(0.02 < lo && lo < hi && hi < 0.8) {
            return Err(MpaError::config(format!(
                "{}: fg_area_range {:?} must satisfy 0.02 < lo < hi < 0.8",
                self.name, self.fg_area_range
            )));
        }
        let unit = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !unit(&self.palette.fg) || !unit(&self.palette.bg) {
            return Err(MpaError::config(format!("{}: palette colours must lie in [0,1]", self.name)));
        }
        let p = &self.palette;
        if !(p.noise >= 0.0 && p.noise.is_finite() && p.jitter >= 0.0 && p.jitter.is_finite()) {
            return Err(MpaError::config(format!("{}: noise and jitter must be non-negative", self.name)));
        }
        if !(self.texture_amplitude >= 0.0 && self.texture_amplitude.is_finite()) {
            return Err(MpaError::config(format!("{}: texture amplitude must be non-negative", self.name)));
        }
        if self.image_size < 16 {
            return Err(MpaError::config(format!("{}: image size {} below 16", self.name, self.image_size)));
        }
        let n = (self.image_size * self.image_size) as f64;
        if (hi * n).floor() < (lo * n).ceil() {
            return Err(MpaError::config(format!("{}: area range admits no pixel count", self.name)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: DomainSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample {
    /// 3×H×W in [0,1].
    pub image: Tensor<f64>,
    /// H×W, 0 or 1.
    pub mask: Tensor<f64>,
    pub domain_id: u32,
    pub category_id: u32,
}

impl GeneratedSample {
    pub fn fg_fraction(&self) -> f64 {
        self.mask.sum() / self.mask.numel() as f64
    }

    pub fn into_sample(self) -> Sample {
        Sample { image: self.image, mask: self.mask }
    }
}

/// Combines two seeds into a well-mixed one.
pub fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(a << 6).wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Shape parameters of one category.
struct Family {
    lobes: usize,
    wobble: f64,
    elongation: f64,
    parts: usize,
}

fn family(shape: ShapeFamily, category: u32) -> Family {
    let c = category as usize;
    Family {
        lobes: 2 + c % 4,
        wobble: 0.08 + 0.05 * (c % 3) as f64,
        elongation: 1.0 + 0.3 * ((c / 3) % 3) as f64,
        parts: match shape {
            ShapeFamily::MultiBlob => 2 + c % 3,
            ShapeFamily::Ring => 1 + c % 2,
            _ => 1,
        },
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
    elongation: f64,
    harmonics: Vec<(usize, f64, f64)>,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, f: &Family, spread: f64) -> Self {
        Blob {
            cx: 0.5 + rng.gen_range(-spread..=spread),
            cy: 0.5 + rng.gen_range(-spread..=spread),
            radius: rng.gen_range(0.15..0.3),
            angle: rng.gen_range(0.0..PI),
            elongation: f.elongation * rng.gen_range(0.85..1.15),
            harmonics: (2..2 + f.lobes).map(|k| (k, f.wobble * rng.gen_range(0.3..1.0), rng.gen_range(0.0..2.0 * PI))).collect(),
        }
    }

    /// Normalised radial distance: 1 on the (wobbly) boundary.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = (dx * c + dy * s) / self.elongation;
        let v = -dx * s + dy * c;
        let theta = v.atan2(u);
        let r = self.radius * (1.0 + self.harmonics.iter().map(|&(k, a, p)| a * (k as f64 * theta + p).cos()).sum::<f64>());
        (u * u + v * v).sqrt() / r.max(1e-3)
    }
}

fn score_field(shape: ShapeFamily, f: &Family, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let coords = |i: usize| ((i % size) as f64 + 0.5) / size as f64;
    let row = |i: usize| ((i / size) as f64 + 0.5) / size as f64;
    let n = size * size;
    match shape {
        ShapeFamily::Blob => {
            let b = Blob::random(rng, f, 0.12);
            (0..n).map(|i| -b.rho(coords(i), row(i))).collect()
        }
        ShapeFamily::MultiBlob => {
            let blobs: Vec<Blob> = (0..f.parts).map(|_| Blob::random(rng, f, 0.3)).collect();
            (0..n).map(|i| blobs.iter().map(|b| -b.rho(coords(i), row(i))).fold(f64::MIN, f64::max)).collect()
        }
        ShapeFamily::Ring => {
            // one ring, or a left/right pair of lobes
            let blobs: Vec<Blob> = if f.parts == 1 {
                vec![Blob::random(rng, f, 0.08)]
            } else {
                let mut l = Blob::random(rng, f, 0.05);
                let mut r = Blob::random(rng, f, 0.05);
                l.cx = 0.3 + rng.gen_range(-0.04..0.04);
                r.cx = 0.7 + rng.gen_range(-0.04..0.04);
                l.angle = PI / 2.0;
                r.angle = PI / 2.0;
                vec![l, r]
            };
            let r0 = rng.gen_range(0.6..0.8);
            (0..n)
                .map(|i| blobs.iter().map(|b| -(b.rho(coords(i), row(i)) - r0).abs()).fold(f64::MIN, f64::max))
                .collect()
        }
        ShapeFamily::ThinStructure => {
            // distance to a few sinusoidal curves across the image
            let curves: Vec<(f64, f64, f64, f64, bool)> = (0..1 + f.lobes / 2)
                .map(|_| {
                    (
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.05..0.15),
                        rng.gen_range(1.0..3.0) * PI,
                        rng.gen_range(0.0..2.0 * PI),
                        rng.gen_bool(0.5),
                    )
                })
                .collect();
            (0..n)
                .map(|i| {
                    let (x, y) = (coords(i), row(i));
                    curves
                        .iter()
                        .map(|&(off, amp, freq, phase, vertical)| {
                            let (a, b) = if vertical { (y, x) } else { (x, y) };
                            -(b - (off + amp * (freq * a + phase).sin())).abs()
                        })
                        .fold(f64::MIN, f64::max)
                })
                .collect()
        }
    }
}

/// Zero-mean pattern in roughly [-1, 1].
fn texture_field(texture: Texture, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = size * size;
    match texture {
        Texture::Flat => vec![0.0; n],
        Texture::Stripes => {
            let angle = rng.gen_range(0.0..PI);
            let freq = rng.gen_range(6.0..14.0) * PI;
            let phase = rng.gen_range(0.0..2.0 * PI);
            (0..n)
                .map(|i| {
                    let (x, y) = ((i % size) as f64 / size as f64, (i / size) as f64 / size as f64);
                    (freq * (x * angle.cos() + y * angle.sin()) + phase).sin()
                })
                .collect()
        }
        Texture::PerlinLike => {
            // value noise: bilinear interpolation of random lattices, three octaves
            let mut out = vec![0.0; n];
            let mut amp = 0.6;
            for cells in [4usize, 8, 16] {
                let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
                for (i, o) in out.iter_mut().enumerate() {
                    let gx = (i % size) as f64 / size as f64 * cells as f64;
                    let gy = (i / size) as f64 / size as f64 * cells as f64;
                    let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
                    let (tx, ty) = (gx - x0 as f64, gy - y0 as f64);
                    let at = |x: usize, y: usize| lattice[y * (cells + 1) + x];
                    let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
                    let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
                    *o += amp * (top * (1.0 - ty) + bottom * ty);
                }
                amp *= 0.5;
            }
            out
        }
    }
}

/// Pixel count for a drawn area fraction, kept inside the range.
fn target_count(range: [f64; 2], n: usize, rng: &mut ChaCha8Rng) -> usize {
    let lo = (range[0] * n as f64).ceil() as usize;
    let hi = (range[1] * n as f64).floor() as usize;
    let want = (rng.gen_range(range[0]..range[1]) * n as f64).round() as usize;
    want.clamp(lo, hi)
}

/// Deterministic sample of one category of a domain.
pub fn gen_sample(spec: &DomainSpec, category_id: u32, seed: u64) -> Result<GeneratedSample> {
    spec.validate()?;
    let size = spec.image_size;
    let n = size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(spec.rng_seed, u64::from(category_id)), seed));
    let fam = family(spec.shape_family, category_id);

    let scores = score_field(spec.shape_family, &fam, size, &mut rng);
    let count = target_count(spec.fg_area_range, n, &mut rng);
    // rank pixels by score; index order breaks ties
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![0.0; n];
    for &i in &order[..count] {
        mask[i] = 1.0;
    }

    let p = &spec.palette;
    let shift = rng.gen_range(-1.0..=1.0) * p.jitter;
    let tint: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..=0.5) * p.jitter).collect();
    let tex = texture_field(spec.texture, size, &mut rng);
    let noise = Normal::new(0.0, p.noise.max(0.0)).map_err(|e| MpaError::config(e.to_string()))?;
    let mut image = vec![0.0; 3 * n];
    for c in 0..3 {
        for i in 0..n {
            let base = if mask[i] == 1.0 { p.fg[c] } else { p.bg[c] };
            let eps = if p.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let v = base + shift + tint[c] + spec.texture_amplitude * tex[i] + eps;
            image[c * n + i] = v.clamp(0.0, 1.0);
        }
    }
    Ok(GeneratedSample {
        image: Tensor::new(vec![3, size, size], image)?,
        mask: Tensor::new(vec![size, size], mask)?,
        domain_id: spec.domain_id,
        category_id,
    })
}

/// Seed of the `index`-th sample of an episode.
pub fn episode_sample_seed(seed: u64, index: usize) -> u64 {
    mix(seed, 0x00e9_15de ^ index as u64)
}

/// `k` supports and `n_eval` held-out queries from distinct sample seeds.
///
/// Queries take the first seeds and supports the following ones, so
/// episodes that differ only in `k` share their queries and the smaller
/// support set is a prefix of the larger.
pub fn sample_episode(spec: &DomainSpec, category_id: u32, k: usize, n_eval: usize, seed: u64) -> Result<Episode> {
    if k == 0 || n_eval == 0 {
        return Err(MpaError::invalid("episodes need at least one support and one query"));
    }
    let mut seeds: Vec<u64> = Vec::with_capacity(k + n_eval);
    let mut index = 0;
    while seeds.len() < k + n_eval {
        let s = episode_sample_seed(seed, index);
        if !seeds.contains(&s) {
            seeds.push(s);
        }
        index += 1;
    }
    let samples = seeds
        .iter()
        .map(|&s| gen_sample(spec, category_id, s).map(GeneratedSample::into_sample))
        .collect::<Result<Vec<_>>>()?;
    let (queries, supports) = samples.split_at(n_eval);
    Ok(Episode {
        supports: supports.to_vec(),
        eval_queries: queries.to_vec(),
        category_id,
        domain_id: spec.domain_id,
    })
}

/// The five built-in domains.
pub fn preset_domains() -> Vec<DomainSpec> {
    let spec = |id: u32, name: &str, palette, texture, amp, shape, range| DomainSpec {
        name: name.to_string(),
        palette,
        texture,
        texture_amplitude: amp,
        shape_family: shape,
        fg_area_range: range,
        rng_seed: 0x5eed_0000 + u64::from(id),
        image_size: DEFAULT_IMAGE_SIZE,
        domain_id: id,
    };
    vec![
        spec(
            0,
            "aerial-like",
            Palette { fg: [0.35, 0.45, 0.25], bg: [0.5, 0.45, 0.35], noise: 0.06, jitter: 0.15 },
            Texture::Stripes,
            0.12,
            ShapeFamily::MultiBlob,
            [0.1, 0.5],
        ),
        spec(
            1,
            "lesion-like",
            Palette { fg: [0.55, 0.38, 0.3], bg: [0.78, 0.6, 0.52], noise: 0.05, jitter: 0.2 },
            Texture::Flat,
            0.0,
            ShapeFamily::Blob,
            [0.25, 0.6],
        ),
        spec(
            2,
            "xray-like",
            Palette { fg: [0.3, 0.3, 0.3], bg: [0.55, 0.55, 0.55], noise: 0.06, jitter: 0.15 },
            Texture::PerlinLike,
            0.1,
            ShapeFamily::Ring,
            [0.1, 0.4],
        ),
        spec(
            3,
            "objects-like",
            Palette { fg: [0.7, 0.35, 0.3], bg: [0.45, 0.5, 0.55], noise: 0.05, jitter: 0.15 },
            Texture::PerlinLike,
            0.12,
            ShapeFamily::Blob,
            [0.03, 0.12],
        ),
        spec(
            4,
            "underwater-like",
            Palette { fg: [0.3, 0.6, 0.5], bg: [0.15, 0.35, 0.55], noise: 0.06, jitter: 0.15 },
            Texture::PerlinLike,
            0.12,
            ShapeFamily::ThinStructure,
            [0.05, 0.25],
        ),
    ]
}

pub fn preset(name: &str) -> Option<DomainSpec> {
    preset_domains().into_iter().find(|d| d.name == name)
}

/// Writes a 3×H×W image in [0,1] as an 8-bit RGB PNG.
pub fn write_image_png(path: &Path, image: &Tensor<f64>) -> Result<()> {
    let [3, h, w] = *image.shape() else {
        return Err(MpaError::invalid(format!("expected 3×H×W image, got {:?}", image.shape())));
    };
    let n = h * w;
    let d = image.data();
    let bytes: Vec<u8> = (0..n).flat_map(|i| (0..3).map(move |c| to_byte(d[c * n + i]))).collect();
    write_png(path, w, h, png::ColorType::Rgb, &bytes)
}

/// Writes an H×W mask in [0,1] as an 8-bit grayscale PNG.
pub fn write_mask_png(path: &Path, mask: &Tensor<f64>) -> Result<()> {
    let [h, w] = *mask.shape() else {
        return Err(MpaError::invalid(format!("expected H×W mask, got {:?}", mask.shape())));
    };
    let bytes: Vec<u8> = mask.data().iter().map(|&v| to_byte(v)).collect();
    write_png(path, w, h, png::ColorType::Grayscale, &bytes)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(bytes)?;
    writer.finish()?;
    Ok(())
}
