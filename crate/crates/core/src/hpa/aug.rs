//! Individual augmentation ops on (image, mask) pairs.
//!
//! Images are 3×H×W in [0,1]; masks are H×W. Geometric ops are pixel
//! permutations applied identically to image and mask. Photometric ops
//! leave the mask alone.

use mpa_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MpaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    Hflip,
    Vflip,
    Rot90,
    Brightness,
    Hue,
    GridShuffle,
}

impl AugKind {
    pub const ALL: [AugKind; 6] =
        [AugKind::Hflip, AugKind::Vflip, AugKind::Rot90, AugKind::Brightness, AugKind::Hue, AugKind::GridShuffle];

    pub fn is_geometric(self) -> bool {
        !self.is_photometric()
    }

    pub fn is_photometric(self) -> bool {
        matches!(self, AugKind::Brightness | AugKind::Hue)
    }

    /// Position class for ordering within a chain: flips and rotation,
    /// then colour, then grid shuffle.
    pub fn stage(self) -> u8 {
        match self {
            AugKind::Hflip | AugKind::Vflip | AugKind::Rot90 => 0,
            AugKind::Brightness | AugKind::Hue => 1,
            AugKind::GridShuffle => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugKind::Hflip => "hflip",
            AugKind::Vflip => "vflip",
            AugKind::Rot90 => "rot90",
            AugKind::Brightness => "brightness",
            AugKind::Hue => "hue",
            AugKind::GridShuffle => "grid_shuffle",
        }
    }
}

/// One parameterised augmentation.
///
/// `magnitude` is the brightness delta, the hue shift in degrees, or the
/// number of grid cells per side; flips and rotation ignore it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugOp {
    pub kind: AugKind,
    pub magnitude: f64,
    pub seed: u64,
}

impl AugOp {
    pub fn new(kind: AugKind, magnitude: f64, seed: u64) -> Self {
        AugOp { kind, magnitude, seed }
    }

    pub fn grid_cells(&self) -> usize {
        (self.magnitude.round().max(1.0)) as usize
    }
}

/// Destination→source pixel map of a geometric op on an `h×w` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMap {
    pub h: usize,
    pub w: usize,
    /// `source[dst]` is the flat source index feeding `dst`.
    pub source: Vec<usize>,
}

impl PixelMap {
    pub fn identity(h: usize, w: usize) -> Self {
        PixelMap { h, w, source: (0..h * w).collect() }
    }

    /// Map of applying `self` first and then `next`.
    pub fn then(&self, next: &PixelMap) -> PixelMap {
        PixelMap { h: next.h, w: next.w, source: next.source.iter().map(|&s| self.source[s]).collect() }
    }

    pub fn apply_plane(&self, plane: &[f64]) -> Vec<f64> {
        self.source.iter().map(|&s| plane[s]).collect()
    }

    pub fn apply_mask(&self, mask: &Tensor<f64>) -> Tensor<f64> {
        Tensor::new(vec![self.h, self.w], self.apply_plane(mask.data())).expect("map covers grid")
    }

    pub fn apply_image(&self, image: &Tensor<f64>) -> Tensor<f64> {
        let c = image.shape()[0];
        let n = image.numel() / c;
        let mut out = Vec::with_capacity(c * self.source.len());
        for ch in 0..c {
            out.extend(self.apply_plane(&image.data()[ch * n..(ch + 1) * n]));
        }
        Tensor::new(vec![c, self.h, self.w], out).expect("map covers grid")
    }

    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.source.len()];
        self.source.iter().all(|&s| s < seen.len() && !std::mem::replace(&mut seen[s], true))
    }
}

/// Pixel map for a geometric op; `None` for photometric ops.
pub fn pixel_map(op: &AugOp, h: usize, w: usize) -> Option<PixelMap> {
    let map = match op.kind {
        AugKind::Brightness | AugKind::Hue => return None,
        AugKind::Hflip => PixelMap {
            h,
            w,
            source: (0..h * w).map(|d| (d / w) * w + (w - 1 - d % w)).collect(),
        },
        AugKind::Vflip => PixelMap {
            h,
            w,
            source: (0..h * w).map(|d| (h - 1 - d / w) * w + d % w).collect(),
        },
        // counter-clockwise: new[y][x] = old[x][w-1-y], output is w×h
        AugKind::Rot90 => PixelMap {
            h: w,
            w: h,
            source: (0..h * w)
                .map(|d| {
                    let (y, x) = (d / h, d % h);
                    x * w + (w - 1 - y)
                })
                .collect(),
        },
        AugKind::GridShuffle => grid_shuffle_map(op.grid_cells(), op.seed, h, w),
    };
    Some(map)
}

/// Permutes the `cells×cells` blocks of the largest evenly divisible
/// top-left region; leftover rows and columns stay in place.
fn grid_shuffle_map(cells: usize, seed: u64, h: usize, w: usize) -> PixelMap {
    let (bh, bw) = (h / cells.max(1), w / cells.max(1));
    if cells < 2 || bh == 0 || bw == 0 {
        return PixelMap::identity(h, w);
    }
    let mut order: Vec<usize> = (0..cells * cells).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut source: Vec<usize> = (0..h * w).collect();
    for (dst_block, &src_block) in order.iter().enumerate() {
        let (dy, dx) = (dst_block / cells * bh, dst_block % cells * bw);
        let (sy, sx) = (src_block / cells * bh, src_block % cells * bw);
        for y in 0..bh {
            for x in 0..bw {
                source[(dy + y) * w + dx + x] = (sy + y) * w + sx + x;
            }
        }
    }
    PixelMap { h, w, source }
}

fn check_pair(image: &Tensor<f64>, mask: &Tensor<f64>) -> Result<(usize, usize)> {
    let [3, h, w] = *image.shape() else {
        return Err(MpaError::invalid(format!("image must be 3×H×W, got {:?}", image.shape())));
    };
    if mask.shape() != [h, w] {
        return Err(MpaError::invalid(format!("mask {:?} does not match image {h}×{w}", mask.shape())));
    }
    Ok((h, w))
}

/// Applies one op to an image/mask pair.
pub fn apply_aug(image: &Tensor<f64>, mask: &Tensor<f64>, op: &AugOp) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let (h, w) = check_pair(image, mask)?;
    if let Some(map) = pixel_map(op, h, w) {
        return Ok((map.apply_image(image), map.apply_mask(mask)));
    }
    let out = match op.kind {
        AugKind::Brightness => image.map(|v| (v + op.magnitude).clamp(0.0, 1.0)),
        AugKind::Hue => shift_hue(image, op.magnitude),
        _ => unreachable!("geometric ops handled above"),
    };
    Ok((out, mask.clone()))
}

fn shift_hue(image: &Tensor<f64>, degrees: f64) -> Tensor<f64> {
    let n = image.numel() / 3;
    let d = image.data();
    let mut out = vec![0.0; 3 * n];
    for p in 0..n {
        let (hue, s, v) = rgb_to_hsv(d[p], d[n + p], d[2 * n + p]);
        let (r, g, b) = hsv_to_rgb((hue + degrees).rem_euclid(360.0), s, v);
        out[p] = r.clamp(0.0, 1.0);
        out[n + p] = g.clamp(0.0, 1.0);
        out[2 * n + p] = b.clamp(0.0, 1.0);
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// Hue in degrees [0, 360), saturation and value in [0, 1].
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (hue, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> (Tensor<f64>, Tensor<f64>) {
        let img = Tensor::from_fn(&[3, h, w], |i| ((i * 37) % 101) as f64 / 100.0);
        let mask = Tensor::from_fn(&[h, w], |i| ((i * 13) % 7 < 3) as u8 as f64);
        (img, mask)
    }

    #[test]
    fn hflip_is_an_involution() {
        let (img, mask) = sample(6, 8);
        let op = AugOp::new(AugKind::Hflip, 0.0, 0);
        let (i1, m1) = apply_aug(&img, &mask, &op).unwrap();
        assert_ne!(i1, img);
        let (i2, m2) = apply_aug(&i1, &m1, &op).unwrap();
        assert_eq!((i2, m2), (img, mask));
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let (img, mask) = sample(4, 6);
        let op = AugOp::new(AugKind::Rot90, 0.0, 0);
        let (mut i, mut m) = (img.clone(), mask.clone());
        for step in 0..4 {
            (i, m) = apply_aug(&i, &m, &op).unwrap();
            let want = if step % 2 == 0 { [3, 6, 4] } else { [3, 4, 6] };
            assert_eq!(i.shape(), &want);
        }
        assert_eq!((i, m), (img, mask));
    }

    #[test]
    fn brightness_clamps_and_keeps_mask() {
        let mut img = Tensor::full(&[3, 2, 2], 0.5);
        img.data_mut()[0] = 0.95;
        let mask = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let (out, m) = apply_aug(&img, &mask, &AugOp::new(AugKind::Brightness, 0.2, 0)).unwrap();
        assert_eq!(out.data()[0], 1.0);
        assert!((out.data()[1] - 0.7).abs() < 1e-15);
        assert_eq!(m, mask);
    }

    #[test]
    fn hue_shift_roundtrips_and_preserves_gray() {
        let img = Tensor::from_f64(&[3, 1, 2], &[0.8, 0.4, 0.2, 0.4, 0.1, 0.4]).unwrap();
        let mask = Tensor::zeros(&[1, 2]);
        let (a, _) = apply_aug(&img, &mask, &AugOp::new(AugKind::Hue, 25.0, 0)).unwrap();
        let (b, _) = apply_aug(&a, &mask, &AugOp::new(AugKind::Hue, -25.0, 0)).unwrap();
        for (x, y) in img.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        // pixel 1 is gray: unaffected by hue
        assert!((a.data()[1] - 0.4).abs() < 1e-12 && (a.data()[3] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn hsv_roundtrip_on_primaries() {
        for (r, g, b) in [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (0.3, 0.6, 0.9), (0.5, 0.5, 0.5)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_shuffle_is_a_seeded_permutation_even_when_indivisible() {
        for (h, w, cells) in [(32, 32, 2), (32, 32, 3), (32, 32, 4), (10, 7, 3), (2, 2, 4)] {
            let op = AugOp::new(AugKind::GridShuffle, cells as f64, 99);
            let map = pixel_map(&op, h, w).unwrap();
            assert!(map.is_permutation(), "{h}×{w} cells {cells}");
            assert_eq!(map, pixel_map(&op, h, w).unwrap());
        }
    }

    #[test]
    fn grid_shuffle_moves_whole_blocks_identically_in_image_and_mask() {
        let (img, mask) = sample(8, 8);
        let op = AugOp::new(AugKind::GridShuffle, 2.0, 5);
        let (i, m) = apply_aug(&img, &mask, &op).unwrap();
        let map = pixel_map(&op, 8, 8).unwrap();
        assert_eq!(m, map.apply_mask(&mask));
        assert_eq!(i, map.apply_image(&img));
        let s: f64 = m.sum();
        assert_eq!(s, mask.sum());
    }

    #[test]
    fn mismatched_mask_is_rejected() {
        let img = Tensor::zeros(&[3, 4, 4]);
        assert!(apply_aug(&img, &Tensor::zeros(&[4, 5]), &AugOp::new(AugKind::Hflip, 0.0, 0)).is_err());
    }
}
