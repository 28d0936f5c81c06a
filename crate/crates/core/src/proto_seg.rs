//! Prototype extraction and prototype-to-pixel mask prediction.
//!
//! A prototype pair is the masked average of the feature map over the
//! foreground and over the background. Predictions are a two-way softmax
//! of the per-pixel cosine similarity to each half.

use mpa_autodiff::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{MpaError, Result};

/// Default softmax temperature applied to cosine similarities.
pub const DEFAULT_TEMPERATURE: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrototypePair {
    pub fg: Var,
    pub bg: Var,
}

impl PrototypePair {
    pub fn swapped(self) -> Self {
        PrototypePair { fg: self.bg, bg: self.fg }
    }
}

/// Soft foreground/background probabilities and their argmax.
#[derive(Clone, Debug)]
pub struct PredictedMask {
    /// 2×h×w, channel 0 is foreground.
    pub probs: Var,
    /// h×w, 1 where foreground probability ≥ background (ties go to foreground).
    pub hard: Tensor<f64>,
}

/// Masked average pooling of `features` (C×h×w) under `mask` (h×w, in [0,1]).
///
/// The background half pools under `1 − mask`. A mask with no foreground
/// weight at all is rejected.
pub fn map_prototype<T: Real>(g: &Graph<T>, features: Var, mask: Var) -> Result<PrototypePair> {
    let fg_weight = g.with_value(mask, |m| m.sum())?;
    if !(fg_weight > T::zero()) {
        return Err(MpaError::DegenerateMask("mask has no foreground weight".into()));
    }
    let fg = g.masked_avg(features, mask)?;
    let inverse = g.affine(mask, -T::one(), T::one())?;
    let bg = g.masked_avg(features, inverse)?;
    Ok(PrototypePair { fg, bg })
}

/// Like [`map_prototype`] but total: an empty half is replaced by the
/// global average feature. Returns how many halves fell back.
pub fn map_prototype_or_global<T: Real>(g: &Graph<T>, features: Var, mask: Var) -> Result<(PrototypePair, usize)> {
    let (fg_w, bg_w, shape) = g.with_value(mask, |m| {
        let s = m.sum();
        let n = T::of(m.numel() as f64);
        (s, n - s, m.shape().to_vec())
    })?;
    let empty = |w: T| !(w > T::of(1e-6));
    if !empty(fg_w) && !empty(bg_w) {
        return Ok((map_prototype(g, features, mask)?, 0));
    }
    let global = g.masked_avg(features, g.constant(Tensor::ones(&shape)))?;
    let fg = if empty(fg_w) { global } else { g.masked_avg(features, mask)? };
    let bg = if empty(bg_w) {
        global
    } else {
        let inverse = g.affine(mask, -T::one(), T::one())?;
        g.masked_avg(features, inverse)?
    };
    Ok((PrototypePair { fg, bg }, usize::from(empty(fg_w)) + usize::from(empty(bg_w))))
}

pub fn predict_mask<T: Real>(g: &Graph<T>, features: Var, protos: PrototypePair, temperature: T) -> Result<PredictedMask> {
    let fg_sim = g.cosine_map(features, protos.fg)?;
    let bg_sim = g.cosine_map(features, protos.bg)?;
    let probs = g.fgbg_softmax(fg_sim, bg_sim, temperature)?;
    let hard = g.with_value(probs, hard_mask)?;
    Ok(PredictedMask { probs, hard })
}

fn hard_mask<T: Real>(probs: &Tensor<T>) -> Tensor<f64> {
    let hw = probs.numel() / 2;
    let (fg, bg) = probs.data().split_at(hw);
    let data = fg.iter().zip(bg).map(|(a, b)| if a >= b { 1.0 } else { 0.0 }).collect();
    Tensor::new(probs.shape()[1..].to_vec(), data).expect("2×h×w probabilities")
}

/// Confidence gating used when re-estimating prototypes from a prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SspConfig {
    /// Foreground pixels need probability above this.
    pub fg_threshold: f64,
    /// Background pixels need foreground probability below this.
    pub bg_threshold: f64,
    /// Pool under binary indicators instead of probability-weighted masks.
    /// In this mode foreground is `p ≥ fg_threshold`.
    pub hard_gating: bool,
}

impl Default for SspConfig {
    fn default() -> Self {
        SspConfig { fg_threshold: 0.7, bg_threshold: 0.3, hard_gating: false }
    }
}

impl SspConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |t: f64| (0.0..=1.0).contains(&t);
        if !ok(self.fg_threshold) || !ok(self.bg_threshold) || self.bg_threshold > self.fg_threshold {
            return Err(MpaError::config(format!(
                "SSP thresholds must satisfy 0 ≤ bg ({}) ≤ fg ({}) ≤ 1",
                self.bg_threshold, self.fg_threshold
            )));
        }
        Ok(())
    }
}

/// Result of a self-support refinement.
#[derive(Clone, Debug)]
pub struct Refined {
    pub protos: PrototypePair,
    /// The initial prediction that drove the gating.
    pub initial: PredictedMask,
    pub fg_fallback: bool,
    pub bg_fallback: bool,
}

impl Refined {
    pub fn fallbacks(&self) -> usize {
        usize::from(self.fg_fallback) + usize::from(self.bg_fallback)
    }
}

/// Self-support prototype refinement.
///
/// Predicts the target features with `guide`, keeps the confidently
/// classified pixels and pools new prototypes from the target's own
/// features over them. A gate that selects nothing keeps the guide's half.
pub fn ssp_refine<T: Real>(
    g: &Graph<T>,
    features: Var,
    guide: PrototypePair,
    temperature: T,
    cfg: &SspConfig,
) -> Result<Refined> {
    let initial = predict_mask(g, features, guide, temperature)?;
    let probs = g.value(initial.probs)?;
    let hw = probs.numel() / 2;
    let spatial = probs.shape()[1..].to_vec();
    let fg_p = &probs.data()[..hw];

    let (fg_thr, bg_thr) = (T::of(cfg.fg_threshold), T::of(cfg.bg_threshold));
    let fg_gate: Vec<T> = fg_p
        .iter()
        .map(|&p| {
            let keep = if cfg.hard_gating { p >= fg_thr } else { p > fg_thr };
            if keep {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    let bg_gate: Vec<T> = fg_p.iter().map(|&p| if p < bg_thr { T::one() } else { T::zero() }).collect();
    let fg_gate = Tensor::new(spatial.clone(), fg_gate)?;
    let bg_gate = Tensor::new(spatial, bg_gate)?;

    let pool = |gate: &Tensor<T>, channel: usize, fallback: Var| -> Result<(Var, bool)> {
        if gate.sum() == T::zero() {
            return Ok((fallback, true));
        }
        let mask = if cfg.hard_gating {
            g.constant(gate.clone())
        } else {
            let p = g.channel(initial.probs, channel)?;
            g.mul_const(p, gate)?
        };
        Ok((g.masked_avg(features, mask)?, false))
    };
    let (fg, fg_fallback) = pool(&fg_gate, 0, guide.fg)?;
    let (bg, bg_fallback) = pool(&bg_gate, 1, guide.bg)?;
    Ok(Refined { protos: PrototypePair { fg, bg }, initial, fg_fallback, bg_fallback })
}

/// Elementwise mean of several prototype pairs; a single pair is returned as is.
pub fn average_prototypes<T: Real>(g: &Graph<T>, pairs: &[PrototypePair]) -> Result<PrototypePair> {
    match pairs {
        [] => Err(MpaError::invalid("cannot average zero prototypes")),
        [single] => Ok(*single),
        _ => {
            let inv = T::one() / T::of(pairs.len() as f64);
            let fgs: Vec<Var> = pairs.iter().map(|p| p.fg).collect();
            let bgs: Vec<Var> = pairs.iter().map(|p| p.bg).collect();
            let fg = g.add_all(&fgs)?.expect("non-empty");
            let bg = g.add_all(&bgs)?.expect("non-empty");
            Ok(PrototypePair { fg: g.scale(fg, inv)?, bg: g.scale(bg, inv)? })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(c: usize, h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[c, h, w], |i| f(i / (h * w), i % (h * w)))
    }

    #[test]
    fn all_ones_mask_gives_global_average() {
        let g = Graph::<f64>::new();
        let f = features(3, 2, 2, |c, p| (c * 4 + p) as f64);
        let fv = g.constant(f.clone());
        let pair = map_prototype(&g, fv, g.constant(Tensor::ones(&[2, 2]))).unwrap();
        let fg = g.value(pair.fg).unwrap();
        for c in 0..3 {
            let avg = (0..4).map(|p| f.data()[c * 4 + p]).sum::<f64>() / 4.0;
            assert!((fg.data()[c] - avg).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_mask_selects_pixel() {
        let g = Graph::<f64>::new();
        let f = features(4, 3, 3, |c, p| ((c + 1) * (p + 2)) as f64 * 0.1);
        let mut m = Tensor::zeros(&[3, 3]);
        m.data_mut()[5] = 1.0;
        let pair = map_prototype(&g, g.constant(f.clone()), g.constant(m)).unwrap();
        let fg = g.value(pair.fg).unwrap();
        for c in 0..4 {
            assert!((fg.data()[c] - f.data()[c * 9 + 5]).abs() < 1e-12);
        }
    }

    #[test]
    fn all_zero_mask_is_degenerate() {
        let g = Graph::<f64>::new();
        let f = g.constant(Tensor::ones(&[2, 2, 2]));
        let r = map_prototype(&g, f, g.constant(Tensor::zeros(&[2, 2])));
        assert!(matches!(r, Err(MpaError::DegenerateMask(_))));
    }

    #[test]
    fn fallback_variant_uses_global_average_for_empty_halves() {
        let g = Graph::<f64>::new();
        let f = features(2, 2, 2, |c, p| (c + p) as f64);
        let fv = g.constant(f);
        let (pair, n) = map_prototype_or_global(&g, fv, g.constant(Tensor::ones(&[2, 2]))).unwrap();
        assert_eq!(n, 1);
        assert_eq!(g.value(pair.fg).unwrap(), g.value(pair.bg).unwrap());
        let (_, n) = map_prototype_or_global(&g, fv, g.constant(Tensor::zeros(&[2, 2]))).unwrap();
        assert_eq!(n, 1);
    }

    #[test]
    fn constant_features_equal_to_fg_with_orthogonal_bg() {
        let g = Graph::<f64>::new();
        let f = features(2, 2, 3, |c, _| if c == 0 { 2.0 } else { 0.0 });
        let pair = PrototypePair {
            fg: g.constant(Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap()),
            bg: g.constant(Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap()),
        };
        let t = 20.0;
        let pred = predict_mask(&g, g.constant(f), pair, t).unwrap();
        let probs = g.value(pred.probs).unwrap();
        let want = 1.0 / (1.0 + (-t).exp());
        for &p in &probs.data()[..6] {
            assert!((p - want).abs() < 1e-14);
        }
        assert!(pred.hard.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identical_halves_give_one_half_and_foreground_ties() {
        let g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(&[3], &[0.2, -0.4, 1.0]).unwrap());
        let f = g.constant(features(3, 2, 2, |c, q| (c as f64 - q as f64) * 0.3));
        let pred = predict_mask(&g, f, PrototypePair { fg: p, bg: p }, 20.0).unwrap();
        assert!(g.value(pred.probs).unwrap().data().iter().all(|&v| v == 0.5));
        assert!(pred.hard.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn swapped_prototypes_complement_the_hard_mask() {
        let g = Graph::<f64>::new();
        let f = g.constant(features(3, 3, 3, |c, q| ((c * 7 + q * 3) % 5) as f64 - 2.0));
        let pair = PrototypePair {
            fg: g.constant(Tensor::from_f64(&[3], &[1.0, 0.5, -0.5]).unwrap()),
            bg: g.constant(Tensor::from_f64(&[3], &[-0.3, 1.0, 0.2]).unwrap()),
        };
        let a = predict_mask(&g, f, pair, 20.0).unwrap();
        let b = predict_mask(&g, f, pair.swapped(), 20.0).unwrap();
        let pa = g.value(a.probs).unwrap();
        for (q, (x, y)) in a.hard.data().iter().zip(b.hard.data()).enumerate() {
            if pa.data()[q] != 0.5 {
                assert_eq!(x + y, 1.0);
            }
        }
    }

    #[test]
    fn ssp_falls_back_when_nothing_is_confident() {
        let g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap());
        let f = g.constant(features(2, 2, 2, |_, q| q as f64 + 1.0));
        let r = ssp_refine(&g, f, PrototypePair { fg: p, bg: p }, 20.0, &SspConfig::default()).unwrap();
        assert!(r.fg_fallback && r.bg_fallback);
        assert_eq!(r.protos.fg, p);
    }

    #[test]
    fn ssp_config_validation() {
        assert!(SspConfig::default().validate().is_ok());
        assert!(SspConfig { fg_threshold: 0.2, bg_threshold: 0.6, hard_gating: false }.validate().is_err());
        assert!(SspConfig { fg_threshold: 1.5, ..Default::default() }.validate().is_err());
    }
}
