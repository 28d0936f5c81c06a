//! Cumulative augmentation chains and the view sets built from them.

use mpa_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::aug::{apply_aug, pixel_map, AugKind, AugOp, PixelMap};
use crate::error::{MpaError, Result};

/// Ladder, magnitudes and curriculum knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpaConfig {
    /// Op added at each level; level L uses the first L entries.
    pub ladder: Vec<AugKind>,
    pub n_max: usize,
    /// Minimum metric gain that counts as improvement.
    pub delta: f64,
    /// Non-improving epochs before another view is added.
    pub patience: usize,
    /// |brightness delta| range; the sign is drawn separately.
    pub brightness: [f64; 2],
    /// |hue shift| range in degrees.
    pub hue_degrees: [f64; 2],
    pub grid_cells: Vec<usize>,
    /// Ops cycled through by the simple (non-progressive) strategy.
    pub simple_ops: Vec<AugKind>,
}

impl Default for HpaConfig {
    fn default() -> Self {
        HpaConfig {
            ladder: vec![
                AugKind::Hflip,
                AugKind::Brightness,
                AugKind::Vflip,
                AugKind::Hue,
                AugKind::Rot90,
                AugKind::GridShuffle,
            ],
            n_max: 6,
            delta: 1e-4,
            patience: 3,
            brightness: [0.1, 0.3],
            hue_degrees: [10.0, 30.0],
            grid_cells: vec![2, 3, 4],
            simple_ops: vec![AugKind::Hflip, AugKind::Vflip, AugKind::Rot90],
        }
    }
}

impl HpaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 || self.n_max > self.ladder.len() {
            return Err(MpaError::config(format!(
                "n_max {} must be in 1..={} (ladder length)",
                self.n_max,
                self.ladder.len()
            )));
        }
        if self.patience == 0 {
            return Err(MpaError::config("patience must be at least one epoch"));
        }
        if !(self.delta >= 0.0) {
            return Err(MpaError::config("delta must be non-negative"));
        }
        let range_ok = |r: [f64; 2], max: f64| 0.0 <= r[0] && r[0] <= r[1] && r[1] <= max;
        if !range_ok(self.brightness, 0.3) {
            return Err(MpaError::config(format!("brightness range {:?} outside [0, 0.3]", self.brightness)));
        }
        if !range_ok(self.hue_degrees, 30.0) {
            return Err(MpaError::config(format!("hue range {:?} outside [0, 30]", self.hue_degrees)));
        }
        if self.grid_cells.is_empty() || self.grid_cells.iter().any(|c| !(2..=4).contains(c)) {
            return Err(MpaError::config(format!("grid cells {:?} must be drawn from 2..=4", self.grid_cells)));
        }
        if self.simple_ops.is_empty() {
            return Err(MpaError::config("simple_ops must not be empty"));
        }
        Ok(())
    }

    fn draw(&self, kind: AugKind, rng: &mut ChaCha8Rng) -> AugOp {
        let signed = |rng: &mut ChaCha8Rng, r: [f64; 2]| {
            let m = if r[0] == r[1] { r[0] } else { rng.gen_range(r[0]..=r[1]) };
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        };
        let magnitude = match kind {
            AugKind::Brightness => signed(rng, self.brightness),
            AugKind::Hue => signed(rng, self.hue_degrees),
            AugKind::GridShuffle => self.grid_cells[rng.gen_range(0..self.grid_cells.len())] as f64,
            AugKind::Hflip | AugKind::Vflip | AugKind::Rot90 => 0.0,
        };
        AugOp::new(kind, magnitude, rng.gen())
    }
}

/// Ordered ops of one view. `ops` is kept in ladder order so a chain at
/// level L is a prefix of the chain at level L+1 for the same seed; the
/// ops run in [`AugChain::application_order`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugChain {
    pub level: usize,
    pub ops: Vec<AugOp>,
}

impl AugChain {
    /// Flips/rotation, then colour, then grid shuffle; stable within a class.
    pub fn application_order(&self) -> Vec<AugOp> {
        let mut ops = self.ops.clone();
        ops.sort_by_key(|op| op.kind.stage());
        ops
    }

    pub fn kinds(&self) -> Vec<AugKind> {
        self.ops.iter().map(|op| op.kind).collect()
    }

    pub fn apply(&self, image: &Tensor<f64>, mask: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let mut pair = (image.clone(), mask.clone());
        for op in self.application_order() {
            pair = apply_aug(&pair.0, &pair.1, &op)?;
        }
        Ok(pair)
    }

    /// Composite pixel permutation of the geometric ops on an `h×w` grid.
    pub fn geometric_map(&self, h: usize, w: usize) -> PixelMap {
        let mut map = PixelMap::identity(h, w);
        for op in self.application_order() {
            if let Some(next) = pixel_map(&op, map.h, map.w) {
                map = map.then(&next);
            }
        }
        map
    }
}

/// Cumulative chain for `level`: the first `level` ladder ops with
/// magnitudes drawn from `seed`.
pub fn build_chain(level: usize, seed: u64, cfg: &HpaConfig) -> Result<AugChain> {
    if level == 0 || level > cfg.n_max {
        return Err(MpaError::invalid(format!("chain level {level} outside 1..={}", cfg.n_max)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // draw every rung so a level's magnitudes never depend on the level requested
    let ops: Vec<AugOp> = cfg.ladder[..cfg.n_max].iter().map(|&k| cfg.draw(k, &mut rng)).collect();
    Ok(AugChain { level, ops: ops[..level].to_vec() })
}

/// How view difficulty is produced at a given level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugStrategy {
    /// Level L applies all of the first L ladder ops.
    Cumulative,
    /// Level L applies only the L-th ladder op.
    Replacement,
    /// Every view gets one simple op, whatever the level.
    Simple,
}

/// Chain for view `index` (1-based) at `level` under `strategy`.
pub fn view_chain(strategy: AugStrategy, index: usize, level: usize, seed: u64, cfg: &HpaConfig) -> Result<AugChain> {
    match strategy {
        AugStrategy::Cumulative => build_chain(level, seed, cfg),
        AugStrategy::Replacement => {
            let full = build_chain(level, seed, cfg)?;
            Ok(AugChain { level, ops: vec![full.ops[level - 1]] })
        }
        AugStrategy::Simple => {
            if index == 0 {
                return Err(MpaError::invalid("view indices start at 1"));
            }
            let kind = cfg.simple_ops[(index - 1) % cfg.simple_ops.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(AugChain { level, ops: vec![cfg.draw(kind, &mut rng)] })
        }
    }
}

/// Seed of view `index` derived from the run seed.
pub fn view_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: Tensor<f64>,
    pub mask: Tensor<f64>,
    pub chain: AugChain,
}

/// Augmented query views, index 1 first.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ViewSet {
    pub views: Vec<View>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// `n` cumulative views of a support pair; view i uses `build_chain(i, seed ^ i)`.
pub fn generate_views(image: &Tensor<f64>, mask: &Tensor<f64>, n: usize, seed: u64, cfg: &HpaConfig) -> Result<ViewSet> {
    let levels: Vec<usize> = (1..=n).collect();
    generate_views_with(image, mask, &levels, seed, cfg, AugStrategy::Cumulative)
}

/// One view per entry of `levels`; view i (1-based) is seeded with `seed ^ i`.
pub fn generate_views_with(
    image: &Tensor<f64>,
    mask: &Tensor<f64>,
    levels: &[usize],
    seed: u64,
    cfg: &HpaConfig,
    strategy: AugStrategy,
) -> Result<ViewSet> {
    if levels.is_empty() || levels.len() > cfg.n_max {
        return Err(MpaError::invalid(format!("view count {} outside 1..={}", levels.len(), cfg.n_max)));
    }
    let views = levels
        .iter()
        .enumerate()
        .map(|(i, &level)| {
            let chain = view_chain(strategy, i + 1, level, view_seed(seed, i + 1), cfg)?;
            let (image, mask) = chain.apply(image, mask)?;
            Ok(View { image, mask, chain })
        })
        .collect::<Result<_>>()?;
    Ok(ViewSet { views })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> (Tensor<f64>, Tensor<f64>) {
        let img = Tensor::from_fn(&[3, 16, 16], |i| ((i * 29) % 97) as f64 / 96.0);
        let mask = Tensor::from_fn(&[16, 16], |i| ((i % 16) < 6 && (i / 16) > 3) as u8 as f64);
        (img, mask)
    }

    #[test]
    fn level_one_is_hflip_only() {
        let c = build_chain(1, 42, &HpaConfig::default()).unwrap();
        assert_eq!(c.kinds(), vec![AugKind::Hflip]);
    }

    #[test]
    fn chains_extend_by_exactly_one_op() {
        let cfg = HpaConfig::default();
        for seed in 0..20 {
            for level in 1..cfg.n_max {
                let a = build_chain(level, seed, &cfg).unwrap();
                let b = build_chain(level + 1, seed, &cfg).unwrap();
                assert_eq!(b.ops.len(), a.ops.len() + 1);
                assert_eq!(&b.ops[..level], &a.ops[..]);
            }
        }
    }

    #[test]
    fn level_six_has_every_kind_once() {
        let c = build_chain(6, 3, &HpaConfig::default()).unwrap();
        for k in AugKind::ALL {
            assert_eq!(c.kinds().iter().filter(|&&x| x == k).count(), 1);
        }
        let order: Vec<u8> = c.application_order().iter().map(|op| op.kind.stage()).collect();
        assert!(order.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(c.application_order().last().unwrap().kind, AugKind::GridShuffle);
    }

    #[test]
    fn out_of_range_levels_are_rejected() {
        let cfg = HpaConfig::default();
        assert!(build_chain(0, 0, &cfg).is_err());
        assert!(build_chain(7, 0, &cfg).is_err());
    }

    #[test]
    fn magnitudes_respect_ranges() {
        let cfg = HpaConfig::default();
        for seed in 0..200 {
            for op in build_chain(6, seed, &cfg).unwrap().ops {
                match op.kind {
                    AugKind::Brightness => assert!((0.1..=0.3).contains(&op.magnitude.abs())),
                    AugKind::Hue => assert!((10.0..=30.0).contains(&op.magnitude.abs())),
                    AugKind::GridShuffle => assert!([2.0, 3.0, 4.0].contains(&op.magnitude)),
                    _ => assert_eq!(op.magnitude, 0.0),
                }
            }
        }
    }

    #[test]
    fn single_view_is_the_flipped_support() {
        let (img, mask) = pair();
        let vs = generate_views(&img, &mask, 1, 9, &HpaConfig::default()).unwrap();
        assert_eq!(vs.len(), 1);
        let (fi, fm) = apply_aug(&img, &mask, &AugOp::new(AugKind::Hflip, 0.0, 0)).unwrap();
        assert_eq!(vs.views[0].mask, fm);
        assert_eq!(vs.views[0].image, fi);
    }

    #[test]
    fn view_generation_is_deterministic_and_levels_match_indices() {
        let (img, mask) = pair();
        let cfg = HpaConfig::default();
        let a = generate_views(&img, &mask, 6, 123, &cfg).unwrap();
        assert_eq!(a, generate_views(&img, &mask, 6, 123, &cfg).unwrap());
        for (i, v) in a.views.iter().enumerate() {
            assert_eq!(v.chain.level, i + 1);
            assert_eq!(v.chain.ops.len(), i + 1);
        }
        // growing the set keeps earlier views frozen
        let b = generate_views(&img, &mask, 3, 123, &cfg).unwrap();
        assert_eq!(&a.views[..3], &b.views[..]);
    }

    #[test]
    fn replacement_and_simple_strategies_use_one_op() {
        let cfg = HpaConfig::default();
        for level in 1..=6 {
            let r = view_chain(AugStrategy::Replacement, level, level, 5, &cfg).unwrap();
            assert_eq!(r.kinds(), vec![cfg.ladder[level - 1]]);
            let s = view_chain(AugStrategy::Simple, level, level, 5, &cfg).unwrap();
            assert!(s.ops.len() == 1 && s.ops[0].kind.is_geometric() && s.ops[0].kind != AugKind::GridShuffle);
        }
    }
}
