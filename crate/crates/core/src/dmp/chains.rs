//! Support→view prediction chains.
//!
//! Both chains run support→view→support round trips. The sequential chain
//! hands each round trip's support prototype to the next view; the
//! parallel chain starts every view from the support prototype.

use mpa_autodiff::{downsample_mask, Graph, Real, Tensor, Var};

use crate::error::{MpaError, Result};
use crate::proto_seg::{
    average_prototypes, map_prototype, map_prototype_or_global, predict_mask, ssp_refine, PredictedMask, PrototypePair,
    SspConfig,
};

/// Feature map of one image and its mask at feature resolution.
#[derive(Clone, Debug)]
pub struct Branch<T> {
    pub features: Var,
    /// h×w soft mask (area-downsampled) used as the BCE target.
    pub target: Tensor<T>,
}

impl<T: Real> Branch<T> {
    /// Pairs recorded features (C×h×w) with a full-resolution mask.
    pub fn new(g: &Graph<T>, features: Var, mask: &Tensor<f64>) -> Result<Self> {
        let shape = g.shape(features)?;
        let [_, h, w] = shape[..] else {
            return Err(MpaError::invalid(format!("features must be C×h×w, got {shape:?}")));
        };
        Ok(Branch { features, target: downsample_mask(&mask.cast::<T>(), h, w)? })
    }
}

/// Support branches with their own prototypes and the averaged guide.
#[derive(Clone, Debug)]
pub struct Supports<T> {
    pub branches: Vec<Branch<T>>,
    pub own: Vec<PrototypePair>,
    pub guide: PrototypePair,
    /// Prototype halves replaced by the global average feature.
    pub fallbacks: usize,
}

impl<T: Real> Supports<T> {
    pub fn new(g: &Graph<T>, branches: Vec<Branch<T>>) -> Result<Self> {
        if branches.is_empty() {
            return Err(MpaError::invalid("at least one support is required"));
        }
        let mut own = Vec::with_capacity(branches.len());
        let mut fallbacks = 0;
        for b in &branches {
            let mask = g.constant(b.target.clone());
            let (pair, n) = map_prototype_or_global(g, b.features, mask)?;
            own.push(pair);
            fallbacks += n;
        }
        let guide = average_prototypes(g, &own)?;
        Ok(Supports { branches, own, guide, fallbacks })
    }

    pub fn k(&self) -> usize {
        self.branches.len()
    }
}

/// Mean of the K per-support prototypes (each from masked pooling).
pub fn kshot_prototype<T: Real>(g: &Graph<T>, supports: &[(Var, Var)]) -> Result<PrototypePair> {
    let pairs: Vec<PrototypePair> = supports.iter().map(|&(f, m)| map_prototype(g, f, m)).collect::<Result<_>>()?;
    average_prototypes(g, &pairs)
}

/// BCE between the foreground probability channel and a soft target.
pub fn fg_bce<T: Real>(g: &Graph<T>, probs: Var, target: &Tensor<T>) -> Result<Var> {
    let fg = g.channel(probs, 0)?;
    Ok(g.bce_loss(fg, target)?)
}

/// Mean of scalar losses; a single loss is returned unchanged.
pub fn mean_loss<T: Real>(g: &Graph<T>, losses: &[Var]) -> Result<Var> {
    match losses {
        [] => Err(MpaError::invalid("no losses to average")),
        [single] => Ok(*single),
        _ => {
            let sum = g.add_all(losses)?.expect("non-empty");
            Ok(g.scale(sum, T::one() / T::of(losses.len() as f64))?)
        }
    }
}

/// Each support predicted from its own prototype, averaged over supports.
pub fn base_loss<T: Real>(g: &Graph<T>, supports: &Supports<T>, temperature: T) -> Result<Var> {
    let losses: Vec<Var> = supports
        .branches
        .iter()
        .zip(&supports.own)
        .map(|(b, &p)| {
            let pred = predict_mask(g, b.features, p, temperature)?;
            fg_bce(g, pred.probs, &b.target)
        })
        .collect::<Result<_>>()?;
    mean_loss(g, &losses)
}

/// One support→view→support round trip.
#[derive(Clone, Debug)]
pub struct ChainStep {
    pub query_loss: Var,
    /// Reverse loss, averaged over supports.
    pub support_loss: Var,
    pub query_pred: PredictedMask,
    pub query_protos: PrototypePair,
    /// Support prototype re-estimated from the view (mean over supports).
    pub support_protos: PrototypePair,
    pub fallbacks: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ChainOutput {
    pub steps: Vec<ChainStep>,
}

impl ChainOutput {
    pub fn query_losses(&self) -> Vec<Var> {
        self.steps.iter().map(|s| s.query_loss).collect()
    }

    pub fn support_losses(&self) -> Vec<Var> {
        self.steps.iter().map(|s| s.support_loss).collect()
    }

    pub fn fallbacks(&self) -> usize {
        self.steps.iter().map(|s| s.fallbacks).sum()
    }
}

/// Shared settings of both chains.
#[derive(Clone, Copy, Debug)]
pub struct ChainParams<T> {
    pub temperature: T,
    pub ssp: SspConfig,
}

fn round_trip<T: Real>(
    g: &Graph<T>,
    supports: &Supports<T>,
    view: &Branch<T>,
    guide: PrototypePair,
    p: &ChainParams<T>,
) -> Result<ChainStep> {
    let q = ssp_refine(g, view.features, guide, p.temperature, &p.ssp)?;
    let query_pred = predict_mask(g, view.features, q.protos, p.temperature)?;
    let query_loss = fg_bce(g, query_pred.probs, &view.target)?;
    let mut fallbacks = q.fallbacks();
    let mut losses = Vec::with_capacity(supports.k());
    let mut protos = Vec::with_capacity(supports.k());
    for s in &supports.branches {
        let r = ssp_refine(g, s.features, q.protos, p.temperature, &p.ssp)?;
        let pred = predict_mask(g, s.features, r.protos, p.temperature)?;
        losses.push(fg_bce(g, pred.probs, &s.target)?);
        protos.push(r.protos);
        fallbacks += r.fallbacks();
    }
    Ok(ChainStep {
        query_loss,
        support_loss: mean_loss(g, &losses)?,
        query_pred,
        query_protos: q.protos,
        support_protos: average_prototypes(g, &protos)?,
        fallbacks,
    })
}

/// Views in order, each guided by the previous round trip's support prototype.
pub fn sequential_chain<T: Real>(
    g: &Graph<T>,
    supports: &Supports<T>,
    views: &[Branch<T>],
    p: &ChainParams<T>,
) -> Result<ChainOutput> {
    if views.is_empty() {
        return Err(MpaError::invalid("a chain needs at least one view"));
    }
    let mut guide = supports.guide;
    let mut steps = Vec::with_capacity(views.len());
    for view in views {
        let step = round_trip(g, supports, view, guide, p)?;
        guide = step.support_protos;
        steps.push(step);
    }
    Ok(ChainOutput { steps })
}

/// Every view guided by the support prototype, independently.
pub fn parallel_chain<T: Real>(
    g: &Graph<T>,
    supports: &Supports<T>,
    views: &[Branch<T>],
    p: &ChainParams<T>,
) -> Result<ChainOutput> {
    if views.is_empty() {
        return Err(MpaError::invalid("a chain needs at least one view"));
    }
    let steps = views.iter().map(|v| round_trip(g, supports, v, supports.guide, p)).collect::<Result<_>>()?;
    Ok(ChainOutput { steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proto_seg::DEFAULT_TEMPERATURE;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_branch(g: &Graph<f64>, rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Branch<f64> {
        let f = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0));
        let mut m = Tensor::from_fn(&[h, w], |_| f64::from(rng.gen_bool(0.4) as u8));
        m.data_mut()[0] = 1.0;
        m.data_mut()[1] = 0.0;
        Branch { features: g.param(f), target: m }
    }

    fn params() -> ChainParams<f64> {
        ChainParams { temperature: DEFAULT_TEMPERATURE, ssp: SspConfig::default() }
    }

    #[test]
    fn single_view_chains_agree_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let g = Graph::new();
            let s = random_branch(&g, &mut rng, 4, 5, 5);
            let v = random_branch(&g, &mut rng, 4, 5, 5);
            let sup = Supports::new(&g, vec![s]).unwrap();
            let a = sequential_chain(&g, &sup, std::slice::from_ref(&v), &params()).unwrap();
            let b = parallel_chain(&g, &sup, &[v], &params()).unwrap();
            assert_eq!(g.scalar(a.steps[0].query_loss).unwrap().to_bits(), g.scalar(b.steps[0].query_loss).unwrap().to_bits());
            assert_eq!(
                g.scalar(a.steps[0].support_loss).unwrap().to_bits(),
                g.scalar(b.steps[0].support_loss).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn parallel_losses_follow_view_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Graph::new();
        let sup = Supports::new(&g, vec![random_branch(&g, &mut rng, 3, 4, 4)]).unwrap();
        let views: Vec<_> = (0..3).map(|_| random_branch(&g, &mut rng, 3, 4, 4)).collect();
        let fwd = parallel_chain(&g, &sup, &views, &params()).unwrap();
        let rev: Vec<_> = views.iter().rev().cloned().collect();
        let bwd = parallel_chain(&g, &sup, &rev, &params()).unwrap();
        let vals = |o: &ChainOutput| o.query_losses().iter().map(|&v| g.scalar(v).unwrap()).collect::<Vec<_>>();
        let mut b = vals(&bwd);
        b.reverse();
        assert_eq!(vals(&fwd), b);
    }

    #[test]
    fn identical_views_of_separated_clusters_do_not_exceed_base_loss() {
        // fg pixels point along e0, bg along e1
        let (h, w) = (4, 4);
        let mask = Tensor::from_fn(&[h, w], |i| f64::from(i % w < 2));
        let feats = Tensor::from_fn(&[2, h, w], |i| {
            let (c, px) = (i / (h * w), i % (h * w));
            let fg = px % w < 2;
            f64::from((c == 0) == fg)
        });
        let g = Graph::new();
        let branch = || Branch { features: g.constant(feats.clone()), target: mask.clone() };
        let sup = Supports::new(&g, vec![branch()]).unwrap();
        let base = g.scalar(base_loss(&g, &sup, 20.0).unwrap()).unwrap();
        let views = vec![branch(), branch(), branch()];
        for out in [sequential_chain(&g, &sup, &views, &params()).unwrap(), parallel_chain(&g, &sup, &views, &params()).unwrap()] {
            for s in &out.steps {
                assert!(g.scalar(s.query_loss).unwrap() <= base + 1e-6);
                assert!(g.scalar(s.support_loss).unwrap() <= base + 1e-6);
                assert!((g.scalar(s.query_loss).unwrap() - base).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn kshot_prototype_is_the_elementwise_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Graph::new();
        let pairs: Vec<(Var, Var)> = (0..3)
            .map(|_| {
                let b = random_branch(&g, &mut rng, 5, 4, 4);
                (b.features, g.constant(b.target))
            })
            .collect();
        let avg = kshot_prototype(&g, &pairs).unwrap();
        let singles: Vec<PrototypePair> = pairs.iter().map(|&(f, m)| map_prototype(&g, f, m).unwrap()).collect();
        let fg = g.value(avg.fg).unwrap();
        for c in 0..5 {
            let oracle: f64 = singles.iter().map(|p| g.value(p.fg).unwrap().data()[c]).sum::<f64>() / 3.0;
            assert!((fg.data()[c] - oracle).abs() < 1e-12);
        }
        let one = kshot_prototype(&g, &pairs[..1]).unwrap();
        assert_eq!(g.value(one.bg).unwrap(), g.value(singles[0].bg).unwrap());
    }

    #[test]
    fn repeated_supports_reproduce_the_single_prototype() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Graph::new();
        let b = random_branch(&g, &mut rng, 4, 4, 4);
        let m = g.constant(b.target.clone());
        let one = kshot_prototype(&g, &[(b.features, m)]).unwrap();
        let three = kshot_prototype(&g, &[(b.features, m); 3]).unwrap();
        let (x, y) = (g.value(one.fg).unwrap(), g.value(three.fg).unwrap());
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let g = Graph::<f64>::new();
        assert!(Supports::new(&g, vec![]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sup = Supports::new(&g, vec![random_branch(&g, &mut rng, 2, 4, 4)]).unwrap();
        assert!(sequential_chain(&g, &sup, &[], &params()).is_err());
        assert!(parallel_chain(&g, &sup, &[], &params()).is_err());
    }
}
