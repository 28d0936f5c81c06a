//! Episode adaptation loop and support-guided inference.

use mpa_autodiff::{downsample_mask, Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::chains::{base_loss, kshot_prototype, parallel_chain, sequential_chain, Branch, ChainParams, Supports};
use super::loss::{assemble_total, LossBreakdown, LossTerms, LossWeights};
use super::optim::{Optimizer, OptimizerConfig};
use super::{Episode, Sample};
use crate::encoder::{encode, EncoderConfig, EncoderParams, EncoderVars};
use crate::error::{MpaError, Result};
use crate::hpa::{generate_views_with, scheduler_step, AugStrategy, HpaConfig, SchedulerState, ViewSet};
use crate::proto_seg::{predict_mask, ssp_refine, SspConfig, DEFAULT_TEMPERATURE};

/// How many views are active and how hard they are at a scheduler stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewPlan {
    pub strategy: AugStrategy,
    /// Grow the number of views with the scheduler stage. When off,
    /// `fixed_views` views are used, all at the current stage's level.
    pub progressive_views: bool,
    pub fixed_views: usize,
}

impl Default for ViewPlan {
    fn default() -> Self {
        ViewPlan { strategy: AugStrategy::Cumulative, progressive_views: true, fixed_views: 1 }
    }
}

impl ViewPlan {
    /// Augmentation level of each view at `stage` (1-based).
    pub fn levels(&self, stage: usize) -> Vec<usize> {
        if self.progressive_views {
            (1..=stage).collect()
        } else {
            vec![stage; self.fixed_views]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub max_epochs: usize,
    pub lr: f64,
    pub temperature: f64,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub ssp: SspConfig,
    pub hpa: HpaConfig,
    pub views: ViewPlan,
    pub sequential: bool,
    pub parallel: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            max_epochs: 200,
            lr: 5e-4,
            temperature: DEFAULT_TEMPERATURE,
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::Sgd,
            ssp: SspConfig::default(),
            hpa: HpaConfig::default(),
            views: ViewPlan::default(),
            sequential: true,
            parallel: true,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(MpaError::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(MpaError::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        self.weights.validate()?;
        self.optimizer.validate()?;
        self.ssp.validate()?;
        self.hpa.validate()?;
        if !self.views.progressive_views && !(1..=self.hpa.n_max).contains(&self.views.fixed_views) {
            return Err(MpaError::config(format!(
                "fixed_views {} outside 1..={}",
                self.views.fixed_views, self.hpa.n_max
            )));
        }
        Ok(())
    }
}

/// One line of the adaptation log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Views used in this epoch.
    pub views: usize,
    pub breakdown: LossBreakdown,
    /// Scheduler state after this epoch.
    pub current_n: usize,
    pub stagnation_count: usize,
    /// Prototype halves that fell back to the guide or the global average.
    pub fallbacks: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaptationLog {
    pub records: Vec<EpochRecord>,
}

impl AdaptationLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(MpaError::from))
            .collect::<Result<_>>()?;
        Ok(AdaptationLog { records })
    }

    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.breakdown.total).collect()
    }

    pub fn n_trace(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.current_n).collect()
    }
}

/// Support whose image is augmented into views.
pub fn pick_view_source(k: usize, seed: u64) -> usize {
    if k <= 1 {
        return 0;
    }
    ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0f5_u64).gen_range(0..k)
}

fn check_support(s: &Sample, i: usize) -> Result<()> {
    if s.mask.sum() <= 0.0 {
        return Err(MpaError::config(format!("support {i} has an empty mask")));
    }
    Ok(())
}

fn encode_sample<T: Real>(g: &Graph<T>, p: &EncoderParams<T>, vars: &EncoderVars, image: &Tensor<f64>) -> Result<Var> {
    let x = g.constant(image.cast());
    encode(g, &p.config, vars, x)
}

fn make_views(source: &Sample, stage: usize, seed: u64, cfg: &AdaptConfig) -> Result<ViewSet> {
    generate_views_with(&source.image, &source.mask, &cfg.views.levels(stage), seed, &cfg.hpa, cfg.views.strategy)
}

fn views_as_samples(views: &ViewSet) -> Vec<Sample> {
    views.views.iter().map(|v| Sample { image: v.image.clone(), mask: v.mask.clone() }).collect()
}

/// Total adaptation loss of one epoch, its breakdown and the number of
/// prototype fallbacks, with the encoder given as vars on `g`.
pub fn episode_loss<T: Real>(
    g: &Graph<T>,
    encoder: &EncoderConfig,
    vars: &EncoderVars,
    supports: &[Sample],
    views: &[Sample],
    cfg: &AdaptConfig,
) -> Result<(Var, LossBreakdown, usize)> {
    let chain = ChainParams { temperature: T::of(cfg.temperature), ssp: cfg.ssp };
    let branch = |s: &Sample| -> Result<Branch<T>> {
        let x = g.constant(s.image.cast());
        Branch::new(g, encode(g, encoder, vars, x)?, &s.mask)
    };
    let support_branches = supports.iter().map(branch).collect::<Result<Vec<_>>>()?;
    let view_branches = views.iter().map(branch).collect::<Result<Vec<_>>>()?;
    let supports = Supports::new(g, support_branches)?;
    let mut fallbacks = supports.fallbacks;

    let mut terms = LossTerms { l_bs: Some(base_loss(g, &supports, chain.temperature)?), ..Default::default() };
    if cfg.parallel {
        let par = parallel_chain(g, &supports, &view_branches, &chain)?;
        terms.q_par = par.query_losses();
        terms.s_par = par.support_losses();
        fallbacks += par.fallbacks();
    }
    if cfg.sequential {
        let seq = sequential_chain(g, &supports, &view_branches, &chain)?;
        terms.q_seq = seq.query_losses()[1..].to_vec();
        terms.s_seq = seq.support_losses()[1..].to_vec();
        fallbacks += seq.fallbacks();
    }
    let (total, breakdown) = assemble_total(g, &terms, &cfg.weights)?;
    Ok((total, breakdown, fallbacks))
}

/// Fine-tunes a copy of `encoder` on the episode's supports.
pub fn adapt_episode<T: Real>(
    episode: &Episode,
    encoder: &EncoderParams<T>,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<(EncoderParams<T>, AdaptationLog)> {
    cfg.validate()?;
    if episode.supports.is_empty() {
        return Err(MpaError::config("episode has no supports"));
    }
    for (i, s) in episode.supports.iter().enumerate() {
        check_support(s, i)?;
    }
    let mut params = encoder.clone();
    let mut log = AdaptationLog::default();
    if cfg.max_epochs == 0 {
        return Ok((params, log));
    }
    let source = &episode.supports[pick_view_source(episode.supports.len(), seed)];
    let sched_cfg = cfg.hpa.scheduler();
    let mut sched = SchedulerState::default();
    let mut views = views_as_samples(&make_views(source, sched.current_n, seed, cfg)?);
    let mut opt = Optimizer::<T>::new(cfg.optimizer, cfg.lr);

    for epoch in 0..cfg.max_epochs {
        let g = Graph::<T>::new();
        let vars = params.register(&g);
        let (total, breakdown, fallbacks) =
            episode_loss(&g, &params.config, &vars, &episode.supports, &views, cfg)?;
        if !breakdown.total.is_finite() {
            return Err(MpaError::NonFiniteLoss { epoch, detail: format!("{breakdown:?}") });
        }
        g.backward(total)?;
        let grads: Vec<Option<Tensor<T>>> =
            vars.layers().iter().flat_map(|&(w, b)| [g.grad(w), g.grad(b)]).collect();
        let mut tensors: Vec<&mut Tensor<T>> =
            params.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect();
        opt.step(&mut tensors, &grads)?;
        if !params.all_finite() {
            return Err(MpaError::NonFiniteLoss { epoch, detail: "parameters diverged".into() });
        }

        let used = views.len();
        let before = sched.current_n;
        sched = scheduler_step(sched, -breakdown.total, &sched_cfg);
        log.records.push(EpochRecord {
            epoch,
            views: used,
            breakdown,
            current_n: sched.current_n,
            stagnation_count: sched.stagnation_count,
            fallbacks,
        });
        if sched.current_n != before {
            views = views_as_samples(&make_views(source, sched.current_n, seed, cfg)?);
        }
    }
    Ok((params, log))
}

/// Hard query mask at image resolution plus the feature-level probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// H×W binary mask.
    pub hard: Tensor<f64>,
    /// 2×h×w foreground/background probabilities.
    pub probs: Tensor<f64>,
}

/// Nearest-neighbour upsampling of an h×w mask to `out_h×out_w`.
pub fn upsample_nearest(mask: &Tensor<f64>, out_h: usize, out_w: usize) -> Result<Tensor<f64>> {
    let [h, w] = *mask.shape() else {
        return Err(MpaError::invalid(format!("mask must be h×w, got {:?}", mask.shape())));
    };
    if h == 0 || w == 0 || out_h < h || out_w < w {
        return Err(MpaError::invalid(format!("cannot upsample {h}×{w} to {out_h}×{out_w}")));
    }
    let src = mask.data();
    Ok(Tensor::from_fn(&[out_h, out_w], |i| {
        let (y, x) = (i / out_w, i % out_w);
        src[(y * h / out_h) * w + x * w / out_w]
    }))
}

fn support_inputs<T: Real>(
    g: &Graph<T>,
    params: &EncoderParams<T>,
    vars: &EncoderVars,
    supports: &[Sample],
) -> Result<Vec<(Var, Var)>> {
    if supports.is_empty() {
        return Err(MpaError::config("at least one support is required"));
    }
    supports
        .iter()
        .enumerate()
        .map(|(i, s)| {
            check_support(s, i)?;
            let f = encode_sample(g, params, vars, &s.image)?;
            let shape = g.shape(f)?;
            let m = downsample_mask(&s.mask.cast::<T>(), shape[1], shape[2])?;
            Ok((f, g.constant(m)))
        })
        .collect()
}

/// Segments `query` guided by the averaged support prototype and one
/// self-support refinement on the query.
pub fn infer<T: Real>(
    params: &EncoderParams<T>,
    supports: &[Sample],
    query: &Tensor<f64>,
    temperature: f64,
    ssp: &SspConfig,
) -> Result<Prediction> {
    let g = Graph::<T>::new();
    let vars = params.freeze(&g);
    let inputs = support_inputs(&g, params, &vars, supports)?;
    let guide = kshot_prototype(&g, &inputs).map_err(|e| match e {
        MpaError::DegenerateMask(m) => MpaError::Config(format!("support mask degenerate at feature scale: {m}")),
        other => other,
    })?;
    let fq = encode_sample(&g, params, &vars, query)?;
    let t = T::of(temperature);
    let refined = ssp_refine(&g, fq, guide, t, ssp)?;
    let pred = predict_mask(&g, fq, refined.protos, t)?;
    let shape = query.shape();
    Ok(Prediction {
        hard: upsample_nearest(&pred.hard, shape[1], shape[2])?,
        probs: g.value(pred.probs)?.cast(),
    })
}

/// Hard masks of a sequential chain over `views`, one per view position,
/// at image resolution.
pub fn sequential_predictions<T: Real>(
    params: &EncoderParams<T>,
    supports: &[Sample],
    views: &[Sample],
    temperature: f64,
    ssp: &SspConfig,
) -> Result<Vec<Tensor<f64>>> {
    let g = Graph::<T>::new();
    let vars = params.freeze(&g);
    let branches = supports
        .iter()
        .enumerate()
        .map(|(i, s)| {
            check_support(s, i)?;
            Branch::new(&g, encode_sample(&g, params, &vars, &s.image)?, &s.mask)
        })
        .collect::<Result<Vec<_>>>()?;
    let view_branches = views
        .iter()
        .map(|v| Branch::new(&g, encode_sample(&g, params, &vars, &v.image)?, &v.mask))
        .collect::<Result<Vec<_>>>()?;
    let sup = Supports::new(&g, branches)?;
    let chain = ChainParams { temperature: T::of(temperature), ssp: *ssp };
    let out = sequential_chain(&g, &sup, &view_branches, &chain)?;
    out.steps
        .iter()
        .zip(views)
        .map(|(s, v)| upsample_nearest(&s.query_pred.hard, v.mask.shape()[0], v.mask.shape()[1]))
        .collect()
}
