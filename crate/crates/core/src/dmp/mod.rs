//! Dual-chain multi-view prediction: losses, chains and the adaptation loop.

mod adapt;
mod chains;
mod loss;
mod optim;

use mpa_autodiff::Tensor;

pub use adapt::{
    adapt_episode, episode_loss, infer, pick_view_source, sequential_predictions, upsample_nearest, AdaptConfig, AdaptationLog,
    EpochRecord, Prediction, ViewPlan,
};
pub use chains::{
    base_loss, fg_bce, kshot_prototype, mean_loss, parallel_chain, sequential_chain, Branch, ChainOutput, ChainParams,
    ChainStep, Supports,
};
pub use loss::{assemble_total, LossBreakdown, LossTerms, LossWeights};
pub use optim::{Optimizer, OptimizerConfig};

/// Image (3×H×W in [0,1]) and binary mask (H×W).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f64>,
    pub mask: Tensor<f64>,
}

/// K labelled supports and held-out queries of one category.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub supports: Vec<Sample>,
    pub eval_queries: Vec<Sample>,
    pub category_id: u32,
    pub domain_id: u32,
}
