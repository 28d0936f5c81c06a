//! Progressive augmentation: cumulative chains of increasingly complex
//! ops and the plateau scheduler that decides how many views are active.

mod aug;
mod chain;
mod scheduler;

pub use aug::{apply_aug, hsv_to_rgb, pixel_map, rgb_to_hsv, AugKind, AugOp, PixelMap};
pub use chain::{
    build_chain, generate_views, generate_views_with, view_chain, view_seed, AugChain, AugStrategy, HpaConfig, View,
    ViewSet,
};
pub use scheduler::{scheduler_step, SchedulerConfig, SchedulerState};

impl HpaConfig {
    pub fn scheduler(&self) -> SchedulerConfig {
        SchedulerConfig { n_max: self.n_max, delta: self.delta, patience: self.patience }
    }
}
