//! Experiment configuration, runners and reports.

mod config;
mod metrics;
mod report;
mod run;
pub mod svg;

pub use config::{AblationFlags, DmpConfig, ExperimentConfig, Precision};
pub use metrics::{column_means, fg_iou, mean_std};
pub use report::{
    AblationTable, CellResult, EpisodeResult, EpisodeStatus, PrelimTables, Report, Summary, Verdict, SCHEMA_VERSION,
};
pub use run::{
    ablation_cells, episode_seed, generate_data, run_ablations, run_adaptation, run_evaluation,
    run_preliminary_tables, CHAIN_POSITIONS, ORDER_TOLERANCE, PROGRESSIVE_MARGIN, STAGE_GAP,
};
