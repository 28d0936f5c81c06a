use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{AblationFlags, ExperimentConfig};
use crate::error::Result;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeResult {
    pub seed: u64,
    pub index: usize,
    pub domain: String,
    pub category_id: u32,
    pub status: EpisodeStatus,
    pub error: Option<String>,
    /// Foreground IoU of each held-out query.
    pub query_iou: Vec<f64>,
    /// Mean of `query_iou`, in [0, 1].
    pub iou: Option<f64>,
    pub final_n: usize,
    pub final_loss: Option<f64>,
    pub fallbacks: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    /// Mean episode IoU × 100 over successful episodes.
    pub miou_mean: f64,
    /// Standard deviation of episode IoU × 100.
    pub miou_std: f64,
    pub episodes_ok: usize,
    pub episodes_failed: usize,
}

impl Summary {
    pub fn failure_rate(&self) -> f64 {
        let n = self.episodes_ok + self.episodes_failed;
        if n == 0 {
            0.0
        } else {
            self.episodes_failed as f64 / n as f64
        }
    }
}

/// Ordering check with its tolerance and outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verdict {
    pub name: String,
    pub detail: String,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrelimTables {
    /// Mean support→view IoU × 100 per augmentation level 1..N_max.
    pub level_iou: Vec<Option<f64>>,
    /// Mean sequential-chain IoU × 100 per view position 1..N_max.
    pub sequential_iou: Vec<Option<f64>>,
    /// Positions compared for the sequential ordering.
    pub positions: Vec<usize>,
    pub verdicts: Vec<Verdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellResult {
    pub name: String,
    pub description: String,
    pub flags: AblationFlags,
    pub miou_mean: f64,
    /// Standard deviation across seeds of the per-seed mIoU.
    pub miou_std: f64,
    pub per_seed_miou: Vec<f64>,
    pub episodes_failed: usize,
    pub episodes: Vec<EpisodeResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationTable {
    pub cells: Vec<CellResult>,
    pub verdicts: Vec<Verdict>,
}

impl AblationTable {
    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.name == name)
    }
}

/// Every run emits the same field set; sections that do not apply are null.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub config: ExperimentConfig,
    pub summary: Summary,
    pub episodes: Vec<EpisodeResult>,
    /// Mean support→view IoU × 100 per augmentation level, N_max columns.
    pub per_view_iou: Vec<Option<f64>>,
    /// Mean total loss per epoch over successful episodes.
    pub loss_curve: Vec<f64>,
    /// Mean scheduler view count per epoch.
    pub scheduler_trace: Vec<f64>,
    pub prelim: Option<PrelimTables>,
    pub ablation: Option<AblationTable>,
    pub wall_clock_seconds: f64,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// JSON with the wall-clock field zeroed, for run-to-run comparison.
    pub fn canonical_json(&self) -> Result<String> {
        Report { wall_clock_seconds: 0.0, ..self.clone() }.to_json()
    }

    pub fn verdicts(&self) -> Vec<&Verdict> {
        let prelim = self.prelim.iter().flat_map(|p| &p.verdicts);
        let ablation = self.ablation.iter().flat_map(|a| &a.verdicts);
        prelim.chain(ablation).collect()
    }

    /// One row per episode, tagged with its ablation cell (or the command).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,seed,episode,domain,category,status,miou,final_n,final_loss,fallbacks\n");
        let mut push = |cell: &str, eps: &[EpisodeResult]| {
            for e in eps {
                let opt = |v: Option<f64>, scale: f64| v.map(|x| format!("{}", x * scale)).unwrap_or_default();
                out.push_str(&format!(
                    "{cell},{},{},{},{},{},{},{},{},{}\n",
                    e.seed,
                    e.index,
                    e.domain,
                    e.category_id,
                    match e.status {
                        EpisodeStatus::Ok => "ok",
                        EpisodeStatus::Failed => "failed",
                    },
                    opt(e.iou, 100.0),
                    e.final_n,
                    opt(e.final_loss, 1.0),
                    e.fallbacks
                ));
            }
        };
        match &self.ablation {
            Some(table) => table.cells.iter().for_each(|c| push(&c.name, &c.episodes)),
            None => push(&self.command, &self.episodes),
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        Ok(())
    }
}
