use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dmp::{AdaptConfig, LossWeights, OptimizerConfig, ViewPlan};
use crate::encoder::EncoderConfig;
use crate::error::{MpaError, Result};
use crate::hpa::{AugStrategy, HpaConfig};
use crate::proto_seg::{SspConfig, DEFAULT_TEMPERATURE};
use crate::synthbench::{preset_domains, DomainSpec};

/// Optimisation settings of the adaptation loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmpConfig {
    pub weights: LossWeights,
    pub lr: f64,
    pub max_epochs: usize,
    pub temperature: f64,
    pub optimizer: OptimizerConfig,
    pub ssp: SspConfig,
}

impl Default for DmpConfig {
    fn default() -> Self {
        let a = AdaptConfig::default();
        DmpConfig {
            weights: a.weights,
            lr: a.lr,
            max_epochs: a.max_epochs,
            temperature: DEFAULT_TEMPERATURE,
            optimizer: a.optimizer,
            ssp: a.ssp,
        }
    }
}

/// Which parts of the method are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Off: one fixed view with a simple flip/rotation, whatever the stage.
    pub hpa_on: bool,
    pub dmp_sequential_on: bool,
    pub dmp_parallel_on: bool,
    /// Grow the number of views with the scheduler; off keeps `fixed_views`.
    pub progressive_on: bool,
    pub strategy: AugStrategy,
    pub fixed_views: usize,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            hpa_on: true,
            dmp_sequential_on: true,
            dmp_parallel_on: true,
            progressive_on: true,
            strategy: AugStrategy::Cumulative,
            fixed_views: 1,
        }
    }
}

impl AblationFlags {
    pub fn view_plan(&self) -> ViewPlan {
        if self.hpa_on {
            ViewPlan { strategy: self.strategy, progressive_views: self.progressive_on, fixed_views: self.fixed_views }
        } else {
            ViewPlan { strategy: AugStrategy::Simple, progressive_views: false, fixed_views: 1 }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Precision {
    F32,
    F64,
}

impl TryFrom<u8> for Precision {
    type Error = String;

    fn try_from(bits: u8) -> std::result::Result<Self, String> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl From<Precision> for u8 {
    fn from(p: Precision) -> u8 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Domain names; episode `e` uses `domains[e % len]`.
    pub domains: Vec<String>,
    /// Extra domains that `domains` may refer to by name.
    pub custom_domains: Vec<DomainSpec>,
    pub k_shot: usize,
    /// Episodes per seed.
    pub episodes: usize,
    /// Held-out queries per episode.
    pub n_eval: usize,
    /// Episode `e` draws category `e % categories`.
    pub categories: u32,
    pub seeds: Vec<u64>,
    pub encoder: EncoderConfig,
    pub hpa: HpaConfig,
    pub dmp: DmpConfig,
    pub flags: AblationFlags,
    pub workers: usize,
    pub precision: Precision,
    /// Episodes whose support, query and prediction are saved as PNGs.
    pub sample_pngs: usize,
    #[serde(skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            domains: vec!["lesion-like".into()],
            custom_domains: Vec::new(),
            k_shot: 1,
            episodes: 20,
            n_eval: 5,
            categories: 5,
            seeds: vec![0],
            encoder: EncoderConfig::default(),
            hpa: HpaConfig::default(),
            dmp: DmpConfig::default(),
            flags: AblationFlags::default(),
            workers: 1,
            precision: Precision::F32,
            sample_pngs: 4,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let parse_err = |e: serde_json::Error| MpaError::config(format!("cannot parse config: {e}"));
        let value: serde_json::Value = serde_json::from_str(text).map_err(parse_err)?;
        // serde would otherwise accept a positional array
        if !value.is_object() {
            return Err(MpaError::config("config must be a JSON object"));
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(parse_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pretty JSON; `output_dir` is not echoed.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MpaError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.seeds.is_empty() {
            return Err(MpaError::config("at least one episode and one seed are required"));
        }
        if self.k_shot == 0 || self.n_eval == 0 || self.categories == 0 {
            return Err(MpaError::config("k_shot, n_eval and categories must be positive"));
        }
        if self.workers == 0 {
            return Err(MpaError::config("workers must be positive"));
        }
        if self.domains.is_empty() {
            return Err(MpaError::config("no domains configured"));
        }
        let specs = self.domain_specs()?;
        for s in &specs {
            s.validate()?;
            self.encoder.check_input(s.image_size, s.image_size).map_err(|e| MpaError::config(e.to_string()))?;
        }
        self.encoder.validate().map_err(|e| MpaError::config(e.to_string()))?;
        self.adapt_config().validate()
    }

    /// Resolves `domains` against the presets and `custom_domains`.
    pub fn domain_specs(&self) -> Result<Vec<DomainSpec>> {
        let presets = preset_domains();
        self.domains
            .iter()
            .map(|name| {
                self.custom_domains
                    .iter()
                    .chain(&presets)
                    .find(|d| &d.name == name)
                    .cloned()
                    .ok_or_else(|| MpaError::config(format!("unknown domain {name:?}")))
            })
            .collect()
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            max_epochs: self.dmp.max_epochs,
            lr: self.dmp.lr,
            temperature: self.dmp.temperature,
            weights: self.dmp.weights,
            optimizer: self.dmp.optimizer,
            ssp: self.dmp.ssp,
            hpa: self.hpa.clone(),
            views: self.flags.view_plan(),
            sequential: self.flags.dmp_sequential_on,
            parallel: self.flags.dmp_parallel_on,
        }
    }
}
