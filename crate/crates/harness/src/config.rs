//! Run configuration, read from a single TOML file. Every section and field
//! is optional; missing values take the defaults below.

use std::path::{Path, PathBuf};

use adascan_core::detector::DetectorConfig;
use adascan_core::losses::{DetectionLossConfig, LossWeights};
use adascan_core::maskgen::MaskGenConfig;
use adascan_core::predictor::PredictorConfig;
use adascan_core::rangeimage::BeamGrid;
use adascan_core::scenesim::ScenarioConfig;
use serde::{Deserialize, Serialize};

use crate::energy::EnergyModel;
use crate::error::{HarnessError, Result};

/// Environment variable overriding the output root.
pub const OUT_ENV: &str = "ADASCAN_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: BeamGrid,
    pub scenario: ScenarioConfig,
    pub data: DataConfig,
    pub detector: DetectorConfig,
    pub predictor: PredictorConfig,
    pub maskgen: MaskGenConfig,
    pub losses: LossWeights,
    pub detection_loss: DetectionLossConfig,
    pub guidance: GuidanceConfig,
    /// Scale of the nearest-voxel backward rule.
    pub voxel_alpha: f64,
    pub pretrain: StageSchedule,
    pub stage1: StageSchedule,
    pub stage2: StageSchedule,
    pub stage3: StageSchedule,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_sequences: usize,
    pub eval_sequences: usize,
    /// Frames per evaluation sequence.
    pub eval_frames: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Samples per box edge when rasterizing boxes into blocks.
    pub lattice: usize,
    pub dilation: usize,
    /// Boxes with a footprint at most this many square meters count as small.
    pub small_footprint: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSchedule {
    pub steps: usize,
    pub lr: f64,
    /// Frames (or windows) averaged per optimizer step.
    pub batch: usize,
    /// Probability that a training window uses a uniform-random beam mask
    /// instead of the learned one.
    pub random_mask_prob: f64,
    /// Probability that a window is scanned fully.
    pub full_scan_prob: f64,
    /// Probability that the rolling buffer receives a full-scan forward.
    pub buffer_full_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub radii: [f64; 2],
    /// Single-level operating points, densest last.
    pub operating_levels: Vec<f64>,
    /// Level of the primary operating point.
    pub primary_level: f64,
    pub energy: EnergyModel,
    /// Sample Gumbel noise at evaluation instead of taking the noiseless
    /// argmax.
    pub gumbel_noise: bool,
    /// Tolerance of the matched-sparsity calibration.
    pub sparsity_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            grid: BeamGrid::default(),
            scenario: ScenarioConfig::default(),
            data: DataConfig::default(),
            detector: DetectorConfig::default(),
            predictor: PredictorConfig::default(),
            maskgen: MaskGenConfig::default(),
            losses: LossWeights::default(),
            detection_loss: DetectionLossConfig::default(),
            guidance: GuidanceConfig::default(),
            voxel_alpha: 0.1,
            pretrain: StageSchedule { steps: 10000, lr: 2e-3, batch: 1, ..StageSchedule::default() },
            stage1: StageSchedule { steps: 3000, lr: 1e-3, batch: 4, ..StageSchedule::default() },
            stage2: StageSchedule { steps: 900, lr: 5e-4, batch: 1, random_mask_prob: 0.2, full_scan_prob: 0.1, buffer_full_prob: 0.5 },
            stage3: StageSchedule { steps: 1800, lr: 2.5e-4, batch: 1, random_mask_prob: 0.2, full_scan_prob: 0.1, buffer_full_prob: 0.5 },
            eval: EvalConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_sequences: 16, eval_sequences: 20, eval_frames: 24, train_seed: 1_000, eval_seed: 900_000 }
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { lattice: 3, dilation: 0, small_footprint: 2.5 }
    }
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self { steps: 100, lr: 1e-3, batch: 1, random_mask_prob: 0.0, full_scan_prob: 0.0, buffer_full_prob: 0.5 }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.3,
            radii: [2.0, 4.0],
            operating_levels: vec![0.0625, 0.125, 0.25, 0.5],
            primary_level: 0.0625,
            energy: EnergyModel::hdl32e(),
            gumbel_noise: false,
            sparsity_tolerance: 0.005,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.scenario.validate()?;
        self.detector.validate()?;
        self.predictor.validate()?;
        self.maskgen.validate()?;
        self.losses.validate()?;
        self.eval.energy.validate()?;
        let d = self.detector.d_model;
        if self.predictor.d_model != d || self.maskgen.d_model != d {
            return Err(HarnessError::Config("detector, predictor and maskgen must share d_model".into()));
        }
        if self.predictor.n_layers != self.detector.n_layers || self.predictor.n_queries != self.detector.n_queries {
            return Err(HarnessError::Config("predictor layer/query counts must match the detector".into()));
        }
        if self.data.eval_frames <= self.predictor.depth || self.scenario.frames <= 2 * self.predictor.depth {
            return Err(HarnessError::Config("sequences are too short for the buffer depth".into()));
        }
        if self.eval.operating_levels.is_empty() || !self.eval.operating_levels.contains(&self.eval.primary_level) {
            return Err(HarnessError::Config("primary_level must be one of operating_levels".into()));
        }
        Ok(())
    }
}

/// Output root: `--out`, else `$ADASCAN_OUT`, else `runs`.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}
