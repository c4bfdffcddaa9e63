//! Synthetic train/eval splits. Sequences are raycast once with every beam
//! enabled; masked scans are taken as subsets of the full clouds, which the
//! per-beam noise seeding makes exact.

use std::path::{Path, PathBuf};

use adascan_core::boxes::ActorBox;
use adascan_core::detector::visible_truth;
use adascan_core::geometry::{Mat3, Vec3};
use adascan_core::losses::small_object_pixels;
use adascan_core::rangeimage::{rasterize_guidance_mask, BeamPattern, GuidanceMask};
use adascan_core::scenesim::{
    camera_bev, generate_scenario, ground_truth_boxes, load_sequence, mix_seed, save_sequence, PointCloud, SceneSequence,
};
use numkernel::Tensor;

use crate::config::RunConfig;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug)]
pub struct FrameData {
    pub index: usize,
    pub cloud: PointCloud,
    /// Sensor-frame boxes inside the detector's extent.
    pub gt: Vec<ActorBox>,
    pub camera: Tensor,
    pub rotation: Mat3,
    pub timestamp: f64,
    /// Blocks covered by any actor.
    pub guidance: GuidanceMask,
    /// Blocks covered by small actors.
    pub small_pixels: Vec<usize>,
}

impl FrameData {
    /// Points whose beam is enabled in `pattern`.
    pub fn masked_points(&self, pattern: &BeamPattern) -> Vec<Vec3> {
        self.cloud.points.iter().zip(&self.cloud.beams).filter(|(_, &b)| pattern.bits[b as usize]).map(|(p, _)| *p).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SequenceData {
    pub seed: u64,
    pub frames: Vec<FrameData>,
}

pub fn split_seeds(cfg: &RunConfig, split: Split) -> Vec<u64> {
    let (n, base) = match split {
        Split::Train => (cfg.data.train_sequences, cfg.data.train_seed),
        Split::Eval => (cfg.data.eval_sequences, cfg.data.eval_seed),
    };
    (0..n as u64).map(|i| base + i).collect()
}

fn scenario_for(cfg: &RunConfig, split: Split) -> adascan_core::scenesim::ScenarioConfig {
    let mut sc = cfg.scenario.clone();
    if split == Split::Eval {
        sc.frames = cfg.data.eval_frames;
    }
    sc
}

/// Generates and raycasts one sequence.
pub fn generate(cfg: &RunConfig, split: Split, seed: u64) -> Result<SceneSequence> {
    let mut seq = generate_scenario(&scenario_for(cfg, split), &cfg.grid, seed)?;
    seq.scan_all(None)?;
    Ok(seq)
}

/// Per-frame training/eval view of a scanned sequence.
pub fn prepare(cfg: &RunConfig, seq: &SceneSequence) -> Result<SequenceData> {
    let g = &cfg.guidance;
    let mut frames = Vec::with_capacity(seq.frames.len());
    for f in &seq.frames {
        let boxes = ground_truth_boxes(f);
        let cloud = f.cloud.clone().ok_or_else(|| crate::error::HarnessError::Config("sequence frame was not scanned".into()))?;
        frames.push(FrameData {
            index: f.index,
            cloud,
            gt: visible_truth(&boxes, &cfg.detector),
            camera: camera_bev(&boxes, &cfg.detector.camera, mix_seed(&[seq.seed, 0xCA]), f.index),
            rotation: f.pose.rotation,
            timestamp: f.pose.timestamp,
            guidance: rasterize_guidance_mask(&boxes, &cfg.grid, g.lattice, g.dilation),
            small_pixels: small_object_pixels(&boxes, &cfg.grid, g.lattice, g.dilation, g.small_footprint),
        });
    }
    Ok(SequenceData { seed: seq.seed, frames })
}

pub fn sequence_path(root: &Path, split: Split, seed: u64) -> PathBuf {
    root.join("data").join(split.name()).join(format!("seq_{seed}.adsq"))
}

/// Writes every sequence of a split under `root/data/<split>/`.
pub fn generate_split(cfg: &RunConfig, root: &Path, split: Split) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for seed in split_seeds(cfg, split) {
        let path = sequence_path(root, split, seed);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        save_sequence(&generate(cfg, split, seed)?, &path)?;
        out.push(path);
    }
    Ok(out)
}

/// Loads a split from disk when a matching file exists, generating the
/// missing or stale sequences otherwise.
pub fn load_split(cfg: &RunConfig, root: Option<&Path>, split: Split) -> Result<Vec<SequenceData>> {
    let scenario = scenario_for(cfg, split);
    let mut out = Vec::new();
    for seed in split_seeds(cfg, split) {
        let cached = root.map(|r| sequence_path(r, split, seed)).filter(|p| p.exists());
        let seq = match cached.map(|p| load_sequence(&p)) {
            Some(Ok(s)) if s.config == scenario && s.grid == cfg.grid => s,
            Some(Ok(_)) => {
                tracing::warn!(seed, "stored sequence was generated with a different config; regenerating");
                generate(cfg, split, seed)?
            }
            Some(Err(e)) => {
                tracing::warn!(seed, error = %e, "stored sequence unreadable; regenerating");
                generate(cfg, split, seed)?
            }
            None => generate(cfg, split, seed)?,
        };
        out.push(prepare(cfg, &seq)?);
    }
    Ok(out)
}
