//! Subcommand implementations over an output root.
//!
//! Layout under the root: `data/`, `pretrain/`, `stage1/`, `stage2/`,
//! `stage3/`, `ablation/`, `eval/<protocol>/`, `compare/`, `energy/`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{self, SequenceData, Split};
use crate::energy::{energy_report, EnergyModel, EnergyReport};
use crate::error::{HarnessError, Result};
use crate::eval::{
    build_caches, calibrate_bias, export_mask, mask_from_logits, run_entire_sequence, run_next_frame, summarize, write_detections, write_frames,
    write_summaries, FrameMetrics, Policy, Protocol, Summary,
};
use crate::model::{Models, DETECTOR_FILE, MASKGEN_FILE, PREDICTOR_FILE};
use crate::pipeline::detect;
use crate::train::{self, JointOptions, StageReport, TeacherCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
    Three,
    /// Stage 3 without distillation and CVaR.
    Ablation,
}

impl Stage {
    pub fn dir(self) -> &'static str {
        match self {
            Stage::One => "stage1",
            Stage::Two => "stage2",
            Stage::Three => "stage3",
            Stage::Ablation => "ablation",
        }
    }

    fn parent(self) -> &'static str {
        match self {
            Stage::One => "pretrain",
            Stage::Two => "stage1",
            Stage::Three | Stage::Ablation => "stage2",
        }
    }
}

pub fn generate(cfg: &RunConfig, root: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = data::generate_split(cfg, root, Split::Train)?;
    paths.extend(data::generate_split(cfg, root, Split::Eval)?);
    Ok(paths)
}

pub fn pretrain(cfg: &RunConfig, root: &Path) -> Result<StageReport> {
    let train = data::load_split(cfg, Some(root), Split::Train)?;
    Ok(train::pretrain(cfg, &train, &root.join("pretrain"))?.1)
}

fn teacher(cfg: &RunConfig, root: &Path, train: &[SequenceData]) -> Result<TeacherCache> {
    let pre = Models::load(cfg, &root.join("pretrain"), &[DETECTOR_FILE])?;
    TeacherCache::build(&pre.detector, train, cfg.voxel_alpha)
}

pub fn train_stage(cfg: &RunConfig, root: &Path, stage: Stage) -> Result<StageReport> {
    let required: &[&str] = match stage {
        Stage::One => &[DETECTOR_FILE],
        _ => &[DETECTOR_FILE, PREDICTOR_FILE, MASKGEN_FILE],
    };
    let models = Models::load(cfg, &root.join(stage.parent()), required)?;
    let train = data::load_split(cfg, Some(root), Split::Train)?;
    let cache = teacher(cfg, root, &train)?;
    let out = root.join(stage.dir());
    let report = match stage {
        Stage::One => train::train_stage1(cfg, &train, models, &cache, &out)?.1,
        Stage::Two => train::train_joint(cfg, &train, models, &cache, &cfg.stage2, &JointOptions::stage2(cfg), &out)?.1,
        Stage::Three => train::train_joint(cfg, &train, models, &cache, &cfg.stage3, &JointOptions::stage3(cfg), &out)?.1,
        Stage::Ablation => train::train_joint(cfg, &train, models, &cache, &cfg.stage3, &JointOptions::ablation(cfg), &out)?.1,
    };
    Ok(report)
}

fn load_stage(cfg: &RunConfig, root: &Path, dir: &str) -> Result<Models> {
    Models::load(cfg, &root.join(dir), &[DETECTOR_FILE, PREDICTOR_FILE, MASKGEN_FILE])
}

pub fn level_tag(level: f64) -> String {
    format!("{level:.4}")
}

/// Per-sequence aggregates for every row.
pub fn sequence_summaries(frames: &[FrameMetrics]) -> Vec<Summary> {
    let mut keys: Vec<(String, u64)> = frames.iter().map(|f| (f.row.clone(), f.sequence)).collect();
    keys.dedup();
    let mut out = Vec::new();
    for (row, seq) in keys {
        let sub: Vec<FrameMetrics> = frames.iter().filter(|f| f.row == row && f.sequence == seq).cloned().collect();
        let mut s = summarize(&row, &sub);
        s.row = format!("{row}/seq_{seq}");
        out.push(s);
    }
    out
}

fn row_names(frames: &[FrameMetrics]) -> Vec<String> {
    let mut rows: Vec<String> = Vec::new();
    for f in frames {
        if !rows.contains(&f.row) {
            rows.push(f.row.clone());
        }
    }
    rows
}

pub fn summaries(frames: &[FrameMetrics]) -> Vec<Summary> {
    row_names(frames).iter().map(|r| summarize(r, frames)).collect()
}

fn write_eval_outputs(dir: &Path, frames: &[FrameMetrics]) -> Result<Vec<Summary>> {
    let sums = summaries(frames);
    write_frames(&dir.join("frames.csv"), frames)?;
    write_summaries(&dir.join("summary.csv"), &sums)?;
    write_summaries(&dir.join("sequences.csv"), &sequence_summaries(frames))?;
    Ok(sums)
}

/// Evaluates a checkpoint directory (default `stage3`) under one protocol.
pub fn evaluate(cfg: &RunConfig, root: &Path, protocol: Protocol, checkpoint: Option<&Path>) -> Result<Vec<Summary>> {
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| root.join(Stage::Three.dir()));
    let models = Models::load(cfg, &ckpt, &[DETECTOR_FILE, PREDICTOR_FILE, MASKGEN_FILE])?;
    let eval = data::load_split(cfg, Some(root), Split::Eval)?;
    let dir = root.join("eval").join(protocol.name());
    let mut frames = Vec::new();
    match protocol {
        Protocol::NextFrame => {
            let caches = build_caches(cfg, &models, &eval)?;
            frames.extend(run_next_frame(cfg, &models, &eval, &caches, "full", &Policy::Full)?);
            for &level in &cfg.eval.operating_levels {
                let row = format!("adaptive@{}", level_tag(level));
                frames.extend(run_next_frame(cfg, &models, &eval, &caches, &row, &Policy::Adaptive { level, bias: 0.0 })?);
            }
            export_primary_masks(cfg, &dir.join("masks"), &eval, &caches)?;
            let mut dets = Vec::new();
            for (seq, cache) in eval.iter().zip(&caches) {
                for (t, _) in cache.predictions.iter().enumerate().filter(|(_, p)| p.is_some()) {
                    dets.push((seq.seed, t, cache.full[t].dets.clone()));
                }
            }
            write_detections(&dir.join("detections_full.jsonl"), &dets)?;
        }
        Protocol::EntireSequence => {
            for &level in &cfg.eval.operating_levels {
                let row = format!("adaptive@{}", level_tag(level));
                frames.extend(run_entire_sequence(cfg, &models, &eval, &row, level, 0.0)?);
            }
        }
    }
    write_eval_outputs(&dir, &frames)
}

/// Masks at the primary level for the first eval sequence.
fn export_primary_masks(cfg: &RunConfig, dir: &Path, eval: &[SequenceData], caches: &[crate::eval::SequenceCache]) -> Result<()> {
    let (Some(seq), Some(cache)) = (eval.first(), caches.first()) else { return Ok(()) };
    let levels = [cfg.eval.primary_level];
    for (t, p) in cache.predictions.iter().enumerate() {
        let Some(p) = p else { continue };
        let m = mask_from_logits(cfg, &p.logits, 0.0, 0)?;
        let s = adascan_core::maskgen::expected_sparsity(&m, &levels, &cfg.grid)?;
        export_mask(dir, &format!("seq_{}_frame_{t:03}", seq.seed), &m, &levels, s)?;
    }
    Ok(())
}

/// Matched-sparsity row for one trained stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedRow {
    pub stage: String,
    pub bias: f64,
    pub target_sparsity: f64,
    pub calibrated_sparsity: f64,
    pub achieved_sparsity: f64,
    pub recall_near: f64,
    pub recall_far: f64,
    pub mean_center_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<Summary>,
    pub matched: Vec<MatchedRow>,
}

impl Comparison {
    pub fn row(&self, name: &str) -> Option<&Summary> {
        self.rows.iter().find(|r| r.row == name)
    }

    pub fn matched(&self, stage: &str) -> Option<&MatchedRow> {
        self.matched.iter().find(|r| r.stage == stage)
    }
}

fn matched_sparsity(frames: &[FrameMetrics], row: &str) -> Policy {
    Policy::Random {
        sparsity: frames.iter().filter(|f| f.row == row).map(|f| ((f.sequence, f.frame), f.sparsity)).collect(),
    }
}

/// Baseline table on the next-frame protocol plus the matched-sparsity stage
/// comparison.
pub fn compare(cfg: &RunConfig, root: &Path) -> Result<Comparison> {
    let eval = data::load_split(cfg, Some(root), Split::Eval)?;
    let dir = root.join("compare");
    let fin = load_stage(cfg, root, Stage::Three.dir())?;
    let caches = build_caches(cfg, &fin, &eval)?;
    let mut frames = Vec::new();

    let pre = Models::load(cfg, &root.join("pretrain"), &[DETECTOR_FILE])?;
    let depth = cfg.predictor.depth;
    for seq in &eval {
        for f in seq.frames.iter().skip(depth) {
            let dets = detect(&pre.detector, &f.cloud.points, &f.camera, cfg.voxel_alpha)?.dets;
            let (n_det, near, far, err, cls) = crate::eval::score_frame(&dets, &f.gt, &cfg.eval);
            frames.push(FrameMetrics {
                row: "full_pretrained".into(),
                sequence: seq.seed,
                frame: f.index,
                sparsity: 0.0,
                expected_sparsity: 0.0,
                n_gt: f.gt.len(),
                n_det,
                hits_near: near,
                hits_far: far,
                error_sum: err,
                class_correct: cls,
                joules: cfg.eval.energy.scan_joules(0.0)?,
                history: "full".into(),
            });
        }
    }
    frames.extend(run_next_frame(cfg, &fin, &eval, &caches, "full", &Policy::Full)?);
    for &level in &cfg.eval.operating_levels {
        let tag = level_tag(level);
        let row = format!("adaptive@{tag}");
        let adaptive = run_next_frame(cfg, &fin, &eval, &caches, &row, &Policy::Adaptive { level, bias: 0.0 })?;
        let random = run_next_frame(cfg, &fin, &eval, &caches, &format!("random@{tag}"), &matched_sparsity(&adaptive, &row))?;
        frames.extend(adaptive);
        frames.extend(random);
    }
    let level = cfg.eval.primary_level;
    let tag = level_tag(level);
    let oracle_row = format!("oracle@{tag}");
    let oracle = run_next_frame(cfg, &fin, &eval, &caches, &oracle_row, &Policy::Oracle { level })?;
    let oracle_random = run_next_frame(cfg, &fin, &eval, &caches, &format!("random_oracle@{tag}"), &matched_sparsity(&oracle, &oracle_row))?;
    frames.extend(oracle);
    frames.extend(oracle_random);
    let rows = write_eval_outputs(&dir, &frames)?;

    let matched = matched_stages(cfg, root, &eval, level)?;
    let mut w = csv::Writer::from_path(dir.join("matched.csv"))?;
    for r in &matched {
        w.serialize(r)?;
    }
    w.flush()?;
    let cmp = Comparison { rows, matched };
    std::fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&cmp)?)?;
    Ok(cmp)
}

/// Stage 2, stage 3 and the ablation, each biased to the stage-3 expected
/// sparsity at `level`.
fn matched_stages(cfg: &RunConfig, root: &Path, eval: &[SequenceData], level: f64) -> Result<Vec<MatchedRow>> {
    let mut out = Vec::new();
    let mut target = None;
    for stage in [Stage::Three, Stage::Two, Stage::Ablation] {
        let dir = root.join(stage.dir());
        if !dir.join(MASKGEN_FILE).exists() {
            if stage == Stage::Three {
                return Err(HarnessError::MissingCheckpoint(dir.join(MASKGEN_FILE)));
            }
            tracing::warn!(stage = stage.dir(), "checkpoint missing; skipped in matched comparison");
            continue;
        }
        let models = load_stage(cfg, root, stage.dir())?;
        let caches = build_caches(cfg, &models, eval)?;
        let t = match target {
            Some(t) => t,
            None => {
                let s = crate::eval::mean_expected_sparsity(cfg, eval, &caches, level, 0.0)?;
                target = Some(s);
                s
            }
        };
        let (bias, calibrated) = calibrate_bias(cfg, eval, &caches, level, t)?;
        let row = format!("matched_{}", stage.dir());
        let frames = run_next_frame(cfg, &models, eval, &caches, &row, &Policy::Adaptive { level, bias })?;
        let s = summarize(&row, &frames);
        out.push(MatchedRow {
            stage: stage.dir().into(),
            bias,
            target_sparsity: t,
            calibrated_sparsity: calibrated,
            achieved_sparsity: s.mean_sparsity,
            recall_near: s.recall_near,
            recall_far: s.recall_far,
            mean_center_error: s.mean_center_error,
        });
    }
    Ok(out)
}

/// Energy totals per row of an eval frames CSV, or for explicit sparsities.
pub fn energy(cfg: &RunConfig, root: &Path, model: Option<&str>, sparsity: &[f64]) -> Result<Vec<(String, EnergyReport)>> {
    let model = match model {
        Some(name) => EnergyModel::by_name(name)?,
        None => cfg.eval.energy.clone(),
    };
    let reports = if sparsity.is_empty() {
        let path = root.join("eval").join(Protocol::NextFrame.name()).join("frames.csv");
        if !path.exists() {
            return Err(HarnessError::Config(format!("{} not found; run eval first or pass --sparsity", path.display())));
        }
        let mut rd = csv::Reader::from_path(&path)?;
        let frames: Vec<FrameMetrics> = rd.deserialize().collect::<std::result::Result<_, _>>()?;
        row_names(&frames)
            .into_iter()
            .map(|row| {
                let s: Vec<f64> = frames.iter().filter(|f| f.row == row).map(|f| f.sparsity).collect();
                Ok((row, energy_report(&s, &model)?))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![("given".to_string(), energy_report(sparsity, &model)?)]
    };
    let dir = root.join("energy");
    std::fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_path(dir.join(format!("energy_{}.csv", model.name)))?;
    for (row, r) in &reports {
        w.write_record([
            row.as_str(),
            &r.model,
            &r.scans.to_string(),
            &r.joules_per_scan.to_string(),
            &r.joules_per_sequence.to_string(),
            &r.percent_saved.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(reports)
}

/// Every stage reported by a full run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stages: Vec<StageReport>,
    pub next_frame: Vec<Summary>,
    pub entire_sequence: Vec<Summary>,
    pub comparison: Comparison,
    pub seconds: f64,
}

/// Generate, pretrain, three stages plus the ablation, both protocols and the
/// comparison.
pub fn run_all(cfg: &RunConfig, root: &Path) -> Result<PipelineReport> {
    let started = std::time::Instant::now();
    cfg.validate()?;
    std::fs::create_dir_all(root)?;
    std::fs::write(root.join("config.toml"), cfg.to_toml()?)?;
    generate(cfg, root)?;
    let mut stages = vec![pretrain(cfg, root)?];
    for stage in [Stage::One, Stage::Two, Stage::Three, Stage::Ablation] {
        tracing::info!(stage = stage.dir(), "training");
        stages.push(train_stage(cfg, root, stage)?);
    }
    let next_frame = evaluate(cfg, root, Protocol::NextFrame, None)?;
    let entire_sequence = evaluate(cfg, root, Protocol::EntireSequence, None)?;
    let comparison = compare(cfg, root)?;
    energy(cfg, root, None, &[])?;
    let report = PipelineReport { stages, next_frame, entire_sequence, comparison, seconds: started.elapsed().as_secs_f64() };
    std::fs::write(root.join("pipeline.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
