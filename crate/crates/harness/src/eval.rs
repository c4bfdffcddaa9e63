//! Evaluation protocols, baseline comparison and metric aggregation.

use std::collections::HashMap;
use std::path::Path;

use adascan_core::boxes::ActorBox;
use adascan_core::detector::matching::hungarian;
use adascan_core::detector::Detection;
use adascan_core::geometry;
use adascan_core::maskgen::{bias_logits, expected_sparsity, gumbel_noise, gumbel_softmax_values, inference_pattern, random_pattern, ScanMask};
use adascan_core::predictor::QueryBuffer;
use adascan_core::rangeimage::BeamPattern;
use adascan_core::scenesim::mix_seed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, RunConfig};
use crate::data::{FrameData, SequenceData};
use crate::energy::EnergyModel;
use crate::error::{HarnessError, Result};
use crate::model::Models;
use crate::pipeline::{buffer_frame, detect, predict, DetectOut, Prediction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// History comes from full scans; only the current frame is adaptive.
    NextFrame,
    /// After a full-scan warmup every frame, history included, is adaptive.
    EntireSequence,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::NextFrame => "next-frame",
            Protocol::EntireSequence => "entire-sequence",
        }
    }
}

/// One evaluated frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub row: String,
    pub sequence: u64,
    pub frame: usize,
    pub sparsity: f64,
    pub expected_sparsity: f64,
    pub n_gt: usize,
    pub n_det: usize,
    pub hits_near: usize,
    pub hits_far: usize,
    /// Sum of center errors over matches within the far radius.
    pub error_sum: f64,
    pub class_correct: usize,
    pub joules: f64,
    /// Where the buffered history came from: `full` or `adaptive`.
    pub history: String,
}

/// Aggregate over frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub row: String,
    pub frames: usize,
    pub recall_near: f64,
    pub recall_far: f64,
    pub precision_near: f64,
    pub mean_center_error: f64,
    pub class_accuracy: f64,
    pub mean_sparsity: f64,
    pub mean_expected_sparsity: f64,
    pub joules_per_scan: f64,
}

/// Scores confident detections against the truth with a one-to-one
/// center-distance matching.
pub fn score_frame(dets: &[Detection], gt: &[ActorBox], cfg: &EvalConfig) -> (usize, usize, usize, f64, usize) {
    let kept: Vec<&Detection> = dets.iter().filter(|d| d.score >= cfg.score_threshold).collect();
    let mut cost = Vec::with_capacity(kept.len() * gt.len());
    for d in &kept {
        for g in gt {
            cost.push(geometry::dist(d.center, g.center));
        }
    }
    let assign = hungarian(&cost, kept.len(), gt.len());
    let (mut near, mut far, mut err, mut cls) = (0, 0, 0.0, 0);
    for (i, a) in assign.iter().enumerate() {
        let Some(j) = *a else { continue };
        let d = cost[i * gt.len() + j];
        if d <= cfg.radii[0] {
            near += 1;
        }
        if d <= cfg.radii[1] {
            far += 1;
            err += d;
            if kept[i].class == gt[j].class {
                cls += 1;
            }
        }
    }
    (kept.len(), near, far, err, cls)
}

#[allow(clippy::too_many_arguments)]
fn frame_metrics(
    row: &str,
    seq: u64,
    frame: &FrameData,
    dets: &[Detection],
    sparsity: f64,
    expected: f64,
    cfg: &EvalConfig,
    energy: &EnergyModel,
    history: &str,
) -> Result<FrameMetrics> {
    let (n_det, near, far, err, cls) = score_frame(dets, &frame.gt, cfg);
    Ok(FrameMetrics {
        row: row.into(),
        sequence: seq,
        frame: frame.index,
        sparsity,
        expected_sparsity: expected,
        n_gt: frame.gt.len(),
        n_det,
        hits_near: near,
        hits_far: far,
        error_sum: err,
        class_correct: cls,
        joules: energy.scan_joules(sparsity)?,
        history: history.into(),
    })
}

pub fn summarize(row: &str, frames: &[FrameMetrics]) -> Summary {
    let rows: Vec<&FrameMetrics> = frames.iter().filter(|f| f.row == row).collect();
    let n = rows.len().max(1) as f64;
    let gt: usize = rows.iter().map(|f| f.n_gt).sum();
    let det: usize = rows.iter().map(|f| f.n_det).sum();
    let near: usize = rows.iter().map(|f| f.hits_near).sum();
    let far: usize = rows.iter().map(|f| f.hits_far).sum();
    let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
    Summary {
        row: row.into(),
        frames: rows.len(),
        recall_near: ratio(near as f64, gt),
        recall_far: ratio(far as f64, gt),
        precision_near: ratio(near as f64, det),
        mean_center_error: ratio(rows.iter().map(|f| f.error_sum).sum(), far),
        class_accuracy: ratio(rows.iter().map(|f| f.class_correct).sum::<usize>() as f64, far),
        mean_sparsity: rows.iter().map(|f| f.sparsity).sum::<f64>() / n,
        mean_expected_sparsity: rows.iter().map(|f| f.expected_sparsity).sum::<f64>() / n,
        joules_per_scan: rows.iter().map(|f| f.joules).sum::<f64>() / n,
    }
}

/// Full-scan outputs and next-frame predictions for one sequence, with the
/// buffer always filled from full scans.
pub struct SequenceCache {
    pub full: Vec<DetectOut>,
    /// Indexed by frame; `None` during warmup.
    pub predictions: Vec<Option<Prediction>>,
}

pub fn build_cache(cfg: &RunConfig, models: &Models, seq: &SequenceData) -> Result<SequenceCache> {
    let det = &models.detector;
    let full: Vec<DetectOut> = seq.frames.iter().map(|f| detect(det, &f.cloud.points, &f.camera, cfg.voxel_alpha)).collect::<Result<_>>()?;
    let depth = cfg.predictor.depth;
    let mut buffer = QueryBuffer::new(depth);
    let mut predictions = Vec::with_capacity(seq.frames.len());
    for (t, f) in seq.frames.iter().enumerate() {
        predictions.push(if buffer.is_full() { Some(predict(det, &models.predictor, &models.maskgen, &buffer)?) } else { None });
        buffer.push(buffer_frame(&full[t], f, cfg.predictor.score_floor))?;
    }
    Ok(SequenceCache { full, predictions })
}

pub fn build_caches(cfg: &RunConfig, models: &Models, data: &[SequenceData]) -> Result<Vec<SequenceCache>> {
    data.iter().map(|s| build_cache(cfg, models, s)).collect()
}

/// Block mask from logits, optionally with Gumbel noise.
pub fn mask_from_logits(cfg: &RunConfig, logits: &[f64], bias: f64, noise_seed: u64) -> Result<ScanMask> {
    let z = bias_logits(logits, bias);
    let g = &cfg.grid;
    let noise = cfg.eval.gumbel_noise.then(|| gumbel_noise(2 * g.blocks(), &mut ChaCha8Rng::seed_from_u64(noise_seed)));
    Ok(gumbel_softmax_values(&z, g.h_b, g.w_b, cfg.maskgen.tau_end, noise.as_deref())?)
}

/// Ground-truth guidance as a block mask whose sparse blocks use `level`.
pub fn oracle_mask(frame: &FrameData, level: f64) -> ScanMask {
    let g = &frame.guidance;
    let mut m = ScanMask::all_sparse(g.h_b, g.w_b, level);
    for (h, &v) in m.hard.iter_mut().zip(&g.values) {
        if v {
            *h = true;
        }
    }
    m
}

/// How the current frame's beams are chosen.
#[derive(Clone, Debug)]
pub enum Policy {
    Full,
    Adaptive { level: f64, bias: f64 },
    Oracle { level: f64 },
    /// Uniform-random beams at the sparsity recorded per (sequence, frame).
    Random { sparsity: HashMap<(u64, usize), f64> },
}

fn pattern_seed(cfg: &RunConfig, seq: u64, frame: usize) -> u64 {
    mix_seed(&[cfg.seed, seq, frame as u64, 0xBE])
}

fn pattern_for(cfg: &RunConfig, policy: &Policy, seq: &SequenceData, t: usize, logits: &[f64]) -> Result<(BeamPattern, f64)> {
    let grid = &cfg.grid;
    let frame = &seq.frames[t];
    let mut rng = ChaCha8Rng::seed_from_u64(pattern_seed(cfg, seq.seed, t));
    Ok(match policy {
        Policy::Full => (BeamPattern::full(grid), 0.0),
        Policy::Adaptive { level, bias } => {
            let m = mask_from_logits(cfg, logits, *bias, mix_seed(&[pattern_seed(cfg, seq.seed, t), 1]))?;
            (inference_pattern(&m, &[*level], grid, &mut rng)?, expected_sparsity(&m, &[*level], grid)?)
        }
        Policy::Oracle { level } => {
            let m = oracle_mask(frame, *level);
            (inference_pattern(&m, &[*level], grid, &mut rng)?, expected_sparsity(&m, &[*level], grid)?)
        }
        Policy::Random { sparsity } => {
            let s = *sparsity
                .get(&(seq.seed, frame.index))
                .ok_or_else(|| HarnessError::Config(format!("no matched sparsity for sequence {} frame {}", seq.seed, frame.index)))?;
            (random_pattern(grid, s, pattern_seed(cfg, seq.seed, t)), s)
        }
    })
}

/// Next-frame protocol for one policy over cached predictions.
pub fn run_next_frame(cfg: &RunConfig, models: &Models, data: &[SequenceData], caches: &[SequenceCache], row: &str, policy: &Policy) -> Result<Vec<FrameMetrics>> {
    let mut out = Vec::new();
    for (seq, cache) in data.iter().zip(caches) {
        for (t, frame) in seq.frames.iter().enumerate() {
            let Some(pred) = &cache.predictions[t] else { continue };
            let (pattern, expected) = pattern_for(cfg, policy, seq, t, &pred.logits)?;
            let dets = if matches!(policy, Policy::Full) {
                cache.full[t].dets.clone()
            } else {
                detect(&models.detector, &frame.masked_points(&pattern), &frame.camera, cfg.voxel_alpha)?.dets
            };
            out.push(frame_metrics(row, seq.seed, frame, &dets, pattern.sparsity(), expected, &cfg.eval, &cfg.eval.energy, "full")?);
        }
    }
    Ok(out)
}

/// Entire-sequence protocol: full-scan warmup, then adaptive scans feed both
/// the detections and the history. Warmup frames are not scored.
pub fn run_entire_sequence(cfg: &RunConfig, models: &Models, data: &[SequenceData], row: &str, level: f64, bias: f64) -> Result<Vec<FrameMetrics>> {
    let depth = cfg.predictor.depth;
    let det = &models.detector;
    let policy = Policy::Adaptive { level, bias };
    let mut out = Vec::new();
    for seq in data {
        let mut buffer = QueryBuffer::new(depth);
        for (t, frame) in seq.frames.iter().enumerate() {
            if !buffer.is_full() {
                let o = detect(det, &frame.cloud.points, &frame.camera, cfg.voxel_alpha)?;
                buffer.push(buffer_frame(&o, frame, cfg.predictor.score_floor))?;
                continue;
            }
            let pred = predict(det, &models.predictor, &models.maskgen, &buffer)?;
            let (pattern, expected) = pattern_for(cfg, &policy, seq, t, &pred.logits)?;
            let o = detect(det, &frame.masked_points(&pattern), &frame.camera, cfg.voxel_alpha)?;
            let history = if t == depth { "full" } else { "adaptive" };
            out.push(frame_metrics(row, seq.seed, frame, &o.dets, pattern.sparsity(), expected, &cfg.eval, &cfg.eval.energy, history)?);
            buffer.push(buffer_frame(&o, frame, cfg.predictor.score_floor))?;
        }
    }
    Ok(out)
}

/// Mean expected sparsity over every cached prediction at `level` with a
/// full-logit offset `bias`.
pub fn mean_expected_sparsity(cfg: &RunConfig, data: &[SequenceData], caches: &[SequenceCache], level: f64, bias: f64) -> Result<f64> {
    let mut s = 0.0;
    let mut n = 0usize;
    for (seq, cache) in data.iter().zip(caches) {
        for (t, p) in cache.predictions.iter().enumerate() {
            let Some(p) = p else { continue };
            let m = mask_from_logits(cfg, &p.logits, bias, mix_seed(&[pattern_seed(cfg, seq.seed, t), 1]))?;
            s += expected_sparsity(&m, &[level], &cfg.grid)?;
            n += 1;
        }
    }
    Ok(s / n.max(1) as f64)
}

/// Bias on the full-scan logit that brings the mean expected sparsity to
/// `target` (bisection; sparsity falls as the bias grows).
pub fn calibrate_bias(cfg: &RunConfig, data: &[SequenceData], caches: &[SequenceCache], level: f64, target: f64) -> Result<(f64, f64)> {
    let (mut lo, mut hi) = (-30.0, 30.0);
    let mut best = (0.0, mean_expected_sparsity(cfg, data, caches, level, 0.0)?);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let s = mean_expected_sparsity(cfg, data, caches, level, mid)?;
        if (s - target).abs() < (best.1 - target).abs() {
            best = (mid, s);
        }
        if (s - target).abs() <= cfg.eval.sparsity_tolerance * 0.1 {
            break;
        }
        if s > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

pub fn write_frames(path: &Path, rows: &[FrameMetrics]) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summaries(path: &Path, rows: &[Summary]) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-frame detections as JSON lines.
pub fn write_detections(path: &Path, entries: &[(u64, usize, Vec<Detection>)]) -> Result<()> {
    use std::io::Write;
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (seq, frame, dets) in entries {
        let line = serde_json::json!({ "sequence": seq, "frame": frame, "detections": dets });
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

/// Exports a block mask as a binary PGM plus a JSON sidecar.
pub fn export_mask(dir: &Path, stem: &str, mask: &ScanMask, levels: &[f64], sparsity: f64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut pgm = format!("P5\n{} {}\n255\n", mask.w_b, mask.h_b).into_bytes();
    pgm.extend(mask.hard.iter().map(|&h| if h { 255u8 } else { 0 }));
    std::fs::write(dir.join(format!("{stem}.pgm")), pgm)?;
    let sidecar = serde_json::json!({
        "h_b": mask.h_b,
        "w_b": mask.w_b,
        "tau": mask.tau,
        "levels": levels,
        "expected_sparsity": sparsity,
        "soft_full": mask.soft.iter().map(|s| s[0]).collect::<Vec<_>>(),
    });
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}
