//! Training objectives: detection, query distillation, focal mask loss and
//! the CVaR tail loss over small-object blocks.

use numkernel::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::boxes::ActorBox;
use crate::detector::{HeadOut, BACKGROUND, HEAD_OUT, NUM_LOGITS, OUT_COS, OUT_LOG_SIZE, OUT_SIN, OUT_VEL};
use crate::error::{invalid, CoreError, Result};
use crate::rangeimage::{rasterize_guidance_mask, BeamGrid, GuidanceMask};

/// `FL(p, y) = −α_y (1 − p_y)^γ log p_y` with `α_1 = alpha`,
/// `α_0 = 1 − alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25 }
    }
}

impl FocalParams {
    pub fn alpha_for(&self, positive: bool) -> f64 {
        if positive {
            self.alpha
        } else {
            1.0 - self.alpha
        }
    }
}

/// Focal loss of one binary pixel with full-scan probability `p_full`.
pub fn focal_value(p_full: f64, positive: bool, fp: FocalParams) -> f64 {
    let p_y = if positive { p_full } else { 1.0 - p_full };
    -fp.alpha_for(positive) * (1.0 - p_y).powf(fp.gamma) * p_y.ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub distill: f64,
    pub mask: f64,
    pub cvar: f64,
    /// Tail fraction for CVaR.
    pub beta: f64,
    pub focal: FocalParams,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { distill: 1.0, mask: 1.0, cvar: 0.5, beta: 0.25, focal: FocalParams::default() }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(CoreError::Config(format!("loss weights: beta must lie in (0, 1), got {}", self.beta)));
        }
        if [self.distill, self.mask, self.cvar].iter().any(|&l| !(l >= 0.0)) {
            return Err(CoreError::Config("loss weights: lambdas must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-block focal losses and their mean.
#[derive(Clone, Debug)]
pub struct MaskLossBreakdown {
    /// `[blocks]`.
    pub per_pixel: Var,
    pub mean: Var,
    /// Losses of the small-object blocks, `[n_small]`; `None` when empty.
    pub small: Option<Var>,
    pub small_pixels: Vec<usize>,
}

/// Focal loss of the full-scan channel against the guidance mask.
/// `log_soft` holds `[blocks, 2]` log-probabilities in (full, sparse) order.
pub fn mask_loss(tape: &mut Tape, log_soft: Var, target: &GuidanceMask, small_pixels: &[usize], fp: FocalParams) -> Result<MaskLossBreakdown> {
    let n = target.values.len();
    let shape = tape.shape(log_soft).to_vec();
    if shape != [n, 2] {
        return Err(CoreError::Shape { what: "mask loss", expected: vec![n, 2], got: shape });
    }
    // Select log p_y per block: channel 0 for positives, 1 for negatives.
    let select: Vec<f64> = target.values.iter().flat_map(|&y| if y { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
    let select = tape.constant(Tensor::new(&[n, 2], select)?);
    let picked = tape.mul(log_soft, select)?;
    let log_py = tape.sum_axis(picked, 1)?;
    let py = tape.exp(log_py);
    let q = tape.neg(py);
    let q = tape.add_scalar(q, 1.0);
    let modulating = tape.powf(q, fp.gamma);
    let alpha = tape.constant(Tensor::from_vec(target.values.iter().map(|&y| fp.alpha_for(y)).collect()));
    let w = tape.mul(modulating, alpha)?;
    let l = tape.mul(w, log_py)?;
    let per_pixel = tape.neg(l);
    let mean = tape.mean(per_pixel);
    let small = if small_pixels.is_empty() { None } else { Some(tape.index_select(per_pixel, small_pixels)?) };
    Ok(MaskLossBreakdown { per_pixel, mean, small, small_pixels: small_pixels.to_vec() })
}

/// Block indices covered by boxes whose footprint is at most
/// `max_footprint` square meters.
pub fn small_object_pixels(boxes: &[ActorBox], grid: &BeamGrid, lattice: usize, dilation: usize, max_footprint: f64) -> Vec<usize> {
    let small: Vec<ActorBox> = boxes.iter().filter(|b| b.footprint_area() <= max_footprint).cloned().collect();
    if small.is_empty() {
        return Vec::new();
    }
    let m = rasterize_guidance_mask(&small, grid, lattice, dilation);
    m.values.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect()
}

/// 1-indexed descending rank of the threshold sample, `⌈(1 − β) n⌉`
/// clamped to `[1, n]`.
pub fn cvar_rank(n: usize, beta: f64) -> usize {
    // Guard against (1 − β)·n landing a rounding error above an integer.
    let k = ((1.0 - beta) * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

/// `m* + Σ max(ℓ − m*, 0) / (β n)` with `m*` the `cvar_rank`-th largest loss.
pub fn cvar_value(losses: &[f64], beta: f64) -> Result<f64> {
    if losses.is_empty() {
        return Err(invalid("cvar", "empty loss set"));
    }
    if !(beta > 0.0 && beta <= 1.0) || losses.iter().any(|l| !l.is_finite()) {
        return Err(invalid("cvar", "beta must lie in (0, 1] and losses must be finite"));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let m = sorted[cvar_rank(losses.len(), beta) - 1];
    let excess: f64 = losses.iter().map(|l| (l - m).max(0.0)).sum();
    Ok(m + excess / (beta * losses.len() as f64))
}

/// Tape version of [`cvar_value`]; the threshold sample is chosen on values
/// and differentiated through as a selected entry.
pub fn cvar_loss(tape: &mut Tape, losses: Option<Var>, beta: f64) -> Result<Var> {
    let Some(losses) = losses else {
        tracing::debug!("cvar: no small-object blocks, term contributes 0");
        return Ok(tape.scalar(0.0));
    };
    let vals = tape.value(losses).data().to_vec();
    if vals.is_empty() {
        tracing::debug!("cvar: no small-object blocks, term contributes 0");
        return Ok(tape.scalar(0.0));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(invalid("cvar", format!("beta must lie in (0, 1], got {beta}")));
    }
    let n = vals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let idx = order[cvar_rank(n, beta) - 1];
    let m = tape.index_select(losses, &[idx])?;
    let d = tape.sub(losses, m)?;
    let d = tape.relu(d);
    let s = tape.sum(d);
    let s = tape.scale(s, 1.0 / (beta * n as f64));
    let m = tape.reshape(m, &[])?;
    Ok(tape.add(m, s)?)
}

/// Mean absolute difference over all layers, queries and features.
pub fn distill_loss(tape: &mut Tape, predicted: &[Var], reference: &[Var]) -> Result<Var> {
    if predicted.len() != reference.len() || predicted.is_empty() {
        return Err(invalid("distill_loss", format!("stack depths {} vs {}", predicted.len(), reference.len())));
    }
    let mut total = None;
    let mut count = 0usize;
    for (&p, &r) in predicted.iter().zip(reference) {
        let (sp, sr) = (tape.shape(p).to_vec(), tape.shape(r).to_vec());
        if sp != sr {
            return Err(CoreError::Shape { what: "distill layer", expected: sr, got: sp });
        }
        count += tape.value(p).len();
        let d = tape.sub(p, r)?;
        let a = tape.abs(d);
        let s = tape.sum(a);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / count as f64))
}

/// One frame's loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTerms<T> {
    pub detection: T,
    pub distill: T,
    pub mask: T,
    pub cvar: T,
}

pub fn composite_value(frames: &[FrameTerms<f64>], w: &LossWeights) -> Result<f64> {
    if frames.is_empty() {
        return Err(invalid("composite", "need at least one frame (T ≥ 2)"));
    }
    let s: f64 = frames.iter().map(|f| f.detection + w.distill * f.distill + w.mask * f.mask + w.cvar * f.cvar).sum();
    Ok(s / frames.len() as f64)
}

/// Average over the `T − 1` frames of `L3D + λ1 Ldistill + λ2 Lmask + λ3 LCVaR`.
pub fn composite(tape: &mut Tape, frames: &[FrameTerms<Var>], w: &LossWeights) -> Result<Var> {
    if frames.is_empty() {
        return Err(invalid("composite", "need at least one frame (T ≥ 2)"));
    }
    let mut total: Option<Var> = None;
    for f in frames {
        let d = tape.scale(f.distill, w.distill);
        let m = tape.scale(f.mask, w.mask);
        let c = tape.scale(f.cvar, w.cvar);
        let s = tape.add(f.detection, d)?;
        let s = tape.add(s, m)?;
        let s = tape.add(s, c)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / frames.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionLossConfig {
    pub focal_gamma: f64,
    /// Weight of object targets; background targets get `1 − alpha`.
    pub focal_alpha: f64,
    pub w_center: f64,
    pub w_size: f64,
    pub w_yaw: f64,
    pub w_velocity: f64,
    /// Added to the center distance when matching mismatched classes.
    pub class_penalty: f64,
}

impl Default for DetectionLossConfig {
    fn default() -> Self {
        Self { focal_gamma: 2.0, focal_alpha: 0.5, w_center: 1.0, w_size: 1.0, w_yaw: 0.5, w_velocity: 0.5, class_penalty: 2.0 }
    }
}

/// Regression target columns: center (3), log-size (3), sin/cos yaw (2) and
/// scaled velocity (3).
pub const REGRESSION_WIDTH: usize = 11;

pub fn regression_target(b: &ActorBox, velocity_scale: f64) -> [f64; REGRESSION_WIDTH] {
    [
        b.center[0],
        b.center[1],
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
        b.velocity[0] / velocity_scale,
        b.velocity[1] / velocity_scale,
        b.velocity[2] / velocity_scale,
    ]
}

pub fn regression_weights(cfg: &DetectionLossConfig) -> [f64; REGRESSION_WIDTH] {
    let (c, s, y, v) = (cfg.w_center, cfg.w_size, cfg.w_yaw, cfg.w_velocity);
    [c, c, c, s, s, s, y, y, v, v, v]
}

/// Target class index of each query: the matched box's class or background.
pub fn class_targets(gt: &[ActorBox], assignment: &[Option<usize>]) -> Vec<usize> {
    assignment.iter().map(|a| a.map_or(BACKGROUND, |g| gt[g].class.index())).collect()
}

/// Softmax focal classification over every query plus weighted L1 regression
/// on matched queries, both normalized by `max(1, #boxes)`.
pub fn detection_loss(
    tape: &mut Tape,
    head: &HeadOut,
    gt: &[ActorBox],
    assignment: &[Option<usize>],
    cfg: &DetectionLossConfig,
    velocity_scale: f64,
) -> Result<Var> {
    let n = assignment.len();
    let shape = tape.shape(head.raw).to_vec();
    if shape != [n, HEAD_OUT] {
        return Err(CoreError::Shape { what: "detection head", expected: vec![n, HEAD_OUT], got: shape });
    }
    if assignment.iter().flatten().any(|&g| g >= gt.len()) {
        return Err(invalid("detection_loss", "assignment references a missing box"));
    }
    let norm = 1.0 / (gt.len().max(1) as f64);
    let targets = class_targets(gt, assignment);
    let logits = tape.narrow(head.raw, 1, crate::detector::OUT_CLS, NUM_LOGITS)?;
    let log_p = tape.log_softmax(logits, 1)?;
    let one_hot: Vec<f64> = targets.iter().flat_map(|&c| (0..NUM_LOGITS).map(move |k| if k == c { 1.0 } else { 0.0 })).collect();
    let one_hot = tape.constant(Tensor::new(&[n, NUM_LOGITS], one_hot)?);
    let picked = tape.mul(log_p, one_hot)?;
    let log_pt = tape.sum_axis(picked, 1)?;
    let pt = tape.exp(log_pt);
    let q = tape.neg(pt);
    let q = tape.add_scalar(q, 1.0);
    let modulating = tape.powf(q, cfg.focal_gamma);
    let alpha: Vec<f64> = targets.iter().map(|&c| if c == BACKGROUND { 1.0 - cfg.focal_alpha } else { cfg.focal_alpha }).collect();
    let alpha = tape.constant(Tensor::from_vec(alpha));
    let w = tape.mul(modulating, alpha)?;
    let l = tape.mul(w, log_pt)?;
    let cls = tape.sum(l);
    let cls = tape.scale(cls, -norm);

    let matched: Vec<(usize, usize)> = assignment.iter().enumerate().filter_map(|(q, a)| a.map(|g| (q, g))).collect();
    if matched.is_empty() {
        return Ok(cls);
    }
    let rows: Vec<usize> = matched.iter().map(|m| m.0).collect();
    let raw = tape.index_select(head.raw, &rows)?;
    let center = tape.index_select(head.center, &rows)?;
    let log_size = tape.narrow(raw, 1, OUT_LOG_SIZE, 3)?;
    let sin_cos = tape.narrow(raw, 1, OUT_SIN, 2)?;
    debug_assert_eq!(OUT_COS, OUT_SIN + 1);
    let vel = tape.narrow(raw, 1, OUT_VEL, 3)?;
    let pred = tape.concat(&[center, log_size, sin_cos, vel], 1)?;
    let target: Vec<f64> = matched.iter().flat_map(|&(_, g)| regression_target(&gt[g], velocity_scale)).collect();
    let target = tape.constant(Tensor::new(&[rows.len(), REGRESSION_WIDTH], target)?);
    let d = tape.sub(pred, target)?;
    let d = tape.abs(d);
    let rw = tape.constant(Tensor::from_vec(regression_weights(cfg).to_vec()));
    let d = tape.mul(d, rw)?;
    let reg = tape.sum(d);
    let reg = tape.scale(reg, norm);
    Ok(tape.add(cls, reg)?)
}

