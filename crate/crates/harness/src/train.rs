//! Detector pretraining and the three training stages.

use std::path::Path;

use adascan_core::boxes::ActorBox;
use adascan_core::detector::matching::match_detections;
use adascan_core::detector::{Detector, HeadOut};
use adascan_core::geometry::Vec3;
use adascan_core::losses::{composite, cvar_loss, detection_loss, distill_loss, mask_loss, DetectionLossConfig, FrameTerms, LossWeights};
use adascan_core::maskgen::{expected_sparsity, gumbel_noise, gumbel_softmax, inference_pattern, random_pattern, FULL};
use adascan_core::predictor::QueryBuffer;
use adascan_core::rangeimage::BeamPattern;
use adascan_core::scenesim::mix_seed;
use adascan_core::voxelizer::voxelize_on_tape;
use numkernel::{Adam, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, StageSchedule};
use crate::data::{FrameData, SequenceData};
use crate::error::{HarnessError, Result};
use crate::model::Models;
use crate::pipeline::{buffer_frame, detect, DetectOut};

/// Matches a head's decoded boxes to the truth.
pub fn assign(tape: &Tape, det: &Detector, head: &HeadOut, gt: &[ActorBox], cfg: &DetectionLossConfig) -> Vec<Option<usize>> {
    let dets = det.detections(tape, head);
    let centers: Vec<Vec3> = dets.iter().map(|d| d.center).collect();
    let classes: Vec<_> = dets.iter().map(|d| Some(d.class)).collect();
    match_detections(&centers, &classes, gt, cfg.class_penalty)
}

/// Detection loss averaged over every decoder layer.
pub fn layered_detection_loss(tape: &mut Tape, det: &Detector, heads: &[HeadOut], gt: &[ActorBox], cfg: &DetectionLossConfig) -> Result<Var> {
    let mut total: Option<Var> = None;
    for h in heads {
        let a = assign(tape, det, h, gt, cfg);
        let l = detection_loss(tape, h, gt, &a, cfg, det.cfg.velocity_scale)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(tape.scale(total.expect("at least one decoder layer"), 1.0 / heads.len() as f64))
}

/// Cosine decay from `lr` to `lr / 10`.
fn lr_at(s: &StageSchedule, step: usize) -> f64 {
    let f = step as f64 / s.steps.max(1) as f64;
    s.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * f).cos()))
}

fn grad_norm(grads: &[Option<Tensor>]) -> f64 {
    grads.iter().flatten().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// One row of a stage's CSV log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub detection: f64,
    pub distill: f64,
    pub mask: f64,
    pub cvar: f64,
    pub sparsity: f64,
    pub tau: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub steps: usize,
    /// Mean loss over the first and last tenth of the run.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub initial_mask_loss: f64,
    pub final_mask_loss: f64,
    /// Gradient norm reaching the mask generator from the detection loss
    /// alone on the first step.
    pub voxel_path_grad_norm: Option<f64>,
    /// Whether frozen weights were left bit-identical.
    pub frozen_unchanged: Option<bool>,
    pub seconds: f64,
}

fn summarize(stage: &str, log: &[StepLog], seconds: f64) -> StageReport {
    let k = (log.len() / 10).max(1);
    let mean = |rows: &[StepLog], f: fn(&StepLog) -> f64| rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64;
    let (head, tail) = (&log[..k.min(log.len())], &log[log.len().saturating_sub(k)..]);
    StageReport {
        stage: stage.into(),
        steps: log.len(),
        initial_loss: mean(head, |r| r.loss),
        final_loss: mean(tail, |r| r.loss),
        initial_mask_loss: mean(head, |r| r.mask),
        final_mask_loss: mean(tail, |r| r.mask),
        voxel_path_grad_norm: None,
        frozen_unchanged: None,
        seconds,
    }
}

pub fn write_log(path: &Path, log: &[StepLog]) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report(dir: &Path, report: &StageReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

fn pick_frame<'a>(data: &'a [SequenceData], rng: &mut ChaCha8Rng, min_index: usize) -> (usize, usize, &'a FrameData) {
    let s = rng.gen_range(0..data.len());
    let t = rng.gen_range(min_index..data[s].frames.len());
    (s, t, &data[s].frames[t])
}

/// Trains the detector on full scans.
pub fn pretrain(cfg: &RunConfig, train: &[SequenceData], out: &Path) -> Result<(Models, StageReport)> {
    let started = std::time::Instant::now();
    let mut models = Models::new(cfg)?;
    let sched = &cfg.pretrain;
    let mut adam = Adam::new(sched.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x9E7]));
    let mut log = Vec::with_capacity(sched.steps);
    for step in 0..sched.steps {
        let det = &models.detector;
        let mut tape = Tape::new();
        let p = det.bind(&mut tape, true);
        let mut total: Option<Var> = None;
        for _ in 0..sched.batch.max(1) {
            let (_, _, f) = pick_frame(train, &mut rng, 0);
            let pts = tape.constant(Detector::point_features(&f.cloud.points));
            let (o, _) = det.forward(&mut tape, &p, pts, &f.camera, cfg.voxel_alpha)?;
            let l = layered_detection_loss(&mut tape, det, &o.heads, &f.gt, &cfg.detection_loss)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let loss = tape.scale(total.unwrap(), 1.0 / sched.batch.max(1) as f64);
        tape.backward(loss)?;
        let grads = ParamStore::collect_grads(&tape, &p);
        adam.lr = lr_at(sched, step);
        adam.step(&mut models.detector.params, &grads);
        let v = tape.value(loss).item();
        log.push(StepLog { step, loss: v, detection: v, lr: adam.lr, ..StepLog::default() });
        if step % 100 == 0 {
            tracing::info!(step, loss = v, "pretrain");
        }
    }
    let report = summarize("pretrain", &log, started.elapsed().as_secs_f64());
    models.save(out)?;
    write_log(&out.join("train_log.csv"), &log)?;
    write_report(out, &report)?;
    Ok((models, report))
}

/// Frozen full-scan detector outputs for every training frame.
pub struct TeacherCache {
    pub frames: Vec<Vec<DetectOut>>,
}

impl TeacherCache {
    pub fn build(det: &Detector, data: &[SequenceData], alpha: f64) -> Result<Self> {
        let frames = data
            .iter()
            .map(|s| s.frames.iter().map(|f| detect(det, &f.cloud.points, &f.camera, alpha)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        Ok(Self { frames })
    }
}

fn warm_buffer(cfg: &RunConfig, cache: &TeacherCache, data: &[SequenceData], s: usize, frames: std::ops::Range<usize>) -> Result<QueryBuffer> {
    let mut b = QueryBuffer::new(cfg.predictor.depth);
    for k in frames {
        b.push(buffer_frame(&cache.frames[s][k], &data[s].frames[k], cfg.predictor.score_floor))?;
    }
    Ok(b)
}

fn stack_constants(tape: &mut Tape, qs: &[Tensor]) -> Vec<Var> {
    qs.iter().map(|q| tape.constant(q.clone())).collect()
}

/// Trains the predictor against frame-`t` truth with the detector frozen.
pub fn train_stage1(cfg: &RunConfig, train: &[SequenceData], mut models: Models, cache: &TeacherCache, out: &Path) -> Result<(Models, StageReport)> {
    let started = std::time::Instant::now();
    let sched = &cfg.stage1;
    let t_depth = cfg.predictor.depth;
    let before = models.detector.params.to_bytes();
    let mut adam = Adam::new(sched.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x51]));
    let mut log = Vec::with_capacity(sched.steps);
    for step in 0..sched.steps {
        let mut tape = Tape::new();
        let pd = models.detector.bind(&mut tape, false);
        let pp = models.predictor.bind(&mut tape, true);
        let mut det_sum: Option<Var> = None;
        let mut dist_sum: Option<Var> = None;
        for _ in 0..sched.batch.max(1) {
            let (s, t, f) = pick_frame(train, &mut rng, t_depth);
            let buffer = warm_buffer(cfg, cache, train, s, t - t_depth..t)?;
            let stack = models.predictor.predict(&mut tape, &pp, &buffer)?;
            let heads = models.detector.decode_stack(&mut tape, &pd, &stack)?;
            let l3d = layered_detection_loss(&mut tape, &models.detector, &heads, &f.gt, &cfg.detection_loss)?;
            let reference = stack_constants(&mut tape, &cache.frames[s][t].queries);
            let ld = distill_loss(&mut tape, &stack, &reference)?;
            det_sum = Some(match det_sum {
                Some(a) => tape.add(a, l3d)?,
                None => l3d,
            });
            dist_sum = Some(match dist_sum {
                Some(a) => tape.add(a, ld)?,
                None => ld,
            });
        }
        let inv = 1.0 / sched.batch.max(1) as f64;
        let l3d = tape.scale(det_sum.unwrap(), inv);
        let ld = tape.scale(dist_sum.unwrap(), inv);
        let ldw = tape.scale(ld, cfg.losses.distill);
        let loss = tape.add(l3d, ldw)?;
        tape.backward(loss)?;
        let grads = ParamStore::collect_grads(&tape, &pp);
        adam.lr = lr_at(sched, step);
        adam.step(&mut models.predictor.params, &grads);
        let row = StepLog {
            step,
            loss: tape.value(loss).item(),
            detection: tape.value(l3d).item(),
            distill: tape.value(ld).item(),
            lr: adam.lr,
            ..StepLog::default()
        };
        if step % 100 == 0 {
            tracing::info!(step, loss = row.loss, "stage 1");
        }
        log.push(row);
    }
    let mut report = summarize("stage1", &log, started.elapsed().as_secs_f64());
    report.frozen_unchanged = Some(models.detector.params.to_bytes() == before);
    models.save(out)?;
    write_log(&out.join("train_log.csv"), &log)?;
    write_report(out, &report)?;
    Ok((models, report))
}

/// Options distinguishing the joint stages.
#[derive(Clone, Debug)]
pub struct JointOptions {
    pub name: &'static str,
    /// Route detection-loss gradients to the mask through the voxelizer.
    pub differentiable_voxels: bool,
    pub weights: LossWeights,
    pub seed_tag: u64,
}

impl JointOptions {
    pub fn stage2(cfg: &RunConfig) -> Self {
        Self { name: "stage2", differentiable_voxels: false, weights: cfg.losses.clone(), seed_tag: 0x52 }
    }

    pub fn stage3(cfg: &RunConfig) -> Self {
        Self { name: "stage3", differentiable_voxels: true, weights: cfg.losses.clone(), seed_tag: 0x53 }
    }

    /// Stage 3 without the distillation and CVaR terms.
    pub fn ablation(cfg: &RunConfig) -> Self {
        let mut weights = cfg.losses.clone();
        weights.distill = 0.0;
        weights.cvar = 0.0;
        Self { name: "ablation", differentiable_voxels: true, weights, seed_tag: 0x53 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ScanMode {
    Learned,
    Random,
    Full,
}

struct FrameOutcome {
    terms: FrameTerms<Var>,
    sparsity: f64,
    det_only: Var,
    sparse_out: DetectOut,
}

/// Records one frame of a joint-training window on `tape`.
#[allow(clippy::too_many_arguments)]
fn joint_frame(
    cfg: &RunConfig,
    models: &Models,
    opts: &JointOptions,
    tape: &mut Tape,
    params: (&[Var], &[Var], &[Var]),
    buffer: &QueryBuffer,
    frame: &FrameData,
    reference: &[Tensor],
    mode: ScanMode,
    level: f64,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<FrameOutcome> {
    let (pd, pp, pm) = params;
    let det = &models.detector;
    let mg = &models.maskgen;
    let grid = &cfg.grid;
    let stack = models.predictor.predict(tape, pp, buffer)?;
    let heads = det.decode_stack(tape, pd, &stack)?;
    let dets = det.detections(tape, heads.last().unwrap());
    let centers: Vec<Vec3> = dets.iter().map(|d| d.center).collect();
    let weights: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let z = mg.logits(tape, pm, &stack, &centers, &weights)?;
    let noise = gumbel_noise(2 * grid.blocks(), rng);
    let sample = gumbel_softmax(tape, z, grid.h_b, grid.w_b, tau, Some(&noise))?;
    let ml = mask_loss(tape, sample.log_soft, &frame.guidance, &frame.small_pixels, opts.weights.focal)?;
    let cvar = cvar_loss(tape, ml.small, opts.weights.beta)?;
    let reference = stack_constants(tape, reference);
    let distill = distill_loss(tape, &stack, &reference)?;

    let pattern = match mode {
        ScanMode::Full => BeamPattern::full(grid),
        ScanMode::Learned => inference_pattern(&sample.mask, &[level], grid, rng)?,
        ScanMode::Random => {
            let target = expected_sparsity(&sample.mask, &[level], grid)?;
            random_pattern(grid, target, rng.gen())
        }
    };
    let cloud = frame.cloud.filter(&pattern);
    let base = tape.constant(Detector::point_features(&cloud.points));
    let points = if opts.differentiable_voxels && mode == ScanMode::Learned {
        // Value-preserving weights 1 + s − sg(s) that carry the block's
        // full-scan probability into the point features.
        let full = tape.narrow(sample.st, 1, FULL, 1)?;
        let frozen = tape.detach(full);
        let delta = tape.sub(full, frozen)?;
        let blocks: Vec<usize> = cloud.beams.iter().map(|&b| grid.block_index(b as usize / grid.w, b as usize % grid.w)).collect();
        let per_point = tape.index_select(delta, &blocks)?;
        let factor = tape.add_scalar(per_point, 1.0);
        tape.mul(base, factor)?
    } else {
        base
    };
    let (voxels, vt) = voxelize_on_tape(tape, points, &det.cfg.voxel, cfg.voxel_alpha)?;
    let lidar = det.extract_lidar_bev(tape, pd, voxels, &vt)?;
    let cam = tape.constant(frame.camera.clone());
    let tokens = det.fuse(tape, pd, lidar, cam)?;
    let o = det.decode(tape, pd, tokens)?;
    let l3d = layered_detection_loss(tape, det, &o.heads, &frame.gt, &cfg.detection_loss)?;
    let sparse_out = DetectOut {
        queries: o.stack.iter().map(|&q| tape.value(q).clone()).collect(),
        dets: det.detections(tape, o.heads.last().unwrap()),
    };
    Ok(FrameOutcome {
        terms: FrameTerms { detection: l3d, distill, mask: ml.mean, cvar },
        sparsity: pattern.sparsity(),
        det_only: l3d,
        sparse_out,
    })
}

fn store_grad_norm(tape: &Tape, vars: &[Var]) -> f64 {
    grad_norm(&ParamStore::collect_grads(tape, vars))
}

/// Joint fine-tuning over windows of `T − 1` consecutive frames.
pub fn train_joint(
    cfg: &RunConfig,
    train: &[SequenceData],
    mut models: Models,
    cache: &TeacherCache,
    sched: &StageSchedule,
    opts: &JointOptions,
    out: &Path,
) -> Result<(Models, StageReport)> {
    let started = std::time::Instant::now();
    let t_depth = cfg.predictor.depth;
    let window = t_depth - 1;
    let levels = cfg.maskgen.levels.clone();
    let mut adam_d = Adam::new(sched.lr);
    let mut adam_p = Adam::new(sched.lr);
    let mut adam_m = Adam::new(sched.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, opts.seed_tag]));
    let mut log = Vec::with_capacity(sched.steps);
    let mut audit = None;
    if train.iter().any(|s| s.frames.len() < t_depth + window) {
        return Err(HarnessError::Config("training sequences are shorter than buffer depth plus window".into()));
    }
    for step in 0..sched.steps {
        let s = rng.gen_range(0..train.len());
        let a = rng.gen_range(0..=train[s].frames.len() - t_depth - window);
        let mut buffer = warm_buffer(cfg, cache, train, s, a..a + t_depth)?;
        let u: f64 = rng.gen();
        let mode = if u < sched.full_scan_prob {
            ScanMode::Full
        } else if u < sched.full_scan_prob + sched.random_mask_prob {
            ScanMode::Random
        } else {
            ScanMode::Learned
        };
        let level = levels[rng.gen_range(0..levels.len())];
        let tau = cfg.maskgen.tau_at(step, sched.steps);

        let mut tape = Tape::new();
        let pd = models.detector.bind(&mut tape, true);
        let pp = models.predictor.bind(&mut tape, true);
        let pm = models.maskgen.bind(&mut tape, true);
        let mut terms = Vec::with_capacity(window);
        let mut det_only = Vec::with_capacity(window);
        let mut sparsity = 0.0;
        for t in a + t_depth..a + t_depth + window {
            let frame = &train[s].frames[t];
            let o = joint_frame(
                cfg,
                &models,
                opts,
                &mut tape,
                (&pd, &pp, &pm),
                &buffer,
                frame,
                &cache.frames[s][t].queries,
                mode,
                level,
                tau,
                &mut rng,
            )?;
            sparsity += o.sparsity / window as f64;
            terms.push(o.terms);
            det_only.push(o.det_only);
            let next = if rng.gen::<f64>() < sched.buffer_full_prob { &cache.frames[s][t] } else { &o.sparse_out };
            buffer.push(buffer_frame(next, frame, cfg.predictor.score_floor))?;
        }
        if step == 0 {
            // Gradient reaching the mask generator from the detection terms
            // alone, i.e. through the voxelizer.
            let mut sum = det_only[0];
            for &d in &det_only[1..] {
                sum = tape.add(sum, d)?;
            }
            tape.backward(sum)?;
            audit = Some(store_grad_norm(&tape, &pm));
            tape.zero_grad();
        }
        let loss = composite(&mut tape, &terms, &opts.weights)?;
        tape.backward(loss)?;
        let lr = lr_at(sched, step);
        for (adam, store, vars) in [
            (&mut adam_d, &mut models.detector.params, &pd),
            (&mut adam_p, &mut models.predictor.params, &pp),
            (&mut adam_m, &mut models.maskgen.params, &pm),
        ] {
            adam.lr = lr;
            adam.step(store, &ParamStore::collect_grads(&tape, vars));
        }
        let mean = |f: fn(&FrameTerms<Var>) -> Var, tape: &Tape| terms.iter().map(|t| tape.value(f(t)).item()).sum::<f64>() / terms.len() as f64;
        let row = StepLog {
            step,
            loss: tape.value(loss).item(),
            detection: mean(|t| t.detection, &tape),
            distill: mean(|t| t.distill, &tape),
            mask: mean(|t| t.mask, &tape),
            cvar: mean(|t| t.cvar, &tape),
            sparsity,
            tau,
            lr,
        };
        if step % 25 == 0 {
            tracing::info!(step, loss = row.loss, mask = row.mask, sparsity, "{}", opts.name);
        }
        log.push(row);
    }
    let mut report = summarize(opts.name, &log, started.elapsed().as_secs_f64());
    report.voxel_path_grad_norm = audit;
    models.save(out)?;
    write_log(&out.join("train_log.csv"), &log)?;
    write_report(out, &report)?;
    Ok((models, report))
}
