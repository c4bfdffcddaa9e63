use std::collections::HashMap;

use adascan::config::{EvalConfig, RunConfig};
use adascan::data::{generate, prepare, Split};
use adascan::energy::{energy_report, EnergyModel};
use adascan::eval::{build_caches, run_next_frame, score_frame, summarize, FrameMetrics, Policy};
use adascan::model::Models;
use adascan_core::boxes::{ActorBox, ActorClass};
use adascan_core::detector::{Detection, NUM_LOGITS};
use adascan_core::maskgen::{inference_pattern, ScanMask};
use adascan_core::rangeimage::BeamGrid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn energy_arithmetic() {
    let e32 = EnergyModel::hdl32e();
    assert!((e32.scan_joules(0.66).unwrap() - 0.204).abs() <= 1e-12);
    assert_eq!(EnergyModel::hdl64e().scan_joules(0.0).unwrap(), 6.0);
    assert!(e32.scan_joules(1.5).is_err());
    assert_eq!(EnergyModel::by_name("hdl-64e").unwrap(), EnergyModel::hdl64e());
    assert!(EnergyModel::by_name("vlp16").is_err());
    let r = energy_report(&[0.0, 0.5, 1.0], &e32).unwrap();
    assert!((r.joules_per_sequence - 0.9).abs() <= 1e-12);
    assert!((r.joules_per_scan - 0.3).abs() <= 1e-12);
    assert!((r.percent_saved - 50.0).abs() <= 1e-9);
}

fn det(center: [f64; 3], score: f64, class: ActorClass) -> Detection {
    Detection { center, size: [1.0; 3], yaw: 0.0, velocity: [0.0; 3], class_logits: [0.0; NUM_LOGITS], score, class }
}

fn gt(center: [f64; 3], class: ActorClass) -> ActorBox {
    ActorBox { center, size: [1.0; 3], yaw: 0.0, velocity: [0.0; 3], class, actor_id: 0 }
}

#[test]
fn frame_scoring_counts_near_and_far_hits() {
    let cfg = EvalConfig::default();
    let truth = [gt([0.0, 0.0, 0.0], ActorClass::Car), gt([20.0, 0.0, 0.0], ActorClass::Cyclist), gt([-20.0, 0.0, 0.0], ActorClass::Car)];
    let dets = [
        det([1.0, 0.0, 0.0], 0.9, ActorClass::Car),
        det([23.0, 0.0, 0.0], 0.8, ActorClass::Car),
        det([-20.0, 0.0, 0.0], 0.1, ActorClass::Car),
        det([50.0, 0.0, 0.0], 0.5, ActorClass::Pedestrian),
    ];
    let (n_det, near, far, err, cls) = score_frame(&dets, &truth, &cfg);
    assert_eq!((n_det, near, far, cls), (3, 1, 2, 1));
    assert!((err - 4.0).abs() <= 1e-12);
    assert_eq!(score_frame(&[], &truth, &cfg), (0, 0, 0, 0.0, 0));
}

fn fm(row: &str, n_gt: usize, n_det: usize, near: usize, far: usize, err: f64, cls: usize, s: f64) -> FrameMetrics {
    FrameMetrics {
        row: row.into(),
        sequence: 1,
        frame: 0,
        sparsity: s,
        expected_sparsity: s + 0.01,
        n_gt,
        n_det,
        hits_near: near,
        hits_far: far,
        error_sum: err,
        class_correct: cls,
        joules: 0.6 * (1.0 - s),
        history: "full".into(),
    }
}

#[test]
fn aggregation_matches_hand_computed_totals() {
    let frames = vec![
        fm("a", 4, 5, 2, 3, 3.0, 2, 0.5),
        fm("a", 2, 1, 1, 1, 0.5, 1, 0.7),
        fm("a", 0, 2, 0, 0, 0.0, 0, 0.9),
        fm("b", 9, 9, 9, 9, 0.0, 9, 0.0),
    ];
    let s = summarize("a", &frames);
    assert_eq!(s.frames, 3);
    assert!((s.recall_near - 3.0 / 6.0).abs() <= 1e-15);
    assert!((s.recall_far - 4.0 / 6.0).abs() <= 1e-15);
    assert!((s.precision_near - 3.0 / 8.0).abs() <= 1e-15);
    assert!((s.mean_center_error - 3.5 / 4.0).abs() <= 1e-15);
    assert!((s.class_accuracy - 3.0 / 4.0).abs() <= 1e-15);
    assert!((s.mean_sparsity - 0.7).abs() <= 1e-12);
    assert!((s.mean_expected_sparsity - 0.71).abs() <= 1e-12);
    assert!((s.joules_per_scan - 0.18).abs() <= 1e-12);
    let empty = summarize("missing", &frames);
    assert_eq!((empty.frames, empty.recall_near), (0, 0.0));
}

#[test]
fn minimum_level_everywhere_is_at_least_ninety_percent_sparse() {
    let g = BeamGrid::default();
    let m = ScanMask::all_sparse(g.h_b, g.w_b, 0.0625);
    let p = inference_pattern(&m, &[0.0625], &g, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(p.sparsity() >= 0.9, "sparsity {}", p.sparsity());
}

fn small_run() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.eval_sequences = 1;
    cfg.data.eval_frames = 7;
    cfg
}

#[test]
fn all_full_mask_reproduces_the_full_scan_baseline() {
    let cfg = small_run();
    let models = Models::new(&cfg).unwrap();
    let data = vec![prepare(&cfg, &generate(&cfg, Split::Eval, cfg.data.eval_seed).unwrap()).unwrap()];
    let caches = build_caches(&cfg, &models, &data).unwrap();
    let full = run_next_frame(&cfg, &models, &data, &caches, "x", &Policy::Full).unwrap();
    let ones = run_next_frame(&cfg, &models, &data, &caches, "x", &Policy::Adaptive { level: 1.0, bias: 0.0 }).unwrap();
    assert_eq!(full.len(), cfg.data.eval_frames - cfg.predictor.depth);
    assert_eq!(full, ones);

    let zero: HashMap<(u64, usize), f64> = full.iter().map(|f| ((f.sequence, f.frame), 0.0)).collect();
    let random = run_next_frame(&cfg, &models, &data, &caches, "x", &Policy::Random { sparsity: zero }).unwrap();
    assert_eq!(full, random);
    assert!(run_next_frame(&cfg, &models, &data, &caches, "x", &Policy::Random { sparsity: HashMap::new() }).is_err());
}
