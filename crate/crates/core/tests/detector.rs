use adascan_core::boxes::{ActorBox, ActorClass};
use adascan_core::detector::matching::{assignment_cost, hungarian, match_detections};
use adascan_core::detector::{decode_detections, Detector, DetectorConfig, BACKGROUND, HEAD_OUT, OUT_CLS, OUT_SIN};
use adascan_core::scenesim::{camera_bev, CameraConfig, CAMERA_CHANNELS};
use adascan_core::voxelizer::VoxelGridConfig;
use numkernel::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> DetectorConfig {
    DetectorConfig {
        voxel: VoxelGridConfig { min: [-8.0, -8.0, -2.0], max: [8.0, 8.0, 1.0], voxel_size: [2.0, 2.0, 1.5], k_v: 4, d_p: 4 },
        camera: CameraConfig { extent: 8.0, cells: 8, ..CameraConfig::default() },
        lidar_channels: 4,
        residual_blocks: 1,
        d_model: 8,
        n_queries: 4,
        n_layers: 2,
        pe_freqs: 2,
        locality_sigma: vec![6.0, 3.0],
        ..DetectorConfig::default()
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..n {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn hungarian_matches_exhaustive_search_on_6x6() {
    let perms = permutations(6);
    assert_eq!(perms.len(), 720);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let cost: Vec<f64> = (0..36).map(|_| rng.gen_range(0.0..10.0)).collect();
        let best = perms.iter().map(|p| (0..6).map(|i| cost[i * 6 + p[i]]).sum::<f64>()).fold(f64::INFINITY, f64::min);
        let a = hungarian(&cost, 6, 6);
        assert!(a.iter().all(Option::is_some));
        assert!((assignment_cost(&cost, 6, &a) - best).abs() <= 1e-12);
    }
}

#[test]
fn rectangular_problems_leave_extra_rows_unmatched() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (r, c) in [(5, 3), (3, 5), (1, 4), (4, 1)] {
        let cost: Vec<f64> = (0..r * c).map(|_| rng.gen_range(0.0..10.0)).collect();
        let a = hungarian(&cost, r, c);
        assert_eq!(a.iter().flatten().count(), r.min(c));
        let mut cols: Vec<usize> = a.iter().flatten().copied().collect();
        cols.sort();
        cols.dedup();
        assert_eq!(cols.len(), r.min(c));
    }
    assert_eq!(hungarian(&[], 3, 0), vec![None; 3]);
}

#[test]
fn one_detection_two_truths_takes_the_nearer() {
    let gt = [
        ActorBox { center: [5.0, 0.0, 0.0], size: [1.0; 3], yaw: 0.0, velocity: [0.0; 3], class: ActorClass::Car, actor_id: 0 },
        ActorBox { center: [1.0, 0.0, 0.0], size: [1.0; 3], yaw: 0.0, velocity: [0.0; 3], class: ActorClass::Car, actor_id: 1 },
    ];
    let a = match_detections(&[[0.0; 3]], &[Some(ActorClass::Car)], &gt, 2.0);
    assert_eq!(a, vec![Some(1)]);
    // A class mismatch costs more than the distance difference.
    let gt2 = [gt[0].clone(), ActorBox { class: ActorClass::Pedestrian, ..gt[1].clone() }];
    let a = match_detections(&[[3.5, 0.0, 0.0]], &[Some(ActorClass::Car)], &gt2, 2.0);
    assert_eq!(a, vec![Some(0)]);
}

#[test]
fn decoded_detections_follow_the_raw_rows() {
    let mut raw = vec![0.0; 2 * HEAD_OUT];
    raw[OUT_SIN] = 3.0;
    raw[OUT_SIN + 1] = 4.0;
    raw[OUT_CLS + 1] = 2.0;
    raw[HEAD_OUT + OUT_CLS + BACKGROUND] = 50.0;
    let centers = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
    let d = decode_detections(&Tensor::new(&[2, HEAD_OUT], raw).unwrap(), &centers, 5.0);
    assert_eq!(d[0].center, [1.0, 2.0, 3.0]);
    assert_eq!(d[0].size, [1.0; 3]);
    assert!((d[0].yaw - (0.6f64).atan2(0.8)).abs() <= 1e-15);
    assert_eq!(d[0].class, ActorClass::Pedestrian);
    let z = 2.0f64.exp() + 3.0;
    assert!((d[0].score - (1.0 - 1.0 / z)).abs() <= 1e-15);
    assert!(d[1].score < 1e-20);
}

fn run(det: &Detector, points: &[[f64; 3]], frozen: Option<&[Tensor]>) -> (Vec<Tensor>, Vec<Tensor>, Vec<Tensor>) {
    let cfg = &det.cfg;
    let camera = Tensor::zeros(&[CAMERA_CHANNELS, cfg.cells(), cfg.cells()]);
    let mut tape = Tape::new();
    let p = det.bind(&mut tape, false);
    let pts = tape.constant(Detector::point_features(points));
    let (out, _) = det.forward_with_refs(&mut tape, &p, pts, &camera, 0.1, frozen).unwrap();
    let stack = out.stack.iter().map(|&v| tape.value(v).clone()).collect();
    let raws = out.heads.iter().map(|h| tape.value(h.raw).clone()).collect();
    (stack, raws, out.refs)
}

#[test]
fn empty_and_single_voxel_inputs_run() {
    let det = Detector::new(tiny(), 3).unwrap();
    let (stack, raws, refs) = run(&det, &[], None);
    assert_eq!(stack.len(), 2);
    assert_eq!(raws[1].shape(), &[4, HEAD_OUT]);
    assert_eq!(refs[0].shape(), &[4, 2]);
    assert!(stack.iter().all(|s| s.data().iter().all(|x| x.is_finite())));
    let (one, _, _) = run(&det, &[[1.0, 1.0, -1.0]], None);
    assert!(one[1].data().iter().all(|x| x.is_finite()));
    assert_ne!(one[1], stack[1]);
}

#[test]
fn feeding_back_own_refs_reproduces_the_forward() {
    let det = Detector::new(tiny(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pts: Vec<[f64; 3]> = (0..200).map(|_| [rng.gen_range(-7.0..7.0), rng.gen_range(-7.0..7.0), rng.gen_range(-1.9..0.9)]).collect();
    let (stack, raws, refs) = run(&det, &pts, None);
    let (s2, r2, refs2) = run(&det, &pts, Some(&refs));
    assert_eq!(refs, refs2);
    assert_eq!(stack, s2);
    assert_eq!(raws, r2);
}

#[test]
fn decode_stack_reproduces_forward_heads() {
    let det = Detector::new(tiny(), 6).unwrap();
    let cfg = det.cfg.clone();
    let camera = camera_bev(&[], &cfg.camera, 1, 0);
    let mut tape = Tape::new();
    let p = det.bind(&mut tape, false);
    let pts = tape.constant(Detector::point_features(&[[2.0, -3.0, -1.5], [2.1, -3.1, -1.4]]));
    let (out, _) = det.forward(&mut tape, &p, pts, &camera, 0.1).unwrap();
    let heads = det.decode_stack(&mut tape, &p, &out.stack).unwrap();
    for (a, b) in heads.iter().zip(&out.heads) {
        assert_eq!(tape.value(a.raw), tape.value(b.raw));
        assert_eq!(tape.value(a.center), tape.value(b.center));
    }
}

#[test]
fn fuse_rejects_mismatched_grids() {
    let det = Detector::new(tiny(), 7).unwrap();
    let mut tape = Tape::new();
    let p = det.bind(&mut tape, false);
    let lidar = tape.constant(Tensor::zeros(&[4, 8, 8]));
    let cam = tape.constant(Tensor::zeros(&[CAMERA_CHANNELS, 4, 4]));
    assert!(det.fuse(&mut tape, &p, lidar, cam).is_err());
    let cam = tape.constant(Tensor::zeros(&[CAMERA_CHANNELS, 8, 8]));
    let tokens = det.fuse(&mut tape, &p, lidar, cam).unwrap();
    assert_eq!(tape.shape(tokens), &[64, 8]);
}

#[test]
fn config_validation() {
    assert!(tiny().validate().is_ok());
    assert!(DetectorConfig { locality_sigma: vec![1.0], ..tiny() }.validate().is_err());
    let mut bad = tiny();
    bad.camera.cells = 16;
    assert!(bad.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hungarian_is_no_worse_than_identity(seed in 0u64..100_000, n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let a = hungarian(&cost, n, n);
        let id: Vec<Option<usize>> = (0..n).map(Some).collect();
        prop_assert!(assignment_cost(&cost, n, &a) <= assignment_cost(&cost, n, &id) + 1e-12);
    }
}
