use adascan_core::boxes::{ActorBox, ActorClass};
use adascan_core::geometry::{self, Vec3};
use adascan_core::rangeimage::{build_range_image, BeamGrid, BeamPattern};
use adascan_core::scenesim::{
    generate_scenario, ground_truth_boxes, intersect_box, load_sequence, raycast_scan, save_sequence, EgoPose, ScenarioConfig,
};
use proptest::prelude::*;

fn quiet(frames: usize) -> ScenarioConfig {
    ScenarioConfig { frames, range_noise: 0.0, ..ScenarioConfig::default() }
}

fn car(center: Vec3, size: Vec3, yaw: f64) -> ActorBox {
    ActorBox { center, size, yaw, velocity: [0.0; 3], class: ActorClass::Car, actor_id: 0 }
}

/// First positive hit over the six faces, each tested as a bounded plane.
fn face_oracle(dir: Vec3, b: &ActorBox) -> Option<f64> {
    let o = b.to_local([0.0; 3]);
    let (s, c) = b.yaw.sin_cos();
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let half = [0.5 * b.size[0], 0.5 * b.size[1], 0.5 * b.size[2]];
    if (0..3).all(|i| o[i].abs() <= half[i]) {
        return None;
    }
    let mut best: Option<f64> = None;
    for axis in 0..3 {
        if d[axis] == 0.0 {
            continue;
        }
        for sign in [-1.0, 1.0] {
            let t = (sign * half[axis] - o[axis]) / d[axis];
            if t <= 0.0 {
                continue;
            }
            let inside = (0..3).filter(|&j| j != axis).all(|j| (o[j] + t * d[j]).abs() <= half[j] + 1e-12);
            if inside && best.map_or(true, |b| t < b) {
                best = Some(t);
            }
        }
    }
    best
}

#[test]
fn static_empty_world_repeats_itself() {
    let cfg = ScenarioConfig { actors_min: 0, actors_max: 0, ego_speed: [0.0, 0.0], ..quiet(5) };
    let g = BeamGrid::default();
    let seq = generate_scenario(&cfg, &g, 11).unwrap();
    let full = BeamPattern::full(&g);
    let first = raycast_scan(&seq, 0, &full).unwrap();
    for k in 1..5 {
        assert_eq!(raycast_scan(&seq, k, &full).unwrap(), first);
    }
    // Only the ground answers, and only on downward beams.
    for (p, &b) in first.points.iter().zip(&first.beams) {
        let (u, v) = (b as usize / g.w, b as usize % g.w);
        assert!(g.ray_direction(u, v)[2] < 0.0);
        assert!((p[2] + cfg.sensor_height).abs() <= 1e-9);
    }
    assert!(!first.is_empty());
}

#[test]
fn actors_move_by_velocity_times_dt() {
    let seq = generate_scenario(&quiet(12), &BeamGrid::default(), 5).unwrap();
    let dt = seq.config.dt;
    for k in 1..seq.frames.len() {
        for (a, b) in seq.frames[k - 1].actors.iter().zip(&seq.frames[k].actors) {
            assert_eq!(a.actor_id, b.actor_id);
            assert_eq!(b.center, geometry::add(a.center, geometry::scale(a.velocity, dt)));
            let disp = geometry::sub(b.center, a.center);
            for i in 0..3 {
                assert!((disp[i] - a.velocity[i] * dt).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let g = BeamGrid::default();
    let mut a = generate_scenario(&ScenarioConfig::default(), &g, 42).unwrap();
    let mut b = generate_scenario(&ScenarioConfig::default(), &g, 42).unwrap();
    a.scan_all(None).unwrap();
    b.scan_all(None).unwrap();
    assert_eq!(a, b);
    let c = generate_scenario(&ScenarioConfig::default(), &g, 43).unwrap();
    assert_ne!(a.frames[0].actors, c.frames[0].actors);
}

#[test]
fn axis_aligned_box_is_hit_at_its_near_face() {
    let b = car([10.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0);
    assert_eq!(intersect_box([1.0, 0.0, 0.0], &b), Some(9.0));
    assert_eq!(intersect_box([-1.0, 0.0, 0.0], &b), None);
    assert_eq!(intersect_box([0.0, 1.0, 0.0], &b), None);
    let inside = car([0.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0);
    assert_eq!(intersect_box([1.0, 0.0, 0.0], &inside), None);
}

#[test]
fn raycast_matches_face_oracle_over_many_rays() {
    let g = BeamGrid::default();
    let cfg = ScenarioConfig { actors_min: 6, actors_max: 8, ..quiet(3) };
    let seq = generate_scenario(&cfg, &g, 9).unwrap();
    let full = BeamPattern::full(&g);
    let mut rays = 0;
    let mut box_hits = 0;
    for k in 0..seq.frames.len() {
        let boxes = ground_truth_boxes(&seq.frames[k]);
        let cloud = raycast_scan(&seq, k, &full).unwrap();
        let mut expected = Vec::new();
        for u in 0..g.h {
            for v in 0..g.w {
                rays += 1;
                let dir = g.ray_direction(u, v);
                let mut best = if dir[2] < 0.0 { -cfg.sensor_height / dir[2] } else { f64::INFINITY };
                for b in &boxes {
                    if let Some(t) = face_oracle(dir, b) {
                        if t < best {
                            best = t;
                            box_hits += 1;
                        }
                    }
                }
                if best <= cfg.max_range {
                    expected.push(((u * g.w + v) as u32, geometry::scale(dir, best)));
                }
            }
        }
        assert_eq!(cloud.len(), expected.len());
        for ((p, b), (eb, ep)) in cloud.points.iter().zip(&cloud.beams).zip(&expected) {
            assert_eq!(b, eb);
            assert!(geometry::dist(*p, *ep) <= 1e-12, "beam {b}: {p:?} vs {ep:?}");
        }
    }
    assert!(rays >= 10_000);
    assert!(box_hits > 100);
}

#[test]
fn rotated_boxes_agree_with_face_oracle() {
    let mut rng_dirs = Vec::new();
    let g = BeamGrid::default();
    for u in 0..g.h {
        for v in (0..g.w).step_by(3) {
            rng_dirs.push(g.ray_direction(u, v));
        }
    }
    for (i, yaw) in [0.3, -1.1, 2.5].into_iter().enumerate() {
        let b = car([8.0 - 3.0 * i as f64, 4.0 * i as f64, -1.0], [4.2, 1.9, 1.6], yaw);
        for &d in &rng_dirs {
            match (intersect_box(d, &b), face_oracle(d, &b)) {
                (Some(a), Some(o)) => assert!((a - o).abs() <= 1e-12),
                (None, None) => {}
                other => panic!("disagree {other:?} for {d:?}"),
            }
        }
    }
}

#[test]
fn ground_truth_follows_the_pose() {
    let mut seq = generate_scenario(&quiet(1), &BeamGrid::default(), 3).unwrap();
    let frame = &mut seq.frames[0];
    frame.actors = vec![car([10.0, 2.0, 0.8], [4.0, 2.0, 1.6], 0.2)];
    frame.ego_velocity = [0.0; 3];

    frame.pose = EgoPose::identity();
    let gt = ground_truth_boxes(frame);
    assert_eq!(gt[0].center, [10.0, 2.0, 0.8]);
    assert!((gt[0].yaw - 0.2).abs() <= 1e-15);

    frame.pose.translation = [3.0, -1.0, 1.8];
    let gt = ground_truth_boxes(frame);
    assert_eq!(gt[0].center, [7.0, 3.0, -1.0]);

    // Ego turned +90°: a box straight ahead in world +y sits on sensor +x.
    frame.pose = EgoPose { rotation: geometry::rot_z(-std::f64::consts::FRAC_PI_2), translation: [0.0; 3], timestamp: 0.0 };
    frame.actors[0].center = [0.0, 10.0, 0.0];
    frame.actors[0].yaw = std::f64::consts::FRAC_PI_2;
    let gt = ground_truth_boxes(frame);
    assert!(geometry::dist(gt[0].center, [10.0, 0.0, 0.0]) <= 1e-12);
    assert!(gt[0].yaw.abs() <= 1e-12);
}

#[test]
fn sequence_files_round_trip_bitwise() {
    let g = BeamGrid::default();
    let mut seq = generate_scenario(&ScenarioConfig { frames: 4, ..ScenarioConfig::default() }, &g, 17).unwrap();
    seq.scan_all(None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seq.bin");
    save_sequence(&seq, &path).unwrap();
    let back = load_sequence(&path).unwrap();
    assert_eq!(back, seq);
    for (a, b) in seq.frames.iter().zip(&back.frames) {
        let (ca, cb) = (a.cloud.as_ref().unwrap(), b.cloud.as_ref().unwrap());
        assert!(ca.points.iter().flatten().zip(cb.points.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(build_range_image(&ca.points, &g), build_range_image(&cb.points, &g));
    }

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.bin");
    std::fs::write(&cut, &bytes[..bytes.len() - 100]).unwrap();
    assert!(load_sequence(&cut).is_err());
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    std::fs::write(&cut, &flipped).unwrap();
    assert!(load_sequence(&cut).is_err());
}

#[test]
fn masked_scan_is_a_subset_of_the_full_scan() {
    let g = BeamGrid::default();
    let seq = generate_scenario(&ScenarioConfig::default(), &g, 21).unwrap();
    let full = raycast_scan(&seq, 2, &BeamPattern::full(&g)).unwrap();
    let mut half = BeamPattern::full(&g);
    for (i, b) in half.bits.iter_mut().enumerate() {
        *b = i % 3 != 0;
    }
    assert_eq!(raycast_scan(&seq, 2, &half).unwrap(), full.filter(&half));
}

#[test]
fn invalid_configs_are_rejected() {
    let g = BeamGrid::default();
    assert!(generate_scenario(&ScenarioConfig { frames: 0, ..ScenarioConfig::default() }, &g, 0).is_err());
    assert!(generate_scenario(&ScenarioConfig { actors_min: 5, actors_max: 2, ..ScenarioConfig::default() }, &g, 0).is_err());
    assert!(generate_scenario(&ScenarioConfig { dt: -0.1, ..ScenarioConfig::default() }, &g, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slab_and_face_tests_agree(
        cx in -20.0f64..20.0, cy in -20.0f64..20.0, cz in -2.0f64..2.0,
        sx in 0.5f64..5.0, sy in 0.5f64..3.0, sz in 0.5f64..2.0, yaw in -3.1f64..3.1,
        az in -3.1f64..3.1, el in -0.4f64..0.2,
    ) {
        let b = car([cx, cy, cz], [sx, sy, sz], yaw);
        let d = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
        match (intersect_box(d, &b), face_oracle(d, &b)) {
            (Some(a), Some(o)) => prop_assert!((a - o).abs() <= 1e-9),
            (None, None) => {}
            other => prop_assert!(false, "disagree {:?}", other),
        }
    }

    #[test]
    fn sensor_transform_preserves_distances(yaw in -3.1f64..3.1, tx in -50.0f64..50.0, ty in -50.0f64..50.0,
        px in -30.0f64..30.0, py in -30.0f64..30.0, qx in -30.0f64..30.0, qy in -30.0f64..30.0) {
        let pose = EgoPose { rotation: geometry::rot_z(yaw), translation: [tx, ty, 1.8], timestamp: 0.0 };
        let (p, q) = ([px, py, 0.0], [qx, qy, 1.0]);
        let d0 = geometry::dist(p, q);
        let d1 = geometry::dist(pose.world_to_sensor(p), pose.world_to_sensor(q));
        prop_assert!((d0 - d1).abs() <= 1e-9);
    }
}
