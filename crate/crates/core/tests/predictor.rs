use adascan_core::boxes::ActorClass;
use adascan_core::geometry::{self, Mat3, Vec3};
use adascan_core::predictor::{
    align_centers, attention_map, cost_matrix, guided_mask, BufferFrame, MtmInit, Predictor, PredictorConfig, QueryBuffer,
};
use numkernel::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C: Option<ActorClass> = Some(ActorClass::Car);
const P: Option<ActorClass> = Some(ActorClass::Pedestrian);

fn pts(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-1.0..1.0)]).collect()
}

fn small_cfg(depth: usize) -> PredictorConfig {
    PredictorConfig { depth, d_model: 6, n_layers: 2, n_queries: 5, ..PredictorConfig::default() }
}

fn frame(rng: &mut ChaCha8Rng, cfg: &PredictorConfig, t: f64, yaw: f64) -> BufferFrame {
    let n = cfg.n_queries;
    BufferFrame {
        queries: (0..cfg.n_layers).map(|_| Tensor::randn(&[n, cfg.d_model], 1.0, rng)).collect(),
        centers: pts(rng, n),
        velocities: pts(rng, n).into_iter().map(|v| geometry::scale(v, 0.1)).collect(),
        classes: (0..n).map(|i| [C, P, None][i % 3]).collect(),
        scores: vec![0.5; n],
        rotation: geometry::rot_z(yaw),
        timestamp: t,
    }
}

fn predict(pred: &Predictor, buf: &QueryBuffer) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let p = pred.bind(&mut tape, false);
    let out = pred.predict(&mut tape, &p, buf).unwrap();
    out.into_iter().map(|v| tape.value(v).clone()).collect()
}

#[test]
fn alignment_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (c, v) = (pts(&mut rng, 30), pts(&mut rng, 30));
    let (rp, rn): (Mat3, Mat3) = (geometry::rot_z(0.4), geometry::rot_z(-0.9));
    let got = align_centers(&c, &v, &rp, &rn, 0.2).unwrap();
    let rel: f64 = -0.9 - 0.4;
    for ((ci, vi), g) in c.iter().zip(&v).zip(&got) {
        let m = [ci[0] + 0.2 * vi[0], ci[1] + 0.2 * vi[1], ci[2] + 0.2 * vi[2]];
        let want = [rel.cos() * m[0] - rel.sin() * m[1], rel.sin() * m[0] + rel.cos() * m[1], m[2]];
        assert!(geometry::dist(*g, want) <= 1e-12);
    }
    let skew = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    assert!(align_centers(&c, &v, &skew, &rn, 0.2).is_err());
}

#[test]
fn cost_matrix_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (pts(&mut rng, 7), pts(&mut rng, 9));
    let o = cost_matrix(&a, &b);
    assert_eq!(o.shape(), &[7, 9]);
    for i in 0..7 {
        for j in 0..9 {
            let d = ((a[i][0] - b[j][0]).powi(2) + (a[i][1] - b[j][1]).powi(2) + (a[i][2] - b[j][2]).powi(2)).sqrt();
            assert!((o.at(&[i, j]) - d).abs() <= 1e-12);
        }
    }
}

#[test]
fn guided_mask_blocks_far_mismatched_and_background_pairs() {
    let o = Tensor::new(&[2, 3], vec![2.0, 1.0, 0.5, 2.0 + 1e-9, 0.0, 3.0]).unwrap();
    let g = guided_mask(&o, &[C, P, None], &[C, C], 2.0, 1e8).unwrap();
    // Row 0: γ inclusive, class mismatch, background; row 1: just beyond γ.
    assert_eq!(g.data(), &[0.0, 1e8, 1e8, 1e8, 1e8, 1e8]);
    let none = guided_mask(&Tensor::zeros(&[1, 1]), &[None], &[None], 2.0, 1e8).unwrap();
    assert_eq!(none.data(), &[1e8]);
    assert!(guided_mask(&o, &[C], &[C, C], 2.0, 1e8).is_err());
}

#[test]
fn attention_follows_the_blocked_softmax_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let (n, m) = (rng.gen_range(1..8), rng.gen_range(1..8));
        let o: Vec<f64> = (0..n * m).map(|_| rng.gen_range(0.0..4.0)).collect();
        let g: Vec<f64> = (0..n * m).map(|_| if rng.gen_bool(0.5) { 0.0 } else { 1e8 }).collect();
        let a = attention_map(&Tensor::new(&[n, m], o.clone()).unwrap(), &Tensor::new(&[n, m], g.clone()).unwrap()).unwrap();
        for i in 0..n {
            let row = i * m..(i + 1) * m;
            let logits: Vec<f64> = row.clone().map(|k| if g[k] > 0.0 { -g[k] } else { -o[k] }).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for (k, l) in row.clone().zip(&logits) {
                assert!((a.data()[k] - (l - mx).exp() / z).abs() <= 1e-12);
            }
            assert!((a.data()[row].iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn single_valid_match_takes_all_weight_and_blocked_rows_are_uniform() {
    let o = Tensor::new(&[2, 3], vec![1.5, 0.2, 0.1, 1.0, 2.0, 3.0]).unwrap();
    let g = Tensor::new(&[2, 3], vec![0.0, 1e8, 1e8, 1e8, 1e8, 1e8]).unwrap();
    let a = attention_map(&o, &g).unwrap();
    assert_eq!(&a.data()[..3], &[1.0, 0.0, 0.0]);
    for &x in &a.data()[3..] {
        assert!((x - 1.0 / 3.0).abs() <= 1e-15);
    }
}

#[test]
fn blocking_cost_must_saturate() {
    assert!(PredictorConfig { c_m: 50.0, ..PredictorConfig::default() }.validate().is_err());
    assert!(PredictorConfig { c_m: 1e8, ..PredictorConfig::default() }.validate().is_ok());
    assert!(PredictorConfig { depth: 1, ..PredictorConfig::default() }.validate().is_err());
}

#[test]
fn buffer_evicts_oldest_and_rejects_mismatched_shapes() {
    let cfg = small_cfg(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut buf = QueryBuffer::new(3);
    for t in 0..5 {
        buf.push(frame(&mut rng, &cfg, t as f64, 0.0)).unwrap();
    }
    assert!(buf.is_full());
    assert_eq!(buf.frames().map(|f| f.timestamp).collect::<Vec<_>>(), vec![2.0, 3.0, 4.0]);
    let other = frame(&mut rng, &small_cfg(3).clone(), 5.0, 0.0);
    let mut bad = other.clone();
    bad.queries.pop();
    assert!(buf.push(bad).is_err());
}

#[test]
fn identity_module_returns_the_newest_queries() {
    for depth in [2, 3, 4] {
        let cfg = small_cfg(depth);
        let mut rng = ChaCha8Rng::seed_from_u64(5 + depth as u64);
        let pred = Predictor::new(cfg.clone(), MtmInit::Identity, &mut rng).unwrap();
        let mut buf = QueryBuffer::new(depth);
        for t in 0..depth {
            buf.push(frame(&mut rng, &cfg, 0.2 * t as f64, 0.1 * t as f64)).unwrap();
        }
        let out = predict(&pred, &buf);
        for (o, q) in out.iter().zip(&buf.latest().unwrap().queries) {
            for (a, b) in o.data().iter().zip(q.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn static_scene_is_a_fixed_point() {
    let cfg = small_cfg(4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pred = Predictor::new(cfg.clone(), MtmInit::Identity, &mut rng).unwrap();
    let mut f = frame(&mut rng, &cfg, 0.0, 0.0);
    f.velocities = vec![[0.0; 3]; cfg.n_queries];
    let mut buf = QueryBuffer::new(4);
    for t in 0..4 {
        buf.push(BufferFrame { timestamp: 0.2 * t as f64, ..f.clone() }).unwrap();
    }
    let out = predict(&pred, &buf);
    for (o, q) in out.iter().zip(&f.queries) {
        assert!(o.data().iter().zip(q.data()).all(|(a, b)| (a - b).abs() <= 1e-12));
    }
}

#[test]
fn partial_buffer_is_rejected() {
    let cfg = small_cfg(3);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pred = Predictor::new(cfg.clone(), MtmInit::Random, &mut rng).unwrap();
    let mut buf = QueryBuffer::new(3);
    buf.push(frame(&mut rng, &cfg, 0.0, 0.0)).unwrap();
    let mut tape = Tape::new();
    let p = pred.bind(&mut tape, false);
    assert!(pred.predict(&mut tape, &p, &buf).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prediction_is_permutation_equivariant(seed in 0u64..1000, shift in 1usize..5) {
        let cfg = small_cfg(3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = Predictor::new(cfg.clone(), MtmInit::Random, &mut rng).unwrap();
        let n = cfg.n_queries;
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let mut buf = QueryBuffer::new(3);
        let mut pbuf = QueryBuffer::new(3);
        for t in 0..3 {
            let mut f = frame(&mut rng, &cfg, 0.2 * t as f64, 0.05 * t as f64);
            // Keep matches plausible so attention is not uniform.
            if t > 0 {
                let prev = buf.latest().unwrap();
                f.centers = prev.centers.iter().map(|c| [c[0] + 0.3, c[1], c[2]]).collect();
            }
            let pf = BufferFrame {
                queries: f.queries.iter().map(|q| {
                    let d = q.shape()[1];
                    Tensor::new(q.shape(), perm.iter().flat_map(|&i| q.data()[i * d..(i + 1) * d].to_vec()).collect()).unwrap()
                }).collect(),
                centers: perm.iter().map(|&i| f.centers[i]).collect(),
                velocities: perm.iter().map(|&i| f.velocities[i]).collect(),
                classes: perm.iter().map(|&i| f.classes[i]).collect(),
                scores: perm.iter().map(|&i| f.scores[i]).collect(),
                ..f.clone()
            };
            buf.push(f).unwrap();
            pbuf.push(pf).unwrap();
        }
        let (a, b) = (predict(&pred, &buf), predict(&pred, &pbuf));
        for (x, y) in a.iter().zip(&b) {
            let d = x.shape()[1];
            for (r, &src) in perm.iter().enumerate() {
                for k in 0..d {
                    prop_assert!((y.data()[r * d + k] - x.data()[src * d + k]).abs() <= 1e-10);
                }
            }
        }
    }
}
