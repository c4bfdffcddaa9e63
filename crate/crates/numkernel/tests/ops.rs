use numkernel::{check_gradients, check_gradients_at, opsuite, KernelError, Tape, Tensor, DEFAULT_STEP};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[7, 9], 5.0, &mut rng));
    let y = tape.softmax(x, 1).unwrap();
    for row in tape.value(y).data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn identity_matmul_returns_operand() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let i3 = tape.constant(Tensor::eye(3));
    let x = tape.constant(Tensor::randn(&[3, 5], 1.0, &mut rng));
    let y = tape.matmul(i3, x).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(&[2, 4], 3.7));
    let y = tape.layer_norm(x, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 5]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    assert!(matches!(tape.add(a, b), Err(KernelError::ShapeMismatch { op: "add", .. })));
}

#[test]
fn grad_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2, 3, 2]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x), Tensor::full(&[2, 3, 2], 1.0));
}

#[test]
fn grad_of_dot_is_other_operand() {
    let mut tape = Tape::new();
    let xv = t(&[3], &[1.0, -2.0, 0.5]);
    let yv = t(&[3], &[4.0, 0.25, -3.0]);
    let x = tape.param(xv.clone());
    let y = tape.param(yv.clone());
    let p = tape.mul(x, y).unwrap();
    let d = tape.sum(p);
    tape.backward(d).unwrap();
    assert_eq!(tape.grad(x), yv);
    assert_eq!(tape.grad(y), xv);
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(unused), Tensor::zeros(&[3]));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(KernelError::NotScalar(_))));
}

#[test]
fn second_backward_doubles_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let x = tape.param(Tensor::randn(&[3, 4], 1.0, &mut rng));
    let w = tape.param(Tensor::randn(&[4, 2], 1.0, &mut rng));
    let h = tape.matmul(x, w).unwrap();
    let h = tape.sigmoid(h);
    let l = tape.sum(h);
    tape.backward(l).unwrap();
    let g1 = tape.grad(w);
    tape.backward(l).unwrap();
    let g2 = tape.grad(w);
    for (a, b) in g1.data().iter().zip(g2.data()) {
        assert_eq!(2.0 * a, *b);
    }
    tape.zero_grad();
    assert_eq!(tape.grad(w), Tensor::zeros(&[4, 2]));
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w1 = Tensor::randn(&[4, 6], 0.5, &mut rng);
    let w2 = Tensor::randn(&[6, 1], 0.5, &mut rng);
    let point = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let f = move |tape: &mut Tape, x| {
        let a = tape.constant(w1.clone());
        let b = tape.constant(w2.clone());
        let h = tape.matmul(x, a)?;
        let h = tape.layer_norm(h, 1e-5)?;
        let h = tape.sigmoid(h);
        let o = tape.matmul(h, b)?;
        let o = tape.powf(o, 2.0);
        Ok(tape.mean(o))
    };
    assert!(check_gradients(f, &point, DEFAULT_STEP).unwrap() <= 1e-6);
}

#[test]
fn check_gradients_squared_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn(&[10], 1.0, &mut rng);
    let err = check_gradients(
        |t, x| {
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        },
        &x,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn check_gradients_softmax_first_entry_at_origin() {
    let err = check_gradients(
        |t, x| {
            let s = t.softmax(x, 0)?;
            t.narrow(s, 0, 0, 1).and_then(|v| t.reshape(v, &[]))
        },
        &Tensor::zeros(&[2]),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn check_gradients_constant_function() {
    let err = check_gradients(|t, _x| Ok(t.scalar(4.0)), &Tensor::zeros(&[3]), DEFAULT_STEP).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn check_gradients_rejects_non_finite_point() {
    let x = t(&[2], &[1.0, f64::NAN]);
    let r = check_gradients(|t, x| Ok(t.sum(x)), &x, DEFAULT_STEP);
    assert!(matches!(r, Err(KernelError::NonFinite)));
}

#[test]
fn every_op_passes_gradcheck_on_twenty_inputs() {
    for (name, err) in opsuite::run(20, 11, DEFAULT_STEP).unwrap() {
        assert!(err <= 1e-4, "{name}: {err}");
    }
}

#[test]
fn custom_backward_rule_is_used() {
    struct Twice;
    impl numkernel::CustomBackward for Twice {
        fn backward(&self, g: &[f64], _i: &[&Tensor], _o: &Tensor) -> Vec<Option<Vec<f64>>> {
            vec![Some(g.iter().map(|v| 2.0 * v).collect())]
        }
    }
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 5.0]));
    let y = tape.custom(&[x], Tensor::zeros(&[2]), Box::new(Twice));
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).data(), &[2.0, 2.0]);
}

#[test]
fn slope_gap_separates_kinks_from_wrong_gradients() {
    let relu = |tape: &mut Tape, x: numkernel::Var| {
        let r = tape.relu(x);
        Ok(tape.sum(r))
    };
    let kink = check_gradients_at(&relu, &t(&[1], &[3e-6]), DEFAULT_STEP, &[0]).unwrap();
    assert!(kink.max_rel_error > 0.3);
    assert!(kink.worst_slope_gap >= kink.max_rel_error);

    struct Wrong;
    impl numkernel::CustomBackward for Wrong {
        fn backward(&self, g: &[f64], _i: &[&Tensor], _o: &Tensor) -> Vec<Option<Vec<f64>>> {
            vec![Some(g.iter().map(|v| 1.5 * v).collect())]
        }
    }
    let wrong = |tape: &mut Tape, x: numkernel::Var| {
        let v = tape.value(x).clone();
        let y = tape.custom(&[x], v, Box::new(Wrong));
        Ok(tape.sum(y))
    };
    let bad = check_gradients_at(&wrong, &t(&[1], &[0.7]), DEFAULT_STEP, &[0]).unwrap();
    assert!((bad.max_rel_error - 1.0 / 3.0).abs() < 1e-6);
    assert!(bad.worst_slope_gap < 1e-8);
}

proptest! {
    #[test]
    fn softmax_shift_invariant(v in prop::collection::vec(-30.0f64..30.0, 1..12), c in -100.0f64..100.0) {
        let n = v.len();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[n], v.clone()).unwrap());
        let b = tape.constant(Tensor::new(&[n], v.iter().map(|x| x + c).collect()).unwrap());
        let sa = tape.softmax(a, 0).unwrap();
        let sb = tape.softmax(b, 0).unwrap();
        prop_assert!(tape.value(sa).max_abs_diff(tape.value(sb)) <= 1e-12);
    }

    #[test]
    fn broadcast_add_matches_loops(r in 1usize..5, c in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[r, c], 1.0, &mut rng);
        let b = Tensor::randn(&[c], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let s = tape.add(va, vb).unwrap();
        for i in 0..r {
            for j in 0..c {
                prop_assert_eq!(tape.value(s).at(&[i, j]), a.at(&[i, j]) + b.at(&[j]));
            }
        }
    }
}
