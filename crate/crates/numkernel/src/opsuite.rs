//! Finite-difference sweep over every differentiable tape op.
//!
//! Each case maps a random input tensor through one op and reduces the
//! result against fixed, non-uniform weights, so the scalar depends on every
//! output coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::check_gradients;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

type CaseFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var> + Send + Sync>;

pub struct OpCase {
    pub name: &'static str,
    pub input_shape: Vec<usize>,
    /// Draw inputs from `[0.5, 2]` instead of a standard normal.
    pub positive: bool,
    pub f: CaseFn,
}

fn weights(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|k| (1.3 * k as f64 + 0.7).sin()).collect()).unwrap()
}

/// Weighted sum of `y` against a fixed pattern.
pub fn probe(tape: &mut Tape, y: Var) -> Result<Var> {
    let w = tape.constant(weights(tape.shape(y)));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn konst(tape: &mut Tape, shape: &[usize], seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tape.constant(Tensor::randn(shape, 1.0, &mut rng))
}

fn case(
    name: &'static str,
    shape: &[usize],
    positive: bool,
    f: impl Fn(&mut Tape, Var) -> Result<Var> + Send + Sync + 'static,
) -> OpCase {
    OpCase {
        name,
        input_shape: shape.to_vec(),
        positive,
        f: Box::new(move |t, x| {
            let y = f(t, x)?;
            probe(t, y)
        }),
    }
}

pub fn cases() -> Vec<OpCase> {
    vec![
        case("add", &[2, 3], false, |t, x| {
            let c = konst(t, &[3], 1);
            t.add(x, c)
        }),
        case("add_broadcast_lhs", &[3], false, |t, x| {
            let c = konst(t, &[2, 3], 2);
            t.add(c, x)
        }),
        case("sub", &[2, 3], false, |t, x| {
            let c = konst(t, &[2, 1], 3);
            t.sub(c, x)
        }),
        case("mul", &[2, 3], false, |t, x| t.mul(x, x)),
        case("mul_broadcast", &[2, 1], false, |t, x| {
            let c = konst(t, &[2, 4], 4);
            t.mul(c, x)
        }),
        case("scale", &[4], false, |t, x| Ok(t.scale(x, -2.5))),
        case("add_scalar", &[4], false, |t, x| Ok(t.add_scalar(x, 0.3))),
        case("exp", &[5], false, |t, x| Ok(t.exp(x))),
        case("log", &[5], true, |t, x| Ok(t.log(x))),
        case("relu", &[6], false, |t, x| Ok(t.relu(x))),
        case("sigmoid", &[5], false, |t, x| Ok(t.sigmoid(x))),
        case("abs", &[5], false, |t, x| Ok(t.abs(x))),
        case("sqrt", &[5], true, |t, x| Ok(t.sqrt(x))),
        case("powf", &[5], true, |t, x| Ok(t.powf(x, 1.7))),
        case("matmul_lhs", &[3, 4], false, |t, x| {
            let b = konst(t, &[4, 2], 5);
            t.matmul(x, b)
        }),
        case("matmul_rhs", &[4, 2], false, |t, x| {
            let a = konst(t, &[3, 4], 6);
            t.matmul(a, x)
        }),
        case("transpose", &[3, 2], false, |t, x| t.transpose(x)),
        case("reshape", &[2, 3], false, |t, x| t.reshape(x, &[3, 2])),
        case("sum", &[2, 3], false, |t, x| {
            let s = t.sum(x);
            Ok(t.mul(s, s)?)
        }),
        case("mean", &[2, 3], false, |t, x| {
            let s = t.mean(x);
            Ok(t.mul(s, s)?)
        }),
        case("sum_axis0", &[2, 3, 4], false, |t, x| t.sum_axis(x, 0)),
        case("sum_axis1", &[2, 3, 4], false, |t, x| t.sum_axis(x, 1)),
        case("max_axis", &[3, 4], false, |t, x| t.max_axis(x, 1)),
        case("softmax_axis1", &[3, 4], false, |t, x| t.softmax(x, 1)),
        case("softmax_axis0", &[3, 4], false, |t, x| t.softmax(x, 0)),
        case("log_softmax", &[3, 4], false, |t, x| t.log_softmax(x, 1)),
        case("layer_norm", &[3, 5], false, |t, x| t.layer_norm(x, 1e-5)),
        case("concat", &[2, 3], false, |t, x| {
            let c = konst(t, &[2, 2], 7);
            let y = t.exp(x);
            t.concat(&[x, c, y], 1)
        }),
        case("narrow", &[4, 3], false, |t, x| t.narrow(x, 0, 1, 2)),
        case("index_select", &[4, 2], false, |t, x| t.index_select(x, &[3, 0, 3, 1])),
        case("scatter_add_rows", &[4, 2], false, |t, x| t.scatter_add_rows(x, &[Some(1), None, Some(1), Some(0)], 3)),
        case("conv2d_1x1_input", &[3, 4, 5], false, |t, x| {
            let w = konst(t, &[2, 3, 1, 1], 8);
            t.conv2d(x, w)
        }),
        case("conv2d_3x3_input", &[2, 4, 5], false, |t, x| {
            let w = konst(t, &[3, 2, 3, 3], 9);
            t.conv2d(x, w)
        }),
        case("conv2d_3x3_weight", &[3, 2, 3, 3], false, |t, w| {
            let x = konst(t, &[2, 4, 5], 10);
            t.conv2d(x, w)
        }),
        case("dwconv2d_input", &[3, 4, 5], false, |t, x| {
            let w = konst(t, &[3, 1, 3, 3], 11);
            t.dwconv2d(x, w)
        }),
        case("dwconv2d_weight", &[3, 1, 3, 3], false, |t, w| {
            let x = konst(t, &[3, 4, 5], 12);
            t.dwconv2d(x, w)
        }),
        case("adaptive_avg_pool2d", &[2, 5, 7], false, |t, x| t.adaptive_avg_pool2d(x, 2, 3)),
        case("l1_norm", &[6], false, |t, x| Ok(t.l1_norm(x))),
        case("l2_norm", &[6], false, |t, x| Ok(t.l2_norm(x))),
    ]
}

/// Worst relative error per op over `instances` random inputs.
pub fn run(instances: usize, seed: u64, step: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in cases() {
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let x = if c.positive {
                let n: usize = c.input_shape.iter().product();
                Tensor::new(&c.input_shape, (0..n).map(|_| rng.gen_range(0.5..2.0)).collect())?
            } else {
                Tensor::randn(&c.input_shape, 1.0, &mut rng)
            };
            worst = worst.max(check_gradients(&c.f, &x, step)?);
        }
        out.push((c.name, worst));
    }
    Ok(out)
}
