//! Parameterized layers over a [`ParamStore`]. Layers hold parameter ids;
//! forward passes take the tape variables produced by [`ParamStore::bind`].

use numkernel::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.insert_xavier(&format!("{name}.w"), &[d_in, d_out], rng);
        let b = bias.then(|| store.insert(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w.0])?;
        Ok(match self.b {
            Some(b) => tape.add(y, p[b.0])?,
            None => y,
        })
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.insert(format!("{name}.gamma"), Tensor::full(&[d], 1.0));
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros(&[d]));
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS)?;
        let s = tape.mul(n, p[self.gamma.0])?;
        Ok(tape.add(s, p[self.beta.0])?)
    }
}

/// Same-padded 2D convolution over `[c, h, w]`, optionally depthwise.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub depthwise: bool,
    pub c_out: usize,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        // He-style scale keeps ReLU stacks from collapsing at init.
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let w = store.insert(format!("{name}.w"), Tensor::randn(&[c_out, c_in, k, k], std, rng));
        let b = bias.then(|| store.insert(format!("{name}.b"), Tensor::zeros(&[c_out, 1, 1])));
        Self { w, b, depthwise: false, c_out }
    }

    pub fn depthwise<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, k: usize, rng: &mut R) -> Self {
        let std = (2.0 / (k * k) as f64).sqrt() * 0.5;
        let w = store.insert(format!("{name}.w"), Tensor::randn(&[c, 1, k, k], std, rng));
        Self { w, b: None, depthwise: true, c_out: c }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = if self.depthwise { tape.dwconv2d(x, p[self.w.0])? } else { tape.conv2d(x, p[self.w.0])? };
        Ok(match self.b {
            Some(b) => tape.add(y, p[b.0])?,
            None => y,
        })
    }
}

/// Two-layer perceptron `W2 · relu(W1 · x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.fc1"), d_in, d_hidden, true, rng),
            l2: Linear::new(store, &format!("{name}.fc2"), d_hidden, d_out, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.l2.forward(tape, p, h)
    }
}

/// Row-wise scaled dot-product attention `softmax(Q Kᵀ / √d + bias) V`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<(Var, Var)> {
    let d = tape.shape(q)[1] as f64;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let mut logits = tape.scale(logits, 1.0 / d.sqrt());
    if let Some(b) = bias {
        logits = tape.add(logits, b)?;
    }
    let a = tape.softmax(logits, 1)?;
    Ok((tape.matmul(a, v)?, a))
}
