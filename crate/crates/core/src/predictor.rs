//! History-aware query prediction.
//!
//! Each decoder layer's queries are carried across the buffered frames by
//! the motion-guided temporal module: historical centers are moved forward
//! with their velocities and the ego rotation, matched to the next frame by
//! distance and class, and the matched history is aggregated, normalized and
//! fused into a running estimate of the upcoming frame.

use std::collections::VecDeque;

use numkernel::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::ActorClass;
use crate::detector::Detection;
use crate::error::{invalid, CoreError, Result};
use crate::geometry::{self, Mat3, Vec3};
use crate::nn::{LayerNorm, Linear, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    /// Buffer depth `T`.
    pub depth: usize,
    /// Match radius in meters.
    pub gamma: f64,
    /// Blocking cost for improbable matches.
    pub c_m: f64,
    /// Queries scoring below this enter the buffer as background.
    pub score_floor: f64,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_queries: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { depth: 4, gamma: 2.0, c_m: 1e8, score_floor: 0.05, d_model: 32, n_layers: 2, n_queries: 16 }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(CoreError::Config("predictor: buffer depth must be at least 2".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(CoreError::Config("predictor: gamma must be positive".into()));
        }
        if !(-self.c_m).exp().eq(&0.0) {
            return Err(CoreError::Config("predictor: c_m must make exp(-c_m) underflow to 0".into()));
        }
        Ok(())
    }
}

/// One buffered frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferFrame {
    /// Per decoder layer, `[n_q, d]`.
    pub queries: Vec<Tensor>,
    pub centers: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    /// `None` marks background or low-confidence queries.
    pub classes: Vec<Option<ActorClass>>,
    pub scores: Vec<f64>,
    /// World-to-sensor rotation.
    pub rotation: Mat3,
    pub timestamp: f64,
}

impl BufferFrame {
    /// Builds a frame from detector output; centers and velocities come from
    /// the last decoder layer's detections.
    pub fn from_detections(queries: Vec<Tensor>, dets: &[Detection], rotation: Mat3, timestamp: f64, score_floor: f64) -> Self {
        Self {
            queries,
            centers: dets.iter().map(|d| d.center).collect(),
            velocities: dets.iter().map(|d| d.velocity).collect(),
            classes: dets.iter().map(|d| (d.score >= score_floor).then_some(d.class)).collect(),
            scores: dets.iter().map(|d| d.score).collect(),
            rotation,
            timestamp,
        }
    }
}

/// Fixed-depth history; the oldest frame is evicted first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryBuffer {
    depth: usize,
    frames: VecDeque<BufferFrame>,
}

impl QueryBuffer {
    pub fn new(depth: usize) -> Self {
        Self { depth, frames: VecDeque::with_capacity(depth) }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.frames.len() == self.depth
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn push(&mut self, frame: BufferFrame) -> Result<()> {
        if let Some(f) = self.frames.front() {
            let same = f.queries.len() == frame.queries.len()
                && f.queries.iter().zip(&frame.queries).all(|(a, b)| a.shape() == b.shape());
            if !same {
                return Err(invalid("QueryBuffer::push", "frame query shapes differ from the buffered frames"));
            }
        }
        if self.frames.len() == self.depth {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
        Ok(())
    }

    /// Oldest first.
    pub fn frames(&self) -> impl Iterator<Item = &BufferFrame> {
        self.frames.iter()
    }

    pub fn get(&self, i: usize) -> Option<&BufferFrame> {
        self.frames.get(i)
    }

    pub fn latest(&self) -> Option<&BufferFrame> {
        self.frames.back()
    }
}

/// Moves previous-frame centers forward by `Δt` and re-expresses them in the
/// next frame: `C′ = (C + VΔt) · R_relᵀ` with `R_rel = R_next · R_prev⁻¹`.
pub fn align_centers(c_prev: &[Vec3], v_prev: &[Vec3], r_prev: &Mat3, r_next: &Mat3, dt: f64) -> Result<Vec<Vec3>> {
    for (name, r) in [("previous", r_prev), ("next", r_next)] {
        if !geometry::is_rotation(r, 1e-9) {
            return Err(invalid("align_centers", format!("{name} rotation is not orthonormal")));
        }
    }
    if c_prev.len() != v_prev.len() {
        return Err(invalid("align_centers", "centers and velocities differ in length"));
    }
    let r_rel = geometry::mat_mul(r_next, &geometry::transpose(r_prev));
    Ok(c_prev
        .iter()
        .zip(v_prev)
        .map(|(c, v)| geometry::mat_vec(&r_rel, geometry::add(*c, geometry::scale(*v, dt))))
        .collect())
}

/// `O[i][j] = ‖C_next[i] − C′_prev[j]‖₂`.
pub fn cost_matrix(c_next: &[Vec3], c_prev_aligned: &[Vec3]) -> Tensor {
    let mut data = Vec::with_capacity(c_next.len() * c_prev_aligned.len());
    for a in c_next {
        for b in c_prev_aligned {
            data.push(geometry::dist(*a, *b));
        }
    }
    Tensor::new(&[c_next.len(), c_prev_aligned.len()], data).unwrap()
}

/// `G[i][j] = 0` when the pair is within `γ` (inclusive) and the classes
/// agree, `c_m` otherwise. Background never matches.
pub fn guided_mask(o: &Tensor, s_prev: &[Option<ActorClass>], s_next: &[Option<ActorClass>], gamma: f64, c_m: f64) -> Result<Tensor> {
    let (n, m) = (s_next.len(), s_prev.len());
    if o.shape() != [n, m] {
        return Err(CoreError::Shape { what: "guided mask cost", expected: vec![n, m], got: o.shape().to_vec() });
    }
    let data = o
        .data()
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            let (i, j) = (k / m, k % m);
            let same = s_next[i].is_some() && s_next[i] == s_prev[j];
            if same && d <= gamma {
                0.0
            } else {
                c_m
            }
        })
        .collect();
    Ok(Tensor::new(&[n, m], data)?)
}

/// Row-wise softmax over previous-frame queries. Blocked entries (`G > 0`)
/// get logit `−G` alone so that a fully blocked row comes out uniform.
pub fn attention_map(o: &Tensor, g: &Tensor) -> Result<Tensor> {
    if o.shape() != g.shape() || o.ndim() != 2 {
        return Err(CoreError::Shape { what: "attention map", expected: o.shape().to_vec(), got: g.shape().to_vec() });
    }
    let m = o.shape()[1];
    let mut out = Vec::with_capacity(o.len());
    for (orow, grow) in o.data().chunks(m).zip(g.data().chunks(m)) {
        let logits: Vec<f64> = orow.iter().zip(grow).map(|(&d, &b)| if b > 0.0 { -b } else { -d }).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|x| x / z));
    }
    Ok(Tensor::new(o.shape(), out)?)
}

/// Attention between two consecutive buffered frames.
pub fn frame_attention(prev: &BufferFrame, next: &BufferFrame, cfg: &PredictorConfig) -> Result<Tensor> {
    let dt = next.timestamp - prev.timestamp;
    let aligned = align_centers(&prev.centers, &prev.velocities, &prev.rotation, &next.rotation, dt)?;
    let o = cost_matrix(&next.centers, &aligned);
    let g = guided_mask(&o, &prev.classes, &next.classes, cfg.gamma, cfg.c_m)?;
    attention_map(&o, &g)
}

/// Module parameters under the `mtm.` prefix.
#[derive(Clone, Debug)]
pub struct Mtm {
    pub phi1: Linear,
    pub phi2: Linear,
    pub norm: LayerNorm,
    pub ffn: Mlp,
    pub fusion: Linear,
}

/// Initial weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MtmInit {
    /// Identity projections, an identity-valued FFN and fusion that selects
    /// the historical estimate: a static scene is a fixed point.
    Identity,
    Random,
}

impl Mtm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, init: MtmInit, rng: &mut R) -> Self {
        let mtm = Self {
            phi1: Linear::new(store, "mtm.phi1", d, d, true, rng),
            phi2: Linear::new(store, "mtm.phi2", d, d, true, rng),
            norm: LayerNorm::new(store, "mtm.norm", d),
            ffn: Mlp::new(store, "mtm.ffn", d, 2 * d, d, rng),
            fusion: Linear::new(store, "mtm.fusion", 2 * d, d, true, rng),
        };
        if init == MtmInit::Identity {
            mtm.set_identity(store, d);
        }
        mtm
    }

    /// Resets to the identity configuration described on [`MtmInit::Identity`].
    pub fn set_identity(&self, store: &mut ParamStore, d: usize) {
        let eye = Tensor::eye(d);
        store.set(self.phi1.w, eye.clone());
        store.set(self.phi2.w, eye);
        let mut w1 = Tensor::zeros(&[d, 2 * d]);
        let mut w2 = Tensor::zeros(&[2 * d, d]);
        let mut wf = Tensor::zeros(&[2 * d, d]);
        for i in 0..d {
            w1.set(&[i, i], 1.0);
            w1.set(&[i, d + i], -1.0);
            w2.set(&[i, i], 1.0);
            w2.set(&[d + i, i], -1.0);
            wf.set(&[d + i, i], 1.0);
        }
        store.set(self.ffn.l1.w, w1);
        store.set(self.ffn.l2.w, w2);
        store.set(self.fusion.w, wf);
        for b in [self.phi1.b, self.phi2.b, self.ffn.l1.b, self.ffn.l2.b, self.fusion.b].into_iter().flatten() {
            let shape = store.get(b).shape().to_vec();
            store.set(b, Tensor::zeros(&shape));
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in [&self.phi1, &self.phi2, &self.ffn.l1, &self.ffn.l2, &self.fusion] {
            ids.push(l.w);
            ids.extend(l.b);
        }
        ids.push(self.norm.gamma);
        ids.push(self.norm.beta);
        ids
    }

    /// `F = Φ2(A · Φ1(Q_prev))`.
    pub fn aggregate(&self, tape: &mut Tape, p: &[Var], a: Var, q_prev: Var) -> Result<Var> {
        let h = self.phi1.forward(tape, p, q_prev)?;
        let h = tape.matmul(a, h)?;
        self.phi2.forward(tape, p, h)
    }

    /// Provisional estimate `FFN(Norm(Q_next + F))`.
    pub fn step(&self, tape: &mut Tape, p: &[Var], q_next: Var, f: Var) -> Result<Var> {
        let s = tape.add(q_next, f)?;
        let n = self.norm.forward(tape, p, s)?;
        self.ffn.forward(tape, p, n)
    }

    /// Concatenates along features and projects `2D → D`.
    pub fn fuse(&self, tape: &mut Tape, p: &[Var], provisional: Var, hist: Var) -> Result<Var> {
        let x = tape.concat(&[provisional, hist], 1)?;
        self.fusion.forward(tape, p, x)
    }
}

pub struct Predictor {
    pub cfg: PredictorConfig,
    pub params: ParamStore,
    pub mtm: Mtm,
}

impl Clone for Predictor {
    fn clone(&self) -> Self {
        Self { cfg: self.cfg.clone(), params: self.params.clone(), mtm: self.mtm.clone() }
    }
}

impl Predictor {
    pub fn new<R: Rng + ?Sized>(cfg: PredictorConfig, init: MtmInit, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mtm = Mtm::new(&mut params, cfg.d_model, init, rng);
        Ok(Self { cfg, params, mtm })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, |_| trainable)
    }

    /// Predicted query stack for the frame after the newest buffered one.
    ///
    /// For every layer the module is unrolled over consecutive buffer pairs,
    /// oldest first. The state after each step is the estimate of the frame
    /// that follows the pair; it becomes the next pair's "next" input, while
    /// "prev" and all centers, classes and poses are read from the buffer.
    /// The fusion partner is the buffered queries of the estimated frame,
    /// or the running estimate when that frame is not buffered yet.
    pub fn predict(&self, tape: &mut Tape, p: &[Var], buffer: &QueryBuffer) -> Result<Vec<Var>> {
        if !buffer.is_full() || buffer.depth() != self.cfg.depth {
            return Err(invalid(
                "predict_queries",
                format!("buffer holds {} of {} frames (expected depth {})", buffer.len(), buffer.depth(), self.cfg.depth),
            ));
        }
        let t = buffer.depth();
        let frames: Vec<&BufferFrame> = buffer.frames().collect();
        let attn: Vec<Tensor> = (0..t - 1).map(|k| frame_attention(frames[k], frames[k + 1], &self.cfg)).collect::<Result<_>>()?;
        let n_layers = frames[0].queries.len();
        let mut out = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let mut next = tape.constant(frames[1].queries[l].clone());
            for k in 0..t - 1 {
                let q_prev = tape.constant(frames[k].queries[l].clone());
                let a = tape.constant(attn[k].clone());
                let f = self.mtm.aggregate(tape, p, a, q_prev)?;
                let provisional = self.mtm.step(tape, p, next, f)?;
                let hist = match frames.get(k + 2) {
                    Some(fr) => tape.constant(fr.queries[l].clone()),
                    None => next,
                };
                next = self.mtm.fuse(tape, p, provisional, hist)?;
            }
            out.push(next);
        }
        Ok(out)
    }
}
