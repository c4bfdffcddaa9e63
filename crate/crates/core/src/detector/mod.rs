//! Query-based LiDAR/camera fusion detector at desk scale.
//!
//! Voxels are pooled into a bird's-eye grid, concatenated with the camera
//! surrogate, and read by a pre-norm transformer decoder whose queries carry
//! learned BEV anchors. Each layer refines the anchor of the next one.

pub mod matching;

use numkernel::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{ActorBox, ActorClass};
use crate::error::{CoreError, Result};
use crate::geometry::Vec3;
use crate::nn::{attention, Conv, LayerNorm, Linear, Mlp};
use crate::scenesim::{CameraConfig, CAMERA_CHANNELS};
use crate::voxelizer::{voxelize_on_tape, VoxelGridConfig, VoxelTensor};

/// Features pooled per voxel: normalized mean x, y, z, mean presence and
/// slot occupancy fraction.
pub const VOXEL_FEATURES: usize = 5;

/// Head output layout.
pub const OUT_XY: usize = 0;
pub const OUT_Z: usize = 2;
pub const OUT_LOG_SIZE: usize = 3;
pub const OUT_SIN: usize = 6;
pub const OUT_COS: usize = 7;
pub const OUT_VEL: usize = 8;
pub const OUT_CLS: usize = 11;
/// Three actor classes plus background.
pub const NUM_LOGITS: usize = ActorClass::COUNT + 1;
pub const BACKGROUND: usize = ActorClass::COUNT;
pub const HEAD_OUT: usize = OUT_CLS + NUM_LOGITS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub voxel: VoxelGridConfig,
    pub camera: CameraConfig,
    pub lidar_channels: usize,
    pub residual_blocks: usize,
    pub d_model: usize,
    pub n_queries: usize,
    pub n_layers: usize,
    /// Sinusoid octaves in the positional encoding.
    pub pe_freqs: usize,
    /// Std-dev (meters) of the Gaussian locality prior on cross-attention,
    /// one entry per layer.
    pub locality_sigma: Vec<f64>,
    /// Meters per unit of head center offset.
    pub offset_scale: f64,
    /// m/s per unit of head velocity output.
    pub velocity_scale: f64,
    /// Sensor-frame height of the reference point.
    pub ref_z: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            voxel: VoxelGridConfig::default(),
            camera: CameraConfig::default(),
            lidar_channels: 16,
            residual_blocks: 2,
            d_model: 32,
            n_queries: 16,
            n_layers: 2,
            pe_freqs: 4,
            locality_sigma: vec![12.0, 5.0],
            offset_scale: 5.0,
            velocity_scale: 5.0,
            ref_z: -1.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.voxel.validate()?;
        let dims = self.voxel.dims();
        let ext = self.camera.extent;
        let grid_ok = dims[0] == self.camera.cells
            && dims[1] == self.camera.cells
            && (self.voxel.min[0] + ext).abs() < 1e-9
            && (self.voxel.max[0] - ext).abs() < 1e-9
            && (self.voxel.min[1] + ext).abs() < 1e-9
            && (self.voxel.max[1] - ext).abs() < 1e-9;
        if !grid_ok {
            return Err(CoreError::Config("detector: voxel x/y grid must coincide with the camera BEV grid".into()));
        }
        if self.locality_sigma.len() != self.n_layers {
            return Err(CoreError::Config("detector: locality_sigma needs one entry per layer".into()));
        }
        if self.d_model == 0 || self.n_queries == 0 || self.n_layers == 0 || self.lidar_channels == 0 {
            return Err(CoreError::Config("detector: dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.camera.cells
    }

    pub fn z_layers(&self) -> usize {
        self.voxel.dims()[2]
    }

    pub fn pe_width(&self) -> usize {
        2 + 4 * self.pe_freqs
    }

    /// BEV cell centers, row-major (x index major).
    pub fn cell_centers(&self) -> Vec<[f64; 2]> {
        let n = self.cells();
        let ext = self.camera.extent;
        let cell = 2.0 * ext / n as f64;
        (0..n * n)
            .map(|k| [-ext + ((k / n) as f64 + 0.5) * cell, -ext + ((k % n) as f64 + 0.5) * cell])
            .collect()
    }

    /// Positional features of BEV positions.
    pub fn positional_features(&self, xy: &[[f64; 2]]) -> Tensor {
        let ext = self.camera.extent;
        let w = self.pe_width();
        let mut data = Vec::with_capacity(xy.len() * w);
        for p in xy {
            let (x, y) = (p[0] / ext, p[1] / ext);
            data.push(x);
            data.push(y);
            for k in 0..self.pe_freqs {
                let f = std::f64::consts::PI * (1u64 << k) as f64;
                data.extend_from_slice(&[(f * x).sin(), (f * x).cos(), (f * y).sin(), (f * y).cos()]);
            }
        }
        Tensor::new(&[xy.len(), w], data).expect("positional feature shape")
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    sa_q: Linear,
    sa_k: Linear,
    sa_v: Linear,
    sa_out: Linear,
    ln_cross: LayerNorm,
    ca_q: Linear,
    ca_k: Linear,
    ca_v: Linear,
    ca_out: Linear,
    ln_ffn: LayerNorm,
    ffn: Mlp,
}

#[derive(Clone, Debug)]
struct Layout {
    lidar_in: Conv,
    blocks: Vec<(Conv, Conv)>,
    fuse: Conv,
    pe_proj: Linear,
    query_embed: ParamId,
    anchors: ParamId,
    layers: Vec<DecoderLayer>,
    head_ln: LayerNorm,
    head: Mlp,
}

/// One decoded box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
    pub velocity: Vec3,
    pub class_logits: [f64; NUM_LOGITS],
    /// `1 − p(background)`.
    pub score: f64,
    /// Most likely actor class.
    pub class: ActorClass,
}

/// Head output for one query stack layer.
#[derive(Clone, Copy, Debug)]
pub struct HeadOut {
    /// `[n_q, HEAD_OUT]`.
    pub raw: Var,
    /// `[n_q, 3]` decoded centers.
    pub center: Var,
}

/// Everything the decoder produced for one frame.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Per-layer query embeddings, each `[n_q, d_model]`.
    pub stack: Vec<Var>,
    pub heads: Vec<HeadOut>,
    /// Reference points `[n_q, 2]` each layer read, as values.
    pub refs: Vec<Tensor>,
}

pub struct Detector {
    pub cfg: DetectorConfig,
    pub params: ParamStore,
    layout: Layout,
    cell_xy: Vec<[f64; 2]>,
    cell_pe: Tensor,
}

impl Clone for Detector {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            cell_xy: self.cell_xy.clone(),
            cell_pe: self.cell_pe.clone(),
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Detector {
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut s = ParamStore::new();
        let c = cfg.lidar_channels;
        let d = cfg.d_model;
        let lidar_in = Conv::new(&mut s, "det.lidar_in", VOXEL_FEATURES * cfg.z_layers(), c, 1, true, rng);
        let blocks = (0..cfg.residual_blocks)
            .map(|i| {
                (
                    Conv::new(&mut s, &format!("det.block{i}.conv1"), c, c, 3, true, rng),
                    Conv::new(&mut s, &format!("det.block{i}.conv2"), c, c, 3, true, rng),
                )
            })
            .collect();
        let fuse = Conv::new(&mut s, "det.fuse", c + CAMERA_CHANNELS, d, 1, true, rng);
        let pe_proj = Linear::new(&mut s, "det.pe_proj", cfg.pe_width(), d, false, rng);
        let query_embed = s.insert("det.query_embed", Tensor::randn(&[cfg.n_queries, d], 0.5, rng));
        let anchors = s.insert("det.anchors", Self::anchor_init(&cfg, rng));
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let n = |part: &str| format!("det.layer{i}.{part}");
                DecoderLayer {
                    ln_self: LayerNorm::new(&mut s, &n("ln_self"), d),
                    sa_q: Linear::new(&mut s, &n("sa_q"), d, d, false, rng),
                    sa_k: Linear::new(&mut s, &n("sa_k"), d, d, false, rng),
                    sa_v: Linear::new(&mut s, &n("sa_v"), d, d, false, rng),
                    sa_out: Linear::new(&mut s, &n("sa_out"), d, d, false, rng),
                    ln_cross: LayerNorm::new(&mut s, &n("ln_cross"), d),
                    ca_q: Linear::new(&mut s, &n("ca_q"), d, d, false, rng),
                    ca_k: Linear::new(&mut s, &n("ca_k"), d, d, false, rng),
                    ca_v: Linear::new(&mut s, &n("ca_v"), d, d, false, rng),
                    ca_out: Linear::new(&mut s, &n("ca_out"), d, d, false, rng),
                    ln_ffn: LayerNorm::new(&mut s, &n("ln_ffn"), d),
                    ffn: Mlp::new(&mut s, &n("ffn"), d, 2 * d, d, rng),
                }
            })
            .collect();
        let head_ln = LayerNorm::new(&mut s, "det.head_ln", d);
        let head = Mlp::new(&mut s, "det.head", d, d, HEAD_OUT, rng);
        // Start with small box offsets so early matching follows the anchors.
        let w2 = head.l2.w;
        let scaled = s.get(w2).map(|x| 0.1 * x);
        s.set(w2, scaled);
        let layout = Layout { lidar_in, blocks, fuse, pe_proj, query_embed, anchors, layers, head_ln, head };
        let cell_xy = cfg.cell_centers();
        let cell_pe = cfg.positional_features(&cell_xy);
        Ok(Self { cfg, params: s, layout, cell_xy, cell_pe })
    }

    /// Anchors spread on a regular grid over the central part of the extent,
    /// stored pre-sigmoid.
    fn anchor_init<R: Rng + ?Sized>(cfg: &DetectorConfig, rng: &mut R) -> Tensor {
        let n = cfg.n_queries;
        let side = (n as f64).sqrt().ceil() as usize;
        let mut data = Vec::with_capacity(2 * n);
        for q in 0..n {
            let (i, j) = (q / side, q % side);
            let pos = |k: usize| 0.75 * ((k as f64 + 0.5) / side as f64 * 2.0 - 1.0);
            let jitter = rng.gen_range(-0.01..0.01);
            data.push(logit((pos(i) + jitter + 1.0) / 2.0));
            data.push(logit((pos(j) - jitter + 1.0) / 2.0));
        }
        Tensor::new(&[n, 2], data).unwrap()
    }

    pub fn query_embed_id(&self) -> ParamId {
        self.layout.query_embed
    }

    pub fn anchors_id(&self) -> ParamId {
        self.layout.anchors
    }

    /// Parameter ids of the output projections (attention and FFN outputs).
    pub fn output_projection_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layout.layers {
            ids.push(l.sa_out.w);
            ids.push(l.ca_out.w);
            ids.push(l.ffn.l2.w);
            ids.extend(l.ffn.l2.b);
        }
        ids
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        let h = &self.layout.head;
        let mut ids = vec![self.layout.head_ln.gamma, self.layout.head_ln.beta, h.l1.w, h.l2.w];
        ids.extend(h.l1.b);
        ids.extend(h.l2.b);
        ids
    }

    pub fn fuse_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.layout.fuse.w];
        ids.extend(self.layout.fuse.b);
        ids
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, |_| trainable)
    }

    /// Point rows `(x, y, z, 1)` for the voxelizer.
    pub fn point_features(points: &[Vec3]) -> Tensor {
        let mut data = Vec::with_capacity(points.len() * 4);
        for p in points {
            data.extend_from_slice(&[p[0], p[1], p[2], 1.0]);
        }
        Tensor::new(&[points.len(), 4], data).unwrap()
    }

    /// Per-voxel pooled features scattered into the BEV grid with z-layers
    /// stacked along channels: `[VOXEL_FEATURES · z_layers, cells, cells]`.
    pub fn scatter_voxels(&self, tape: &mut Tape, voxels: Var, vt: &VoxelTensor) -> Result<Var> {
        let n = self.cfg.cells();
        let zl = self.cfg.z_layers();
        let ch = VOXEL_FEATURES * zl;
        let m = vt.m_v();
        if m == 0 {
            return Ok(tape.constant(Tensor::zeros(&[ch, n, n])));
        }
        let vc = &self.cfg.voxel;
        if vt.d_p != 4 {
            return Err(CoreError::Config("detector expects 4 point features".into()));
        }
        let summed = tape.sum_axis(voxels, 1)?;
        let inv_occ = Tensor::new(&[m, 1], vt.occupancy.iter().map(|&o| 1.0 / o as f64).collect())?;
        let inv_occ = tape.constant(inv_occ);
        let mean = tape.mul(summed, inv_occ)?;
        let xyz = tape.narrow(mean, 1, 0, 3)?;
        let centers: Vec<f64> = vt.coords.iter().flat_map(|&c| vc.center(c)).collect();
        let centers = tape.constant(Tensor::new(&[m, 3], centers)?);
        let rel = tape.sub(xyz, centers)?;
        let inv_size = tape.constant(Tensor::from_vec(vc.voxel_size.iter().map(|s| 1.0 / s).collect()));
        let rel = tape.mul(rel, inv_size)?;
        let presence = tape.narrow(mean, 1, 3, 1)?;
        let fill = tape.narrow(summed, 1, 3, 1)?;
        let fill = tape.scale(fill, 1.0 / vt.k_v as f64);
        let feats = tape.concat(&[rel, presence, fill], 1)?;
        let mut layers = Vec::with_capacity(zl);
        for z in 0..zl {
            let targets: Vec<Option<usize>> =
                vt.coords.iter().map(|c| (c[2] == z).then_some(c[0] * n + c[1])).collect();
            layers.push(tape.scatter_add_rows(feats, &targets, n * n)?);
        }
        let bev = tape.concat(&layers, 1)?;
        let bev = tape.transpose(bev)?;
        Ok(tape.reshape(bev, &[ch, n, n])?)
    }

    /// LiDAR BEV features `[lidar_channels, cells, cells]`.
    pub fn extract_lidar_bev(&self, tape: &mut Tape, p: &[Var], voxels: Var, vt: &VoxelTensor) -> Result<Var> {
        let raw = self.scatter_voxels(tape, voxels, vt)?;
        let x = self.layout.lidar_in.forward(tape, p, raw)?;
        let mut x = tape.relu(x);
        for (c1, c2) in &self.layout.blocks {
            let h = c1.forward(tape, p, x)?;
            let h = tape.relu(h);
            let h = c2.forward(tape, p, h)?;
            let s = tape.add(x, h)?;
            x = tape.relu(s);
        }
        Ok(x)
    }

    /// Channel concatenation and 1×1 projection; returns tokens
    /// `[cells², d_model]`.
    pub fn fuse(&self, tape: &mut Tape, p: &[Var], lidar: Var, camera: Var) -> Result<Var> {
        let (ls, cs) = (tape.shape(lidar).to_vec(), tape.shape(camera).to_vec());
        if ls.len() != 3 || cs.len() != 3 || ls[1..] != cs[1..] {
            return Err(CoreError::Shape { what: "fuse camera grid", expected: ls, got: cs });
        }
        let x = tape.concat(&[lidar, camera], 0)?;
        let y = self.layout.fuse.forward(tape, p, x)?;
        let n = ls[1] * ls[2];
        let y = tape.reshape(y, &[self.cfg.d_model, n])?;
        Ok(tape.transpose(y)?)
    }

    fn anchor_xy(&self, tape: &mut Tape, p: &[Var]) -> Var {
        let s = tape.sigmoid(p[self.layout.anchors.0]);
        let s = tape.scale(s, 2.0 * self.cfg.camera.extent);
        tape.add_scalar(s, -self.cfg.camera.extent)
    }

    /// Head on one layer of queries relative to reference points `ref_xy`
    /// (`[n_q, 2]`).
    pub fn head(&self, tape: &mut Tape, p: &[Var], q: Var, ref_xy: Var) -> Result<HeadOut> {
        let h = self.layout.head_ln.forward(tape, p, q)?;
        let raw = self.layout.head.forward(tape, p, h)?;
        let off = tape.narrow(raw, 1, OUT_XY, 2)?;
        let off = tape.scale(off, self.cfg.offset_scale);
        let xy = tape.add(ref_xy, off)?;
        let z = tape.narrow(raw, 1, OUT_Z, 1)?;
        let z = tape.add_scalar(z, self.cfg.ref_z);
        let center = tape.concat(&[xy, z], 1)?;
        Ok(HeadOut { raw, center })
    }

    /// Decodes every layer of a query stack with iterative reference
    /// refinement, starting from the learned anchors.
    pub fn decode_stack(&self, tape: &mut Tape, p: &[Var], stack: &[Var]) -> Result<Vec<HeadOut>> {
        let mut ref_xy = self.anchor_xy(tape, p);
        let mut out = Vec::with_capacity(stack.len());
        for &q in stack {
            let h = self.head(tape, p, q, ref_xy)?;
            let xy = tape.narrow(h.center, 1, 0, 2)?;
            ref_xy = tape.detach(xy);
            out.push(h);
        }
        Ok(out)
    }

    fn locality_bias(&self, tape: &mut Tape, ref_xy: Var, sigma: f64) -> Result<Var> {
        let m = self.cell_xy.len();
        let cells_t = Tensor::new(&[2, m], {
            let mut d = vec![0.0; 2 * m];
            for (k, c) in self.cell_xy.iter().enumerate() {
                d[k] = c[0];
                d[m + k] = c[1];
            }
            d
        })?;
        let cc = Tensor::new(&[1, m], self.cell_xy.iter().map(|c| c[0] * c[0] + c[1] * c[1]).collect())?;
        let ct = tape.constant(cells_t);
        let cc = tape.constant(cc);
        let rc = tape.matmul(ref_xy, ct)?;
        let rc = tape.scale(rc, -2.0);
        let rr = tape.mul(ref_xy, ref_xy)?;
        let rr = tape.sum_axis(rr, 1)?;
        let n = tape.shape(rr)[0];
        let rr = tape.reshape(rr, &[n, 1])?;
        let d2 = tape.add(rc, rr)?;
        let d2 = tape.add(d2, cc)?;
        Ok(tape.scale(d2, -1.0 / (2.0 * sigma * sigma)))
    }

    /// Transformer decoder over fused tokens.
    pub fn decode(&self, tape: &mut Tape, p: &[Var], tokens: Var) -> Result<DecoderOutput> {
        self.decode_with_refs(tape, p, tokens, None)
    }

    /// Decoder whose query positional encodings and post-first-layer
    /// reference points come from `frozen` instead of the running refs.
    /// Feeding back the `refs` of an earlier pass gives a function whose
    /// exact gradient is the tape gradient, for finite-difference checks.
    pub fn decode_with_refs(&self, tape: &mut Tape, p: &[Var], tokens: Var, frozen: Option<&[Tensor]>) -> Result<DecoderOutput> {
        if let Some(f) = frozen {
            if f.len() != self.layout.layers.len() {
                return Err(CoreError::Config(format!("decoder: {} frozen refs for {} layers", f.len(), self.layout.layers.len())));
            }
        }
        let lay = &self.layout;
        let cell_pe_raw = tape.constant(self.cell_pe.clone());
        let cell_pe = lay.pe_proj.forward(tape, p, cell_pe_raw)?;
        let keys_in = tape.add(tokens, cell_pe)?;
        let mut q = p[lay.query_embed.0];
        let mut ref_xy = self.anchor_xy(tape, p);
        let mut stack = Vec::with_capacity(lay.layers.len());
        let mut heads = Vec::with_capacity(lay.layers.len());
        let mut refs = Vec::with_capacity(lay.layers.len());
        for (l, layer) in lay.layers.iter().enumerate() {
            if let (Some(f), true) = (frozen, l > 0) {
                ref_xy = tape.constant(f[l].clone());
            }
            let ref_vals = match frozen {
                Some(f) => f[l].clone(),
                None => tape.value(ref_xy).clone(),
            };
            let pts: Vec<[f64; 2]> = ref_vals.data().chunks(2).map(|c| [c[0], c[1]]).collect();
            let qpe_raw = tape.constant(self.cfg.positional_features(&pts));
            let qpe = lay.pe_proj.forward(tape, p, qpe_raw)?;

            let h = layer.ln_self.forward(tape, p, q)?;
            let hp = tape.add(h, qpe)?;
            let sq = layer.sa_q.forward(tape, p, hp)?;
            let sk = layer.sa_k.forward(tape, p, hp)?;
            let sv = layer.sa_v.forward(tape, p, h)?;
            let (sa, _) = attention(tape, sq, sk, sv, None)?;
            let sa = layer.sa_out.forward(tape, p, sa)?;
            q = tape.add(q, sa)?;

            let h = layer.ln_cross.forward(tape, p, q)?;
            let hp = tape.add(h, qpe)?;
            let cq = layer.ca_q.forward(tape, p, hp)?;
            let ck = layer.ca_k.forward(tape, p, keys_in)?;
            let cv = layer.ca_v.forward(tape, p, tokens)?;
            let bias = self.locality_bias(tape, ref_xy, self.cfg.locality_sigma[l])?;
            let (ca, _) = attention(tape, cq, ck, cv, Some(bias))?;
            let ca = layer.ca_out.forward(tape, p, ca)?;
            q = tape.add(q, ca)?;

            let h = layer.ln_ffn.forward(tape, p, q)?;
            let f = layer.ffn.forward(tape, p, h)?;
            q = tape.add(q, f)?;

            let head = self.head(tape, p, q, ref_xy)?;
            let xy = tape.narrow(head.center, 1, 0, 2)?;
            ref_xy = tape.detach(xy);
            stack.push(q);
            heads.push(head);
            refs.push(ref_vals);
        }
        Ok(DecoderOutput { stack, heads, refs })
    }

    /// Full forward from point rows (`[n, 4]`) and the camera grid.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], points: Var, camera: &Tensor, alpha: f64) -> Result<(DecoderOutput, VoxelTensor)> {
        self.forward_with_refs(tape, p, points, camera, alpha, None)
    }

    /// [`Detector::forward`] with frozen decoder references.
    pub fn forward_with_refs(
        &self,
        tape: &mut Tape,
        p: &[Var],
        points: Var,
        camera: &Tensor,
        alpha: f64,
        frozen: Option<&[Tensor]>,
    ) -> Result<(DecoderOutput, VoxelTensor)> {
        let (voxels, vt) = voxelize_on_tape(tape, points, &self.cfg.voxel, alpha)?;
        let lidar = self.extract_lidar_bev(tape, p, voxels, &vt)?;
        let cam = tape.constant(camera.clone());
        let tokens = self.fuse(tape, p, lidar, cam)?;
        Ok((self.decode_with_refs(tape, p, tokens, frozen)?, vt))
    }

    /// Reads boxes off a head output.
    pub fn detections(&self, tape: &Tape, head: &HeadOut) -> Vec<Detection> {
        decode_detections(tape.value(head.raw), tape.value(head.center), self.cfg.velocity_scale)
    }
}

/// Boxes from raw head rows and decoded centers.
pub fn decode_detections(raw: &Tensor, centers: &Tensor, velocity_scale: f64) -> Vec<Detection> {
    raw.data()
        .chunks(HEAD_OUT)
        .zip(centers.data().chunks(3))
        .map(|(r, c)| {
            let mut logits = [0.0; NUM_LOGITS];
            logits.copy_from_slice(&r[OUT_CLS..OUT_CLS + NUM_LOGITS]);
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let p_bg = (logits[BACKGROUND] - mx).exp() / z;
            let mut best = 0;
            for k in 1..ActorClass::COUNT {
                if logits[k] > logits[best] {
                    best = k;
                }
            }
            let (s, co) = (r[OUT_SIN], r[OUT_COS]);
            let nrm = s.hypot(co);
            let yaw = if nrm > 0.0 { (s / nrm).atan2(co / nrm) } else { 0.0 };
            Detection {
                center: [c[0], c[1], c[2]],
                size: [r[OUT_LOG_SIZE].exp(), r[OUT_LOG_SIZE + 1].exp(), r[OUT_LOG_SIZE + 2].exp()],
                yaw,
                velocity: [r[OUT_VEL] * velocity_scale, r[OUT_VEL + 1] * velocity_scale, r[OUT_VEL + 2] * velocity_scale],
                class_logits: logits,
                score: 1.0 - p_bg,
                class: ActorClass::from_index(best).unwrap(),
            }
        })
        .collect()
}

/// Ground-truth boxes the detector is expected to find: centers inside the
/// BEV extent.
pub fn visible_truth(boxes: &[ActorBox], cfg: &DetectorConfig) -> Vec<ActorBox> {
    let e = cfg.camera.extent;
    boxes.iter().filter(|b| b.center[0].abs() < e && b.center[1].abs() < e).cloned().collect()
}
