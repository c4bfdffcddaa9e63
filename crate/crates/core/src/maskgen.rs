//! Scan-policy generation: predicted queries are scattered onto the block
//! grid, encoded into per-block (full, sparse) logits and sampled with the
//! Gumbel-Softmax straight-through estimator.

use numkernel::{ParamStore, Tape, Tensor, Var};
use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::geometry::Vec3;
use crate::nn::{Conv, Mlp};
use crate::rangeimage::{project_point, BeamGrid, BeamPattern};

pub const FULL: usize = 0;
pub const SPARSE: usize = 1;

/// Default beam rates for sparse blocks.
pub const DEFAULT_LEVELS: [f64; 4] = [0.0625, 0.125, 0.25, 0.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskGenConfig {
    pub d_model: usize,
    pub channels: usize,
    pub depthwise_blocks: usize,
    pub standard_blocks: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub levels: Vec<f64>,
    /// Initial bias of the full-scan logit relative to the sparse one.
    pub init_full_bias: f64,
}

impl Default for MaskGenConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            channels: 16,
            depthwise_blocks: 2,
            standard_blocks: 2,
            tau_start: 1.0,
            tau_end: 0.3,
            levels: DEFAULT_LEVELS.to_vec(),
            init_full_bias: -2.0,
        }
    }
}

impl MaskGenConfig {
    pub fn validate(&self) -> Result<()> {
        check_levels(&self.levels)?;
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(CoreError::Config("maskgen: temperatures must be positive".into()));
        }
        Ok(())
    }

    /// Linear anneal from `tau_start` at step 0 to `tau_end` at the last step.
    pub fn tau_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.tau_end;
        }
        let f = (step as f64 / (total - 1) as f64).min(1.0);
        self.tau_start + f * (self.tau_end - self.tau_start)
    }
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(invalid("sparsity levels", "level set is empty"));
    }
    if levels.iter().any(|&l| !(l > 0.0 && l <= 1.0)) {
        return Err(invalid("sparsity levels", format!("levels must lie in (0, 1], got {levels:?}")));
    }
    Ok(())
}

/// Per-block outcome of a draw; blocks row-major `h_b × w_b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanMask {
    pub h_b: usize,
    pub w_b: usize,
    /// `true` means scan the block fully.
    pub hard: Vec<bool>,
    /// (full, sparse) probabilities.
    pub soft: Vec<[f64; 2]>,
    pub tau: f64,
}

impl ScanMask {
    pub fn blocks(&self) -> usize {
        self.hard.len()
    }

    pub fn full_fraction(&self) -> f64 {
        self.hard.iter().filter(|&&h| h).count() as f64 / self.hard.len().max(1) as f64
    }

    /// Every block fully scanned.
    pub fn all_full(h_b: usize, w_b: usize) -> Self {
        Self { h_b, w_b, hard: vec![true; h_b * w_b], soft: vec![[1.0, 0.0]; h_b * w_b], tau: 1.0 }
    }

    /// Every block sparse with the given full-scan probability.
    pub fn all_sparse(h_b: usize, w_b: usize, p_full: f64) -> Self {
        Self { h_b, w_b, hard: vec![false; h_b * w_b], soft: vec![[p_full, 1.0 - p_full]; h_b * w_b], tau: 1.0 }
    }
}

/// `g = −ln(−ln U)` for `U` uniform on the open interval.
pub fn gumbel_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Value-only Gumbel-Softmax over `[blocks, 2]` logits; `noise` of `None`
/// means zero noise.
pub fn gumbel_softmax_values(z: &[f64], h_b: usize, w_b: usize, tau: f64, noise: Option<&[f64]>) -> Result<ScanMask> {
    if !(tau > 0.0) {
        return Err(invalid("gumbel_softmax", format!("temperature must be positive, got {tau}")));
    }
    if z.len() != 2 * h_b * w_b || noise.is_some_and(|g| g.len() != z.len()) {
        return Err(CoreError::Shape { what: "gumbel logits", expected: vec![h_b * w_b, 2], got: vec![z.len()] });
    }
    let mut hard = Vec::with_capacity(h_b * w_b);
    let mut soft = Vec::with_capacity(h_b * w_b);
    for (b, pair) in z.chunks(2).enumerate() {
        let g = |k: usize| noise.map_or(0.0, |n| n[2 * b + k]);
        let a0 = (pair[0] + g(0)) / tau;
        let a1 = (pair[1] + g(1)) / tau;
        let m = a0.max(a1);
        let (e0, e1) = ((a0 - m).exp(), (a1 - m).exp());
        let s = [e0 / (e0 + e1), e1 / (e0 + e1)];
        hard.push(s[FULL] >= s[SPARSE]);
        soft.push(s);
    }
    Ok(ScanMask { h_b, w_b, hard, soft, tau })
}

/// Differentiable draw.
#[derive(Clone, Debug)]
pub struct MaskSample {
    pub mask: ScanMask,
    /// `[blocks, 2]` soft probabilities.
    pub soft: Var,
    /// `[blocks, 2]` log-probabilities of `soft`.
    pub log_soft: Var,
    /// Straight-through value: equals the hard one-hot, differentiates as
    /// `soft`.
    pub st: Var,
}

/// Gumbel-Softmax with the straight-through estimator on the tape.
pub fn gumbel_softmax(tape: &mut Tape, z: Var, h_b: usize, w_b: usize, tau: f64, noise: Option<&[f64]>) -> Result<MaskSample> {
    let zv = tape.value(z).clone();
    if zv.shape() != [h_b * w_b, 2] {
        return Err(CoreError::Shape { what: "gumbel logits", expected: vec![h_b * w_b, 2], got: zv.shape().to_vec() });
    }
    let mask = gumbel_softmax_values(zv.data(), h_b, w_b, tau, noise)?;
    let perturbed = match noise {
        Some(g) => {
            let g = tape.constant(Tensor::new(&[h_b * w_b, 2], g.to_vec())?);
            tape.add(z, g)?
        }
        None => z,
    };
    let scaled = tape.scale(perturbed, 1.0 / tau);
    let soft = tape.softmax(scaled, 1)?;
    let log_soft = tape.log_softmax(scaled, 1)?;
    let one_hot: Vec<f64> = mask.hard.iter().flat_map(|&h| if h { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
    let hard = tape.constant(Tensor::new(&[h_b * w_b, 2], one_hot)?);
    let frozen = tape.detach(soft);
    let diff = tape.sub(soft, frozen)?;
    let st = tape.add(diff, hard)?;
    Ok(MaskSample { mask, soft, log_soft, st })
}

/// Nearest level to `p`; exact midpoints go to the higher level.
pub fn quantize_rate(p: f64, levels: &[f64]) -> Result<f64> {
    check_levels(levels)?;
    let mut best = levels[0];
    for &l in &levels[1..] {
        let (db, dl) = ((p - best).abs(), (p - l).abs());
        if dl < db || (dl == db && l > best) {
            best = l;
        }
    }
    Ok(best)
}

/// Beam rate of every block: 1 for full blocks, the quantized full-scan
/// probability otherwise.
pub fn block_rates(mask: &ScanMask, levels: &[f64]) -> Result<Vec<f64>> {
    mask.hard
        .iter()
        .zip(&mask.soft)
        .map(|(&h, s)| if h { Ok(1.0) } else { quantize_rate(s[FULL], levels) })
        .collect()
}

fn check_mask(mask: &ScanMask, grid: &BeamGrid) -> Result<()> {
    if mask.h_b != grid.h_b || mask.w_b != grid.w_b || mask.hard.len() != grid.blocks() {
        return Err(CoreError::Shape {
            what: "scan mask",
            expected: vec![grid.h_b, grid.w_b],
            got: vec![mask.h_b, mask.w_b],
        });
    }
    Ok(())
}

/// Expands a block mask into a beam pattern, sampling each beam of a sparse
/// block independently at its quantized rate.
pub fn inference_pattern<R: Rng + ?Sized>(mask: &ScanMask, levels: &[f64], grid: &BeamGrid, rng: &mut R) -> Result<BeamPattern> {
    check_mask(mask, grid)?;
    let rates = block_rates(mask, levels)?;
    let mut pattern = BeamPattern::empty(grid);
    for u in 0..grid.h {
        for v in 0..grid.w {
            let r = rates[grid.block_index(u, v)];
            pattern.bits[u * grid.w + v] = r >= 1.0 || rng.gen::<f64>() < r;
        }
    }
    Ok(pattern)
}

/// Sparsity expected before sampling.
pub fn expected_sparsity(mask: &ScanMask, levels: &[f64], grid: &BeamGrid) -> Result<f64> {
    check_mask(mask, grid)?;
    let rates = block_rates(mask, levels)?;
    let (th, tw) = grid.tile();
    let enabled: f64 = rates.iter().map(|r| r * (th * tw) as f64).sum();
    Ok(1.0 - enabled / grid.beams() as f64)
}

/// Uniform-random beam pattern at a target sparsity.
pub fn random_pattern(grid: &BeamGrid, sparsity: f64, seed: u64) -> BeamPattern {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = BeamPattern::empty(grid);
    for b in p.bits.iter_mut() {
        *b = rng.gen::<f64>() >= sparsity;
    }
    p
}

/// Block of a query center, with elevation clamped into the field of view.
pub fn center_block(c: Vec3, grid: &BeamGrid) -> Option<usize> {
    let (_, phi, theta) = project_point(c).ok()?;
    let (u, v) = grid.bin_angles(phi.clamp(grid.phi_min, grid.phi_max), theta)?;
    Some(grid.block_index(u, v))
}

#[derive(Clone, Debug)]
struct Layout {
    input: Conv,
    depthwise: Vec<(Conv, Conv)>,
    standard: Vec<(Conv, Conv)>,
    output: Conv,
    head: Mlp,
}

pub struct MaskGenerator {
    pub cfg: MaskGenConfig,
    pub grid: BeamGrid,
    pub params: ParamStore,
    layout: Layout,
}

impl Clone for MaskGenerator {
    fn clone(&self) -> Self {
        Self { cfg: self.cfg.clone(), grid: self.grid.clone(), params: self.params.clone(), layout: self.layout.clone() }
    }
}

impl MaskGenerator {
    pub fn new<R: Rng + ?Sized>(cfg: MaskGenConfig, grid: BeamGrid, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        grid.validate()?;
        let mut s = ParamStore::new();
        let c = cfg.channels;
        let input = Conv::new(&mut s, "mask.input", cfg.d_model + 1, c, 1, true, rng);
        let depthwise = (0..cfg.depthwise_blocks)
            .map(|i| {
                (
                    Conv::depthwise(&mut s, &format!("mask.dw{i}.conv1"), c, 3, rng),
                    Conv::depthwise(&mut s, &format!("mask.dw{i}.conv2"), c, 3, rng),
                )
            })
            .collect();
        let standard = (0..cfg.standard_blocks)
            .map(|i| {
                (
                    Conv::new(&mut s, &format!("mask.res{i}.conv1"), c, c, 3, true, rng),
                    Conv::new(&mut s, &format!("mask.res{i}.conv2"), c, c, 3, true, rng),
                )
            })
            .collect();
        let output = Conv::new(&mut s, "mask.output", c, c, 1, true, rng);
        let head = Mlp::new(&mut s, "mask.head", c, c, 2, rng);
        if let Some(b) = head.l2.b {
            s.set(b, Tensor::from_vec(vec![cfg.init_full_bias, 0.0]));
        }
        Ok(Self { cfg, grid, params: s, layout: Layout { input, depthwise, standard, output, head } })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, |_| trainable)
    }

    /// Scatters the layer-summed query features, weighted by `weights`, into
    /// the block grid at each center's block, plus one channel holding the
    /// summed weights: `[d_model + 1, h_b, w_b]`.
    pub fn scatter_queries(&self, tape: &mut Tape, stack: &[Var], centers: &[Vec3], weights: &[f64]) -> Result<Var> {
        let g = &self.grid;
        let n = centers.len();
        if stack.is_empty() || weights.len() != n {
            return Err(invalid("scatter_queries", "need a non-empty stack and one weight per center"));
        }
        let mut summed = stack[0];
        for &q in &stack[1..] {
            summed = tape.add(summed, q)?;
        }
        let shape = tape.shape(summed).to_vec();
        if shape != [n, self.cfg.d_model] {
            return Err(CoreError::Shape { what: "scatter queries", expected: vec![n, self.cfg.d_model], got: shape });
        }
        let w = tape.constant(Tensor::new(&[n, 1], weights.to_vec())?);
        let weighted = tape.mul(summed, w)?;
        let feats = tape.concat(&[weighted, w], 1)?;
        let targets: Vec<Option<usize>> = centers.iter().map(|&c| center_block(c, g)).collect();
        let cells = tape.scatter_add_rows(feats, &targets, g.blocks())?;
        let cells = tape.transpose(cells)?;
        Ok(tape.reshape(cells, &[self.cfg.d_model + 1, g.h_b, g.w_b])?)
    }

    /// Encoder and head: `[blocks, 2]` logits in (full, sparse) order.
    pub fn encode(&self, tape: &mut Tape, p: &[Var], grid_feats: Var) -> Result<Var> {
        let l = &self.layout;
        let g = &self.grid;
        let shape = tape.shape(grid_feats).to_vec();
        if shape != [self.cfg.d_model + 1, g.h_b, g.w_b] {
            return Err(CoreError::Shape { what: "mask encoder input", expected: vec![self.cfg.d_model + 1, g.h_b, g.w_b], got: shape });
        }
        let x = l.input.forward(tape, p, grid_feats)?;
        let mut x = tape.relu(x);
        for (c1, c2) in l.depthwise.iter().chain(&l.standard) {
            let h = c1.forward(tape, p, x)?;
            let h = tape.relu(h);
            let h = c2.forward(tape, p, h)?;
            let s = tape.add(x, h)?;
            x = tape.relu(s);
        }
        let x = l.output.forward(tape, p, x)?;
        let x = tape.adaptive_avg_pool2d(x, g.h_b, g.w_b)?;
        let x = tape.reshape(x, &[self.cfg.channels, g.blocks()])?;
        let x = tape.transpose(x)?;
        l.head.forward(tape, p, x)
    }

    /// Logits straight from a predicted stack.
    pub fn logits(&self, tape: &mut Tape, p: &[Var], stack: &[Var], centers: &[Vec3], weights: &[f64]) -> Result<Var> {
        let feats = self.scatter_queries(tape, stack, centers, weights)?;
        self.encode(tape, p, feats)
    }
}

/// Adds `bias` to every block's full-scan logit.
pub fn bias_logits(z: &[f64], bias: f64) -> Vec<f64> {
    z.chunks(2).flat_map(|c| [c[0] + bias, c[1]]).collect()
}
