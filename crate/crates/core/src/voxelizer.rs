//! Hard voxelization with a nearest-voxel heuristic backward pass.
//!
//! The forward bucketing is piecewise constant in point coordinates, so its
//! true derivative is zero almost everywhere. The backward pass instead hands
//! each point `α` times the slot-averaged gradient of its nearest occupied
//! voxel.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::geometry::Vec3;
use numkernel::{CustomBackward, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoxelGridConfig {
    pub min: Vec3,
    pub max: Vec3,
    pub voxel_size: Vec3,
    /// Maximum points stored per voxel.
    pub k_v: usize,
    /// Per-point feature width; the first three columns are x, y, z.
    pub d_p: usize,
}

impl Default for VoxelGridConfig {
    fn default() -> Self {
        Self { min: [-40.0, -40.0, -2.0], max: [40.0, 40.0, 1.0], voxel_size: [2.5, 2.5, 0.75], k_v: 16, d_p: 4 }
    }
}

impl VoxelGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_v == 0 {
            return Err(CoreError::Config("voxel grid: k_v must be at least 1".into()));
        }
        if self.d_p < 3 {
            return Err(CoreError::Config("voxel grid: d_p must be at least 3".into()));
        }
        for a in 0..3 {
            let span = self.max[a] - self.min[a];
            let n = span / self.voxel_size[a];
            if !(self.voxel_size[a] > 0.0 && span > 0.0) || (n - n.round()).abs() > 1e-9 {
                return Err(CoreError::Config(format!("voxel grid: axis {a} extent is not a whole number of voxels")));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        std::array::from_fn(|a| ((self.max[a] - self.min[a]) / self.voxel_size[a]).round() as usize)
    }

    /// Voxel index of a point, or `None` outside the extent (upper bound
    /// exclusive).
    pub fn locate(&self, p: &[f64]) -> Option<[usize; 3]> {
        let dims = self.dims();
        let mut out = [0; 3];
        for a in 0..3 {
            if !(p[a] >= self.min[a] && p[a] < self.max[a]) {
                return None;
            }
            out[a] = (((p[a] - self.min[a]) / self.voxel_size[a]).floor() as usize).min(dims[a] - 1);
        }
        Some(out)
    }

    pub fn center(&self, c: [usize; 3]) -> Vec3 {
        std::array::from_fn(|a| self.min[a] + (c[a] as f64 + 0.5) * self.voxel_size[a])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assignment {
    Stored { voxel: usize, slot: usize },
    /// In extent but the voxel was already full.
    Dropped { voxel: usize },
    OutOfExtent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelTensor {
    /// Row-major `m_v × k_v × d_p`, zero beyond each voxel's occupancy.
    pub features: Vec<f64>,
    pub coords: Vec<[usize; 3]>,
    pub occupancy: Vec<usize>,
    pub assignment: Vec<Assignment>,
    pub k_v: usize,
    pub d_p: usize,
}

impl VoxelTensor {
    pub fn m_v(&self) -> usize {
        self.coords.len()
    }

    pub fn stored(&self) -> usize {
        self.occupancy.iter().sum()
    }

    pub fn dropped(&self) -> usize {
        self.assignment.iter().filter(|a| matches!(a, Assignment::Dropped { .. })).count()
    }

    pub fn out_of_extent(&self) -> usize {
        self.assignment.iter().filter(|a| matches!(a, Assignment::OutOfExtent)).count()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.m_v(), self.k_v, self.d_p]
    }
}

/// Buckets `points` (`n × d_p`, row-major). Voxels are numbered in order of
/// first appearance; slots fill in input order.
pub fn voxelize(points: &[f64], cfg: &VoxelGridConfig) -> Result<VoxelTensor> {
    cfg.validate()?;
    let d = cfg.d_p;
    if points.len() % d != 0 {
        return Err(invalid("voxelize", format!("{} values is not a multiple of d_p = {d}", points.len())));
    }
    let dims = cfg.dims();
    let mut lookup: HashMap<usize, usize> = HashMap::new();
    let mut vt = VoxelTensor {
        features: Vec::new(),
        coords: Vec::new(),
        occupancy: Vec::new(),
        assignment: Vec::with_capacity(points.len() / d),
        k_v: cfg.k_v,
        d_p: d,
    };
    for p in points.chunks_exact(d) {
        let Some(c) = cfg.locate(p) else {
            vt.assignment.push(Assignment::OutOfExtent);
            continue;
        };
        let key = (c[0] * dims[1] + c[1]) * dims[2] + c[2];
        let voxel = *lookup.entry(key).or_insert_with(|| {
            vt.coords.push(c);
            vt.occupancy.push(0);
            vt.features.extend(std::iter::repeat(0.0).take(cfg.k_v * d));
            vt.coords.len() - 1
        });
        let slot = vt.occupancy[voxel];
        if slot < cfg.k_v {
            let base = (voxel * cfg.k_v + slot) * d;
            vt.features[base..base + d].copy_from_slice(p);
            vt.occupancy[voxel] += 1;
            vt.assignment.push(Assignment::Stored { voxel, slot });
        } else {
            vt.assignment.push(Assignment::Dropped { voxel });
        }
    }
    Ok(vt)
}

/// Index of the occupied voxel whose center is nearest to each point.
/// In-extent points resolve to their own voxel, which is nearest on any
/// axis-aligned grid.
pub fn nearest_voxels(points: &[f64], vt: &VoxelTensor, cfg: &VoxelGridConfig) -> Vec<Option<usize>> {
    let centers: Vec<Vec3> = vt.coords.iter().map(|&c| cfg.center(c)).collect();
    points
        .chunks_exact(vt.d_p)
        .zip(&vt.assignment)
        .map(|(p, a)| match *a {
            Assignment::Stored { voxel, .. } | Assignment::Dropped { voxel } => Some(voxel),
            Assignment::OutOfExtent => {
                let mut best: Option<(f64, usize)> = None;
                for (m, c) in centers.iter().enumerate() {
                    let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
                    if best.is_none_or(|(b, _)| d2 < b) {
                        best = Some((d2, m));
                    }
                }
                best.map(|(_, m)| m)
            }
        })
        .collect()
}

fn heuristic_grad(grad_v: &[f64], nn: &[Option<usize>], k_v: usize, d_p: usize, alpha: f64) -> Vec<f64> {
    let mut out = vec![0.0; nn.len() * d_p];
    for (i, m) in nn.iter().enumerate() {
        let Some(m) = *m else { continue };
        let g = &mut out[i * d_p..(i + 1) * d_p];
        for s in 0..k_v {
            let base = (m * k_v + s) * d_p;
            for (o, x) in g.iter_mut().zip(&grad_v[base..base + d_p]) {
                *o += x;
            }
        }
        g.iter_mut().for_each(|x| *x *= alpha / k_v as f64);
    }
    out
}

/// Point gradients from voxel gradients: `α · mean_slots(grad_V[NN(i)])`,
/// for every input point including dropped and out-of-extent ones.
pub fn voxel_backward(
    grad_v: &[f64],
    vt: &VoxelTensor,
    points: &[f64],
    cfg: &VoxelGridConfig,
    alpha: f64,
) -> Result<Vec<f64>> {
    if grad_v.len() != vt.features.len() {
        return Err(CoreError::Shape {
            what: "voxel gradient",
            expected: vt.shape().to_vec(),
            got: vec![grad_v.len()],
        });
    }
    if vt.m_v() == 0 {
        tracing::warn!("voxel_backward: no occupied voxels, point gradients are zero");
        return Ok(vec![0.0; points.len()]);
    }
    let nn = nearest_voxels(points, vt, cfg);
    Ok(heuristic_grad(grad_v, &nn, vt.k_v, vt.d_p, alpha))
}

struct NearestVoxelRule {
    nn: Vec<Option<usize>>,
    k_v: usize,
    d_p: usize,
    alpha: f64,
}

impl CustomBackward for NearestVoxelRule {
    fn backward(&self, grad_out: &[f64], _inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Vec<f64>>> {
        vec![Some(heuristic_grad(grad_out, &self.nn, self.k_v, self.d_p, self.alpha))]
    }
}

/// Records voxelization of `points` (`[n, d_p]`) on the tape; the output is
/// `[m_v, k_v, d_p]` and backpropagates with the nearest-voxel rule.
pub fn voxelize_on_tape(
    tape: &mut Tape,
    points: Var,
    cfg: &VoxelGridConfig,
    alpha: f64,
) -> Result<(Var, VoxelTensor)> {
    let p = tape.value(points);
    if p.ndim() != 2 || p.shape()[1] != cfg.d_p {
        return Err(CoreError::Shape { what: "voxelize points", expected: vec![0, cfg.d_p], got: p.shape().to_vec() });
    }
    let vt = voxelize(p.data(), cfg)?;
    let nn = if vt.m_v() == 0 { vec![None; vt.assignment.len()] } else { nearest_voxels(p.data(), &vt, cfg) };
    let out = Tensor::new(&[vt.m_v(), vt.k_v, vt.d_p], vt.features.clone())?;
    let rule = NearestVoxelRule { nn, k_v: vt.k_v, d_p: vt.d_p, alpha };
    let v = tape.custom(&[points], out, Box::new(rule));
    Ok((v, vt))
}
