//! Spherical projection into the sensor's elevation × azimuth beam grid.

use serde::{Deserialize, Serialize};

use crate::boxes::ActorBox;
use crate::error::{invalid, CoreError, Result};
use crate::geometry::Vec3;

/// Angular addressing of the sensor: `h` elevation rows by `w` azimuth
/// columns, tiled into `h_b × w_b` blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamGrid {
    pub h: usize,
    pub w: usize,
    pub phi_min: f64,
    pub phi_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub h_b: usize,
    pub w_b: usize,
}

impl Default for BeamGrid {
    /// 32 × 256 beams over [−25°, 15°] elevation and full azimuth, 8 × 32
    /// blocks of 4 × 8 beams.
    fn default() -> Self {
        Self {
            h: 32,
            w: 256,
            phi_min: (-25f64).to_radians(),
            phi_max: 15f64.to_radians(),
            theta_min: -std::f64::consts::PI,
            theta_max: std::f64::consts::PI,
            h_b: 8,
            w_b: 32,
        }
    }
}

impl BeamGrid {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(format!("beam grid: {m}")));
        if self.h == 0 || self.w == 0 || self.h_b == 0 || self.w_b == 0 {
            return bad("dimensions must be positive");
        }
        if !(self.phi_min < self.phi_max) || !(self.theta_min < self.theta_max) {
            return bad("angle bounds must satisfy min < max");
        }
        if self.h % self.h_b != 0 || self.w % self.w_b != 0 {
            return bad("block grid must tile the beam grid exactly");
        }
        Ok(())
    }

    pub fn d_phi(&self) -> f64 {
        (self.phi_max - self.phi_min) / self.h as f64
    }

    pub fn d_theta(&self) -> f64 {
        (self.theta_max - self.theta_min) / self.w as f64
    }

    pub fn beams(&self) -> usize {
        self.h * self.w
    }

    pub fn blocks(&self) -> usize {
        self.h_b * self.w_b
    }

    /// Beams per block as (rows, columns).
    pub fn tile(&self) -> (usize, usize) {
        (self.h / self.h_b, self.w / self.w_b)
    }

    pub fn block_of(&self, u: usize, v: usize) -> (usize, usize) {
        let (th, tw) = self.tile();
        (u / th, v / tw)
    }

    /// Flat block index of a beam.
    pub fn block_index(&self, u: usize, v: usize) -> usize {
        let (i, j) = self.block_of(u, v);
        i * self.w_b + j
    }

    /// Elevation and azimuth of a bin's center.
    pub fn bin_center(&self, u: usize, v: usize) -> (f64, f64) {
        (
            self.phi_min + (u as f64 + 0.5) * self.d_phi(),
            self.theta_min + (v as f64 + 0.5) * self.d_theta(),
        )
    }

    /// Unit direction of a bin-center ray.
    pub fn ray_direction(&self, u: usize, v: usize) -> Vec3 {
        let (phi, theta) = self.bin_center(u, v);
        [phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin()]
    }

    /// Row/column of an angle pair, or `None` outside the field of view.
    /// Angles equal to the upper bounds fall into the last bin.
    pub fn bin_angles(&self, phi: f64, theta: f64) -> Option<(usize, usize)> {
        if !(phi >= self.phi_min && phi <= self.phi_max && theta >= self.theta_min && theta <= self.theta_max) {
            return None;
        }
        let u = (((phi - self.phi_min) / self.d_phi()).floor() as usize).min(self.h - 1);
        let v = (((theta - self.theta_min) / self.d_theta()).floor() as usize).min(self.w - 1);
        Some((u, v))
    }

    /// Bin of a Cartesian point, or `None` for the origin or out-of-fov.
    pub fn bin_point(&self, p: Vec3) -> Option<(usize, usize)> {
        let (_, phi, theta) = project_point(p).ok()?;
        self.bin_angles(phi, theta)
    }
}

/// `(r, φ, θ)` with `φ = asin(z/r)` and `θ = atan2(y, x)`.
pub fn project_point(p: Vec3) -> Result<(f64, f64, f64)> {
    if !p.iter().all(|c| c.is_finite()) {
        return Err(invalid("project_point", format!("non-finite point {p:?}")));
    }
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if r == 0.0 {
        return Err(invalid("project_point", "point at the sensor origin has no direction"));
    }
    Ok((r, (p[2] / r).clamp(-1.0, 1.0).asin(), p[1].atan2(p[0])))
}

/// Per-pixel minimum range with contributing point indices.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    pub grid: BeamGrid,
    /// Row-major `h × w`; meaningful only where `valid` is set.
    pub range: Vec<f64>,
    pub valid: Vec<bool>,
    pub point_index: Vec<Vec<usize>>,
    /// Inputs that fell outside the field of view (or sat at the origin).
    pub rejected: Vec<usize>,
}

impl RangeImage {
    pub fn at(&self, u: usize, v: usize) -> Option<f64> {
        let k = u * self.grid.w + v;
        self.valid[k].then_some(self.range[k])
    }

    pub fn filled(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

pub fn build_range_image(points: &[Vec3], grid: &BeamGrid) -> RangeImage {
    let n = grid.beams();
    let mut img = RangeImage {
        grid: grid.clone(),
        range: vec![0.0; n],
        valid: vec![false; n],
        point_index: vec![Vec::new(); n],
        rejected: Vec::new(),
    };
    for (i, &p) in points.iter().enumerate() {
        let Ok((r, phi, theta)) = project_point(p) else {
            img.rejected.push(i);
            continue;
        };
        let Some((u, v)) = grid.bin_angles(phi, theta) else {
            img.rejected.push(i);
            continue;
        };
        let k = u * grid.w + v;
        if !img.valid[k] || r < img.range[k] {
            img.range[k] = r;
            img.valid[k] = true;
        }
        img.point_index[k].push(i);
    }
    img
}

/// Binary beam-level enable map, row-major `h × w`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamPattern {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl BeamPattern {
    pub fn full(grid: &BeamGrid) -> Self {
        Self { h: grid.h, w: grid.w, bits: vec![true; grid.beams()] }
    }

    pub fn empty(grid: &BeamGrid) -> Self {
        Self { h: grid.h, w: grid.w, bits: vec![false; grid.beams()] }
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[u * self.w + v]
    }

    pub fn enabled(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of disabled beams.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.enabled() as f64 / self.bits.len() as f64
    }

    pub fn check(&self, grid: &BeamGrid) -> Result<()> {
        if self.h != grid.h || self.w != grid.w || self.bits.len() != grid.beams() {
            return Err(CoreError::Shape {
                what: "beam pattern",
                expected: vec![grid.h, grid.w],
                got: vec![self.h, self.w],
            });
        }
        Ok(())
    }
}

/// Indices of points whose bin is enabled, plus the pattern's sparsity.
pub fn apply_scan_pattern(pattern: &BeamPattern, points: &[Vec3], grid: &BeamGrid) -> Result<(Vec<usize>, f64)> {
    pattern.check(grid)?;
    let kept = points
        .iter()
        .enumerate()
        .filter(|(_, &p)| grid.bin_point(p).is_some_and(|(u, v)| pattern.get(u, v)))
        .map(|(i, _)| i)
        .collect();
    Ok((kept, pattern.sparsity()))
}

/// Block-level binary target, row-major `h_b × w_b`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceMask {
    pub h_b: usize,
    pub w_b: usize,
    pub values: Vec<bool>,
}

impl GuidanceMask {
    pub fn positives(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }
}

/// Marks blocks hit by any box corner or lattice sample, then grows the set
/// by `dilation` blocks (Chebyshev distance; azimuth wraps around).
pub fn rasterize_guidance_mask(boxes: &[ActorBox], grid: &BeamGrid, lattice: usize, dilation: usize) -> GuidanceMask {
    let mut values = vec![false; grid.blocks()];
    for b in boxes {
        let samples = b.corners().into_iter().chain(b.lattice(lattice));
        for p in samples {
            if let Some((u, v)) = grid.bin_point(p) {
                values[grid.block_index(u, v)] = true;
            }
        }
    }
    let mut mask = GuidanceMask { h_b: grid.h_b, w_b: grid.w_b, values };
    if dilation > 0 {
        mask = dilate(&mask, dilation);
    }
    mask
}

fn dilate(m: &GuidanceMask, radius: usize) -> GuidanceMask {
    let r = radius as isize;
    let mut out = m.values.clone();
    for i in 0..m.h_b as isize {
        for j in 0..m.w_b as isize {
            if !m.values[(i * m.w_b as isize + j) as usize] {
                continue;
            }
            for di in -r..=r {
                let ii = i + di;
                if ii < 0 || ii >= m.h_b as isize {
                    continue;
                }
                for dj in -r..=r {
                    let jj = (j + dj).rem_euclid(m.w_b as isize);
                    out[(ii * m.w_b as isize + jj) as usize] = true;
                }
            }
        }
    }
    GuidanceMask { h_b: m.h_b, w_b: m.w_b, values: out }
}
