use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ground_truth_boxes, mix_seed, SceneSequence};
use crate::boxes::ActorBox;
use crate::error::Result;
use crate::geometry::{self, Vec3};
use crate::rangeimage::BeamPattern;

/// Sensor-frame returns with the beam that produced each one.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Flat beam index `u * w + v`.
    pub beams: Vec<u32>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Subset of returns from enabled beams.
    pub fn filter(&self, pattern: &BeamPattern) -> PointCloud {
        let mut out = PointCloud::default();
        for (p, &b) in self.points.iter().zip(&self.beams) {
            if pattern.bits[b as usize] {
                out.points.push(*p);
                out.beams.push(b);
            }
        }
        out
    }
}

/// Entry distance of a ray from the sensor origin into a box, if it hits in
/// front of the sensor. Rays starting inside the box report no hit.
pub fn intersect_box(dir: Vec3, b: &ActorBox) -> Option<f64> {
    let o = b.to_local([0.0; 3]);
    let (s, c) = b.yaw.sin_cos();
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let mut t_min = f64::NEG_INFINITY;
    let mut t_max = f64::INFINITY;
    for i in 0..3 {
        let half = 0.5 * b.size[i];
        if d[i].abs() < 1e-15 {
            if o[i].abs() > half {
                return None;
            }
            continue;
        }
        let t1 = (-half - o[i]) / d[i];
        let t2 = (half - o[i]) / d[i];
        t_min = t_min.max(t1.min(t2));
        t_max = t_max.min(t1.max(t2));
    }
    (t_max >= t_min && t_min > 0.0).then_some(t_min)
}

/// Casts the enabled beams of frame `k` against the actors and the ground.
/// Range noise is drawn per (sequence, frame, beam), so a masked scan is an
/// exact subset of the full scan.
pub fn raycast_scan(seq: &SceneSequence, k: usize, pattern: &BeamPattern) -> Result<PointCloud> {
    let grid = &seq.grid;
    pattern.check(grid)?;
    let frame = &seq.frames[k];
    let boxes = ground_truth_boxes(frame);
    let cfg = &seq.config;
    let mut cloud = PointCloud::default();
    for u in 0..grid.h {
        for v in 0..grid.w {
            if !pattern.get(u, v) {
                continue;
            }
            let dir = grid.ray_direction(u, v);
            let mut best = if dir[2] < 0.0 { -cfg.sensor_height / dir[2] } else { f64::INFINITY };
            for b in &boxes {
                if let Some(t) = intersect_box(dir, b) {
                    best = best.min(t);
                }
            }
            if !(best <= cfg.max_range) {
                continue;
            }
            let beam = (u * grid.w + v) as u32;
            let r = if cfg.range_noise > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seq.seed, k as u64, beam as u64]));
                let n: f64 = StandardNormal.sample(&mut rng);
                (best + cfg.range_noise * n).max(1e-3)
            } else {
                best
            };
            cloud.points.push(geometry::scale(dir, r));
            cloud.beams.push(beam);
        }
    }
    Ok(cloud)
}
