use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mix_seed;
use crate::boxes::{ActorBox, ActorClass};
use numkernel::Tensor;

/// Per-class occupancy plus two velocity channels.
pub const CAMERA_CHANNELS: usize = ActorClass::COUNT + 2;

/// Coarse bird's-eye camera surrogate: Gaussian blobs at jittered actor
/// positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    /// Half-width of the square BEV extent, meters.
    pub extent: f64,
    pub cells: usize,
    /// Std-dev of the per-actor position error, meters.
    pub position_jitter: f64,
    /// Blob radius (Gaussian std-dev), meters.
    pub blob_sigma: f64,
    /// Std-dev of velocity error, m/s.
    pub velocity_noise: f64,
    /// Velocity channels hold `v / velocity_scale`.
    pub velocity_scale: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            extent: 40.0,
            cells: 32,
            position_jitter: 2.0,
            blob_sigma: 1.5,
            velocity_noise: 0.5,
            velocity_scale: 10.0,
        }
    }
}

/// `[CAMERA_CHANNELS, cells, cells]`, row index along +x, column along +y.
/// Noise is a pure function of `(seed, frame, actor_id)`.
pub fn camera_bev(boxes: &[ActorBox], cfg: &CameraConfig, seed: u64, frame: usize) -> Tensor {
    let n = cfg.cells;
    let cell = 2.0 * cfg.extent / n as f64;
    let mut out = Tensor::zeros(&[CAMERA_CHANNELS, n, n]);
    let reach = 3.0 * cfg.blob_sigma;
    let data = out.data_mut();
    for b in boxes {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xCA, frame as u64, b.actor_id as u64]));
        let mut noise = || -> f64 { StandardNormal.sample(&mut rng) };
        let cx = b.center[0] + cfg.position_jitter * noise();
        let cy = b.center[1] + cfg.position_jitter * noise();
        let vx = (b.velocity[0] + cfg.velocity_noise * noise()) / cfg.velocity_scale;
        let vy = (b.velocity[1] + cfg.velocity_noise * noise()) / cfg.velocity_scale;
        if cx.abs() > cfg.extent + reach || cy.abs() > cfg.extent + reach {
            continue;
        }
        let lo = |c: f64| (((c - reach + cfg.extent) / cell).floor().max(0.0)) as usize;
        let hi = |c: f64| ((((c + reach + cfg.extent) / cell).ceil()).max(0.0) as usize).min(n);
        for i in lo(cx)..hi(cx) {
            let x = -cfg.extent + (i as f64 + 0.5) * cell;
            for j in lo(cy)..hi(cy) {
                let y = -cfg.extent + (j as f64 + 0.5) * cell;
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                let wgt = (-d2 / (2.0 * cfg.blob_sigma * cfg.blob_sigma)).exp();
                let k = i * n + j;
                data[b.class.index() * n * n + k] += wgt;
                data[ActorClass::COUNT * n * n + k] += wgt * vx;
                data[(ActorClass::COUNT + 1) * n * n + k] += wgt * vy;
            }
        }
    }
    out
}
