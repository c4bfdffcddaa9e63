//! Oriented 3D boxes with class labels.

use serde::{Deserialize, Serialize};

use crate::geometry::{self, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl ActorClass {
    pub const ALL: [ActorClass; 3] = [ActorClass::Car, ActorClass::Pedestrian, ActorClass::Cyclist];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ActorClass::Car => "car",
            ActorClass::Pedestrian => "pedestrian",
            ActorClass::Cyclist => "cyclist",
        }
    }
}

/// 7-DoF box with velocity. `size` is (length along heading, width, height);
/// `center` is the geometric center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorBox {
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
    pub velocity: Vec3,
    pub class: ActorClass,
    pub actor_id: u32,
}

impl ActorBox {
    /// Maps a point into the box frame (origin at center, x along heading).
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let d = geometry::sub(p, self.center);
        let (s, c) = self.yaw.sin_cos();
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    pub fn to_world(&self, local: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        geometry::add(self.center, [c * local[0] - s * local[1], s * local[0] + c * local[1], local[2]])
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let h = geometry::scale(self.size, 0.5);
        let mut out = [[0.0; 3]; 8];
        for (k, o) in out.iter_mut().enumerate() {
            let sx = if k & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if k & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if k & 4 == 0 { -1.0 } else { 1.0 };
            *o = self.to_world([sx * h[0], sy * h[1], sz * h[2]]);
        }
        out
    }

    /// `n × n × n` evenly spaced samples spanning the box, corners included
    /// for `n ≥ 2`.
    pub fn lattice(&self, n: usize) -> Vec<Vec3> {
        let t = |i: usize| if n <= 1 { 0.0 } else { i as f64 / (n - 1) as f64 - 0.5 };
        let mut out = Vec::with_capacity(n * n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    out.push(self.to_world([t(i) * self.size[0], t(j) * self.size[1], t(k) * self.size[2]]));
                }
            }
        }
        out
    }

    pub fn footprint_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let l = self.to_local(p);
        (0..3).all(|i| l[i].abs() <= 0.5 * self.size[i])
    }
}
