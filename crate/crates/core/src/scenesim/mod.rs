//! Synthetic driving scenes: constant-velocity actors around a moving ego
//! vehicle, observed by a raycasting beam-addressable LiDAR.

mod camera;
mod io;
mod raycast;

pub use camera::{camera_bev, CameraConfig, CAMERA_CHANNELS};
pub use io::{load_sequence, save_sequence, SEQUENCE_MAGIC, SEQUENCE_VERSION};
pub use raycast::{intersect_box, raycast_scan, PointCloud};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{ActorBox, ActorClass};
use crate::error::{CoreError, Result};
use crate::geometry::{self, Mat3, Vec3};
use crate::rangeimage::{BeamGrid, BeamPattern};

/// splitmix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EgoMotion {
    Straight,
    Arc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub frames: usize,
    pub dt: f64,
    pub actors_min: usize,
    pub actors_max: usize,
    pub ego_motion: Vec<EgoMotion>,
    pub ego_speed: [f64; 2],
    /// Turn rate range for arc trajectories, rad/s.
    pub ego_yaw_rate: [f64; 2],
    /// Relative sampling weights of car, pedestrian, cyclist.
    pub class_weights: [f64; 3],
    pub car_speed: [f64; 2],
    pub pedestrian_speed: [f64; 2],
    pub cyclist_speed: [f64; 2],
    /// Actor distance from the ego at the middle frame.
    pub spawn_radius: [f64; 2],
    /// Actors never come closer than this to the sensor.
    pub min_clearance: f64,
    pub spawn_despawn: bool,
    pub sensor_height: f64,
    pub max_range: f64,
    pub range_noise: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            frames: 40,
            dt: 0.2,
            actors_min: 2,
            actors_max: 8,
            ego_motion: vec![EgoMotion::Straight, EgoMotion::Arc],
            ego_speed: [0.0, 6.0],
            ego_yaw_rate: [-0.15, 0.15],
            class_weights: [0.5, 0.3, 0.2],
            car_speed: [0.0, 8.0],
            pedestrian_speed: [0.0, 1.5],
            cyclist_speed: [1.5, 5.0],
            spawn_radius: [6.0, 30.0],
            min_clearance: 3.0,
            spawn_despawn: false,
            sensor_height: 1.8,
            max_range: 70.0,
            range_noise: 0.02,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], min: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] >= min && r[0] <= r[1]) {
        return Err(CoreError::Config(format!("{name}: invalid range {r:?}")));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(CoreError::Config("frames must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(CoreError::Config("dt must be positive".into()));
        }
        if self.actors_min > self.actors_max {
            return Err(CoreError::Config("actors_min exceeds actors_max".into()));
        }
        if self.ego_motion.is_empty() {
            return Err(CoreError::Config("ego_motion needs at least one trajectory type".into()));
        }
        check_range("ego_speed", self.ego_speed, 0.0)?;
        check_range("ego_yaw_rate", self.ego_yaw_rate, f64::NEG_INFINITY)?;
        check_range("car_speed", self.car_speed, 0.0)?;
        check_range("pedestrian_speed", self.pedestrian_speed, 0.0)?;
        check_range("cyclist_speed", self.cyclist_speed, 0.0)?;
        check_range("spawn_radius", self.spawn_radius, 0.0)?;
        if self.class_weights.iter().any(|w| !(*w >= 0.0)) || self.class_weights.iter().sum::<f64>() <= 0.0 {
            return Err(CoreError::Config("class_weights must be non-negative with positive sum".into()));
        }
        if !(self.sensor_height > 0.0) || !(self.max_range > 0.0) || !(self.range_noise >= 0.0) {
            return Err(CoreError::Config("sensor_height, max_range must be positive and range_noise >= 0".into()));
        }
        Ok(())
    }

    fn speed_range(&self, c: ActorClass) -> [f64; 2] {
        match c {
            ActorClass::Car => self.car_speed,
            ActorClass::Pedestrian => self.pedestrian_speed,
            ActorClass::Cyclist => self.cyclist_speed,
        }
    }
}

/// Class-conditional (length, width, height) ranges in meters.
pub fn size_range(c: ActorClass) -> [[f64; 2]; 3] {
    match c {
        ActorClass::Car => [[3.8, 5.0], [1.7, 2.1], [1.4, 1.9]],
        ActorClass::Pedestrian => [[0.5, 0.8], [0.5, 0.8], [1.5, 1.9]],
        ActorClass::Cyclist => [[1.6, 2.0], [0.5, 0.8], [1.5, 1.9]],
    }
}

/// Sensor pose: `p_sensor = rotation · (p_world − translation)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub timestamp: f64,
}

impl EgoPose {
    pub fn identity() -> Self {
        Self { rotation: geometry::IDENTITY, translation: [0.0; 3], timestamp: 0.0 }
    }

    pub fn world_to_sensor(&self, p: Vec3) -> Vec3 {
        geometry::mat_vec(&self.rotation, geometry::sub(p, self.translation))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub index: usize,
    pub pose: EgoPose,
    /// World-frame ego velocity.
    pub ego_velocity: Vec3,
    /// World-frame boxes present in this frame.
    pub actors: Vec<ActorBox>,
    #[serde(skip)]
    pub cloud: Option<PointCloud>,
    #[serde(skip)]
    pub pattern: Option<BeamPattern>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSequence {
    pub seed: u64,
    pub grid: BeamGrid,
    pub config: ScenarioConfig,
    pub frame_interval: f64,
    pub frames: Vec<SceneFrame>,
}

struct ActorPlan {
    start: Vec3,
    velocity: Vec3,
    size: Vec3,
    yaw: f64,
    class: ActorClass,
    first: usize,
    last: usize,
}

fn ego_state(motion: EgoMotion, speed: f64, yaw_rate: f64, t: f64) -> (Vec3, f64, Vec3) {
    match motion {
        EgoMotion::Arc if yaw_rate.abs() > 1e-9 => {
            let yaw = yaw_rate * t;
            let rad = speed / yaw_rate;
            let pos = [rad * yaw.sin(), rad * (1.0 - yaw.cos()), 0.0];
            (pos, yaw, [speed * yaw.cos(), speed * yaw.sin(), 0.0])
        }
        _ => ([speed * t, 0.0, 0.0], 0.0, [speed, 0.0, 0.0]),
    }
}

fn pick_class(rng: &mut ChaCha8Rng, w: &[f64; 3]) -> ActorClass {
    let total: f64 = w.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (i, &wi) in w.iter().enumerate() {
        if x < wi {
            return ActorClass::ALL[i];
        }
        x -= wi;
    }
    ActorClass::Car
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Poses and actor boxes for every frame; point clouds are left empty.
pub fn generate_scenario(config: &ScenarioConfig, grid: &BeamGrid, seed: u64) -> Result<SceneSequence> {
    config.validate()?;
    grid.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motion = config.ego_motion[rng.gen_range(0..config.ego_motion.len())];
    let speed = uniform(&mut rng, config.ego_speed);
    let yaw_rate = if motion == EgoMotion::Arc { uniform(&mut rng, config.ego_yaw_rate) } else { 0.0 };
    let n_actors = rng.gen_range(config.actors_min..=config.actors_max);
    let mid = config.frames / 2;
    let t_of = |k: usize| k as f64 * config.dt;
    let (mid_pos, mid_yaw, _) = ego_state(motion, speed, yaw_rate, t_of(mid));

    let mut plans: Vec<ActorPlan> = Vec::new();
    for _ in 0..n_actors {
        for _attempt in 0..64 {
            let class = pick_class(&mut rng, &config.class_weights);
            let sr = size_range(class);
            let size = [uniform(&mut rng, sr[0]), uniform(&mut rng, sr[1]), uniform(&mut rng, sr[2])];
            let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let v = uniform(&mut rng, config.speed_range(class));
            let velocity = [v * heading.cos(), v * heading.sin(), 0.0];
            let r = uniform(&mut rng, config.spawn_radius);
            let bearing = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let off = [r * (mid_yaw + bearing).cos(), r * (mid_yaw + bearing).sin()];
            let c_mid = [mid_pos[0] + off[0], mid_pos[1] + off[1], 0.5 * size[2]];
            let start = geometry::sub(c_mid, geometry::scale(velocity, t_of(mid)));
            let radius = 0.5 * (size[0].hypot(size[1]));
            let overlaps = plans.iter().any(|p| {
                let pm = geometry::add(p.start, geometry::scale(p.velocity, t_of(mid)));
                let pr = 0.5 * p.size[0].hypot(p.size[1]);
                (pm[0] - c_mid[0]).hypot(pm[1] - c_mid[1]) < radius + pr + 0.5
            });
            let too_close = (0..config.frames).any(|k| {
                let (e, _, _) = ego_state(motion, speed, yaw_rate, t_of(k));
                let c = geometry::add(start, geometry::scale(velocity, t_of(k)));
                (c[0] - e[0]).hypot(c[1] - e[1]) < radius + config.min_clearance
            });
            if overlaps || too_close {
                continue;
            }
            let (first, last) = if config.spawn_despawn && rng.gen_bool(0.3) {
                let a = rng.gen_range(0..config.frames);
                let b = rng.gen_range(a..config.frames);
                (a, b)
            } else {
                (0, config.frames - 1)
            };
            plans.push(ActorPlan { start, velocity, size, yaw: heading, class, first, last });
            break;
        }
    }

    let mut frames = Vec::with_capacity(config.frames);
    let mut centers: Vec<Vec3> = plans.iter().map(|p| p.start).collect();
    for k in 0..config.frames {
        if k > 0 {
            for (c, p) in centers.iter_mut().zip(&plans) {
                *c = geometry::add(*c, geometry::scale(p.velocity, config.dt));
            }
        }
        let (pos, yaw, ego_velocity) = ego_state(motion, speed, yaw_rate, t_of(k));
        let pose = EgoPose {
            rotation: geometry::rot_z(-yaw),
            translation: [pos[0], pos[1], config.sensor_height],
            timestamp: t_of(k),
        };
        let actors = plans
            .iter()
            .zip(&centers)
            .enumerate()
            .filter(|(_, (p, _))| k >= p.first && k <= p.last)
            .map(|(i, (p, c))| ActorBox {
                center: *c,
                size: p.size,
                yaw: p.yaw,
                velocity: p.velocity,
                class: p.class,
                actor_id: i as u32,
            })
            .collect();
        frames.push(SceneFrame { index: k, pose, ego_velocity, actors, cloud: None, pattern: None });
    }
    Ok(SceneSequence { seed, grid: grid.clone(), config: config.clone(), frame_interval: config.dt, frames })
}

/// Boxes mapped into a sensor frame. Velocities are expressed relative to
/// the moving sensor.
pub fn to_sensor_frame(boxes: &[ActorBox], pose: &EgoPose, ego_velocity: Vec3) -> Vec<ActorBox> {
    let ego_yaw = geometry::yaw_of(&geometry::transpose(&pose.rotation));
    boxes
        .iter()
        .map(|b| ActorBox {
            center: pose.world_to_sensor(b.center),
            size: b.size,
            yaw: geometry::wrap_angle(b.yaw - ego_yaw),
            velocity: geometry::mat_vec(&pose.rotation, geometry::sub(b.velocity, ego_velocity)),
            class: b.class,
            actor_id: b.actor_id,
        })
        .collect()
}

pub fn ground_truth_boxes(frame: &SceneFrame) -> Vec<ActorBox> {
    to_sensor_frame(&frame.actors, &frame.pose, frame.ego_velocity)
}

impl SceneSequence {
    /// Raycasts every frame with `pattern` (all beams when `None`) and stores
    /// the clouds.
    pub fn scan_all(&mut self, pattern: Option<&BeamPattern>) -> Result<()> {
        let full = BeamPattern::full(&self.grid);
        let pattern = pattern.unwrap_or(&full);
        for k in 0..self.frames.len() {
            let cloud = raycast_scan(self, k, pattern)?;
            let f = &mut self.frames[k];
            f.cloud = Some(cloud);
            f.pattern = Some(pattern.clone());
        }
        Ok(())
    }
}
