use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Camera, Scene, Vec3, ARENA_HALF};

pub const MAX_TRANSLATION_STEP: f64 = 0.5;
pub const MAX_ROTATION_STEP: f64 = 0.1;

const MAX_YAW_RATE: f64 = 0.08;
const MAX_PITCH_RATE: f64 = 0.05;
const CLEARANCE: f64 = 0.35;
const WALK_LIMIT: f64 = ARENA_HALF - 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub poses: Vec<Camera>,
    pub frame_rate: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

fn inside_walk_area(p: Vec3) -> bool {
    p.x().abs() < WALK_LIMIT && p.z().abs() < WALK_LIMIT
}

/// Smooth random walk at eye height. Each step translates by at most
/// [`MAX_TRANSLATION_STEP`] and rotates by at most [`MAX_ROTATION_STEP`]
/// (combined yaw and pitch change); the camera never enters a primitive.
pub fn sample_trajectory(scene: &Scene, n_frames: usize, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6a65_6374);
    let eye = rng.gen_range(1.2..2.0);
    let mut pos = loop {
        let p = Vec3::new(rng.gen_range(-WALK_LIMIT..WALK_LIMIT), eye, rng.gen_range(-WALK_LIMIT..WALK_LIMIT));
        if scene.is_free(p, CLEARANCE * 2.0) {
            break p;
        }
    };
    let mut yaw: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut pitch: f64 = rng.gen_range(-0.15..0.05);
    let mut yaw_rate: f64 = 0.0;
    let mut speed: f64 = rng.gen_range(0.1..0.25);
    let mut turn_dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };

    let mut poses = Vec::with_capacity(n_frames);
    poses.push(Camera::new(pos, yaw, pitch));
    for _ in 1..n_frames {
        yaw_rate = (yaw_rate + rng.gen_range(-0.02..0.02)).clamp(-MAX_YAW_RATE, MAX_YAW_RATE);
        speed = (speed + rng.gen_range(-0.03..0.03)).clamp(0.05, 0.3);
        let d_pitch = rng.gen_range(-0.01..0.01f64).clamp(-MAX_PITCH_RATE, MAX_PITCH_RATE);
        pitch = (pitch + d_pitch).clamp(-0.3, 0.2);

        let heading = Vec3::new(yaw.sin(), 0.0, yaw.cos());
        let next = pos + heading * speed;
        if inside_walk_area(next) && scene.is_free(next, CLEARANCE) {
            pos = next;
            yaw += yaw_rate;
        } else {
            // Blocked: stand still and keep turning one way until clear.
            yaw_rate = turn_dir * MAX_YAW_RATE;
            yaw += yaw_rate;
            if rng.gen_bool(0.05) {
                turn_dir = -turn_dir;
            }
        }
        poses.push(Camera::new(pos, yaw, pitch));
    }
    Trajectory { poses, frame_rate: 10.0 }
}
