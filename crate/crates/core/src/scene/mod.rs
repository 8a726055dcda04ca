//! Procedural environments and an analytic ray-cast renderer that produces
//! G-buffers and ground-truth shaded frames.

mod dataset;
mod render;
mod trajectory;
mod vec3;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{export_dataset, load_dataset, write_plane, read_plane, Dataset, FrameEntry, FrameFiles, Manifest, CHANNELS};
pub use render::{render_frame, render_gbuffer, shade_pixel, shade_reference, sky_color, PixelSurface};
pub use trajectory::{sample_trajectory, Trajectory, MAX_ROTATION_STEP, MAX_TRANSLATION_STEP};
pub use vec3::Vec3;

use crate::error::{Error, Result};
use crate::tensor::Tensor32;

/// Half extent of the square play area on the ground plane.
pub const ARENA_HALF: f64 = 12.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaletteFamily {
    Warm,
    Cold,
}

impl fmt::Display for PaletteFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PaletteFamily::Warm => "warm",
            PaletteFamily::Cold => "cold",
        })
    }
}

impl FromStr for PaletteFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warm" => Ok(PaletteFamily::Warm),
            "cold" => Ok(PaletteFamily::Cold),
            other => Err(Error::Invalid(format!("unknown palette family `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub albedo: Vec3,
    pub roughness: f64,
    pub metallic: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { min: Vec3, max: Vec3 },
    Ground { height: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub material: Material,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sun {
    /// Unit vector pointing towards the sun.
    pub direction: Vec3,
    pub color: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sky {
    pub zenith: Vec3,
    pub horizon: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub sun: Sun,
    pub ambient: Vec3,
    pub sky: Sky,
    pub palette_family: PaletteFamily,
    /// Seed the geometry was generated from.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub yaw: f64,
    pub pitch: f64,
    /// Vertical field of view in radians.
    pub fov: f64,
    pub near: f64,
    pub far: f64,
}

pub const DEFAULT_FOV: f64 = std::f64::consts::FRAC_PI_3;
pub const DEFAULT_NEAR: f64 = 0.05;
pub const DEFAULT_FAR: f64 = 30.0;

impl Camera {
    pub fn new(position: Vec3, yaw: f64, pitch: f64) -> Self {
        Self { position, yaw, pitch, fov: DEFAULT_FOV, near: DEFAULT_NEAR, far: DEFAULT_FAR }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::Invalid(format!("camera needs 0 < near < far, got {} / {}", self.near, self.far)));
        }
        if self.pitch.abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::Invalid(format!("camera pitch {} out of range", self.pitch)));
        }
        if !(self.fov > 0.0 && self.fov < std::f64::consts::PI) {
            return Err(Error::Invalid(format!("camera fov {} out of range", self.fov)));
        }
        Ok(())
    }

    pub fn forward(&self) -> Vec3 {
        Vec3::new(self.yaw.sin() * self.pitch.cos(), self.pitch.sin(), self.yaw.cos() * self.pitch.cos())
    }

    /// Orthonormal (right, up, forward) basis; yaw 0, pitch 0 looks down +z.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let fwd = self.forward();
        let right = Vec3::new(0.0, 1.0, 0.0).cross(fwd).normalized();
        let up = fwd.cross(right);
        (right, up, fwd)
    }

    /// Unit ray direction through the center of pixel (`row`, `col`).
    pub fn ray_dir(&self, row: usize, col: usize, width: usize, height: usize) -> Vec3 {
        let (right, up, fwd) = self.basis();
        let tan = (self.fov * 0.5).tan();
        let aspect = width as f64 / height as f64;
        let sx = (2.0 * (col as f64 + 0.5) / width as f64 - 1.0) * tan * aspect;
        let sy = (1.0 - 2.0 * (row as f64 + 0.5) / height as f64) * tan;
        (fwd + right * sx + up * sy).normalized()
    }
}

/// Per-pixel surface attributes plus the ground-truth shaded image.
#[derive(Clone, Debug, PartialEq)]
pub struct GBufferFrame {
    /// `[3,H,W]` in `[0,1]`.
    pub basecolor: Tensor32,
    /// `[3,H,W]` world-space unit normals; zero on sky.
    pub normal: Tensor32,
    /// `[1,H,W]` hit distance / far; zero on sky.
    pub depth: Tensor32,
    pub roughness: Tensor32,
    pub metallic: Tensor32,
    /// `[3,H,W]` shaded reference image in `[0,1]`.
    pub rgb: Tensor32,
}

impl GBufferFrame {
    pub fn zeros(width: usize, height: usize) -> Self {
        let c3 = Tensor32::zeros(&[3, height, width]);
        let c1 = Tensor32::zeros(&[1, height, width]);
        Self {
            basecolor: c3.clone(),
            normal: c3.clone(),
            depth: c1.clone(),
            roughness: c1.clone(),
            metallic: c1,
            rgb: c3,
        }
    }

    pub fn height(&self) -> usize {
        self.basecolor.dim(1)
    }

    pub fn width(&self) -> usize {
        self.basecolor.dim(2)
    }

    pub fn channel(&self, name: &str) -> Option<&Tensor32> {
        Some(match name {
            "basecolor" => &self.basecolor,
            "normal" => &self.normal,
            "depth" => &self.depth,
            "roughness" => &self.roughness,
            "metallic" => &self.metallic,
            "rgb" => &self.rgb,
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for (name, c) in [("basecolor", 3), ("normal", 3), ("depth", 1), ("roughness", 1), ("metallic", 1), ("rgb", 3)] {
            self.channel(name).expect("known channel").expect_shape(&[c, h, w])?;
        }
        Ok(())
    }
}

/// Ray hit: distance along the ray and the primitive index.
#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub index: usize,
    pub normal: Vec3,
}

fn hsv(h: f64, s: f64, v: f64) -> Vec3 {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    Vec3::new(r + m, g + m, b + m)
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::Invalid("scene has no primitives".into()));
        }
        if (self.sun.direction.length() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid("sun direction must be unit length".into()));
        }
        for p in &self.primitives {
            let m = p.material;
            let in01 = |v: f64| (0.0..=1.0).contains(&v);
            if !m.albedo.0.iter().all(|&v| in01(v)) || !(0.05..=1.0).contains(&m.roughness) || !in01(m.metallic) {
                return Err(Error::Invalid(format!("material out of range: {m:?}")));
            }
        }
        Ok(())
    }

    /// Nearest intersection with `t` in `(t_min, t_max)`.
    pub fn intersect(&self, origin: Vec3, dir: Vec3, t_min: f64, t_max: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut limit = t_max;
        for (index, p) in self.primitives.iter().enumerate() {
            if let Some((t, normal)) = intersect_shape(&p.shape, origin, dir, t_min, limit) {
                limit = t;
                best = Some(Hit { t, index, normal });
            }
        }
        best
    }

    pub fn occluded(&self, origin: Vec3, dir: Vec3, t_min: f64) -> bool {
        self.primitives
            .iter()
            .any(|p| intersect_shape(&p.shape, origin, dir, t_min, f64::INFINITY).is_some())
    }

    /// Whether `point` is clear of every solid primitive by at least `margin`.
    pub fn is_free(&self, point: Vec3, margin: f64) -> bool {
        self.primitives.iter().all(|p| match p.shape {
            Shape::Sphere { center, radius } => (point - center).length() > radius + margin,
            Shape::Box { min, max } => (0..3).any(|k| point.0[k] < min.0[k] - margin || point.0[k] > max.0[k] + margin),
            Shape::Ground { height } => point.y() > height + margin,
        })
    }
}

fn intersect_shape(shape: &Shape, o: Vec3, d: Vec3, t_min: f64, t_max: f64) -> Option<(f64, Vec3)> {
    match *shape {
        Shape::Sphere { center, radius } => {
            let oc = o - center;
            let b = oc.dot(d);
            let c = oc.dot(oc) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            for t in [-b - sq, -b + sq] {
                if t > t_min && t < t_max {
                    let n = (o + d * t - center) * (1.0 / radius);
                    return Some((t, n.normalized()));
                }
            }
            None
        }
        Shape::Box { min, max } => {
            let mut t0 = t_min;
            let mut t1 = t_max;
            let mut enter_axis = None;
            let mut exit_axis = None;
            for k in 0..3 {
                let inv = 1.0 / d.0[k];
                let (mut a, mut b) = ((min.0[k] - o.0[k]) * inv, (max.0[k] - o.0[k]) * inv);
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
                if a > t0 {
                    t0 = a;
                    enter_axis = Some(k);
                }
                if b < t1 {
                    t1 = b;
                    exit_axis = Some(k);
                }
                if t0 > t1 {
                    return None;
                }
            }
            let (t, axis, sign) = match enter_axis {
                Some(k) if t0 > t_min => (t0, k, -d.0[k].signum()),
                _ => match exit_axis {
                    Some(k) if t1 < t_max => (t1, k, d.0[k].signum()),
                    _ => return None,
                },
            };
            let mut n = [0.0; 3];
            n[axis] = sign;
            Some((t, Vec3(n)))
        }
        Shape::Ground { height } => {
            if d.y().abs() < 1e-12 {
                return None;
            }
            let t = (height - o.y()) / d.y();
            if t > t_min && t < t_max {
                let n = if o.y() >= height { 1.0 } else { -1.0 };
                Some((t, Vec3::new(0.0, n, 0.0)))
            } else {
                None
            }
        }
    }
}

/// Deterministic environment: 8 to 24 spheres and boxes on a ground plane.
/// The family only changes colors and lights; geometry and non-color
/// material values depend on `seed` alone.
pub fn build_environment(family: PaletteFamily, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(8..=24);
    let mut primitives = Vec::with_capacity(count + 1);

    let ground_hue: f64 = rng.gen_range(0.0..1.0);
    let ground_material = Material {
        albedo: palette(family, ground_hue, 0.25, 0.55),
        roughness: 0.9,
        metallic: 0.0,
    };
    primitives.push(Primitive { shape: Shape::Ground { height: 0.0 }, material: ground_material });

    for _ in 0..count {
        let x = rng.gen_range(-ARENA_HALF + 1.0..ARENA_HALF - 1.0);
        let z = rng.gen_range(-ARENA_HALF + 1.0..ARENA_HALF - 1.0);
        let shape = if rng.gen_bool(0.45) {
            let radius = rng.gen_range(0.4..1.5);
            let lift = if rng.gen_bool(0.25) { rng.gen_range(0.5..2.0) } else { 0.0 };
            Shape::Sphere { center: Vec3::new(x, radius + lift, z), radius }
        } else {
            let sx = rng.gen_range(0.3..1.6);
            let sz = rng.gen_range(0.3..1.6);
            let height = rng.gen_range(0.5..4.5);
            Shape::Box { min: Vec3::new(x - sx, 0.0, z - sz), max: Vec3::new(x + sx, height, z + sz) }
        };
        let hue = rng.gen_range(0.0..1.0);
        let sat = rng.gen_range(0.55..1.0);
        let val = rng.gen_range(0.55..0.95);
        let roughness = rng.gen_range(0.05..1.0);
        let metallic = if rng.gen_bool(0.2) { 1.0 } else { 0.0 };
        primitives.push(Primitive {
            shape,
            material: Material { albedo: palette(family, hue, sat, val), roughness, metallic },
        });
    }

    let azimuth: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let elevation: f64 = rng.gen_range(0.6..1.0);
    let direction = Vec3::new(
        azimuth.cos() * elevation.cos(),
        elevation.sin(),
        azimuth.sin() * elevation.cos(),
    )
    .normalized();

    let (sun_color, ambient, sky) = match family {
        PaletteFamily::Warm => (
            Vec3::new(1.0, 0.86, 0.66),
            Vec3::new(0.22, 0.2, 0.18),
            Sky { zenith: Vec3::new(0.32, 0.52, 0.88), horizon: Vec3::new(0.96, 0.78, 0.55) },
        ),
        PaletteFamily::Cold => (
            Vec3::new(0.55, 0.58, 0.63),
            Vec3::new(0.26, 0.27, 0.29),
            Sky { zenith: Vec3::new(0.52, 0.55, 0.6), horizon: Vec3::new(0.76, 0.77, 0.79) },
        ),
    };

    Scene { primitives, sun: Sun { direction, color: sun_color }, ambient, sky, palette_family: family, seed }
}

fn palette(family: PaletteFamily, hue: f64, sat: f64, val: f64) -> Vec3 {
    let c = match family {
        PaletteFamily::Warm => hsv(hue * 0.35 - 0.05, sat, val),
        PaletteFamily::Cold => hsv(0.5 + hue * 0.2, sat * 0.22, val * 0.8),
    };
    Vec3(c.0.map(|v| v.clamp(0.0, 1.0)))
}
