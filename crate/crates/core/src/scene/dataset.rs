use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{render_frame, Camera, GBufferFrame, PaletteFamily, Scene, Trajectory, Vec3};
use crate::error::{Error, Result};
use crate::tensor::Tensor32;

/// Channel file stems in manifest order, with their plane counts.
pub const CHANNELS: [(&str, usize); 6] =
    [("basecolor", 3), ("normal", 3), ("depth", 1), ("roughness", 1), ("metallic", 1), ("rgb", 3)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub fov: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameFiles {
    pub basecolor: String,
    pub normal: String,
    pub depth: String,
    pub roughness: String,
    pub metallic: String,
    pub rgb: String,
}

impl FrameFiles {
    fn for_index(index: usize) -> Self {
        let f = |c: &str| format!("{index:06}_{c}.f32");
        Self {
            basecolor: f("basecolor"),
            normal: f("normal"),
            depth: f("depth"),
            roughness: f("roughness"),
            metallic: f("metallic"),
            rgb: f("rgb"),
        }
    }

    pub fn get(&self, channel: &str) -> Option<&str> {
        Some(match channel {
            "basecolor" => &self.basecolor,
            "normal" => &self.normal,
            "depth" => &self.depth,
            "roughness" => &self.roughness,
            "metallic" => &self.metallic,
            "rgb" => &self.rgb,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    pub camera: CameraRecord,
    pub files: FrameFiles,
}

impl FrameEntry {
    pub fn camera(&self, far: f64) -> Camera {
        Camera {
            position: Vec3(self.camera.position),
            yaw: self.camera.yaw,
            pitch: self.camera.pitch,
            fov: self.camera.fov,
            far,
            ..Camera::new(Vec3::default(), 0.0, 0.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub far: f64,
    pub palette_family: PaletteFamily,
    pub seed: u64,
    pub frames: Vec<FrameEntry>,
}

/// An ordered frame sequence loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub frames: Vec<GBufferFrame>,
}

impl Dataset {
    /// Renders a sequence in memory without touching disk.
    pub fn render(scene: &Scene, trajectory: &Trajectory, width: usize, height: usize) -> Result<Self> {
        let mut frames = Vec::with_capacity(trajectory.len());
        let mut entries = Vec::with_capacity(trajectory.len());
        for (index, cam) in trajectory.poses.iter().enumerate() {
            frames.push(render_frame(scene, cam, width, height)?);
            entries.push(FrameEntry {
                index,
                camera: CameraRecord { position: cam.position.0, yaw: cam.yaw, pitch: cam.pitch, fov: cam.fov },
                files: FrameFiles::for_index(index),
            });
        }
        let far = trajectory.poses.first().map_or(super::DEFAULT_FAR, |c| c.far);
        Ok(Self {
            manifest: Manifest {
                width,
                height,
                far,
                palette_family: scene.palette_family,
                seed: scene.seed,
                frames: entries,
            },
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.manifest.width
    }

    pub fn height(&self) -> usize {
        self.manifest.height
    }

    /// Writes the manifest and per-frame channel files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (entry, frame) in self.manifest.frames.iter().zip(&self.frames) {
            for (channel, _) in CHANNELS {
                let name = entry.files.get(channel).expect("known channel");
                write_plane(&dir.join(name), frame.channel(channel).expect("known channel"))?;
            }
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

/// Raw little-endian `f32`, plane-major, no header.
pub fn write_plane(path: &Path, t: &Tensor32) -> Result<()> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_plane(path: &Path, shape: &[usize]) -> Result<Tensor32> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Shape(format!("{}: {} bytes, expected {expected}", path.display(), bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor32::from_vec(shape, data)
}

/// Renders every pose of `trajectory` and writes the dataset into `dir`.
pub fn export_dataset(scene: &Scene, trajectory: &Trajectory, width: usize, height: usize, dir: &Path) -> Result<Manifest> {
    let ds = Dataset::render(scene, trajectory, width, height)?;
    ds.save(dir)?;
    Ok(ds.manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path: PathBuf = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let (w, h) = (manifest.width, manifest.height);
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for entry in &manifest.frames {
        let mut f = GBufferFrame::zeros(w, h);
        for (channel, planes) in CHANNELS {
            let name = entry.files.get(channel).expect("known channel");
            let t = read_plane(&dir.join(name), &[planes, h, w])?;
            match channel {
                "basecolor" => f.basecolor = t,
                "normal" => f.normal = t,
                "depth" => f.depth = t,
                "roughness" => f.roughness = t,
                "metallic" => f.metallic = t,
                _ => f.rgb = t,
            }
        }
        frames.push(f);
    }
    Ok(Dataset { manifest, frames })
}
