use super::{Camera, GBufferFrame, Scene, Vec3};
use crate::error::{Error, Result};
use crate::tensor::Tensor32;

/// Offset along the normal for shadow rays.
const SHADOW_BIAS: f64 = 1e-4;

/// Surface attributes needed to shade one pixel.
#[derive(Clone, Copy, Debug)]
pub struct PixelSurface {
    pub position: Vec3,
    pub normal: Vec3,
    pub albedo: Vec3,
    pub roughness: f64,
    pub metallic: f64,
}

pub fn sky_color(scene: &Scene, dir: Vec3) -> Vec3 {
    let t = dir.y().clamp(0.0, 1.0).sqrt();
    scene.sky.horizon + (scene.sky.zenith - scene.sky.horizon) * t
}

/// Lambert diffuse plus Blinn-Phong specular under a single sun with binary
/// visibility and a constant ambient term, clamped to `[0,1]`.
///
/// `view` points from the surface towards the camera. The sun terms vanish
/// when `n·l <= 0` or the sun is occluded.
#[allow(clippy::too_many_arguments)]
pub fn shade_closed_form(
    albedo: Vec3,
    normal: Vec3,
    view: Vec3,
    light: Vec3,
    sun_color: Vec3,
    ambient: Vec3,
    visible: bool,
    roughness: f64,
    metallic: f64,
) -> Vec3 {
    let n_dot_l = normal.dot(light).max(0.0);
    let vis = if visible && n_dot_l > 0.0 { 1.0 } else { 0.0 };
    let diffuse = albedo.hadamard(ambient + sun_color * (n_dot_l * vis));
    let half = (light + view).normalized();
    let alpha = (2.0 / (roughness * roughness) - 2.0).max(2.0);
    let spec_color = Vec3::new(0.04, 0.04, 0.04) * (1.0 - metallic) + albedo * metallic;
    let spec = spec_color.hadamard(sun_color) * (vis * normal.dot(half).max(0.0).powf(alpha));
    let c = diffuse + spec;
    Vec3(c.0.map(|v| v.clamp(0.0, 1.0)))
}

pub fn shade_pixel(scene: &Scene, surface: &PixelSurface, view: Vec3) -> Vec3 {
    let light = scene.sun.direction;
    let lit_side = surface.normal.dot(light) > 0.0;
    let visible = lit_side && !scene.occluded(surface.position + surface.normal * SHADOW_BIAS, light, SHADOW_BIAS);
    shade_closed_form(
        surface.albedo,
        surface.normal,
        view,
        light,
        scene.sun.color,
        scene.ambient,
        visible,
        surface.roughness,
        surface.metallic,
    )
}

/// Primary-ray G-buffer. Misses (including hits beyond `far`) are all zero;
/// `rgb` is left zero.
pub fn render_gbuffer(scene: &Scene, camera: &Camera, width: usize, height: usize) -> Result<GBufferFrame> {
    if width < 8 || height < 8 {
        return Err(Error::Invalid(format!("resolution {width}x{height} below 8x8")));
    }
    camera.validate()?;
    let mut g = GBufferFrame::zeros(width, height);
    let plane = width * height;
    for row in 0..height {
        for col in 0..width {
            let dir = camera.ray_dir(row, col, width, height);
            let Some(hit) = scene.intersect(camera.position, dir, camera.near, camera.far) else {
                continue;
            };
            let p = row * width + col;
            let m = scene.primitives[hit.index].material;
            for k in 0..3 {
                g.basecolor.data_mut()[k * plane + p] = m.albedo.0[k] as f32;
                g.normal.data_mut()[k * plane + p] = hit.normal.0[k] as f32;
            }
            g.depth.data_mut()[p] = (hit.t / camera.far) as f32;
            g.roughness.data_mut()[p] = m.roughness as f32;
            g.metallic.data_mut()[p] = m.metallic as f32;
        }
    }
    Ok(g)
}

/// Ground-truth shading of a G-buffer produced for the same scene and camera.
pub fn shade_reference(scene: &Scene, camera: &Camera, gbuffer: &GBufferFrame) -> Result<Tensor32> {
    gbuffer.validate()?;
    let (h, w) = (gbuffer.height(), gbuffer.width());
    let plane = w * h;
    let mut rgb = Tensor32::zeros(&[3, h, w]);
    for row in 0..h {
        for col in 0..w {
            let p = row * w + col;
            let dir = camera.ray_dir(row, col, w, h);
            let depth = gbuffer.depth.data()[p] as f64;
            let c = if depth == 0.0 {
                sky_color(scene, dir)
            } else {
                let get = |t: &Tensor32| Vec3::new(t.data()[p] as f64, t.data()[plane + p] as f64, t.data()[2 * plane + p] as f64);
                let surface = PixelSurface {
                    position: camera.position + dir * (depth * camera.far),
                    normal: get(&gbuffer.normal).normalized(),
                    albedo: get(&gbuffer.basecolor),
                    roughness: gbuffer.roughness.data()[p] as f64,
                    metallic: gbuffer.metallic.data()[p] as f64,
                };
                shade_pixel(scene, &surface, -dir)
            };
            for k in 0..3 {
                rgb.data_mut()[k * plane + p] = c.0[k].clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(rgb)
}

/// G-buffer plus shaded reference in one call.
pub fn render_frame(scene: &Scene, camera: &Camera, width: usize, height: usize) -> Result<GBufferFrame> {
    let mut g = render_gbuffer(scene, camera, width, height)?;
    g.rgb = shade_reference(scene, camera, &g)?;
    Ok(g)
}
