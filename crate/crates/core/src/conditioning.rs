//! Conditioning inputs: irradiance from the previous frame, sky masking of
//! basecolor, previous-frame noise injection, temporal offset sampling and the
//! 10-channel control stack.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scene::GBufferFrame;
use crate::tensor::Tensor32;

/// Rec.601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];
pub const IRRADIANCE_EPS: f32 = 1e-6;
pub const IRRADIANCE_MAX: f32 = 2.0;
/// Sky threshold on basecolor max and depth.
pub const SKY_TAU: f32 = 10.0 / 255.0;
/// Upper bound of the uniformly drawn noise scale.
pub const MAX_NOISE_SIGMA: f64 = 0.2;
pub const CONTROL_CHANNELS: usize = 10;

fn hw(t: &Tensor32, channels: usize, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [c, h, w] if c == channels => Ok((h, w)),
        ref s => Err(Error::Shape(format!("{what}: expected [{channels},H,W], got {s:?}"))),
    }
}

/// Per-pixel grayscale `[1,H,W]` of an `[3,H,W]` image.
pub fn luminance(rgb: &Tensor32) -> Result<Tensor32> {
    let (h, w) = hw(rgb, 3, "luminance")?;
    let n = h * w;
    let d = rgb.data();
    let out = (0..n).map(|p| LUMA[0] * d[p] + LUMA[1] * d[n + p] + LUMA[2] * d[2 * n + p]).collect();
    Tensor32::from_vec(&[1, h, w], out)
}

/// Luminance ratio of the previous frame to the previous basecolor, clamped
/// to `[0, 2]` and divided by 2. Output `[1,H,W]` in `[0,1]`.
pub fn compute_irradiance(prev_frame: &Tensor32, prev_basecolor: &Tensor32) -> Result<Tensor32> {
    if prev_frame.shape() != prev_basecolor.shape() {
        return Err(Error::Shape(format!(
            "irradiance: frame {:?} vs basecolor {:?}",
            prev_frame.shape(),
            prev_basecolor.shape()
        )));
    }
    let f = luminance(prev_frame)?;
    let c = luminance(prev_basecolor)?;
    f.zip_map(&c, |lf, lc| (lf / (lc + IRRADIANCE_EPS)).clamp(0.0, IRRADIANCE_MAX) / IRRADIANCE_MAX)
}

/// 1 where every basecolor channel and the depth are strictly below
/// [`SKY_TAU`], else 0.
pub fn compute_sky_mask(basecolor: &Tensor32, depth: &Tensor32) -> Result<Tensor32> {
    let (h, w) = hw(basecolor, 3, "sky mask basecolor")?;
    depth.expect_shape(&[1, h, w])?;
    let n = h * w;
    let b = basecolor.data();
    let out = (0..n)
        .map(|p| {
            let cmax = b[p].max(b[n + p]).max(b[2 * n + p]);
            if cmax < SKY_TAU && depth.data()[p] < SKY_TAU {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor32::from_vec(&[1, h, w], out)
}

/// `(1 - M) * basecolor + M * sky_source`, per pixel and channel.
pub fn apply_sky_mask(basecolor: &Tensor32, mask: &Tensor32, sky_source: &Tensor32) -> Result<Tensor32> {
    let (h, w) = hw(basecolor, 3, "apply_sky_mask")?;
    mask.expect_shape(&[1, h, w])?;
    sky_source.expect_shape(basecolor.shape())?;
    let n = h * w;
    let mut out = basecolor.clone();
    for p in 0..n {
        let m = mask.data()[p];
        if m == 0.0 {
            continue;
        }
        for k in 0..3 {
            let i = k * n + p;
            out.data_mut()[i] = (1.0 - m) * basecolor.data()[i] + m * sky_source.data()[i];
        }
    }
    Ok(out)
}

/// Draws `sigma ~ U(0, 0.2)` and perturbs with that scale.
pub fn inject_noise<R: Rng + ?Sized>(rgb: &Tensor32, rng: &mut R) -> Tensor32 {
    let sigma = rng.gen_range(0.0..MAX_NOISE_SIGMA);
    inject_noise_with_sigma(rgb, sigma, rng)
}

/// Pre-clamp perturbation `sigma * eps`, `eps ~ N(0, I)`.
pub fn noise_perturbation<R: Rng + ?Sized>(len: usize, sigma: f64, rng: &mut R) -> Vec<f32> {
    (0..len)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            (sigma * e) as f32
        })
        .collect()
}

/// `clamp(rgb + sigma * eps, 0, 1)`.
pub fn inject_noise_with_sigma<R: Rng + ?Sized>(rgb: &Tensor32, sigma: f64, rng: &mut R) -> Tensor32 {
    if sigma == 0.0 {
        return rgb.clone();
    }
    let noise = noise_perturbation(rgb.len(), sigma, rng);
    let mut out = rgb.clone();
    for (v, n) in out.data_mut().iter_mut().zip(noise) {
        *v = (*v + n).clamp(0.0, 1.0);
    }
    out
}

/// Distribution over temporal offsets of the conditioning frame.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetDistribution {
    pub support: Vec<i64>,
    pub probs: Vec<f64>,
}

impl Default for OffsetDistribution {
    fn default() -> Self {
        Self { support: vec![-2, -1, 0, 1, 2], probs: vec![0.10, 0.35, 0.10, 0.35, 0.10] }
    }
}

impl OffsetDistribution {
    pub fn new(support: Vec<i64>, probs: Vec<f64>) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if support.len() != probs.len() || support.is_empty() || (total - 1.0).abs() > 1e-9 || probs.iter().any(|&p| p < 0.0) {
            return Err(Error::Invalid("offset probabilities must be non-negative and sum to 1".into()));
        }
        Ok(Self { support, probs })
    }

    /// Offset `delta` with `frame_index + delta` inside `[0, seq_len)`,
    /// redrawing out-of-range values.
    pub fn sample<R: Rng + ?Sized>(&self, frame_index: usize, seq_len: usize, rng: &mut R) -> Result<i64> {
        if frame_index >= seq_len {
            return Err(Error::Invalid(format!("frame {frame_index} outside sequence of {seq_len}")));
        }
        if seq_len == 1 {
            return Ok(0);
        }
        let valid = |d: i64| {
            let j = frame_index as i64 + d;
            j >= 0 && j < seq_len as i64
        };
        if !self.support.iter().zip(&self.probs).any(|(&d, &p)| p > 0.0 && valid(d)) {
            return Err(Error::Invalid("no offset in the support lands inside the sequence".into()));
        }
        let dist = WeightedIndex::new(&self.probs).map_err(|e| Error::Invalid(e.to_string()))?;
        loop {
            let d = self.support[dist.sample(rng)];
            if valid(d) {
                return Ok(d);
            }
        }
    }
}

/// `[10,H,W]` network control input.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlStack(pub Tensor32);

impl ControlStack {
    pub fn tensor(&self) -> &Tensor32 {
        &self.0
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        ControlStack(Tensor32::zeros(&[CONTROL_CHANNELS, height, width]))
    }

    /// Irradiance plane (last channel).
    pub fn irradiance(&self) -> Tensor32 {
        let (h, w) = (self.0.dim(1), self.0.dim(2));
        let n = h * w;
        Tensor32::from_vec(&[1, h, w], self.0.data()[9 * n..].to_vec()).expect("plane")
    }
}

/// Channel order: masked basecolor (3), normal mapped to `(n+1)/2` (3),
/// depth, roughness, metallic, irradiance. All clamped to `[0,1]`.
pub fn pack_control(gbuffer: &GBufferFrame, masked_basecolor: &Tensor32, irradiance: &Tensor32) -> Result<ControlStack> {
    let (h, w) = (gbuffer.height(), gbuffer.width());
    masked_basecolor.expect_shape(&[3, h, w])?;
    irradiance.expect_shape(&[1, h, w])?;
    gbuffer.normal.expect_shape(&[3, h, w])?;
    let n = h * w;
    let mut out = Vec::with_capacity(CONTROL_CHANNELS * n);
    out.extend(masked_basecolor.data().iter().map(|v| v.clamp(0.0, 1.0)));
    out.extend(gbuffer.normal.data().iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)));
    for plane in [&gbuffer.depth, &gbuffer.roughness, &gbuffer.metallic, irradiance] {
        plane.expect_shape(&[1, h, w])?;
        out.extend(plane.data().iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Ok(ControlStack(Tensor32::from_vec(&[CONTROL_CHANNELS, h, w], out)?))
}

/// Inverse of [`pack_control`] for in-range inputs: returns (masked
/// basecolor, G-buffer with normals mapped back, irradiance).
pub fn unpack_control(control: &ControlStack) -> Result<(Tensor32, GBufferFrame, Tensor32)> {
    let t = control.tensor();
    let (h, w) = hw(t, CONTROL_CHANNELS, "unpack_control")?;
    let n = h * w;
    let slice = |a: usize, b: usize| t.data()[a * n..b * n].to_vec();
    let mut g = GBufferFrame::zeros(w, h);
    let basecolor = Tensor32::from_vec(&[3, h, w], slice(0, 3))?;
    g.basecolor = basecolor.clone();
    g.normal = Tensor32::from_vec(&[3, h, w], slice(3, 6).into_iter().map(|v| v * 2.0 - 1.0).collect())?;
    g.depth = Tensor32::from_vec(&[1, h, w], slice(6, 7))?;
    g.roughness = Tensor32::from_vec(&[1, h, w], slice(7, 8))?;
    g.metallic = Tensor32::from_vec(&[1, h, w], slice(8, 9))?;
    let irr = Tensor32::from_vec(&[1, h, w], slice(9, 10))?;
    Ok((basecolor, g, irr))
}

/// Full conditioning for one frame: sky-masked basecolor with the given sky
/// source, irradiance from `prev_frame` and `prev_basecolor` (or zeros), packed.
pub fn build_control(
    gbuffer: &GBufferFrame,
    sky_source: &Tensor32,
    prev_frame: &Tensor32,
    prev_basecolor: &Tensor32,
    irradiance_on: bool,
) -> Result<ControlStack> {
    let mask = compute_sky_mask(&gbuffer.basecolor, &gbuffer.depth)?;
    let masked = apply_sky_mask(&gbuffer.basecolor, &mask, sky_source)?;
    let irr = if irradiance_on {
        compute_irradiance(prev_frame, prev_basecolor)?
    } else {
        Tensor32::zeros(&[1, gbuffer.height(), gbuffer.width()])
    };
    pack_control(gbuffer, &masked, &irr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gray(v: f32, h: usize, w: usize) -> Tensor32 {
        Tensor32::full(&[3, h, w], v)
    }

    #[test]
    fn luminance_weights() {
        let l = |r, g, b| luminance(&Tensor32::from_vec(&[3, 1, 1], vec![r, g, b]).unwrap()).unwrap().data()[0];
        assert!((l(1.0, 1.0, 1.0) - 1.0).abs() < 1e-6);
        assert_eq!(l(0.0, 0.0, 0.0), 0.0);
        assert_eq!(l(1.0, 0.0, 0.0), 0.299);
    }

    #[test]
    fn irradiance_examples() {
        let i = compute_irradiance(&gray(0.6, 2, 2), &gray(0.6, 2, 2)).unwrap();
        assert!(i.data().iter().all(|&v| (v - 0.5).abs() < 1e-5));
        let i = compute_irradiance(&gray(0.5, 2, 2), &gray(0.25, 2, 2)).unwrap();
        assert!(i.data().iter().all(|&v| (v - 1.0).abs() < 1e-5));
        let i = compute_irradiance(&gray(0.0, 2, 2), &gray(0.4, 2, 2)).unwrap();
        assert!(i.data().iter().all(|&v| v == 0.0));
        let i = compute_irradiance(&gray(0.5, 2, 2), &gray(0.0, 2, 2)).unwrap();
        assert!(i.data().iter().all(|&v| v == 1.0));
        assert!(compute_irradiance(&gray(0.5, 2, 2), &gray(0.5, 2, 3)).is_err());
    }

    #[test]
    fn sky_mask_threshold_is_strict() {
        let px = |c: [f32; 3], d: f32| {
            let b = Tensor32::from_vec(&[3, 1, 1], c.to_vec()).unwrap();
            let d = Tensor32::from_vec(&[1, 1, 1], vec![d]).unwrap();
            compute_sky_mask(&b, &d).unwrap().data()[0]
        };
        assert_eq!(px([0.0; 3], 0.0), 1.0);
        assert_eq!(px([0.5, 0.2, 0.1], 0.0), 0.0);
        let below = 9.0 / 255.0;
        assert_eq!(px([below; 3], below), 1.0);
        assert_eq!(px([SKY_TAU, below, below], below), 0.0);
        assert_eq!(px([below; 3], SKY_TAU), 0.0);
    }

    #[test]
    fn apply_mask_cases() {
        let base = Tensor32::from_vec(&[3, 1, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let src = Tensor32::from_vec(&[3, 1, 2], vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4]).unwrap();
        let none = Tensor32::zeros(&[1, 1, 2]);
        assert_eq!(apply_sky_mask(&base, &none, &src).unwrap(), base);
        let all = Tensor32::full(&[1, 1, 2], 1.0);
        assert_eq!(apply_sky_mask(&base, &all, &src).unwrap(), src);
        let one = Tensor32::from_vec(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let out = apply_sky_mask(&base, &one, &src).unwrap();
        assert_eq!(out.data(), &[0.1, 0.8, 0.3, 0.6, 0.5, 0.4]);
        assert_eq!(apply_sky_mask(&out, &one, &src).unwrap(), out);
    }

    #[test]
    fn noise_zero_sigma_and_determinism() {
        let img = gray(0.5, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(inject_noise_with_sigma(&img, 0.0, &mut rng), img);
        let a = inject_noise(&img, &mut ChaCha8Rng::seed_from_u64(5));
        let b = inject_noise(&img, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn offset_single_frame_and_left_edge() {
        let d = OffsetDistribution::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            assert_eq!(d.sample(0, 1, &mut rng).unwrap(), 0);
            assert!(d.sample(0, 10, &mut rng).unwrap() >= 0);
            assert!(d.sample(9, 10, &mut rng).unwrap() <= 0);
        }
        assert!(d.sample(3, 3, &mut rng).is_err());
    }

    #[test]
    fn pack_layout() {
        let mut g = GBufferFrame::zeros(1, 1);
        g.normal = Tensor32::from_vec(&[3, 1, 1], vec![0.0, 0.0, 1.0]).unwrap();
        g.depth = Tensor32::full(&[1, 1, 1], 0.3);
        let irr = Tensor32::zeros(&[1, 1, 1]);
        let c = pack_control(&g, &g.basecolor, &irr).unwrap();
        assert_eq!(&c.tensor().data()[3..6], &[0.5, 0.5, 1.0]);
        assert_eq!(c.tensor().data()[6], 0.3);
        assert_eq!(c.tensor().data()[9], 0.0);
    }
}
