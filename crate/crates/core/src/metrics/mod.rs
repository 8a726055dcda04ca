//! Image quality metrics, drift curves, and the ablation / OOD harnesses.

mod harness;
mod plot;

pub use harness::*;
pub use plot::{plot_curves, Series};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor32;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const DRIFT_WINDOW: usize = 16;

fn same_shape(a: &Tensor32, b: &Tensor32) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("metric inputs {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Tensor32, b: &Tensor32) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// `10 log10(1 / MSE)` for images in `[0,1]`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor32, b: &Tensor32) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filter of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            tmp[r * wo + c] = (0..n).map(|i| k[i] * plane[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..n).map(|i| k[i] * tmp[(r + i) * wo + c]).sum();
        }
    }
    out
}

/// Mean SSIM over channels, Gaussian 11x11 windows (σ = 1.5), valid region.
pub fn ssim(a: &Tensor32, b: &Tensor32) -> Result<f64> {
    same_shape(a, b)?;
    let (c, h, w) = match *a.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::Shape(format!("ssim expects [C,H,W], got {s:?}"))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim: {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let k = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &k));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// Trailing rolling mean: entry `i` averages `values[i+1-window ..= i]`.
pub fn rolling_mean(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_series(psnr: Vec<f64>, ssim: Vec<f64>) -> Self {
        Self { mean_psnr: mean(&psnr), mean_ssim: mean(&ssim), psnr, ssim }
    }

    pub fn evaluate(frames: &[Tensor32], gts: &[Tensor32]) -> Result<Self> {
        if frames.len() != gts.len() {
            return Err(Error::Shape(format!("{} frames vs {} ground-truth frames", frames.len(), gts.len())));
        }
        let mut p = Vec::with_capacity(frames.len());
        let mut s = Vec::with_capacity(frames.len());
        for (f, g) in frames.iter().zip(gts) {
            p.push(psnr(f, g)?);
            s.push(ssim(f, g)?);
        }
        Ok(Self::from_series(p, s))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftCurve {
    pub window: usize,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub psnr_smoothed: Vec<f64>,
    pub ssim_smoothed: Vec<f64>,
}

impl DriftCurve {
    pub fn from_report(report: &MetricReport, window: usize) -> Self {
        Self {
            window,
            psnr_smoothed: rolling_mean(&report.psnr, window),
            ssim_smoothed: rolling_mean(&report.ssim, window),
            psnr: report.psnr.clone(),
            ssim: report.ssim.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.psnr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psnr.is_empty()
    }
}

pub fn drift_curve(frames: &[Tensor32], gts: &[Tensor32]) -> Result<DriftCurve> {
    Ok(DriftCurve::from_report(&MetricReport::evaluate(frames, gts)?, DRIFT_WINDOW))
}
