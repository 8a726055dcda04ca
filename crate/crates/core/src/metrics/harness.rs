use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{DriftCurve, MetricReport, DRIFT_WINDOW};
use crate::denoiser::ModelBundle32;
use crate::engine::{Engine, EngineOptions};
use crate::error::{Error, Result};
use crate::scene::{GBufferFrame, PaletteFamily};

/// Scored rollout over `frames[1..=n]`, initialized from the ground truth of
/// `frames[0]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceEval {
    pub teacher_forced: bool,
    pub report: MetricReport,
    pub drift: DriftCurve,
    pub millis: Vec<f64>,
}

pub fn evaluate_sequence(
    bundle: Arc<ModelBundle32>,
    frames: &[GBufferFrame],
    n: usize,
    options: EngineOptions,
) -> Result<SequenceEval> {
    if n == 0 || frames.len() <= n {
        return Err(Error::Invalid(format!("need {} frames for an {n}-frame rollout, have {}", n + 1, frames.len())));
    }
    check_resolution(&bundle, &frames[0])?;
    let mut engine = Engine::new(bundle, options);
    engine.init(&frames[0].rgb, &frames[0].basecolor)?;
    let out = engine.rollout(&frames[1..=n], true)?;
    let report = MetricReport::from_series(out.psnr, out.ssim);
    Ok(SequenceEval {
        teacher_forced: options.teacher_forced,
        drift: DriftCurve::from_report(&report, DRIFT_WINDOW),
        report,
        millis: out.millis,
    })
}

fn check_resolution(bundle: &ModelBundle32, frame: &GBufferFrame) -> Result<()> {
    let (h, w) = (bundle.config.height, bundle.config.width);
    if frame.height() != h || frame.width() != w {
        return Err(Error::Shape(format!(
            "model is {w}x{h}, frames are {}x{}",
            frame.width(),
            frame.height()
        )));
    }
    Ok(())
}

pub struct AblationConfig {
    pub label: String,
    pub bundle: Arc<ModelBundle32>,
    pub irradiance: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationEntry {
    pub label: String,
    pub report: MetricReport,
    pub drift: DriftCurve,
    /// Signed difference to the reference config (entry minus reference).
    pub delta_psnr: f64,
    pub delta_ssim: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationResult {
    pub reference: String,
    pub frames: usize,
    pub master_seed: u64,
    pub entries: Vec<AblationEntry>,
}

impl AblationResult {
    pub fn get(&self, label: &str) -> Option<&AblationEntry> {
        self.entries.iter().find(|e| e.label == label)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        for e in &self.entries {
            w.serialize(AblationRow {
                label: &e.label,
                mean_psnr: e.report.mean_psnr,
                mean_ssim: e.report.mean_ssim,
                delta_psnr: e.delta_psnr,
                delta_ssim: e.delta_ssim,
            })
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize)]
struct AblationRow<'a> {
    label: &'a str,
    mean_psnr: f64,
    mean_ssim: f64,
    delta_psnr: f64,
    delta_ssim: f64,
}

/// Paired autoregressive rollouts: every config sees the same frames, the
/// same initial frame and the same master seed. The first config is the
/// reference for deltas.
pub fn run_ablation(
    configs: &[AblationConfig],
    frames: &[GBufferFrame],
    n: usize,
    master_seed: u64,
) -> Result<AblationResult> {
    let first = configs.first().ok_or_else(|| Error::Invalid("ablation needs at least one config".into()))?;
    let (h, w) = (first.bundle.config.height, first.bundle.config.width);
    if let Some(c) = configs.iter().find(|c| (c.bundle.config.height, c.bundle.config.width) != (h, w)) {
        return Err(Error::Shape(format!("config `{}` resolution differs from `{}`", c.label, first.label)));
    }
    let mut entries: Vec<AblationEntry> = Vec::with_capacity(configs.len());
    for c in configs {
        let options = EngineOptions { master_seed, irradiance: c.irradiance, ..EngineOptions::default() };
        let eval = evaluate_sequence(c.bundle.clone(), frames, n, options)?;
        entries.push(AblationEntry {
            label: c.label.clone(),
            report: eval.report,
            drift: eval.drift,
            delta_psnr: 0.0,
            delta_ssim: 0.0,
        });
    }
    let (rp, rs) = (entries[0].report.mean_psnr, entries[0].report.mean_ssim);
    for e in &mut entries {
        e.delta_psnr = e.report.mean_psnr - rp;
        e.delta_ssim = e.report.mean_ssim - rs;
    }
    Ok(AblationResult { reference: first.label.clone(), frames: n, master_seed, entries })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OodReport {
    pub train_family: PaletteFamily,
    pub eval_family: PaletteFamily,
    pub report: MetricReport,
    pub drift: DriftCurve,
    /// Smoothed PSNR at the first frame minus at the last.
    pub early_late_delta: f64,
}

impl OodReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Autoregressive rollout of a model trained on `train_family` over frames
/// of another family.
pub fn ood_eval(
    bundle: Arc<ModelBundle32>,
    train_family: PaletteFamily,
    eval_family: PaletteFamily,
    frames: &[GBufferFrame],
    n: usize,
    options: EngineOptions,
) -> Result<OodReport> {
    if train_family == eval_family {
        return Err(Error::Invalid("out-of-distribution eval needs two different families".into()));
    }
    let eval = evaluate_sequence(bundle, frames, n, EngineOptions { teacher_forced: false, ..options })?;
    let s = &eval.drift.psnr_smoothed;
    Ok(OodReport {
        train_family,
        eval_family,
        early_late_delta: s[0] - s[s.len() - 1],
        report: eval.report,
        drift: eval.drift,
    })
}

/// Per-frame series as CSV: `frame,psnr,ssim,psnr_smoothed,ssim_smoothed`.
pub fn write_drift_csv(path: &Path, drift: &DriftCurve) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["frame", "psnr", "ssim", "psnr_smoothed", "ssim_smoothed"]).map_err(|e| csv_error(path, e))?;
    for i in 0..drift.len() {
        w.serialize((i, drift.psnr[i], drift.ssim[i], drift.psnr_smoothed[i], drift.ssim_smoothed[i]))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Invalid(format!("writing {}: {e}", path.display()))
}
