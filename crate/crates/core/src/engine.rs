//! Autoregressive inference loop: each generated frame becomes the previous
//! frame (and irradiance source) for the next.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conditioning::{build_control, ControlStack};
use crate::denoiser::{to_model_range, ModelBundle32, DEFAULT_SAMPLER_STEPS};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::scene::GBufferFrame;
use crate::seed::derive_seed;
use crate::tensor::Tensor32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineOptions {
    pub master_seed: u64,
    pub irradiance: bool,
    pub teacher_forced: bool,
    pub sampler_steps: usize,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self { master_seed: 0, irradiance: true, teacher_forced: false, sampler_steps: DEFAULT_SAMPLER_STEPS }
    }
}

/// Everything carried from one frame to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct EngineState {
    pub prev_frame: Tensor32,
    pub prev_basecolor: Tensor32,
    pub counter: u64,
}

impl EngineState {
    pub fn init(frame0: &Tensor32, basecolor0: &Tensor32) -> Result<Self> {
        if frame0.shape().len() != 3 || frame0.dim(0) != 3 {
            return Err(Error::Shape(format!("initial frame must be [3,H,W], got {:?}", frame0.shape())));
        }
        basecolor0.expect_shape(frame0.shape())?;
        for (t, what) in [(frame0, "initial frame"), (basecolor0, "initial basecolor")] {
            t.ensure_finite(what)?;
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Invalid(format!("{what} has values outside [0,1]")));
            }
        }
        Ok(Self { prev_frame: frame0.clone(), prev_basecolor: basecolor0.clone(), counter: 0 })
    }
}

/// One conditioned sampling call: controls from `gbuffer`, sky source and
/// irradiance from the previous frame.
pub fn generate_frame(
    bundle: &ModelBundle32,
    gbuffer: &GBufferFrame,
    prev_frame: &Tensor32,
    prev_basecolor: &Tensor32,
    irradiance: bool,
    sampler_steps: usize,
    seed: u64,
) -> Result<(Tensor32, ControlStack)> {
    let control = build_control(gbuffer, prev_frame, prev_frame, prev_basecolor, irradiance)?;
    let prev_in = if bundle.lora_enabled { to_model_range(prev_frame) } else { Tensor32::zeros(prev_frame.shape()) };
    let frame = bundle.sample_frame(Some(control.tensor()), &prev_in, sampler_steps, seed)?;
    Ok((frame, control))
}

pub struct StepOutput {
    pub frame: Tensor32,
    pub control: ControlStack,
    pub millis: f64,
}

#[derive(Clone)]
pub struct Engine {
    pub bundle: Arc<ModelBundle32>,
    pub options: EngineOptions,
    state: Option<EngineState>,
}

impl Engine {
    pub fn new(bundle: Arc<ModelBundle32>, options: EngineOptions) -> Self {
        Self { bundle, options, state: None }
    }

    pub fn state(&self) -> Option<&EngineState> {
        self.state.as_ref()
    }

    pub fn init(&mut self, frame0: &Tensor32, basecolor0: &Tensor32) -> Result<()> {
        self.state = Some(EngineState::init(frame0, basecolor0)?);
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        self.state.is_some()
    }

    /// Generates the next frame. In teacher-forced mode the state advances
    /// to `gbuffer.rgb`; otherwise `gbuffer.rgb` is never read.
    pub fn step(&mut self, gbuffer: &GBufferFrame) -> Result<StepOutput> {
        let state = self.state.as_mut().ok_or_else(|| Error::Invalid("engine stepped before init".into()))?;
        if gbuffer.basecolor.shape() != state.prev_frame.shape() {
            return Err(Error::Shape(format!(
                "G-buffer {:?} does not match engine frames {:?}",
                gbuffer.basecolor.shape(),
                state.prev_frame.shape()
            )));
        }
        let start = Instant::now();
        let seed = derive_seed(&[self.options.master_seed, state.counter]);
        let (frame, control) = generate_frame(
            &self.bundle,
            gbuffer,
            &state.prev_frame,
            &state.prev_basecolor,
            self.options.irradiance,
            self.options.sampler_steps,
            seed,
        )?;
        state.prev_frame = if self.options.teacher_forced { gbuffer.rgb.clone() } else { frame.clone() };
        state.prev_basecolor = gbuffer.basecolor.clone();
        state.counter += 1;
        Ok(StepOutput { frame, control, millis: start.elapsed().as_secs_f64() * 1e3 })
    }

    /// Steps through `gbuffers`; metrics are computed against `gbuffers[i].rgb`
    /// when `score` is set.
    pub fn rollout(&mut self, gbuffers: &[GBufferFrame], score: bool) -> Result<RolloutReport> {
        if gbuffers.is_empty() {
            return Err(Error::Invalid("rollout needs at least one G-buffer".into()));
        }
        let mut report = RolloutReport::default();
        for g in gbuffers {
            let out = self.step(g)?;
            if score {
                report.psnr.push(psnr(&out.frame, &g.rgb)?);
                report.ssim.push(ssim(&out.frame, &g.rgb)?);
            }
            report.millis.push(out.millis);
            report.frames.push(out.frame);
        }
        Ok(report)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RolloutReport {
    pub frames: Vec<Tensor32>,
    pub millis: Vec<f64>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl RolloutReport {
    pub fn mean_psnr(&self) -> f64 {
        self.psnr.iter().sum::<f64>() / self.psnr.len().max(1) as f64
    }

    pub fn extend(&mut self, other: RolloutReport) {
        self.frames.extend(other.frames);
        self.millis.extend(other.millis);
        self.psnr.extend(other.psnr);
        self.ssim.extend(other.ssim);
    }
}
