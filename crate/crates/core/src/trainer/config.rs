use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoiser::ParamGroup;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IrradianceMode {
    Black,
    Computed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            _ => Err(Error::Invalid(format!("unknown preset `{s}`"))),
        }
    }
}

/// Ablation axes. `NoSelfCondNoise` drops noise injection and
/// self-conditioning; `NoIrradiance` keeps the irradiance channel black.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSelfCondNoise,
    NoIrradiance,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoSelfCondNoise, Variant::NoIrradiance];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSelfCondNoise => "no_sc_ni",
            Variant::NoIrradiance => "no_irradiance",
        }
    }

    /// Whether inference should feed the computed irradiance.
    pub fn irradiance(self) -> bool {
        self != Variant::NoIrradiance
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown variant `{s}`")))
    }
}

/// One training stage. Stage 0 pretrains the base alone; 1 trains the control
/// branch with black irradiance; 2 adds adapters, the previous frame,
/// computed irradiance and noise injection; 3 adds self-conditioning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub micro_batch: usize,
    pub accumulation: usize,
    pub max_grad_norm: f64,
    pub irradiance: IrradianceMode,
    pub noise_injection: bool,
    /// Fixed noise scale instead of the uniform draw.
    pub noise_sigma: Option<f64>,
    pub self_cond_prob: f64,
    /// Steps between regenerations of the self-conditioning cache.
    pub self_cond_refresh: u64,
    /// Length of the recursive generation chains in the cache.
    pub self_cond_horizon: usize,
    pub sampler_steps: usize,
}

impl StageConfig {
    pub fn preset(stage: u8, preset: Preset) -> Result<Self> {
        let (steps, lr) = match (preset, stage) {
            (Preset::Desk, 0) => (2000, 1e-3),
            (Preset::Desk, 1) => (2000, 1e-3),
            (Preset::Desk, 2) => (500, 3e-4),
            (Preset::Desk, 3) => (1500, 3e-4),
            (Preset::Paper, 0) => (40_000, 2e-5),
            (Preset::Paper, 1) => (40_000, 2e-5),
            (Preset::Paper, 2) => (10_000, 6e-6),
            (Preset::Paper, 3) => (30_000, 1.8e-6),
            _ => return Err(Error::Invalid(format!("no stage {stage}"))),
        };
        Ok(Self {
            stage,
            steps,
            lr,
            weight_decay: 1e-2,
            micro_batch: 2,
            accumulation: 4,
            max_grad_norm: 1.0,
            irradiance: if stage >= 2 { IrradianceMode::Computed } else { IrradianceMode::Black },
            noise_injection: stage >= 2,
            noise_sigma: None,
            self_cond_prob: if stage == 3 { 0.5 } else { 0.0 },
            self_cond_refresh: 200,
            self_cond_horizon: 16,
            sampler_steps: crate::denoiser::DEFAULT_SAMPLER_STEPS,
        })
    }

    pub fn desk(stage: u8) -> Result<Self> {
        Self::preset(stage, Preset::Desk)
    }

    pub fn with_steps(mut self, steps: u64) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    /// Applies an ablation to a stage-2/3 config.
    pub fn for_variant(mut self, variant: Variant) -> Self {
        if self.stage >= 2 {
            match variant {
                Variant::Full => {}
                Variant::NoSelfCondNoise => {
                    self.noise_injection = false;
                    self.self_cond_prob = 0.0;
                }
                Variant::NoIrradiance => self.irradiance = IrradianceMode::Black,
            }
        }
        self
    }

    pub fn trainable(&self) -> Vec<ParamGroup> {
        match self.stage {
            0 => vec![ParamGroup::Base],
            1 => vec![ParamGroup::Control],
            _ => vec![ParamGroup::Control, ParamGroup::Lora],
        }
    }

    pub fn uses_control(&self) -> bool {
        self.stage >= 1
    }

    pub fn uses_prev_frame(&self) -> bool {
        self.stage >= 2
    }

    pub fn batch_size(&self) -> usize {
        self.micro_batch * self.accumulation
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage > 3 {
            return Err(Error::Invalid(format!("no stage {}", self.stage)));
        }
        if self.micro_batch == 0 || self.accumulation == 0 || self.max_grad_norm <= 0.0 || self.lr < 0.0 {
            return Err(Error::Invalid("batch sizes and clip norm must be positive, lr non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.self_cond_prob) {
            return Err(Error::Invalid("self-conditioning probability outside [0,1]".into()));
        }
        if self.self_cond_prob > 0.0 && (self.stage != 3 || self.self_cond_refresh == 0 || self.self_cond_horizon == 0) {
            return Err(Error::Invalid("self-conditioning needs stage 3 and positive refresh and horizon".into()));
        }
        if self.stage == 1 && self.irradiance != IrradianceMode::Black {
            return Err(Error::Invalid("stage 1 trains with black irradiance".into()));
        }
        Ok(())
    }
}
