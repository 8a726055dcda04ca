//! Staged training: base pretraining, control branch with black irradiance,
//! adapters with the previous frame and noise injection, then
//! self-conditioning on generated frames.

mod config;
mod state;

pub use config::{IrradianceMode, Preset, StageConfig, Variant};
pub use state::{TrainManifest, TRAIN_STATE_VERSION};

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{backward, Var};
use crate::conditioning::{
    apply_sky_mask, build_control, compute_irradiance, compute_sky_mask, inject_noise, inject_noise_with_sigma,
    pack_control, ControlStack, OffsetDistribution,
};
use crate::denoiser::{q_sample_batch, to_model_range, ModelBundle32, ModelConfig};
use crate::error::{Error, Result};
use crate::ops;
use crate::optim::{clip_global_norm, AdamW, LrSchedule};
use crate::scene::{Dataset, GBufferFrame};
use crate::seed::derive_seed;
use crate::tensor::Tensor32;

/// One supervised pair: the target frame and everything it is conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub index: usize,
    pub offset: i64,
    /// Ground-truth frame at `index`, `[3,H,W]` in `[0,1]`.
    pub target: Tensor32,
    /// Conditioning frame after noise injection, `[3,H,W]` in `[0,1]`.
    pub prev: Tensor32,
    pub control: ControlStack,
    /// Whether `prev` came from the self-conditioning cache.
    pub generated: bool,
}

impl TrainingExample {
    pub fn prev_index(&self) -> usize {
        (self.index as i64 + self.offset) as usize
    }
}

fn perturb<R: Rng + ?Sized>(frame: &Tensor32, cfg: &StageConfig, rng: &mut R) -> Tensor32 {
    match (cfg.noise_injection, cfg.noise_sigma) {
        (false, _) => frame.clone(),
        (true, Some(s)) => inject_noise_with_sigma(frame, s, rng),
        (true, None) => inject_noise(frame, rng),
    }
}

/// Control stack for target `frames[index]` conditioned on `prev`, which
/// stands in for frame `prev_index`. The sky source is the target frame.
fn assemble(frames: &[GBufferFrame], index: usize, prev_index: usize, prev: &Tensor32, cfg: &StageConfig) -> Result<ControlStack> {
    let g = &frames[index];
    let mask = compute_sky_mask(&g.basecolor, &g.depth)?;
    let masked = apply_sky_mask(&g.basecolor, &mask, &g.rgb)?;
    let irr = match cfg.irradiance {
        IrradianceMode::Black => Tensor32::zeros(&[1, g.height(), g.width()]),
        IrradianceMode::Computed => compute_irradiance(prev, &frames[prev_index].basecolor)?,
    };
    pack_control(g, &masked, &irr)
}

pub fn make_example<R: Rng + ?Sized>(
    dataset: &Dataset,
    index: usize,
    cfg: &StageConfig,
    offsets: &OffsetDistribution,
    rng: &mut R,
) -> Result<TrainingExample> {
    let n = dataset.len();
    if index >= n {
        return Err(Error::Invalid(format!("example index {index} outside a {n}-frame dataset")));
    }
    let offset = offsets.sample(index, n, rng)?;
    let j = (index as i64 + offset) as usize;
    let prev = perturb(&dataset.frames[j].rgb, cfg, rng);
    let control = assemble(&dataset.frames, index, j, &prev, cfg)?;
    Ok(TrainingExample { index, offset, target: dataset.frames[index].rgb.clone(), prev, control, generated: false })
}

/// Generated frame per sequence position, produced without gradient
/// recording from a snapshot of the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfCondCache {
    pub refreshed_at: u64,
    pub frames: Vec<Tensor32>,
}

impl SelfCondCache {
    /// Recursive generation in chains of `cfg.self_cond_horizon` frames. Each
    /// chain starts from the ground truth just before it (frame 1 for the
    /// chain at 0) and then feeds on its own output, as at inference. Chains
    /// advance together as one batch.
    pub fn generate(bundle: &ModelBundle32, dataset: &Dataset, cfg: &StageConfig, seed: u64, step: u64) -> Result<Self> {
        let frames = &dataset.frames;
        let n = frames.len();
        let horizon = cfg.self_cond_horizon.max(1);
        let starts: Vec<usize> = (0..n).step_by(horizon).collect();
        let mut prev: Vec<(Tensor32, Tensor32)> = starts
            .iter()
            .map(|&s| {
                let k = if s == 0 { 1.min(n - 1) } else { s - 1 };
                (frames[k].rgb.clone(), frames[k].basecolor.clone())
            })
            .collect();
        let mut out = vec![Tensor32::zeros(&[0]); n];
        let irradiance = cfg.irradiance == IrradianceMode::Computed;
        for k in 0..horizon {
            let active: Vec<usize> = (0..starts.len()).filter(|&c| starts[c] + k < n).collect();
            if active.is_empty() {
                break;
            }
            let mut controls = Vec::with_capacity(active.len());
            let mut prevs = Vec::with_capacity(active.len());
            for &c in &active {
                let g = &frames[starts[c] + k];
                let (pf, pb) = &prev[c];
                controls.push(build_control(g, pf, pf, pb, irradiance)?.0);
                prevs.push(if bundle.lora_enabled { to_model_range(pf) } else { Tensor32::zeros(pf.shape()) });
            }
            let control = Tensor32::stack(&controls.iter().collect::<Vec<_>>())?;
            let prev_in = Tensor32::stack(&prevs.iter().collect::<Vec<_>>())?;
            let sample_seed = derive_seed(&[seed, cfg.stage as u64, step, k as u64, 0x5c]);
            let batch = bundle.sample(Some(&control), &prev_in, cfg.sampler_steps, sample_seed)?;
            let (h, w) = (dataset.height(), dataset.width());
            for (b, &c) in active.iter().enumerate() {
                let frame = batch.narrow0(b, 1)?.reshape(&[3, h, w])?;
                let j = starts[c] + k;
                prev[c] = (frame.clone(), frames[j].basecolor.clone());
                out[j] = frame;
            }
        }
        Ok(Self { refreshed_at: step, frames: out })
    }
}

/// With probability `cfg.self_cond_prob`, swaps the example's conditioning
/// frame for the cached generated frame at the same position. Noise
/// injection and irradiance are reapplied to the generated frame.
pub fn self_condition<R: Rng + ?Sized>(
    example: TrainingExample,
    dataset: &Dataset,
    cfg: &StageConfig,
    cache: &SelfCondCache,
    rng: &mut R,
) -> Result<TrainingExample> {
    if cfg.self_cond_prob <= 0.0 || !rng.gen_bool(cfg.self_cond_prob.min(1.0)) {
        return Ok(example);
    }
    let j = example.prev_index();
    let generated = cache
        .frames
        .get(j)
        .filter(|f| !f.is_empty())
        .ok_or_else(|| Error::Invalid(format!("self-conditioning cache has no frame {j}")))?;
    let prev = perturb(generated, cfg, rng);
    let control = assemble(&dataset.frames, example.index, j, &prev, cfg)?;
    Ok(TrainingExample { prev, control, generated: true, ..example })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub stage: u8,
    pub lr: f64,
    pub loss: f64,
}

/// Loss log as CSV with columns `step,stage,lr,loss`.
pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    for r in records {
        w.serialize(r).map_err(|e| Error::Invalid(format!("writing {}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Model, optimizer and progress through one stage.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub bundle: ModelBundle32,
    pub optimizer: AdamW<f32>,
    pub config: StageConfig,
    pub seed: u64,
    /// Steps completed in the current stage.
    pub step: u64,
    pub history: Vec<LossRecord>,
    pub cache: Option<SelfCondCache>,
    pub offsets: OffsetDistribution,
    schedule: LrSchedule,
}

impl TrainState {
    /// Prepares `bundle` for `cfg.stage`. Stages run strictly in order.
    pub fn begin(mut bundle: ModelBundle32, cfg: StageConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let expected = cfg.stage.checked_sub(1);
        if bundle.completed_stage != expected {
            return Err(Error::StageOrder(format!(
                "stage {} needs {}, checkpoint has {}",
                cfg.stage,
                expected.map_or("a fresh model".to_string(), |s| format!("stage {s} completed")),
                bundle.completed_stage.map_or("no completed stage".to_string(), |s| format!("stage {s} completed")),
            )));
        }
        if cfg.stage == 1 {
            bundle.init_control_from_base()?;
        }
        bundle.control_enabled = cfg.uses_control();
        bundle.lora_enabled = cfg.uses_prev_frame();
        let optimizer = AdamW::new(cfg.lr).with_weight_decay(cfg.weight_decay);
        Self::assemble(bundle, optimizer, cfg, seed, 0, Vec::new(), None)
    }

    fn assemble(
        mut bundle: ModelBundle32,
        optimizer: AdamW<f32>,
        config: StageConfig,
        seed: u64,
        step: u64,
        history: Vec<LossRecord>,
        cache: Option<SelfCondCache>,
    ) -> Result<Self> {
        bundle.set_trainable_groups(&config.trainable());
        let schedule = LrSchedule::new(config.lr, 0.0, config.steps)?;
        Ok(Self { bundle, optimizer, config, seed, step, history, cache, offsets: OffsetDistribution::default(), schedule })
    }

    pub fn stage(&self) -> u8 {
        self.config.stage
    }

    pub fn is_complete(&self) -> bool {
        self.step >= self.config.steps
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    fn step_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, self.config.stage as u64, self.step]))
    }

    /// Regenerates the self-conditioning cache when the refresh interval
    /// comes due.
    fn refresh_cache(&mut self, dataset: &Dataset) -> Result<()> {
        let cfg = &self.config;
        if cfg.self_cond_prob > 0.0 && self.step.is_multiple_of(cfg.self_cond_refresh) {
            self.cache = Some(SelfCondCache::generate(&self.bundle, dataset, cfg, self.seed, self.step)?);
        }
        Ok(())
    }

    /// Builds the micro-batches for the current step.
    pub fn examples(&self, dataset: &Dataset, rng: &mut ChaCha8Rng) -> Result<Vec<TrainingExample>> {
        let n = dataset.len();
        let mut out = Vec::with_capacity(self.config.batch_size());
        for _ in 0..self.config.batch_size() {
            let ex = make_example(dataset, rng.gen_range(0..n), &self.config, &self.offsets, rng)?;
            out.push(match &self.cache {
                Some(cache) => self_condition(ex, dataset, &self.config, cache, rng)?,
                None => ex,
            });
        }
        Ok(out)
    }

    /// Forward and backward over one micro-batch; gradients accumulate in the
    /// bundle's parameters, scaled by `grad_scale`. Returns the unscaled loss.
    pub fn accumulate(&mut self, batch: &[TrainingExample], grad_scale: f32, rng: &mut ChaCha8Rng) -> Result<f64> {
        let t_max = self.bundle.schedule.steps;
        let ts: Vec<usize> = batch.iter().map(|_| rng.gen_range(0..t_max)).collect();
        let targets: Vec<Tensor32> = batch.iter().map(|e| to_model_range(&e.target)).collect();
        let x0 = Tensor32::stack(&targets.iter().collect::<Vec<_>>())?;
        let eps = Tensor32::randn(x0.shape(), rng);
        let x_t = q_sample_batch(&self.bundle.schedule, &x0, &ts, &eps)?;
        let prev = if self.bundle.lora_enabled {
            let p: Vec<Tensor32> = batch.iter().map(|e| to_model_range(&e.prev)).collect();
            Tensor32::stack(&p.iter().collect::<Vec<_>>())?
        } else {
            Tensor32::zeros(x0.shape())
        };
        let control = if self.bundle.control_enabled {
            let c: Vec<&Tensor32> = batch.iter().map(|e| e.control.tensor()).collect();
            Some(Var::constant(Tensor32::stack(&c)?))
        } else {
            None
        };
        let pred = self.bundle.predict_eps(&Var::constant(x_t), &ts, &Var::constant(prev), control.as_ref(), true)?;
        let loss = ops::mse(&pred, &Var::constant(eps))?;
        let value = loss.value().data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at stage {} step {} (lr {:e})",
                self.config.stage,
                self.step,
                self.lr()
            )));
        }
        backward(&ops::scale(&loss, grad_scale), &mut self.bundle.params)?;
        Ok(value)
    }

    /// One optimizer step over `micro_batch x accumulation` examples.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::Invalid("training dataset is empty".into()));
        }
        if self.is_complete() {
            return Err(Error::Invalid(format!("stage {} already ran its {} steps", self.config.stage, self.config.steps)));
        }
        self.refresh_cache(dataset)?;
        let mut rng = self.step_rng();
        let examples = self.examples(dataset, &mut rng)?;
        let lr = self.lr();
        self.bundle.params.zero_grad();
        let accumulation = self.config.accumulation;
        let mut total = 0.0;
        for micro in examples.chunks(self.config.micro_batch) {
            total += self.accumulate(micro, 1.0 / accumulation as f32, &mut rng)?;
        }
        let ids = self.bundle.params.trainable_ids();
        clip_global_norm(&mut self.bundle.params, &ids, self.config.max_grad_norm)?;
        self.optimizer.lr = lr;
        self.optimizer.step(&mut self.bundle.params)?;
        self.bundle.params.zero_grad();
        let loss = total / accumulation as f64;
        self.history.push(LossRecord { step: self.step, stage: self.config.stage, lr, loss });
        self.step += 1;
        if self.is_complete() {
            self.bundle.completed_stage = Some(self.config.stage);
        }
        Ok(loss)
    }

    /// Runs until the stage completes or `limit` total steps are done.
    pub fn run_until(&mut self, dataset: &Dataset, limit: u64) -> Result<()> {
        while !self.is_complete() && self.step < limit {
            self.train_step(dataset)?;
        }
        Ok(())
    }

    /// Runs to completion, saving the state into `dir` every `every` steps
    /// and at the end.
    pub fn run_with_checkpoints(&mut self, dataset: &Dataset, dir: &Path, every: u64) -> Result<()> {
        while !self.is_complete() {
            self.train_step(dataset)?;
            if every > 0 && self.step.is_multiple_of(every) && !self.is_complete() {
                self.save(dir)?;
            }
        }
        self.save(dir)
    }

    pub fn into_bundle(self) -> ModelBundle32 {
        self.bundle
    }
}

/// Runs a whole stage on `bundle`.
pub fn run_stage(bundle: ModelBundle32, cfg: StageConfig, dataset: &Dataset, seed: u64) -> Result<TrainState> {
    let mut state = TrainState::begin(bundle, cfg, seed)?;
    state.run_until(dataset, u64::MAX)?;
    Ok(state)
}

/// Stage 0: the base UNet alone as an unconditional denoiser of the
/// dataset's frames. Control and adapters keep their initial values.
pub fn pretrain_base(dataset: &Dataset, config: ModelConfig, steps: u64, seed: u64) -> Result<TrainState> {
    if dataset.is_empty() {
        return Err(Error::Invalid("cannot pretrain on an empty dataset".into()));
    }
    let bundle = ModelBundle32::new(config, seed)?;
    run_stage(bundle, StageConfig::desk(0)?.with_steps(steps), dataset, seed)
}
