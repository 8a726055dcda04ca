//! Pixel-space ε-prediction UNet with a zero-initialized control branch,
//! low-rank adapters on every base conv/linear layer, and a DDIM sampler.

mod checkpoint;
mod model;
mod schedule;

pub use checkpoint::{load_bundle, read_manifest, save_bundle, CheckpointManifest, ParamEntry, CHECKPOINT_VERSION};
pub use model::{timestep_embedding, ForwardFlags, Layout, ModelConfig, BASE_IN_CHANNELS, CONTROL_IN_CHANNELS, FRAME_CHANNELS};
pub use schedule::{
    ddim_step, ddim_step_with, make_schedule, predict_x0, q_sample, q_sample_batch, q_sample_with, NoiseSchedule,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLER_STEPS: usize = 10;

/// Parameter groups, by name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Base,
    Control,
    Lora,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        if name.starts_with("base.") {
            Some(Self::Base)
        } else if name.starts_with("ctrl.") {
            Some(Self::Control)
        } else if name.starts_with("lora.") {
            Some(Self::Lora)
        } else {
            None
        }
    }
}

/// Base UNet, control branch, adapters and noise schedule.
#[derive(Clone, Debug)]
pub struct ModelBundle<T: Scalar> {
    pub config: ModelConfig,
    pub schedule: NoiseSchedule,
    pub params: ParamStore<T>,
    layout: Layout,
    /// The control branch is required by `predict_eps` once set.
    pub control_enabled: bool,
    /// Adapter deltas are added to base weights once set.
    pub lora_enabled: bool,
    /// Last training stage completed on these weights.
    pub completed_stage: Option<u8>,
}

pub type ModelBundle32 = ModelBundle<f32>;
pub type ModelBundle64 = ModelBundle<f64>;

impl<T: Scalar> ModelBundle<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_schedule(config, NoiseSchedule::default(), seed)
    }

    pub fn with_schedule(config: ModelConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut params, &mut rng)?;
        Ok(Self { config, schedule, params, layout, control_enabled: false, lora_enabled: false, completed_stage: None })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.params.iter().filter(|(_, p)| ParamGroup::of(&p.name) == Some(group)).map(|(id, _)| id).collect()
    }

    /// Marks exactly the given groups trainable.
    pub fn set_trainable_groups(&mut self, groups: &[ParamGroup]) {
        self.params.set_trainable_where(|name| ParamGroup::of(name).is_some_and(|g| groups.contains(&g)));
    }

    /// Copies base encoder weights into the control encoder.
    pub fn init_control_from_base(&mut self) -> Result<()> {
        let pairs: Vec<(ParamId, ParamId)> = self
            .params
            .iter()
            .filter_map(|(id, p)| {
                let suffix = p.name.strip_prefix("ctrl.enc.")?;
                Some((self.params.id(&format!("base.enc.{suffix}"))?, id))
            })
            .collect();
        if pairs.is_empty() {
            return Err(Error::Invalid("control encoder has no counterpart in the base".into()));
        }
        for (src, dst) in pairs {
            let v = self.params.value(src).clone();
            self.params.set_value(dst, v)?;
        }
        Ok(())
    }

    /// ε prediction. `x_t`, `prev`: `[N,3,H,W]` in `[-1,1]`; `control`:
    /// `[N,10,H,W]`. `record` builds a graph over trainable parameters.
    pub fn predict_eps(
        &self,
        x_t: &Var<T>,
        ts: &[usize],
        prev: &Var<T>,
        control: Option<&Var<T>>,
        record: bool,
    ) -> Result<Var<T>> {
        self.predict_eps_with(&self.params, x_t, ts, prev, control, record)
    }

    /// Same as [`Self::predict_eps`] with parameter values from `params`,
    /// which must share this bundle's layout.
    pub fn predict_eps_with(
        &self,
        params: &ParamStore<T>,
        x_t: &Var<T>,
        ts: &[usize],
        prev: &Var<T>,
        control: Option<&Var<T>>,
        record: bool,
    ) -> Result<Var<T>> {
        if self.control_enabled && control.is_none() {
            return Err(Error::Invalid("bundle expects a control stack".into()));
        }
        let flags = ForwardFlags { lora: self.lora_enabled, record };
        model::forward(&self.layout, &self.config, params, x_t, ts, prev, control, flags)
    }

    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        ModelBundle {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            control_enabled: self.control_enabled,
            lora_enabled: self.lora_enabled,
            completed_stage: self.completed_stage,
        }
    }

    /// Deterministic DDIM sampling. `control` `[N,10,H,W]`, `prev` `[N,3,H,W]`
    /// in `[-1,1]`; returns frames in `[0,1]`.
    pub fn sample(&self, control: Option<&Tensor<T>>, prev: &Tensor<T>, n_steps: usize, seed: u64) -> Result<Tensor<T>> {
        let n = prev.dim(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::randn(prev.shape(), &mut rng);
        let ts = self.schedule.ddim_timesteps(n_steps)?;
        let prev_v = Var::constant(prev.clone());
        let control_v = control.map(|c| Var::constant(c.clone()));
        for pair in ts.windows(2) {
            let (t, t_prev) = (pair[0], pair[1]);
            let eps = self.predict_eps(&Var::constant(x.clone()), &vec![t; n], &prev_v, control_v.as_ref(), false)?;
            x = ddim_step(&x, eps.value(), t, t_prev, &self.schedule)?;
        }
        let half = T::from_f64_lossy(0.5);
        let out = x.map(|v| ((v + T::one()) * half).max(T::zero()).min(T::one()));
        out.ensure_finite("sampled frame")?;
        Ok(out)
    }

    /// Single-frame convenience over [`Self::sample`] for `[C,H,W]` inputs.
    pub fn sample_frame(&self, control: Option<&Tensor<T>>, prev: &Tensor<T>, n_steps: usize, seed: u64) -> Result<Tensor<T>> {
        let add_batch = |t: &Tensor<T>| {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.clone().reshape(&s)
        };
        let c = control.map(add_batch).transpose()?;
        let out = self.sample(c.as_ref(), &add_batch(prev)?, n_steps, seed)?;
        let shape = out.shape()[1..].to_vec();
        out.reshape(&shape)
    }
}

fn random_battery<T: Scalar>(cfg: &ModelConfig, n: usize, seed: u64) -> (Tensor<T>, Tensor<T>, Tensor<T>, Vec<usize>) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let x = Tensor::randn(&[n, FRAME_CHANNELS, h, w], &mut rng);
    let prev = Tensor::uniform(&[n, FRAME_CHANNELS, h, w], 1.0, &mut rng);
    let control = Tensor::uniform(&[n, cfg.control_channels, h, w], 0.5, &mut rng).map(|v| v + T::from_f64_lossy(0.5));
    let ts = (0..n).map(|_| rng.gen_range(0..1000usize)).collect();
    (x, prev, control, ts)
}

fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
}

/// Max |ε(control) − ε(control zeroed)| over a random input battery.
pub fn control_deviation<T: Scalar>(bundle: &ModelBundle<T>, seed: u64) -> Result<f64> {
    let (x, prev, control, ts) = random_battery::<T>(&bundle.config, 2, seed);
    let ts: Vec<usize> = ts.into_iter().map(|t| t.min(bundle.schedule.steps - 1)).collect();
    let (x, prev) = (Var::constant(x), Var::constant(prev));
    let zeros = Var::constant(Tensor::zeros(control.shape()));
    let a = bundle.predict_eps(&x, &ts, &prev, Some(&Var::constant(control)), false)?;
    let b = bundle.predict_eps(&x, &ts, &prev, Some(&zeros), false)?;
    Ok(max_abs_diff(a.value(), b.value()))
}

/// Max |ε(adapters on) − ε(adapters off)| over a random input battery.
pub fn lora_deviation<T: Scalar>(bundle: &ModelBundle<T>, seed: u64) -> Result<f64> {
    let (x, prev, control, ts) = random_battery::<T>(&bundle.config, 2, seed);
    let ts: Vec<usize> = ts.into_iter().map(|t| t.min(bundle.schedule.steps - 1)).collect();
    let (x, prev, control) = (Var::constant(x), Var::constant(prev), Var::constant(control));
    let mut on = bundle.clone();
    on.lora_enabled = true;
    let mut off = bundle.clone();
    off.lora_enabled = false;
    let a = on.predict_eps(&x, &ts, &prev, Some(&control), false)?;
    let b = off.predict_eps(&x, &ts, &prev, Some(&control), false)?;
    Ok(max_abs_diff(a.value(), b.value()))
}

/// Largest of [`control_deviation`] and [`lora_deviation`]; exactly zero for
/// a freshly initialized bundle.
pub fn zero_init_verify<T: Scalar>(bundle: &ModelBundle<T>, seed: u64) -> Result<f64> {
    Ok(control_deviation(bundle, seed)?.max(lora_deviation(bundle, seed)?))
}

/// Frame in `[0,1]` to model range `[-1,1]`.
pub fn to_model_range<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let two = T::from_f64_lossy(2.0);
    t.map(|v| v * two - T::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::new(16, 16, 8).with_lora_rank(2)
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.in_channels = 7;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.height = 18;
        assert!(c.validate().is_err());
        assert!(ModelConfig::new(16, 16, 12).validate().is_err());
        tiny().validate().unwrap();
    }

    #[test]
    fn names_are_grouped() {
        let b = ModelBundle::<f32>::new(tiny(), 0).unwrap();
        assert!(b.params.iter().all(|(_, p)| ParamGroup::of(&p.name).is_some()));
        assert!(!b.group_ids(ParamGroup::Lora).is_empty());
        assert!(!b.group_ids(ParamGroup::Control).is_empty());
    }

    #[test]
    fn control_copy_matches_base() {
        let mut b = ModelBundle::<f32>::new(tiny(), 0).unwrap();
        b.init_control_from_base().unwrap();
        let base = b.params.id("base.enc.down1.res0.conv1.weight").unwrap();
        let ctrl = b.params.id("ctrl.enc.down1.res0.conv1.weight").unwrap();
        assert_eq!(b.params.value(base), b.params.value(ctrl));
    }

    #[test]
    fn missing_control_is_rejected() {
        let mut b = ModelBundle::<f32>::new(tiny(), 0).unwrap();
        b.control_enabled = true;
        let x = Var::constant(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(b.predict_eps(&x, &[3], &x, None, false).is_err());
    }

    #[test]
    fn sample_shapes_and_range() {
        let b = ModelBundle::<f32>::new(tiny(), 1).unwrap();
        let prev = Tensor::zeros(&[3, 16, 16]);
        let c = Tensor::zeros(&[10, 16, 16]);
        let one = b.sample_frame(Some(&c), &prev, 1, 3).unwrap();
        assert_eq!(one.shape(), &[3, 16, 16]);
        assert!(one.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
