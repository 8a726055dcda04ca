//! AdamW, cosine learning-rate schedule and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar> {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, weight_decay: 1e-2, betas: (0.9, 0.999), eps: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<&(Tensor<T>, Tensor<T>)> {
        self.moments.get(id).and_then(|m| m.as_ref())
    }

    /// Restores optimizer state from a checkpoint.
    pub fn restore(&mut self, step: u64, moments: Vec<Option<(Tensor<T>, Tensor<T>)>>) {
        self.step = step;
        self.moments = moments;
    }

    pub fn all_moments(&self) -> &[Option<(Tensor<T>, Tensor<T>)>] {
        &self.moments
    }

    /// One update of every trainable parameter.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        let ids = params.trainable_ids();
        for &id in &ids {
            if params.grad(id).is_none() {
                return Err(Error::MissingGrad(params.get(id).name.clone()));
            }
        }
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = T::from_f64_lossy(self.lr);
        let decay = T::one() - T::from_f64_lossy(self.lr * self.weight_decay);
        let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let (bc1, bc2) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2));
        let eps = T::from_f64_lossy(self.eps);
        for id in ids {
            let g = params.grad(id).expect("checked above").clone();
            let (m, v) = self.moments[id]
                .get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = params.value_mut(id);
            let pd = p.data_mut();
            for (((pi, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *pi *= decay;
                *mi = b1t * *mi + (T::one() - b1t) * gi;
                *vi = b2t * *vi + (T::one() - b2t) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(lr_max: f64, lr_min: f64, total_steps: u64) -> Result<Self> {
        if !(0.0..=lr_max).contains(&lr_min) {
            return Err(Error::Invalid(format!("need 0 <= lr_min ({lr_min}) <= lr_max ({lr_max})")));
        }
        Ok(Self { lr_max, lr_min, total_steps })
    }

    /// Steps outside `[0, total_steps]` clamp to the nearest endpoint.
    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.lr_min;
        }
        let s = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * s).cos())
    }
}

/// Global L2 norm over the gradients of the given parameters.
pub fn global_grad_norm<T: Scalar>(params: &ParamStore<T>, ids: &[ParamId]) -> f64 {
    ids.iter()
        .filter_map(|&id| params.grad(id))
        .map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(params: &mut ParamStore<T>, ids: &[ParamId], max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 || !max_norm.is_finite() {
        return Err(Error::Invalid(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = global_grad_norm(params, ids);
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for &id in ids {
            if let Some(g) = params.grad_mut(id) {
                g.scale_inplace(s);
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f32], grad: Option<&[f32]>) -> ParamStore<f32> {
        let mut ps = ParamStore::new();
        let id = ps.add("p", Tensor::from_vec(&[values.len()], values.to_vec()).unwrap()).unwrap();
        if let Some(g) = grad {
            ps.accumulate_grad(id, &Tensor::from_vec(&[g.len()], g.to_vec()).unwrap()).unwrap();
        }
        ps
    }

    #[test]
    fn zero_grad_applies_pure_decay() {
        let mut ps = store(&[1.0, -2.0, 0.5], Some(&[0.0, 0.0, 0.0]));
        let mut opt = AdamW::<f32>::new(1e-3).with_weight_decay(0.01);
        opt.step(&mut ps).unwrap();
        let f = 1.0f32 - 1e-5;
        assert_eq!(ps.value(0).data(), &[1.0 * f, -2.0 * f, 0.5 * f]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut ps = store(&[0.0, 0.0], Some(&[3.0, -0.2]));
        let mut opt = AdamW::<f32>::new(1e-3).with_weight_decay(0.0);
        opt.step(&mut ps).unwrap();
        let p = ps.value(0).data();
        assert!((p[0] + 1e-3).abs() < 1e-8);
        assert!((p[1] - 1e-3).abs() < 1e-8);
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let vals = [0.3f32, -7.25, 1e-3];
        let mut ps = store(&vals, Some(&[1.0, 2.0, -3.0]));
        let mut opt = AdamW::<f32>::new(0.0);
        opt.step(&mut ps).unwrap();
        assert_eq!(ps.value(0).data(), &vals);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut ps = store(&[1.0], None);
        let mut opt = AdamW::<f32>::new(1e-3);
        assert!(matches!(opt.step(&mut ps), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = LrSchedule::new(1e-3, 1e-5, 100).unwrap();
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(100) - 1e-5).abs() < 1e-18);
        assert!((s.lr(50) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert_eq!(s.lr(500), s.lr(100));
        for k in 0..100 {
            assert!(s.lr(k + 1) <= s.lr(k));
        }
    }

    #[test]
    fn clipping() {
        let mut ps = store(&[0.0; 2], Some(&[0.3, 0.4]));
        assert!((clip_global_norm(&mut ps, &[0], 1.0).unwrap() - 0.5).abs() < 1e-7);
        assert_eq!(ps.grad(0).unwrap().data(), &[0.3, 0.4]);

        let mut ps = store(&[0.0; 2], Some(&[1.2, 1.6]));
        assert!((clip_global_norm(&mut ps, &[0], 1.0).unwrap() - 2.0).abs() < 1e-6);
        let g = ps.grad(0).unwrap().data();
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);

        let mut ps = store(&[0.0; 2], Some(&[0.0, 0.0]));
        assert_eq!(clip_global_norm(&mut ps, &[0], 1.0).unwrap(), 0.0);
        assert!(clip_global_norm(&mut ps, &[0], 0.0).is_err());
    }
}
