use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linear-beta DDPM schedule. Products are accumulated in `f64` and stored
/// as `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub betas: Vec<f32>,
    pub alphas: Vec<f32>,
    pub alpha_bar: Vec<f32>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule")
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Invalid("schedule needs at least one step".into()));
    }
    let ordered = if steps == 1 { beta_start < 1.0 } else { beta_start < beta_end && beta_end < 1.0 };
    if !(beta_start > 0.0 && ordered) {
        return Err(Error::Invalid(format!("invalid beta range ({beta_start}, {beta_end})")));
    }
    let mut betas = Vec::with_capacity(steps);
    let mut alphas = Vec::with_capacity(steps);
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0f64;
    for i in 0..steps {
        let beta = if steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
        };
        prod *= 1.0 - beta;
        betas.push(beta as f32);
        alphas.push((1.0 - beta) as f32);
        alpha_bar.push(prod as f32);
    }
    Ok(NoiseSchedule { steps, beta_start, beta_end, betas, alphas, alpha_bar })
}

impl NoiseSchedule {
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .map(|&a| a as f64)
            .ok_or_else(|| Error::Invalid(format!("timestep {t} outside schedule of {}", self.steps)))
    }

    /// Evenly spaced descending timesteps `T-1 = τ_0 > ... > τ_n = 0`.
    pub fn ddim_timesteps(&self, n_steps: usize) -> Result<Vec<usize>> {
        if n_steps == 0 {
            return Err(Error::Invalid("sampler needs at least one step".into()));
        }
        if self.steps < 2 || n_steps > self.steps - 1 {
            return Err(Error::Invalid(format!("{n_steps} steps do not fit a schedule of {}", self.steps)));
        }
        let last = (self.steps - 1) as f64;
        Ok((0..=n_steps).map(|i| (last * (n_steps - i) as f64 / n_steps as f64).round() as usize).collect())
    }
}

/// `sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps` for a scalar `ᾱ_t`.
pub fn q_sample_with<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    let a = T::from_f64_lossy(alpha_bar.sqrt());
    let s = T::from_f64_lossy((1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| a * x + s * e)
}

pub fn q_sample<T: Scalar>(schedule: &NoiseSchedule, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
    q_sample_with(x0, eps, schedule.alpha_bar(t)?)
}

/// Per-sample `q_sample` over a batch `[N, ...]` with one timestep per row.
pub fn q_sample_batch<T: Scalar>(schedule: &NoiseSchedule, x0: &Tensor<T>, ts: &[usize], eps: &Tensor<T>) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() || x0.dim(0) != ts.len() {
        return Err(Error::Shape(format!("q_sample batch x0 {:?} eps {:?} t {}", x0.shape(), eps.shape(), ts.len())));
    }
    let per = x0.len() / ts.len();
    let mut out = Tensor::zeros(x0.shape());
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let (a, s) = (T::from_f64_lossy(ab.sqrt()), T::from_f64_lossy((1.0 - ab).sqrt()));
        let r = i * per..(i + 1) * per;
        for ((o, &x), &e) in out.data_mut()[r.clone()].iter_mut().zip(&x0.data()[r.clone()]).zip(&eps.data()[r]) {
            *o = a * x + s * e;
        }
    }
    Ok(out)
}

/// Deterministic DDIM update (η = 0) with `x0_hat` clamped to `[-1, 1]`.
pub fn ddim_step<T: Scalar>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t_prev >= t {
        return Err(Error::Invalid(format!("ddim step requires t_prev < t, got {t_prev} >= {t}")));
    }
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    ddim_step_with(x_t, eps_hat, ab_t, ab_prev)
}

pub fn predict_x0<T: Scalar>(x_t: &Tensor<T>, eps_hat: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    let inv = 1.0 / alpha_bar.sqrt();
    let s = (1.0 - alpha_bar).sqrt();
    x_t.zip_map(eps_hat, |x, e| T::from_f64_lossy(((x.as_f64() - s * e.as_f64()) * inv).clamp(-1.0, 1.0)))
}

pub fn ddim_step_with<T: Scalar>(x_t: &Tensor<T>, eps_hat: &Tensor<T>, ab_t: f64, ab_prev: f64) -> Result<Tensor<T>> {
    let (inv, s_t) = (1.0 / ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (a, s) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    x_t.zip_map(eps_hat, |x, e| {
        let (x, e) = (x.as_f64(), e.as_f64());
        let x0 = ((x - s_t * e) * inv).clamp(-1.0, 1.0);
        T::from_f64_lossy(a * x0 + s * e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor32;

    #[test]
    fn default_schedule_endpoints() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar.len(), 1000);
        assert_eq!(s.alpha_bar[0], (1.0 - 1e-4) as f32);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar, vec![(1.0 - 1e-4) as f32]);
    }

    #[test]
    fn rejects_bad_range() {
        assert!(make_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn q_sample_endpoints() {
        let x0 = Tensor32::full(&[4], 0.7);
        let eps = Tensor32::full(&[4], -0.3);
        assert_eq!(q_sample_with(&x0, &eps, 1.0).unwrap(), x0);
        assert_eq!(q_sample_with(&x0, &eps, 0.0).unwrap(), eps);
        let v = q_sample_with(&Tensor32::full(&[1], 1.0), &Tensor32::full(&[1], 1.0), 0.25).unwrap();
        assert!((v.data()[0] as f64 - (0.5 + 0.75f64.sqrt())).abs() < 1e-6);
        assert!(q_sample(&NoiseSchedule::default(), &x0, 1000, &eps).is_err());
    }

    #[test]
    fn ddim_timesteps_cover_range() {
        let s = NoiseSchedule::default();
        let ts = s.ddim_timesteps(10).unwrap();
        assert_eq!(ts.len(), 11);
        assert_eq!(ts[0], 999);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.ddim_timesteps(1).unwrap(), vec![999, 0]);
    }

    #[test]
    fn ddim_rejects_non_decreasing() {
        let s = NoiseSchedule::default();
        let x = Tensor32::zeros(&[2]);
        assert!(ddim_step(&x, &x, 5, 5, &s).is_err());
    }

    #[test]
    fn ddim_zero_eps_branch() {
        let s = NoiseSchedule::default();
        let x = Tensor32::from_vec(&[2], vec![0.3, -0.2]).unwrap();
        let out = ddim_step(&x, &Tensor32::zeros(&[2]), 500, 100, &s).unwrap();
        let r = (s.alpha_bar(100).unwrap() / s.alpha_bar(500).unwrap()).sqrt();
        for (o, v) in out.data().iter().zip(x.data()) {
            let x0 = (*v as f64 / s.alpha_bar(500).unwrap().sqrt()).clamp(-1.0, 1.0);
            let expect = x0 * s.alpha_bar(100).unwrap().sqrt();
            assert!((*o as f64 - expect).abs() < 1e-6);
            assert!(r > 1.0);
        }
    }
}
