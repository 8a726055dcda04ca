//! Finite-difference validation of reverse-mode gradients, in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Base finite-difference step; scaled by `max(1, |x|)`.
pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
#[derive(Default)]
pub struct GradCheckOptions {
    /// Coordinates probed per tensor; `None` probes every element.
    pub max_coords: Option<usize>,
    pub seed: u64,
}


pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn coords(len: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx = sample(&mut rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

fn eval_scalar(v: Var<f64>) -> Result<f64> {
    let value = v.value();
    if value.len() != 1 {
        return Err(Error::Shape(format!("grad_check needs a scalar output, got {:?}", v.shape())));
    }
    let x = value.data()[0];
    if !x.is_finite() {
        return Err(Error::NonFinite("grad_check intermediate".into()));
    }
    Ok(x)
}

/// Compares gradients of `f` with respect to each input against central
/// differences. Returns the worst relative error.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&[Var<f64>]) -> Result<Var<f64>>,
{
    let leaves: Vec<Var<f64>> = inputs.iter().map(|t| Var::leaf(t.clone(), true)).collect();
    let out = f(&leaves)?;
    eval_scalar(out.clone())?;
    let grads = grad(&out)?;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(&leaves[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in coords(input.len(), opts, k as u64) {
            let x = input.data()[i];
            let h = FD_STEP * x.abs().max(1.0);
            let probe = |delta: f64| -> Result<f64> {
                let vars: Vec<Var<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == k {
                            t.data_mut()[i] = x + delta;
                        }
                        Var::constant(t)
                    })
                    .collect();
                eval_scalar(f(&vars)?)
            };
            let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Same check with respect to model parameters. `f` evaluates the loss from
/// the store; `record` tells it whether to build a differentiable graph.
pub fn grad_check_params<F>(
    params: &mut ParamStore<f64>,
    ids: &[ParamId],
    f: F,
    opts: &GradCheckOptions,
) -> Result<f64>
where
    F: Fn(&ParamStore<f64>, bool) -> Result<Var<f64>>,
{
    params.zero_grad();
    let loss = f(params, true)?;
    eval_scalar(loss.clone())?;
    crate::autograd::backward(&loss, params)?;
    drop(loss);
    let mut worst = 0.0f64;
    for &id in ids {
        let analytic = params.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(params.value(id).shape()));
        for i in coords(analytic.len(), opts, id as u64) {
            let x = params.value(id).data()[i];
            let h = FD_STEP * x.abs().max(1.0);
            params.value_mut(id).data_mut()[i] = x + h;
            let plus = eval_scalar(f(params, false)?)?;
            params.value_mut(id).data_mut()[i] = x - h;
            let minus = eval_scalar(f(params, false)?)?;
            params.value_mut(id).data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    params.zero_grad();
    Ok(worst)
}
