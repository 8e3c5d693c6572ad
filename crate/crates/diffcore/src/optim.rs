//! Bias-corrected Adam.

use crate::{Error, Parameter, Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one slot per parameter.
///
/// Slots of frozen parameters stay `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Parameter<T>]) -> Self {
        Self {
            step: 0,
            moments: params
                .iter()
                .map(|p| {
                    p.trainable.then(|| {
                        (
                            Tensor::zeros(p.tensor.shape().to_vec()),
                            Tensor::zeros(p.tensor.shape().to_vec()),
                        )
                    })
                })
                .collect(),
        }
    }
}

/// One Adam update using each parameter's accumulated `grad`.
///
/// Only trainable parameters are written; a trainable parameter without a
/// gradient is treated as having a zero gradient.
pub fn adam_step<T: Scalar>(
    params: &mut [Parameter<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.moments.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state has {} slots for {} parameters",
            state.moments.len(),
            params.len()
        )));
    }
    for (p, slot) in params.iter().zip(&state.moments) {
        if let Some(g) = &p.grad {
            if g.shape() != p.tensor.shape() {
                return Err(Error::Contract(format!(
                    "gradient {:?} does not match parameter {} {:?}",
                    g.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        match slot {
            Some((m, v)) if m.shape() != p.tensor.shape() || v.shape() != p.tensor.shape() => {
                return Err(Error::Contract(format!(
                    "optimizer moments do not match parameter {}",
                    p.name
                )));
            }
            None if p.trainable => {
                return Err(Error::Contract(format!(
                    "no optimizer state for trainable parameter {}",
                    p.name
                )));
            }
            _ => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let step_size = T::from_f64(cfg.lr / bc1);
    let inv_bc2_sqrt = T::from_f64(1.0 / bc2.sqrt());
    let eps = T::from_f64(cfg.eps);
    for (p, slot) in params.iter_mut().zip(state.moments.iter_mut()) {
        if !p.trainable {
            continue;
        }
        let Some((m, v)) = slot else { continue };
        let grad = p.grad.as_ref().map(|g| g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let g = grad.map_or(T::zero(), |g| g[i]);
            md[i] = b1t * md[i] + one_b1 * g;
            vd[i] = b2t * vd[i] + one_b2 * g * g;
            let denom = vd[i].sqrt() * inv_bc2_sqrt + eps;
            *w -= step_size * md[i] / denom;
        }
    }
    Ok(())
}
