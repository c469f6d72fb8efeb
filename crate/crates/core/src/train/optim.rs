use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment buffers keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: BTreeMap<String, Tensor<T>> = params.iter().map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape().to_vec()))).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
        let m = state.m.get(name).ok_or_else(|| Error::Config(format!("no Adam moments for {name}")))?;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::shape("adam_step", format!("{name}: param {:?}, grad {:?}, moment {:?}", p.shape(), g.shape(), m.shape())));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
    let (one, eps) = (T::one(), T::lit(ADAM_EPS));
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let lr = T::lit(lr);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.get_mut(name).expect("checked above");
        let v = state.v.get_mut(name).expect("moments are created together");
        for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi = *pi - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `0.5·lr0·(1 + cos(π·epoch/epochs))`.
pub fn cosine_lr(epoch: usize, epochs: usize, lr0: f64) -> Result<f64> {
    if epochs == 0 || epoch > epochs {
        return Err(Error::Config(format!("epoch {epoch} outside schedule of {epochs} epochs")));
    }
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos()))
}
