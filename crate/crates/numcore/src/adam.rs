use crate::element::Element;
use crate::error::{NumError, Result};
use crate::params::ParamSet;

/// Moment buffers and hyperparameters of the Adam optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Element> AdamState<T> {
    /// Zero moments shaped like `params`, with the usual betas (0.9, 0.999)
    /// and eps 1e-8.
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        Self {
            step: 0,
            m: params_zeros(params),
            v: params_zeros(params),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn params_zeros<T: Element>(params: &ParamSet<T>) -> Vec<Vec<T>> {
    params.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect()
}

/// One bias-corrected Adam update of every trainable parameter that holds a
/// gradient buffer.
pub fn adam_step<T: Element>(params: &mut ParamSet<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(NumError::dim(
            "adam_step",
            format!(
                "optimizer tracks {} tensors, parameter set has {}",
                state.m.len(),
                params.len()
            ),
        ));
    }
    for (i, (id, name, t)) in params.iter().enumerate() {
        if state.m[i].len() != t.len() || state.v[i].len() != t.len() {
            return Err(NumError::dim(
                "adam_step",
                format!("moment buffers for `{name}` do not match its {} entries", t.len()),
            ));
        }
        debug_assert_eq!(id.0, i);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - state.beta1), T::of(1.0 - state.beta2));
    let step_size = T::of(state.lr / bc1);
    let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
    let eps = T::of(state.eps);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let tensor = params.get_mut(id);
        if !tensor.requires_grad() {
            continue;
        }
        let Some(grad) = tensor.grad().map(<[T]>::to_vec) else {
            continue;
        };
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        for (((p, &g), mi), vi) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + one_b1 * g;
            *vi = b2 * *vi + one_b2 * g * g;
            *p = *p - step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    Ok(())
}
