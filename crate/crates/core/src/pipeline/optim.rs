use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments of one parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One AdamW update at (1-based) step `t`.
///
/// Decoupled decay `p ← p − lr·wd·p` comes first, then the bias-corrected
/// Adam step. Moments are kept in f64.
pub fn adamw_step<E: Element>(
    param: &mut Tensor<E>,
    grad: &[E],
    state: &mut MomentState,
    t: u64,
    lr: f64,
    wd: f64,
) -> Result<()> {
    if grad.len() != param.len() {
        return Err(Error::shape("adamw_step", param.shape(), &[grad.len()]));
    }
    if t == 0 {
        return Err(Error::Param("optimizer steps are 1-based".into()));
    }
    if state.m.is_empty() {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    }
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g.to_f64().unwrap_or(f64::NAN);
        let mut w = p.to_f64().unwrap_or(f64::NAN);
        w -= lr * wd * w;
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        *p = E::lit(w);
    }
    if param.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "adamw_step" })
    }
}

/// AdamW over named parameters with a shared step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub t: u64,
    pub state: BTreeMap<String, MomentState>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Advance the step counter and update every `(name, param, grad)`.
    /// `lr_for(name)` supplies per-parameter learning rates.
    pub fn step<'a, E: Element>(
        &mut self,
        updates: impl IntoIterator<Item = (String, &'a mut Tensor<E>, &'a [E])>,
        lr_for: impl Fn(&str) -> f64,
        wd: f64,
    ) -> Result<()> {
        self.t += 1;
        for (name, param, grad) in updates {
            let lr = lr_for(&name);
            let st = self.state.entry(name).or_default();
            adamw_step(param, grad, st, self.t, lr, wd)?;
        }
        Ok(())
    }
}
