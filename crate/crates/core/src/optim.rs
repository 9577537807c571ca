//! Adam and AdamW over a [`ParamStore`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite update for parameter {0}")]
    NonFiniteUpdate(String),
    #[error("optimizer state does not match the parameter store")]
    StateMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "Adam",
            OptimizerKind::AdamW => "AdamW",
        })
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            _ => Err(format!("unknown optimizer {s:?} (expected Adam or AdamW)")),
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn new(lr: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps,
        }
    }
}

fn check_state(store: &ParamStore, state: &OptimizerState) -> Result<(), OptimError> {
    let ok = state.m.len() == store.len() && store.iter().zip(&state.m).all(|(p, m)| p.value.len() == m.len());
    if ok {
        Ok(())
    } else {
        Err(OptimError::StateMismatch)
    }
}

/// One bias-corrected Adam step using the gradients in `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState, hp: AdamParams) -> Result<(), OptimError> {
    step(store, state, hp, 0.0)
}

/// Adam step followed by decoupled decay `θ -= lr·λ·θ`; the decay never
/// enters the gradient or the moments.
pub fn adamw_step(
    store: &mut ParamStore,
    state: &mut OptimizerState,
    hp: AdamParams,
    weight_decay: f64,
) -> Result<(), OptimError> {
    step(store, state, hp, weight_decay)
}

fn step(store: &mut ParamStore, state: &mut OptimizerState, hp: AdamParams, decay: f64) -> Result<(), OptimError> {
    check_state(store, state)?;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad.data();
        let mut updated = p.value.data().to_vec();
        for i in 0..updated.len() {
            let g = grad[i];
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            updated[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            if decay != 0.0 {
                updated[i] -= hp.lr * decay * updated[i];
            }
        }
        if updated.iter().any(|x| !x.is_finite()) {
            return Err(OptimError::NonFiniteUpdate(p.name.clone()));
        }
        p.value.data_mut().copy_from_slice(&updated);
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= s;
            }
        }
    }
    norm
}
