//! AdamW, its sharpness-aware wrapper, and the early-stopping trainer.

mod train;

pub use train::{
    eval_loss, loss_and_grad, split_indices, train, EpochRecord, PairDataset, TrainConfig,
    TrainLog, Trainable,
};

use serde::{Deserialize, Serialize};

use crate::diffcore::RealArray;
use crate::error::{Error, Result};

/// A named trainable array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: RealArray,
}

impl Param {
    pub fn new(name: impl Into<String>, value: RealArray) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment accumulators and step counter for one parameter set.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<RealArray>,
    v: Vec<RealArray>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &[Param]) -> Self {
        let zeros = |p: &Param| RealArray::new(p.value.shape().to_vec(), vec![0.0; p.value.len()]);
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| zeros(p).expect("shape")).collect(),
            v: params.iter().map(|p| zeros(p).expect("shape")).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

fn check_grads(params: &[Param], grads: &[RealArray]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension {
            what: "gradient list",
            expected: params.len(),
            got: grads.len(),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::invalid(format!(
                "gradient shape {:?} does not match parameter `{}` {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    Ok(())
}

/// One AdamW update: decoupled decay `w ← w(1 − γλ)`, then the
/// bias-corrected adaptive step. Parameters are untouched on error.
pub fn adamw_step(params: &mut [Param], grads: &[RealArray], state: &mut OptimizerState) -> Result<()> {
    check_grads(params, grads)?;
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - c.lr * c.weight_decay;
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (w, m, v) = (p.value.data_mut(), m.data_mut(), v.data_mut());
        for k in 0..w.len() {
            let gk = g.data()[k];
            w[k] *= decay;
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            w[k] -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// The ascent step `ρ·g/‖g‖₂`, with the norm taken across all arrays.
/// `None` when the gradient is exactly zero.
pub fn sam_perturbation(grads: &[RealArray], rho: f64) -> Option<Vec<RealArray>> {
    let norm = grads.iter().map(RealArray::norm_sq).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    let s = rho / norm;
    Some(grads.iter().map(|g| g.map(|v| v * s)).collect())
}

/// Sharpness-aware step: gradient at `w`, ascend to `w + ρ·g/‖g‖`, take the
/// gradient there and apply it to the original `w` through AdamW.
///
/// `loss_grad` evaluates loss and gradients at a given parameter set (the
/// trainer passes the same mini-batch to both calls). Returns the loss at `w`.
pub fn sam_step<F>(
    params: &mut [Param],
    mut loss_grad: F,
    state: &mut OptimizerState,
    rho: f64,
) -> Result<f64>
where
    F: FnMut(&[RealArray]) -> Result<(f64, Vec<RealArray>)>,
{
    if !(rho >= 0.0) {
        return Err(Error::invalid(format!("SAM radius must be non-negative, got {rho}")));
    }
    let values: Vec<RealArray> = params.iter().map(|p| p.value.clone()).collect();
    let (loss, g1) = loss_grad(&values)?;
    check_grads(params, &g1)?;
    if rho == 0.0 {
        adamw_step(params, &g1, state)?;
        return Ok(loss);
    }
    let Some(eps) = sam_perturbation(&g1, rho) else {
        adamw_step(params, &g1, state)?;
        return Ok(loss);
    };
    let perturbed: Vec<RealArray> = values
        .iter()
        .zip(&eps)
        .map(|(w, e)| {
            let mut w = w.clone();
            w.add_assign(e);
            w
        })
        .collect();
    let (perturbed_loss, g2) = loss_grad(&perturbed)?;
    if !perturbed_loss.is_finite() {
        return Err(Error::NonFinite("loss at SAM-perturbed parameters".into()));
    }
    adamw_step(params, &g2, state)?;
    Ok(loss)
}
