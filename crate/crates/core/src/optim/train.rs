use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{adamw_step, sam_step, AdamWConfig, OptimizerState, Param};
use crate::diffcore::{Graph, RealArray, Var};
use crate::error::{Error, Result};
use crate::seeding::{derived_rng, rng};

/// Row-aligned `(θ, x)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub theta: RealArray,
    pub x: RealArray,
}

impl PairDataset {
    pub fn new(theta: RealArray, x: RealArray) -> Result<Self> {
        if theta.rows() != x.rows() {
            return Err(Error::Dimension {
                what: "paired dataset rows",
                expected: theta.rows(),
                got: x.rows(),
            });
        }
        Ok(Self { theta, x })
    }

    pub fn len(&self) -> usize {
        self.theta.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            theta: self.theta.select_rows(idx),
            x: self.x.select_rows(idx),
        }
    }
}

/// A model whose parameters are trained by minimizing a mini-batch loss.
pub trait Trainable {
    fn parameters(&self) -> &[Param];
    fn parameters_mut(&mut self) -> &mut [Param];
    /// Records the mean loss over `batch` on `g`, reading parameters from
    /// `params` (one var per entry of [`Trainable::parameters`]).
    fn build_loss(&self, g: &mut Graph, params: &[Var], batch: &PairDataset) -> Result<Var>;
    /// Smallest batch the loss accepts; a shorter trailing chunk is merged
    /// into the one before it.
    fn min_batch_size(&self) -> usize {
        1
    }
}

/// `idx` split into runs of `size`, with a trailing run shorter than `min`
/// folded into its predecessor.
fn batches(idx: &[usize], size: usize, min: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = idx.chunks(size).collect();
    if out.len() >= 2 && out[out.len() - 1].len() < min {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("non-empty") = &idx[start..];
    }
    out
}

/// Loss and gradients at an arbitrary parameter assignment.
pub fn loss_and_grad<M: Trainable + ?Sized>(
    model: &M,
    values: &[RealArray],
    batch: &PairDataset,
) -> Result<(f64, Vec<RealArray>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|v| g.param(v.clone())).collect();
    let root = model.build_loss(&mut g, &vars, batch)?;
    let loss = g.value(root).item();
    let mut grads = g.backward(root)?;
    let out = vars
        .iter()
        .zip(values)
        .map(|(v, val)| {
            grads
                .take(*v)
                .unwrap_or_else(|| RealArray::new(val.shape().to_vec(), vec![0.0; val.len()]).expect("shape"))
        })
        .collect();
    Ok((loss, out))
}

/// Forward-only loss at the model's current parameters.
pub fn eval_loss<M: Trainable + ?Sized>(model: &M, batch: &PairDataset) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = model
        .parameters()
        .iter()
        .map(|p| g.constant(p.value.clone()))
        .collect();
    let root = model.build_loss(&mut g, &vars, batch)?;
    Ok(g.value(root).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub patience: usize,
    pub max_epochs: Option<usize>,
    pub sam_enabled: bool,
    pub sam_radius: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            validation_fraction: 0.1,
            patience: 20,
            max_epochs: None,
            sam_enabled: false,
            sam_radius: 0.05,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::invalid("validation fraction must lie in (0, 1)"));
        }
        if !(self.sam_radius >= 0.0) {
            return Err(Error::invalid("SAM radius must be non-negative"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Validation loss of the initial parameters.
    pub initial_val_loss: f64,
    /// 0 when no epoch improved on the initial parameters.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub n_train: usize,
    pub n_val: usize,
}

/// Deterministic train/validation split. The validation part has
/// `round(n · fraction)` members.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derived_rng(seed, &["split".into()]));
    let n_val = ((n as f64) * fraction).round() as usize;
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

const EVAL_CHUNK: usize = 1024;

fn mean_loss<M: Trainable + ?Sized>(model: &M, data: &PairDataset, idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in batches(idx, EVAL_CHUNK, model.min_batch_size()) {
        total += eval_loss(model, &data.subset(chunk))? * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Mini-batch training with early stopping on validation loss.
///
/// The initial parameters count as the baseline; training stops once the
/// validation loss has failed to improve on the best seen for `patience`
/// consecutive epochs, and the best parameters are restored.
pub fn train<M: Trainable + ?Sized>(model: &mut M, data: &PairDataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (train_idx, val_idx) = split_indices(data.len(), cfg.validation_fraction, cfg.seed);
    if val_idx.is_empty() || train_idx.is_empty() {
        return Err(Error::invalid(format!(
            "dataset of {} pairs is too small for validation fraction {}",
            data.len(),
            cfg.validation_fraction
        )));
    }

    let mut state = OptimizerState::new(cfg.optimizer, model.parameters());
    let mut shuffle_rng = rng(crate::seeding::derive_seed(cfg.seed, &["shuffle".into()]));
    let initial_val_loss = mean_loss(model, data, &val_idx)?;
    if !initial_val_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            detail: "non-finite initial validation loss".into(),
        });
    }
    let mut best_val = initial_val_loss;
    let mut best_params: Vec<Param> = model.parameters().to_vec();
    let mut best_epoch = 0;
    let mut since_improvement = 0;
    let mut epochs = Vec::new();
    let mut order = train_idx.clone();
    let rho = if cfg.sam_enabled { cfg.sam_radius } else { 0.0 };

    let mut epoch = 0;
    while since_improvement < cfg.patience && cfg.max_epochs.is_none_or(|m| epoch < m) {
        epoch += 1;
        order.shuffle(&mut shuffle_rng);
        let mut train_total = 0.0;
        for chunk in batches(&order, cfg.batch_size, model.min_batch_size()) {
            let batch = data.subset(chunk);
            let loss = if cfg.sam_enabled {
                let snapshot: &M = model;
                // Parameters are read through the closure argument, so the
                // model itself is only borrowed immutably while evaluating.
                let mut params = snapshot.parameters().to_vec();
                let l = sam_step(&mut params, |v| loss_and_grad(snapshot, v, &batch), &mut state, rho)?;
                model.parameters_mut().clone_from_slice(&params);
                l
            } else {
                let values: Vec<RealArray> = model.parameters().iter().map(|p| p.value.clone()).collect();
                let (l, grads) = loss_and_grad(model, &values, &batch)?;
                if !l.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: "non-finite training loss".into(),
                    });
                }
                adamw_step(model.parameters_mut(), &grads, &mut state)?;
                l
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "non-finite training loss".into(),
                });
            }
            train_total += loss * chunk.len() as f64;
        }
        let val_loss = mean_loss(model, data, &val_idx)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: "non-finite validation loss".into(),
            });
        }
        let improved = val_loss < best_val;
        if improved {
            best_val = val_loss;
            best_params = model.parameters().to_vec();
            best_epoch = epoch;
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: train_total / order.len() as f64,
            val_loss,
            improved,
        });
    }
    model.parameters_mut().clone_from_slice(&best_params);
    Ok(TrainLog {
        epochs,
        initial_val_loss,
        best_epoch,
        best_val_loss: best_val,
        n_train: train_idx.len(),
        n_val: val_idx.len(),
    })
}
