//! Mini-batch Adam on the CRPS loss with early stopping on validation CRPS.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::autodiff::{Tape, Tensor, Var};
use super::models::predict_with;
use super::Trainable;
use crate::error::{Error, Result};
use crate::linalg::SampleMatrix;
use crate::metrics::{crps_gaussian, stable_mean};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 50,
            patience: 5,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_crps: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_crps: Option<f64>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (i, (w, gi)) in p.data.iter_mut().zip(&g.data).enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                *w -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_epsilon);
            }
        }
    }
}

/// Mean CRPS of `model` on prepared inputs.
pub fn mean_crps<M: Trainable + Sync>(model: &M, x: &SampleMatrix, y: &[f64]) -> f64 {
    let preds = predict_with(model, x);
    let scores: Vec<f64> = preds.iter().zip(y).map(|(p, &t)| crps_gaussian(*p, t)).collect();
    stable_mean(&scores)
}

/// Train on prepared inputs. The parameters with the best validation CRPS are
/// restored at the end. Batch order depends only on `cfg.seed` and the epoch.
pub fn train<M: Trainable + Sync>(
    model: &mut M,
    x: &SampleMatrix,
    y: &[f64],
    val_x: &SampleMatrix,
    val_y: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if x.n() != y.len() {
        return Err(Error::shape(x.n(), y.len()));
    }
    if val_x.n() != val_y.len() {
        return Err(Error::shape(val_x.n(), val_y.len()));
    }
    if x.n() == 0 {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("batch_size and learning_rate must be positive".into()));
    }
    let mut report = TrainReport::default();
    if cfg.max_epochs == 0 {
        return Ok(report);
    }
    let mut adam = Adam::new(model.parameters());
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..x.n()).collect();

    for epoch in 0..cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, &[0x7261_696e, epoch as u64]));
        let mut losses = Vec::new();
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let params: Vec<Var> = model.parameters().iter().map(|p| tape.leaf(p.clone())).collect();
            let input = tape.leaf(model.batch_tensor(x, idx));
            let (mu, raw) = model.forward(&mut tape, &params, input);
            let targets: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let loss = tape.crps_loss(mu, raw, &targets);
            let mut grads = tape.backward(loss);
            let mut g: Vec<Tensor> = params.iter().map(|&p| grads.take_or_zero(p, &tape)).collect();
            let total = tape.value(loss).data[0] + model.penalty(Some(&mut g));
            if !total.is_finite() || g.iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            losses.push(total);
            adam.update(model.parameters_mut(), &g, cfg);
        }
        report.train_loss.push(stable_mean(&losses));

        let val = if val_x.n() > 0 {
            mean_crps(model, val_x, val_y)
        } else {
            *report.train_loss.last().expect("pushed")
        };
        report.val_crps.push(val);
        if best.as_ref().is_none_or(|(b, _)| val < *b) {
            best = Some((val, model.parameters().to_vec()));
            report.best_epoch = Some(epoch);
            report.best_val_crps = Some(val);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        model.parameters_mut().clone_from_slice(&params);
    }
    Ok(report)
}
