//! Fitting one model family across folds: random search, then the penalty sweep.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ModelKind, ModelSpec};
use super::data::{FoldData, ScatFeatures};
use crate::error::{Error, Result};
use crate::ga::{epsilon_sweep, fit_ga, pool_sweeps, select_epsilon, GaOptions, SweepRow};
use crate::metrics::{skill_evaluation, skill_scores, GaussianPrediction, Skills};
use crate::nnet::{
    train, CheckpointModel, CnnConfig, CnnModel, IinnConfig, IinnModel, OutputInit, Predictor, ScatNetConfig,
    ScatNetModel, TrainConfig, TrainReport,
};
use crate::rng::{self, derive_seed};

pub type Hyper = BTreeMap<String, f64>;

/// One fold's fitted model and its forecasts on the validation and test years.
#[derive(Debug, Clone)]
pub struct FittedFold {
    pub model: CheckpointModel,
    pub report: Option<TrainReport>,
    pub val_preds: Vec<GaussianPrediction>,
    pub test_preds: Vec<GaussianPrediction>,
}

impl FittedFold {
    pub fn parameter_count(&self) -> (usize, usize) {
        self.model.as_predictor().parameter_count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub params: Hyper,
    #[serde(deserialize_with = "super::report::nan_null::vec")]
    pub val_bces: Vec<f64>,
    pub mean_val_bces: Option<f64>,
    pub trainable_params: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ModelResult {
    pub spec: ModelSpec,
    pub best_trial: usize,
    pub best_params: Hyper,
    pub trials: Vec<TrialRecord>,
    pub sweep: Option<Vec<SweepRow>>,
    pub selected_epsilon: Option<f64>,
    pub folds: Vec<FittedFold>,
}

impl ModelResult {
    pub fn label(&self) -> String {
        self.spec.label()
    }

    /// Test skills of every fold model.
    pub fn test_skills(&self, folds: &[FoldData]) -> Result<Vec<Skills>> {
        self.folds
            .iter()
            .zip(folds)
            .map(|(f, d)| skill_scores(&f.test_preds, &d.test.y, &d.climatology, d.a5))
            .collect()
    }
}

fn get(h: &Hyper, key: &str, default: f64) -> f64 {
    h.get(key).copied().unwrap_or(default)
}

fn train_config(base: &TrainConfig, h: &Hyper, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: get(h, "learning_rate", base.learning_rate),
        batch_size: get(h, "batch_size", base.batch_size as f64).round().max(1.0) as usize,
        max_epochs: get(h, "max_epochs", base.max_epochs as f64).round().max(0.0) as usize,
        patience: get(h, "patience", base.patience as f64).round().max(1.0) as usize,
        seed,
        ..base.clone()
    }
}

fn round_usize(v: f64, name: &str) -> Result<usize> {
    if !(v >= 1.0) || !v.is_finite() {
        return Err(Error::Config(format!("hyperparameter `{name}` must be >= 1, got {v}")));
    }
    Ok(v.round() as usize)
}

fn scat_features(fold: &FoldData, cfg: &ScatNetConfig, seed: u64) -> Result<ScatFeatures> {
    let key = (cfg.scales, cfg.orientations, cfg.max_order);
    if let Some(hit) = fold.scat_cache.lock().expect("cache lock").get(&key) {
        return Ok(hit.clone());
    }
    let init = OutputInit::from_targets(&fold.train.y);
    let (template, train) = ScatNetModel::new(
        fold.n_lat,
        fold.n_lon,
        fold.sm_cells.clone(),
        cfg.clone(),
        &fold.train.x,
        init,
        &mut rng::stream(seed, &[]),
    )?;
    let features = ScatFeatures {
        val: template.prepare(&fold.val.x)?,
        test: template.prepare(&fold.test.x)?,
        template,
        train,
    };
    fold.scat_cache
        .lock()
        .expect("cache lock")
        .insert(key, features.clone());
    Ok(features)
}

/// Fit one model of `kind` with hyperparameters `h` on one fold.
pub fn fit_fold(kind: ModelKind, h: &Hyper, fold: &FoldData, base: &TrainConfig, seed: u64) -> Result<FittedFold> {
    let tc = train_config(base, h, derive_seed(seed, &[1]));
    let init = OutputInit::from_targets(&fold.train.y);
    let mut init_rng = rng::stream(seed, &[2]);
    let (model, report, val_preds, test_preds) = match kind {
        ModelKind::Ga => {
            let eps = get(h, "epsilon", 0.0);
            let m = fit_ga(
                &fold.train.x,
                &fold.train.y,
                eps,
                GaOptions::new(fold.n_lat, fold.n_lon, 2),
            )?;
            let v = m.predict_batch(&fold.val.x)?;
            let t = m.predict_batch(&fold.test.x)?;
            (CheckpointModel::Ga(m), None, v, t)
        }
        ModelKind::Iinn => {
            let width = round_usize(get(h, "hidden", 16.0), "hidden")?;
            let cfg = IinnConfig {
                hidden: vec![width, width],
                affine_heads: get(h, "affine", 0.0) > 0.5,
                epsilon: get(h, "epsilon", 0.0),
            };
            let mut m = IinnModel::new(fold.n_lat, fold.n_lon, vec![1.0, 1.0], cfg, init, &mut init_rng)?;
            let r = train(&mut m, &fold.train.x, &fold.train.y, &fold.val.x, &fold.val.y, &tc)?;
            let v = m.predict_batch(&fold.val.x)?;
            let t = m.predict_batch(&fold.test.x)?;
            (CheckpointModel::Iinn(m), Some(r), v, t)
        }
        ModelKind::ScatNet | ModelKind::ScatNetCoarse => {
            let cfg = ScatNetConfig {
                scales: round_usize(get(h, "scales", 3.0), "scales")?,
                orientations: round_usize(get(h, "orientations", 8.0), "orientations")?,
                max_order: usize::from(kind == ModelKind::ScatNet),
            };
            let feats = scat_features(fold, &cfg, seed)?;
            let mut m = feats.template.clone();
            m.reinitialize(init, &mut init_rng);
            let r = train(&mut m, &feats.train, &fold.train.y, &feats.val, &fold.val.y, &tc)?;
            let v = m.predict_prepared(&feats.val)?;
            let t = m.predict_prepared(&feats.test)?;
            (CheckpointModel::ScatNet(m), Some(r), v, t)
        }
        ModelKind::Cnn => {
            let width = get(h, "width", 1.0);
            if !(width > 0.0) {
                return Err(Error::Config("cnn width multiplier must be positive".into()));
            }
            let base_cfg = CnnConfig::default();
            let cfg = CnnConfig {
                conv_channels: base_cfg
                    .conv_channels
                    .iter()
                    .map(|&c| ((c as f64 * width).round() as usize).max(1))
                    .collect(),
                dense: round_usize(get(h, "dense", base_cfg.dense as f64), "dense")?,
                ..base_cfg
            };
            let mut m = CnnModel::new(fold.n_lat, fold.n_lon, fold.sm_mask(), cfg, init, &mut init_rng)?;
            let r = train(&mut m, &fold.train.x, &fold.train.y, &fold.val.x, &fold.val.y, &tc)?;
            let v = m.predict_batch(&fold.val.x)?;
            let t = m.predict_batch(&fold.test.x)?;
            (CheckpointModel::Cnn(m), Some(r), v, t)
        }
    };
    Ok(FittedFold {
        model,
        report,
        val_preds,
        test_preds,
    })
}

fn val_skills(fitted: &FittedFold, fold: &FoldData) -> Result<(Skills, Skills)> {
    let ev = skill_evaluation(&fitted.val_preds, &fold.val.y, &fold.climatology, fold.a5)?;
    Ok((ev.skills, ev.stderr))
}

/// Seeded random search; the winner has the highest mean validation BCES,
/// ties going to fewer trainable parameters and then the earlier trial.
pub fn random_search(
    spec: &ModelSpec,
    folds: &[FoldData],
    base: &TrainConfig,
    seed: u64,
) -> Result<(usize, Vec<TrialRecord>, Vec<FittedFold>)> {
    let mut trials = Vec::with_capacity(spec.budget);
    let mut best: Option<(usize, f64, usize, Vec<FittedFold>)> = None;
    for t in 0..spec.budget {
        let mut sampler = rng::stream(seed, &[0x7365_6172, t as u64]);
        let mut params = spec.params.clone();
        for (name, space) in &spec.space {
            params.insert(name.clone(), space.sample(&mut sampler));
        }
        let outcome: Result<Vec<(FittedFold, f64)>> = folds
            .par_iter()
            .map(|fold| {
                let fitted = fit_fold(
                    spec.kind,
                    &params,
                    fold,
                    base,
                    derive_seed(seed, &[t as u64, fold.index as u64]),
                )?;
                let (skills, _) = val_skills(&fitted, fold)?;
                Ok((fitted, skills.bces))
            })
            .collect();
        match outcome {
            Ok(per_fold) => {
                let scores: Vec<f64> = per_fold.iter().map(|p| p.1).collect();
                let mean = scores.iter().sum::<f64>() / scores.len() as f64;
                let rank = if mean.is_nan() { f64::NEG_INFINITY } else { mean };
                let count = per_fold[0].0.parameter_count().0;
                trials.push(TrialRecord {
                    trial: t,
                    params,
                    val_bces: scores,
                    mean_val_bces: Some(mean),
                    trainable_params: count,
                    error: None,
                });
                let better = match &best {
                    None => true,
                    Some((_, b, c, _)) => rank > *b || (rank == *b && count < *c),
                };
                if better {
                    best = Some((t, rank, count, per_fold.into_iter().map(|p| p.0).collect()));
                }
            }
            Err(e) => trials.push(TrialRecord {
                trial: t,
                params,
                val_bces: Vec::new(),
                mean_val_bces: None,
                trainable_params: 0,
                error: Some(e.to_string()),
            }),
        }
    }
    match best {
        Some((t, _, _, fitted)) => Ok((t, trials, fitted)),
        None => {
            let diagnostics = trials
                .iter()
                .map(|t| format!("trial {}: {}", t.trial, t.error.as_deref().unwrap_or("no score")))
                .collect::<Vec<_>>()
                .join("; ");
            Err(Error::AllTrialsFailed {
                n: spec.budget,
                diagnostics,
            })
        }
    }
}

fn sorted(eps: &[f64]) -> Vec<f64> {
    let mut e = eps.to_vec();
    e.sort_by(f64::total_cmp);
    e.dedup();
    e
}

/// GA penalty sweep on every fold; returns pooled rows and per-fold models for each penalty.
pub fn ga_sweep(
    folds: &[FoldData],
    epsilons: &[f64],
    quantile: f64,
) -> Result<(Vec<SweepRow>, Vec<Vec<Option<FittedFold>>>)> {
    let eps = sorted(epsilons);
    let per_fold: Vec<(Vec<SweepRow>, Vec<Option<FittedFold>>)> = folds
        .par_iter()
        .map(|fold| {
            let opts = GaOptions::new(fold.n_lat, fold.n_lon, 2);
            let (rows, models) = epsilon_sweep(
                &fold.train.x,
                &fold.train.y,
                &eps,
                &fold.val.x,
                &fold.val.y,
                quantile,
                opts,
            )?;
            let fitted = models
                .into_iter()
                .map(|m| {
                    m.map(|m| {
                        Ok(FittedFold {
                            val_preds: m.predict_batch(&fold.val.x)?,
                            test_preds: m.predict_batch(&fold.test.x)?,
                            model: CheckpointModel::Ga(m),
                            report: None,
                        })
                    })
                    .transpose()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((rows, fitted))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<SweepRow>> = per_fold.iter().map(|p| p.0.clone()).collect();
    Ok((pool_sweeps(&rows), per_fold.into_iter().map(|p| p.1).collect()))
}

/// IINN penalty sweep at fixed hyperparameters.
fn iinn_sweep(
    folds: &[FoldData],
    epsilons: &[f64],
    params: &Hyper,
    base: &TrainConfig,
    seed: u64,
) -> (Vec<SweepRow>, Vec<Vec<Option<FittedFold>>>) {
    let eps = sorted(epsilons);
    let per_fold: Vec<(Vec<SweepRow>, Vec<Option<FittedFold>>)> = folds
        .par_iter()
        .map(|fold| {
            let mut rows = Vec::new();
            let mut fitted = Vec::new();
            for &e in &eps {
                let mut h = params.clone();
                h.insert("epsilon".into(), e);
                let res = fit_fold(
                    ModelKind::Iinn,
                    &h,
                    fold,
                    base,
                    derive_seed(seed, &[0x6570, fold.index as u64]),
                )
                .and_then(|f| val_skills(&f, fold).map(|s| (f, s)));
                match res {
                    Ok((f, (skills, stderr))) => {
                        let h2 = match &f.model {
                            CheckpointModel::Iinn(m) => crate::ga::h2(m.pattern(), fold.n_lat, fold.n_lon, 2).ok(),
                            _ => None,
                        };
                        rows.push(SweepRow {
                            epsilon: e,
                            skills: Some(skills),
                            stderr: Some(stderr),
                            h2,
                            error: None,
                        });
                        fitted.push(Some(f));
                    }
                    Err(err) => {
                        rows.push(SweepRow {
                            epsilon: e,
                            skills: None,
                            stderr: None,
                            h2: None,
                            error: Some(err.to_string()),
                        });
                        fitted.push(None);
                    }
                }
            }
            (rows, fitted)
        })
        .collect();
    let rows: Vec<Vec<SweepRow>> = per_fold.iter().map(|p| p.0.clone()).collect();
    (pool_sweeps(&rows), per_fold.into_iter().map(|p| p.1).collect())
}

/// Search, then (for GA and IINN with a penalty grid) sweep and select the penalty.
pub fn fit_model(
    spec: &ModelSpec,
    folds: &[FoldData],
    base: &TrainConfig,
    quantile: f64,
    seed: u64,
) -> Result<ModelResult> {
    // GA has no hyperparameter besides the penalty, so a grid replaces the search.
    let (best_trial, trials, fitted) = if spec.kind == ModelKind::Ga && !spec.epsilons.is_empty() {
        (0, Vec::new(), Vec::new())
    } else {
        random_search(spec, folds, base, seed)?
    };
    let mut best_params = trials
        .get(best_trial)
        .map_or_else(|| spec.params.clone(), |t| t.params.clone());
    let mut result = ModelResult {
        spec: spec.clone(),
        best_trial,
        best_params: best_params.clone(),
        trials,
        sweep: None,
        selected_epsilon: None,
        folds: fitted,
    };
    if spec.epsilons.is_empty() || !matches!(spec.kind, ModelKind::Ga | ModelKind::Iinn) {
        return Ok(result);
    }
    let (pooled, mut per_fold) = if spec.kind == ModelKind::Ga {
        ga_sweep(folds, &spec.epsilons, quantile)?
    } else {
        iinn_sweep(folds, &spec.epsilons, &best_params, base, seed)
    };
    let chosen = select_epsilon(&pooled).ok_or_else(|| Error::AllTrialsFailed {
        n: pooled.len(),
        diagnostics: pooled
            .iter()
            .map(|r| format!("epsilon {}: {}", r.epsilon, r.error.as_deref().unwrap_or("?")))
            .collect::<Vec<_>>()
            .join("; "),
    })?;
    let eps = pooled[chosen].epsilon;
    let models: Option<Vec<FittedFold>> = per_fold.iter_mut().map(|f| f[chosen].take()).collect();
    result.folds = models.ok_or_else(|| Error::InvalidInput(format!("epsilon {eps} failed on some fold")))?;
    best_params.insert("epsilon".into(), eps);
    result.best_params = best_params;
    result.selected_epsilon = Some(eps);
    result.sweep = Some(pooled);
    Ok(result)
}
