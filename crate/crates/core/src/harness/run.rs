//! End-to-end experiment: data, folds, fitting, checkpoints, exports and manifest.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelKind};
use super::data::{load_data, prepare_fold, split_years, FoldData, FoldYears, RawData, YearSplit};
use super::explain::{explain, ExplainMethod, FoldModels};
use super::fit::{fit_model, Hyper, ModelResult, TrialRecord};
use super::report::{export_maps, report, SkillTable};
use crate::error::{Error, Result, StageExt};
use crate::ga::SweepRow;
use crate::grid::GeoGrid;
use crate::io;
use crate::metrics::skill_scores;
use crate::nnet::{load_checkpoint, save_checkpoint, CheckpointModel};
use crate::rng::derive_seed;
use crate::synth::CHANNELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub label: String,
    pub kind: ModelKind,
    pub best_trial: usize,
    pub best_params: Hyper,
    pub selected_epsilon: Option<f64>,
    pub trainable_params: usize,
    pub fixed_params: usize,
    pub val_skills: SkillTable,
    pub test_skills: SkillTable,
    /// One checkpoint directory per fold, relative to the run directory.
    pub checkpoints: Vec<String>,
    pub trials: Vec<TrialRecord>,
    pub sweep: Option<Vec<SweepRow>>,
}

/// Everything needed to reproduce and audit a run. Contains no timestamps, so
/// identical configs give byte-identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub test_years: Vec<i32>,
    pub folds: Vec<FoldYears>,
    /// Per-fold heatwave threshold from the training targets.
    pub thresholds: Vec<f64>,
    pub sample_counts: Vec<[usize; 3]>,
    pub models: Vec<ModelRecord>,
    pub artifacts: Vec<String>,
}

/// In-memory results of a run alongside its manifest.
pub struct RunOutput {
    pub manifest: RunManifest,
    pub results: Vec<ModelResult>,
    pub folds: Vec<FoldData>,
    pub grid: GeoGrid,
}

pub fn prepare_folds(raw: &RawData, cfg: &ExperimentConfig) -> Result<(YearSplit, Vec<FoldData>)> {
    let split = split_years(&raw.years(), cfg)?;
    let folds = split
        .folds
        .par_iter()
        .enumerate()
        .map(|(k, fy)| prepare_fold(raw, k, fy, &split.test, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok((split, folds))
}

pub fn fit_models(cfg: &ExperimentConfig, folds: &[FoldData]) -> Result<Vec<ModelResult>> {
    cfg.models
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            fit_model(
                spec,
                folds,
                &cfg.train,
                cfg.quantile,
                derive_seed(cfg.seed, &[0x6669, i as u64]),
            )
        })
        .collect()
}

fn record(result: &ModelResult, folds: &[FoldData]) -> Result<ModelRecord> {
    let test = result.test_skills(folds)?;
    let val = result
        .folds
        .iter()
        .zip(folds)
        .map(|(f, d)| skill_scores(&f.val_preds, &d.val.y, &d.climatology, d.a5))
        .collect::<Result<Vec<_>>>()?;
    let (trainable, fixed) = result.folds[0].parameter_count();
    Ok(ModelRecord {
        label: result.label(),
        kind: result.spec.kind,
        best_trial: result.best_trial,
        best_params: result.best_params.clone(),
        selected_epsilon: result.selected_epsilon,
        trainable_params: trainable,
        fixed_params: fixed,
        val_skills: SkillTable::from_folds(&val),
        test_skills: SkillTable::from_folds(&test),
        checkpoints: (0..result.folds.len())
            .map(|k| format!("models/{}/fold_{k}", result.label()))
            .collect(),
        trials: result.trials.clone(),
        sweep: result.sweep.clone(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn trials_csv(trials: &[TrialRecord]) -> String {
    let mut out = String::from("trial,mean_val_bces,trainable_params,params,error\n");
    for t in trials {
        let params: Vec<String> = t.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let mean = t.mean_val_bces.map(|m| m.to_string()).unwrap_or_default();
        let err = t.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(
            out,
            "{},{mean},{},{},{err}",
            t.trial,
            t.trainable_params,
            params.join(";")
        );
    }
    out
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("epsilon,crpss,nlls,bces,bces_stderr,h2,error\n");
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epsilon,
            opt(r.skills.map(|s| s.crpss)),
            opt(r.skills.map(|s| s.nlls)),
            opt(r.skills.map(|s| s.bces)),
            opt(r.stderr.map(|s| s.bces)),
            opt(r.h2),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        );
    }
    out
}

/// Mean linear pattern over folds, for models that have one.
fn mean_pattern(result: &ModelResult) -> Option<Vec<f64>> {
    let patterns: Vec<&[f64]> = result
        .folds
        .iter()
        .map(|f| match &f.model {
            CheckpointModel::Ga(m) => Some(m.pattern.as_slice()),
            CheckpointModel::Iinn(m) => Some(m.pattern()),
            _ => None,
        })
        .collect::<Option<_>>()?;
    let n = patterns.len() as f64;
    let mut mean = vec![0.0; patterns[0].len()];
    for p in &patterns {
        mean.iter_mut().zip(*p).for_each(|(m, v)| *m += v / n);
    }
    Some(mean)
}

fn fold_models<'a>(fold: &'a FoldData, results: &'a [ModelResult]) -> FoldModels<'a> {
    FoldModels {
        fold,
        models: results
            .iter()
            .map(|r| (r.label(), &r.folds[fold.index].model))
            .collect(),
    }
}

/// Run the experiment on already loaded data. With `out = None` nothing is
/// written and the manifest lists no artifacts.
pub fn run_with_data(cfg: &ExperimentConfig, raw: &RawData, out: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let (split, folds) = prepare_folds(raw, cfg).stage("prepare")?;
    let results = fit_models(cfg, &folds).stage("fit")?;
    let records = results
        .iter()
        .map(|r| record(r, &folds))
        .collect::<Result<Vec<_>>>()
        .stage("evaluate")?;
    let grid = raw.z500.grid().clone();
    let mut artifacts = Vec::new();
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        io::write_json(&out.join("config.json"), cfg)?;
        artifacts.push("config.json".to_string());
        for (result, rec) in results.iter().zip(&records) {
            for (k, fitted) in result.folds.iter().enumerate() {
                let meta = serde_json::json!({
                    "label": rec.label,
                    "fold": k,
                    "params": rec.best_params,
                });
                save_checkpoint(&out.join(&rec.checkpoints[k]), &fitted.model, meta).stage("checkpoint")?;
            }
            let trials = format!("models/{}/trials.csv", rec.label);
            write_text(&out.join(&trials), &trials_csv(&rec.trials))?;
            artifacts.push(trials);
            if let Some(rows) = &rec.sweep {
                let sweep = format!("models/{}/sweep.csv", rec.label);
                write_text(&out.join(&sweep), &sweep_csv(rows))?;
                artifacts.push(sweep);
            }
            if let Some(p) = mean_pattern(result) {
                artifacts.extend(
                    export_maps(out, "patterns", &rec.label, &grid, &CHANNELS, &p, cfg.heatmaps).stage("export")?,
                );
            }
        }
        if let Some(ex) = &cfg.explain {
            let models = fold_models(&folds[0], &results);
            for (i, method) in ExplainMethod::ALL.into_iter().enumerate() {
                let seed = derive_seed(cfg.seed, &[0x7861, i as u64]);
                artifacts.extend(explain(method, &models, &grid, ex, seed, out, cfg.heatmaps).stage("explain")?);
            }
        }
    }
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        test_years: split.test.clone(),
        folds: split.folds.clone(),
        thresholds: folds.iter().map(|f| f.a5).collect(),
        sample_counts: folds
            .iter()
            .map(|f| [f.train.y.len(), f.val.y.len(), f.test.y.len()])
            .collect(),
        models: records,
        artifacts,
    };
    if let Some(out) = out {
        io::write_json(&out.join("manifest.json"), &manifest)?;
        report(&manifest, out).stage("report")?;
    }
    Ok(RunOutput {
        manifest,
        results,
        folds,
        grid,
    })
}

/// Load the configured data and run the experiment into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let raw = load_data(&cfg.data).stage("load")?;
    run_with_data(cfg, &raw, Some(out))
}

/// Config and manifest of a finished run.
pub fn load_run(out: &Path) -> Result<(ExperimentConfig, RunManifest)> {
    let cfg: ExperimentConfig = io::read_json(&out.join("config.json"))?;
    cfg.validate()?;
    let manifest: RunManifest = io::read_json(&out.join("manifest.json"))?;
    if manifest.config_hash != cfg.hash() {
        return Err(Error::Config(format!(
            "{}: config.json does not match the manifest hash",
            out.display()
        )));
    }
    Ok((cfg, manifest))
}

/// Rebuild one fold's data deterministically from a finished run.
fn reload_fold(cfg: &ExperimentConfig, manifest: &RunManifest, fold: usize) -> Result<(RawData, FoldData)> {
    let fy = manifest
        .folds
        .get(fold)
        .ok_or_else(|| Error::InvalidInput(format!("run has {} folds, asked for fold {fold}", manifest.folds.len())))?;
    let raw = load_data(&cfg.data).stage("load")?;
    let data = prepare_fold(&raw, fold, fy, &manifest.test_years, cfg).stage("prepare")?;
    Ok((raw, data))
}

fn load_models(
    out: &Path,
    manifest: &RunManifest,
    fold: usize,
    only: Option<&str>,
) -> Result<Vec<(String, CheckpointModel)>> {
    let models: Vec<(String, CheckpointModel)> = manifest
        .models
        .iter()
        .filter(|m| only.is_none_or(|l| l == m.label))
        .map(|m| Ok((m.label.clone(), load_checkpoint(&out.join(&m.checkpoints[fold]))?.model)))
        .collect::<Result<_>>()
        .stage("checkpoint")?;
    if models.is_empty() {
        return Err(Error::Config(format!(
            "no model named `{}` in the run",
            only.unwrap_or("")
        )));
    }
    Ok(models)
}

/// Per-model test skills of one fold, recomputed from the stored checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub fold: usize,
    pub skills: crate::metrics::Skills,
    /// Whether the recomputed skills equal the manifest's exactly.
    pub matches_manifest: bool,
}

pub fn evaluate_run(out: &Path, only: Option<&str>) -> Result<Vec<EvalRow>> {
    let (cfg, manifest) = load_run(out)?;
    let (_, first) = reload_fold(&cfg, &manifest, 0)?;
    let mut rows = Vec::new();
    for fold in 0..manifest.folds.len() {
        let data = if fold == 0 {
            None
        } else {
            Some(reload_fold(&cfg, &manifest, fold)?.1)
        };
        let data = data.as_ref().unwrap_or(&first);
        for (label, model) in load_models(out, &manifest, fold, only)? {
            let preds = model.as_predictor().predict_batch(&data.test.x).stage("evaluate")?;
            let skills = skill_scores(&preds, &data.test.y, &data.climatology, data.a5).stage("evaluate")?;
            let stored = manifest
                .models
                .iter()
                .find(|m| m.label == label)
                .expect("label from manifest");
            let matches = stored.test_skills.crpss.folds[fold].to_bits() == skills.crpss.to_bits()
                && stored.test_skills.bces.folds[fold].to_bits() == skills.bces.to_bits();
            rows.push(EvalRow {
                label,
                fold,
                skills,
                matches_manifest: matches,
            });
        }
    }
    io::write_json(&out.join("eval.json"), &rows)?;
    Ok(rows)
}

/// Interpretability products of one fold's stored models.
pub fn explain_run(
    out: &Path,
    method: ExplainMethod,
    only: Option<&str>,
    fold: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let (cfg, manifest) = load_run(out)?;
    let (raw, data) = reload_fold(&cfg, &manifest, fold)?;
    let mut loaded = load_models(out, &manifest, fold, only)?;
    // The GA pattern is the reference for orthogonality and EG comparisons.
    if only.is_some() && !loaded.iter().any(|(_, m)| matches!(m, CheckpointModel::Ga(_))) {
        if let Ok(mut ga) = load_models(out, &manifest, fold, None) {
            ga.retain(|(_, m)| matches!(m, CheckpointModel::Ga(_)));
            loaded.extend(ga.into_iter().take(1));
        }
    }
    let models = FoldModels {
        fold: &data,
        models: loaded.iter().map(|(l, m)| (l.clone(), m)).collect(),
    };
    let ex = cfg.explain.clone().unwrap_or_default();
    let written = explain(method, &models, raw.z500.grid(), &ex, seed, out, cfg.heatmaps).stage("explain")?;
    if written.is_empty() {
        return Err(Error::Config(format!("no selected model supports {}", method.as_str())));
    }
    Ok(written)
}
