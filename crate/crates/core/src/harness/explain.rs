//! Interpretability products for fitted fold models.

use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::config::ExplainConfig;
use super::data::FoldData;
use super::report::export_maps;
use crate::error::{Error, Result};
use crate::grid::GeoGrid;
use crate::io;
use crate::nnet::{CheckpointModel, OutputTarget};
use crate::rng;
use crate::synth::CHANNELS;
use crate::xai::{
    egfi_comparison, expected_gradients_batch, ga_perturbation_decomposition, optimal_input,
    scatnet_feature_importance, smooth_map, stnr, ExpectedGradientsConfig, FiAggregates, OptimalInputConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExplainMethod {
    Eg,
    OptimalInput,
    ScatFi,
}

impl ExplainMethod {
    pub const ALL: [ExplainMethod; 3] = [ExplainMethod::Eg, ExplainMethod::OptimalInput, ExplainMethod::ScatFi];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExplainMethod::Eg => "eg",
            ExplainMethod::OptimalInput => "optimal-input",
            ExplainMethod::ScatFi => "scat-fi",
        }
    }
}

/// Models of one fold, by label.
pub struct FoldModels<'a> {
    pub fold: &'a FoldData,
    pub models: Vec<(String, &'a CheckpointModel)>,
}

impl FoldModels<'_> {
    fn ga(&self) -> Option<(&str, &crate::ga::GaModel)> {
        self.models.iter().find_map(|(l, m)| match m {
            CheckpointModel::Ga(g) => Some((l.as_str(), g)),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EgSummary {
    model: String,
    n_samples: usize,
    rows: Vec<usize>,
    outputs: Vec<f64>,
    baseline_expectations: Vec<f64>,
    completeness_residuals: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EgfiSummary {
    reference: String,
    model: String,
    correlations: Vec<f64>,
    mean: f64,
    std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimalInputSummary {
    model: String,
    config: OptimalInputConfig,
    seed_rows: Vec<usize>,
    norms: Vec<f64>,
    roughness: Vec<f64>,
    mu: Vec<f64>,
    mu_ga: Option<Vec<f64>>,
    mu_perturbation: Option<Vec<f64>>,
    steps: Vec<usize>,
    stnr_floored_pixels: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScatFiSummary {
    model: String,
    aggregates: FiAggregates,
    pooled_shape: (usize, usize),
    soil_moisture: Vec<f64>,
    scattering: Vec<f64>,
}

fn pick_rows(n: usize, k: usize, seed: u64, stream: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rows = sample(&mut rng::stream(seed, &[stream]), n, k).into_vec();
    rows.sort_unstable();
    rows
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' })
        .collect()
}

/// Run one method for every applicable model of a fold; returns written paths relative to `root`.
pub fn explain(
    method: ExplainMethod,
    models: &FoldModels<'_>,
    grid: &GeoGrid,
    cfg: &ExplainConfig,
    seed: u64,
    root: &Path,
    heatmaps: bool,
) -> Result<Vec<String>> {
    let fold = models.fold;
    if fold.test.y.is_empty() {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let test = &fold.test.x;
    let mut written = Vec::new();
    let display = |v: &[f64]| smooth_map(v, grid.n_lat(), grid.n_lon(), cfg.smoothing);
    match method {
        ExplainMethod::Eg => {
            let rows = pick_rows(test.n(), cfg.n_inputs, seed, 1);
            let inputs = test.select_rows(&rows);
            let bg_rows = pick_rows(fold.train.x.n(), 512, seed, 2);
            let background = fold.train.x.select_rows(&bg_rows);
            let eg = ExpectedGradientsConfig {
                n_samples: cfg.eg_samples,
                target: OutputTarget::Mu,
                antithetic: false,
            };
            for (label, model) in &models.models {
                let maps = expected_gradients_batch(model.as_predictor(), &inputs, &background, &eg, seed)?;
                let dir = format!("explain/eg/{}", slug(label));
                for (i, m) in maps.iter().enumerate() {
                    written.extend(export_maps(
                        root,
                        &dir,
                        &format!("input_{i}"),
                        grid,
                        &CHANNELS,
                        &display(&m.values),
                        heatmaps,
                    )?);
                }
                let summary = EgSummary {
                    model: label.clone(),
                    n_samples: cfg.eg_samples,
                    rows: rows.clone(),
                    outputs: maps.iter().map(|m| m.output).collect(),
                    baseline_expectations: maps.iter().map(|m| m.baseline_expectation).collect(),
                    completeness_residuals: maps.iter().map(|m| m.completeness_residual()).collect(),
                };
                io::write_json(&root.join(&dir).join("summary.json"), &summary)?;
                written.push(format!("{dir}/summary.json"));
            }
            if let Some((ga_label, ga)) = models.ga() {
                let mut comparisons = Vec::new();
                for (label, model) in models.models.iter().filter(|(l, _)| l != ga_label) {
                    let c = egfi_comparison(ga, model.as_predictor(), &inputs, &background, &eg, seed)?;
                    comparisons.push(EgfiSummary {
                        reference: ga_label.to_string(),
                        model: label.clone(),
                        correlations: c.correlations,
                        mean: c.mean,
                        std: c.std,
                    });
                }
                io::write_json(&root.join("explain/eg/egfi_correlation.json"), &comparisons)?;
                written.push("explain/eg/egfi_correlation.json".into());
            }
        }
        ExplainMethod::OptimalInput => {
            let mut oi = cfg.optimal_input.clone();
            if cfg.calibrate_targets {
                oi = oi.calibrated(test, grid.n_lat(), grid.n_lon())?;
            }
            let ga = models.ga().map(|g| g.1);
            if ga.is_none() {
                oi.lambda_orth = 0.0;
            }
            let rows = pick_rows(test.n(), cfg.n_optimal_inputs, oi.seed ^ seed, 3);
            for (label, model) in &models.models {
                let dir = format!("explain/optimal_input/{}", slug(label));
                let mut results = Vec::new();
                for &r in &rows {
                    results.push(optimal_input(
                        model.as_predictor(),
                        test.row(r),
                        grid.n_lat(),
                        grid.n_lon(),
                        &oi,
                        ga,
                    )?);
                }
                for (i, res) in results.iter().enumerate() {
                    written.extend(export_maps(
                        root,
                        &dir,
                        &format!("input_{i}"),
                        grid,
                        &CHANNELS,
                        &display(&res.input),
                        heatmaps,
                    )?);
                }
                let ensemble: Vec<Vec<f64>> = results.iter().map(|r| r.input.clone()).collect();
                let mut floored = None;
                if ensemble.len() >= 2 {
                    let s = stnr(&ensemble)?;
                    floored = Some(s.floored.iter().filter(|&&f| f).count());
                    written.extend(export_maps(root, &dir, "stnr", grid, &CHANNELS, &s.values, heatmaps)?);
                }
                let (mu_ga, mu_perturbation) = match ga {
                    Some(g) => {
                        let m = crate::linalg::SampleMatrix::from_rows(&ensemble)?;
                        let dec = ga_perturbation_decomposition(model.as_predictor(), g, &m)?;
                        (Some(dec.mu_ga), Some(dec.mu_pert))
                    }
                    None => (None, None),
                };
                let summary = OptimalInputSummary {
                    model: label.clone(),
                    config: oi.clone(),
                    seed_rows: rows.clone(),
                    norms: results.iter().map(|r| r.norm).collect(),
                    roughness: results.iter().map(|r| r.roughness).collect(),
                    mu: results.iter().map(|r| r.mu).collect(),
                    mu_ga,
                    mu_perturbation,
                    steps: results.iter().map(|r| r.trace.len() - 1).collect(),
                    stnr_floored_pixels: floored,
                };
                io::write_json(&root.join(&dir).join("summary.json"), &summary)?;
                written.push(format!("{dir}/summary.json"));
            }
        }
        ExplainMethod::ScatFi => {
            for (label, model) in &models.models {
                let CheckpointModel::ScatNet(m) = model else {
                    continue;
                };
                let fi = scatnet_feature_importance(m, test)?;
                let dir = format!("explain/scat_fi/{}", slug(label));
                let summary = ScatFiSummary {
                    model: label.clone(),
                    aggregates: fi.aggregates.clone(),
                    pooled_shape: fi.pooled_shape,
                    soil_moisture: fi.soil_moisture.clone(),
                    scattering: fi.scattering.clone(),
                };
                std::fs::create_dir_all(root.join(&dir)).map_err(|e| Error::io(root.join(&dir), e))?;
                io::write_json(&root.join(&dir).join("summary.json"), &summary)?;
                written.push(format!("{dir}/summary.json"));
            }
        }
    }
    Ok(written)
}
