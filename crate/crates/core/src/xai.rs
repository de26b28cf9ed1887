//! Attribution and input-optimisation tools on top of any [`Predictor`].

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ga::{GaModel, SmoothnessOperator};
use crate::linalg::{dot, norm, SampleMatrix};
use crate::nnet::{OutputTarget, Predictor, ScatNetModel};
use crate::rng::{self, Rng};
use crate::scattering::ScatPath;

/// Per-pixel, per-channel contributions explaining one forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    /// Same layout as the input row.
    pub values: Vec<f64>,
    pub target: OutputTarget,
    /// `u(x)` for the explained input.
    pub output: f64,
    /// Mean of `u(x')` over the drawn baselines.
    pub baseline_expectation: f64,
    pub n_samples: usize,
}

impl AttributionMap {
    /// `sum(values) - (u(x) - E[u(x')])`.
    pub fn completeness_residual(&self) -> f64 {
        self.values.iter().sum::<f64>() - (self.output - self.baseline_expectation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedGradientsConfig {
    pub n_samples: usize,
    pub target: OutputTarget,
    /// Pair every `alpha` with `1 - alpha` on the same baseline.
    pub antithetic: bool,
}

impl Default for ExpectedGradientsConfig {
    fn default() -> Self {
        Self {
            n_samples: 256,
            target: OutputTarget::Mu,
            antithetic: false,
        }
    }
}

/// Expected gradients: baselines drawn uniformly from `background`, path
/// position `alpha ~ U(0, 1)`, one `(x', alpha)` pair per draw.
pub fn expected_gradients(
    model: &dyn Predictor,
    x: &[f64],
    background: &SampleMatrix,
    cfg: &ExpectedGradientsConfig,
    rng: &mut Rng,
) -> Result<AttributionMap> {
    if background.n() == 0 {
        return Err(Error::InvalidInput(
            "expected gradients need a non-empty background set".into(),
        ));
    }
    if cfg.n_samples == 0 {
        return Err(Error::Config("expected gradients need n_samples >= 1".into()));
    }
    let d = x.len();
    if background.d() != d || model.input_dim() != d {
        return Err(Error::shape(model.input_dim(), d));
    }
    let mut baselines = Vec::with_capacity(cfg.n_samples);
    let mut alphas = Vec::with_capacity(cfg.n_samples);
    while baselines.len() < cfg.n_samples {
        let b = rng.random_range(0..background.n());
        let a: f64 = rng.random();
        baselines.push(b);
        alphas.push(a);
        if cfg.antithetic && baselines.len() < cfg.n_samples {
            baselines.push(b);
            alphas.push(1.0 - a);
        }
    }
    let mut points = SampleMatrix::zeros(cfg.n_samples, d);
    for (s, (&b, &a)) in baselines.iter().zip(&alphas).enumerate() {
        let base = background.row(b);
        for ((p, xi), bi) in points.row_mut(s).iter_mut().zip(x).zip(base) {
            *p = bi + a * (xi - bi);
        }
    }
    let grads = model.input_gradients(&points, cfg.target)?;
    let mut values = vec![0.0; d];
    for (s, &b) in baselines.iter().enumerate() {
        let base = background.row(b);
        for (k, v) in values.iter_mut().enumerate() {
            *v += (x[k] - base[k]) * grads.row(s)[k];
        }
    }
    let inv = 1.0 / cfg.n_samples as f64;
    values.iter_mut().for_each(|v| *v *= inv);

    let drawn = background.select_rows(&baselines);
    let baseline_outputs = model.outputs(&drawn, cfg.target)?;
    let output = cfg.target.evaluate(&model.predict(x)?);
    Ok(AttributionMap {
        values,
        target: cfg.target,
        output,
        baseline_expectation: baseline_outputs.iter().sum::<f64>() * inv,
        n_samples: cfg.n_samples,
    })
}

/// Expected gradients for every row of `inputs`; row `i` uses stream `(seed, i)`.
pub fn expected_gradients_batch(
    model: &dyn Predictor,
    inputs: &SampleMatrix,
    background: &SampleMatrix,
    cfg: &ExpectedGradientsConfig,
    seed: u64,
) -> Result<Vec<AttributionMap>> {
    (0..inputs.n())
        .into_par_iter()
        .map(|i| {
            expected_gradients(
                model,
                inputs.row(i),
                background,
                cfg,
                &mut rng::stream(seed, &[0x6567, i as u64]),
            )
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgfiComparison {
    pub correlations: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Correlation between two models' attribution maps, input by input. Both
/// models see the same baselines and path positions.
pub fn egfi_comparison(
    model_a: &dyn Predictor,
    model_b: &dyn Predictor,
    inputs: &SampleMatrix,
    background: &SampleMatrix,
    cfg: &ExpectedGradientsConfig,
    seed: u64,
) -> Result<EgfiComparison> {
    let a = expected_gradients_batch(model_a, inputs, background, cfg, seed)?;
    let b = expected_gradients_batch(model_b, inputs, background, cfg, seed)?;
    let correlations: Vec<f64> = a.iter().zip(&b).map(|(p, q)| pearson(&p.values, &q.values)).collect();
    let (mean, std) = mean_std(&correlations);
    Ok(EgfiComparison {
        correlations,
        mean,
        std,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------- optimal input

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimalInputConfig {
    pub lambda2: f64,
    pub lambda_r: f64,
    /// Target L2 norm of the joint (all-channel) input.
    pub n0: f64,
    /// Target roughness `sqrt(H2)`.
    pub r0: f64,
    pub lambda_orth: f64,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
}

impl Default for OptimalInputConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl OptimalInputConfig {
    /// Reference regularisation weights and norm/roughness targets.
    pub fn reference() -> Self {
        Self {
            lambda2: 100.0,
            lambda_r: 0.1,
            n0: 0.7,
            r0: 28.0,
            lambda_orth: 10.0,
            steps: 2000,
            step_size: 1e-2,
            seed: 0,
            tolerance: 1e-10,
        }
    }

    /// Keep the weights, take `n0` and `r0` from the mean norm and roughness of `x`.
    pub fn calibrated(mut self, x: &SampleMatrix, n_lat: usize, n_lon: usize) -> Result<Self> {
        if x.n() == 0 {
            return Err(Error::TooFewSamples { need: 1, got: 0 });
        }
        let op = SmoothnessOperator::uniform(n_lat, n_lon, x.d() / (n_lat * n_lon).max(1));
        let mut n0 = 0.0;
        let mut r0 = 0.0;
        for r in x.rows() {
            n0 += norm(r);
            r0 += op.value(r)?.sqrt();
        }
        self.n0 = n0 / x.n() as f64;
        self.r0 = r0 / x.n() as f64;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let weights = [self.lambda2, self.lambda_r, self.lambda_orth, self.n0, self.r0];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("optimal-input weights and targets must be >= 0".into()));
        }
        if self.steps == 0 || !(self.step_size > 0.0) {
            return Err(Error::Config("optimal-input needs steps >= 1 and step_size > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalInputResult {
    pub input: Vec<f64>,
    pub trace: Vec<f64>,
    pub norm: f64,
    pub roughness: f64,
    pub mu: f64,
    pub converged: bool,
    pub config: OptimalInputConfig,
}

struct InputObjective<'a> {
    model: &'a dyn Predictor,
    cfg: &'a OptimalInputConfig,
    op: SmoothnessOperator,
    ga: Option<&'a GaModel>,
    ga_start: f64,
}

impl InputObjective<'_> {
    fn loss(&self, s: &[f64]) -> Result<f64> {
        let mu = self.model.predict(s)?.mu;
        let mut loss = -mu + self.cfg.lambda2 * (norm(s) - self.cfg.n0).powi(2);
        if self.cfg.lambda_r > 0.0 {
            loss += self.cfg.lambda_r * (self.op.value(s)?.sqrt() - self.cfg.r0).powi(2);
        }
        if let Some(ga) = self.ga {
            loss += self.cfg.lambda_orth * (ga.index(s) - self.ga_start).powi(2);
        }
        Ok(loss)
    }

    fn gradient(&self, s: &[f64]) -> Result<Vec<f64>> {
        let row = SampleMatrix::new(1, s.len(), s.to_vec())?;
        let mut g: Vec<f64> = self
            .model
            .input_gradients(&row, OutputTarget::Mu)?
            .row(0)
            .iter()
            .map(|v| -v)
            .collect();
        let n = norm(s);
        if self.cfg.lambda2 > 0.0 && n > 0.0 {
            let c = 2.0 * self.cfg.lambda2 * (n - self.cfg.n0) / n;
            g.iter_mut().zip(s).for_each(|(gi, si)| *gi += c * si);
        }
        if self.cfg.lambda_r > 0.0 {
            let mut hs = vec![0.0; s.len()];
            self.op.apply(s, &mut hs);
            let r = dot(s, &hs).max(0.0).sqrt();
            if r > 0.0 {
                let c = 2.0 * self.cfg.lambda_r * (r - self.cfg.r0) / r;
                g.iter_mut().zip(&hs).for_each(|(gi, h)| *gi += c * h);
            }
        }
        if let Some(ga) = self.ga {
            let c = 2.0 * self.cfg.lambda_orth * (ga.index(s) - self.ga_start);
            g.iter_mut().zip(&ga.pattern).for_each(|(gi, m)| *gi += c * m);
        }
        Ok(g)
    }
}

/// Gradient descent on the input coordinates with Armijo backtracking, so the
/// loss trace never increases.
pub fn optimal_input(
    model: &dyn Predictor,
    s0: &[f64],
    n_lat: usize,
    n_lon: usize,
    cfg: &OptimalInputConfig,
    ga: Option<&GaModel>,
) -> Result<OptimalInputResult> {
    cfg.validate()?;
    if s0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("seed input contains non-finite values".into()));
    }
    let cells = n_lat * n_lon;
    if cells == 0 || !s0.len().is_multiple_of(cells) || model.input_dim() != s0.len() {
        return Err(Error::shape(model.input_dim(), s0.len()));
    }
    let ga = if cfg.lambda_orth > 0.0 {
        Some(ga.ok_or_else(|| Error::Config("lambda_orth > 0 needs a GA model".into()))?)
    } else {
        None
    };
    let objective = InputObjective {
        model,
        cfg,
        op: SmoothnessOperator::uniform(n_lat, n_lon, s0.len() / cells),
        ga,
        ga_start: ga.map_or(0.0, |g| g.index(s0)),
    };

    let mut s = s0.to_vec();
    let mut loss = objective.loss(&s)?;
    let mut trace = vec![loss];
    let mut step = cfg.step_size;
    let mut converged = false;
    for _ in 0..cfg.steps {
        let g = objective.gradient(&s)?;
        let gg = dot(&g, &g);
        if !gg.is_finite() {
            return Err(Error::Diverged {
                steps: trace.len(),
                trace,
            });
        }
        if gg.sqrt() < cfg.tolerance {
            converged = true;
            break;
        }
        let mut accepted = None;
        for _ in 0..60 {
            let candidate: Vec<f64> = s.iter().zip(&g).map(|(si, gi)| si - step * gi).collect();
            let l = objective.loss(&candidate)?;
            if l.is_nan() {
                return Err(Error::Diverged {
                    steps: trace.len(),
                    trace,
                });
            }
            if l <= loss - 1e-4 * step * gg {
                accepted = Some((candidate, l));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((candidate, l)) => {
                // no representable decrease left: stationary to working precision
                let stalled = l >= loss;
                s = candidate;
                loss = l;
                trace.push(loss);
                step *= 2.0;
                if stalled {
                    converged = true;
                    break;
                }
            }
            None => {
                converged = true;
                break;
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Diverged {
            steps: trace.len(),
            trace,
        });
    }
    Ok(OptimalInputResult {
        norm: norm(&s),
        roughness: objective.op.value(&s)?.sqrt(),
        mu: model.predict(&s)?.mu,
        input: s,
        trace,
        converged,
        config: cfg.clone(),
    })
}

// ---------------------------------------------------------------- STNR

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StnrMap {
    pub values: Vec<f64>,
    /// Pixels whose spread hit the floor.
    pub floored: Vec<bool>,
}

pub const STNR_STD_FLOOR: f64 = 1e-12;

/// Pixelwise mean over (sample) standard deviation of an ensemble of inputs.
pub fn stnr(inputs: &[Vec<f64>]) -> Result<StnrMap> {
    if inputs.len() < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: inputs.len(),
        });
    }
    let d = inputs[0].len();
    if let Some(bad) = inputs.iter().find(|v| v.len() != d) {
        return Err(Error::shape(d, bad.len()));
    }
    let n = inputs.len() as f64;
    let mut values = Vec::with_capacity(d);
    let mut floored = Vec::with_capacity(d);
    for k in 0..d {
        let mean = inputs.iter().map(|v| v[k]).sum::<f64>() / n;
        let var = inputs.iter().map(|v| (v[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        floored.push(sd < STNR_STD_FLOOR);
        values.push(mean / sd.max(STNR_STD_FLOOR));
    }
    Ok(StnrMap { values, floored })
}

// ---------------------------------------------------------------- perturbation view

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationDecomposition {
    pub mu_ga: Vec<f64>,
    pub mu_pert: Vec<f64>,
}

impl PerturbationDecomposition {
    /// Quantiles of `|mu_ga|` and `|mu_pert|` at the given levels.
    pub fn abs_quantiles(&self, levels: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let q = |v: &[f64]| {
            let mut a: Vec<f64> = v.iter().map(|x| x.abs()).collect();
            a.sort_by(f64::total_cmp);
            levels
                .iter()
                .map(|&l| {
                    let pos = l.clamp(0.0, 1.0) * (a.len().saturating_sub(1)) as f64;
                    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
                    a[lo] + (pos - lo as f64) * (a[hi] - a[lo])
                })
                .collect::<Vec<f64>>()
        };
        (q(&self.mu_ga), q(&self.mu_pert))
    }
}

/// Split a model's mean forecast into the GA forecast plus a perturbation.
pub fn ga_perturbation_decomposition(
    model: &dyn Predictor,
    ga: &GaModel,
    x: &SampleMatrix,
) -> Result<PerturbationDecomposition> {
    let mu = model.predict_batch(x)?;
    let ga_mu = ga.predict_batch(x)?;
    Ok(PerturbationDecomposition {
        mu_pert: mu.iter().zip(&ga_mu).map(|(m, g)| m.mu - g.mu).collect(),
        mu_ga: ga_mu.iter().map(|g| g.mu).collect(),
    })
}

// ---------------------------------------------------------------- ScatNet importance

/// Relative importance (percent) by feature group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiAggregates {
    /// Order-0 (low-passed field) features.
    pub coarse: f64,
    /// Order-1 features by scale `j`.
    pub scales: Vec<f64>,
    /// Order-1 features by orientation `l`.
    pub orientations: Vec<f64>,
    pub soil_moisture: f64,
}

impl FiAggregates {
    pub fn total(&self) -> f64 {
        self.coarse + self.scales.iter().sum::<f64>() + self.soil_moisture
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatFeatureImportance {
    /// Signed importance of every scattering feature in `(pixel, channel)` order.
    pub scattering: Vec<f64>,
    pub paths: Vec<ScatPath>,
    pub pooled_shape: (usize, usize),
    /// Signed importance of every soil-moisture pixel used by the model.
    pub soil_moisture: Vec<f64>,
    pub aggregates: FiAggregates,
}

impl ScatFeatureImportance {
    /// Geography-resolved importance of one scattering channel.
    pub fn channel_map(&self, channel: usize) -> Vec<f64> {
        let c = self.paths.len();
        self.scattering.iter().skip(channel).step_by(c).copied().collect()
    }
}

/// `FI_i = E|X_i - E X_i| * beta_i` over the test inputs, weights of the mean head.
pub fn scatnet_feature_importance(model: &ScatNetModel, test_x: &SampleMatrix) -> Result<ScatFeatureImportance> {
    if test_x.n() == 0 {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let features = model.prepare(test_x)?;
    let fi = feature_importance(&features, &model.beta_mu());
    let bank = model.bank()?;
    let paths = bank.paths(model.config.max_order);
    let nf = model.scattering_feature_count();
    let (scattering, soil_moisture) = (fi[..nf].to_vec(), fi[nf..].to_vec());

    let mut coarse = 0.0;
    let mut scales = vec![0.0; bank.scales()];
    let mut orientations = vec![0.0; bank.orientations()];
    for (k, v) in scattering.iter().enumerate() {
        match paths[k % paths.len()] {
            ScatPath::Zero => coarse += v.abs(),
            ScatPath::One { j, l } => {
                scales[j] += v.abs();
                orientations[l] += v.abs();
            }
            ScatPath::Two { .. } => {}
        }
    }
    let sm: f64 = soil_moisture.iter().map(|v| v.abs()).sum();
    let total = coarse + scales.iter().sum::<f64>() + sm;
    let pct = |v: f64| if total > 0.0 { 100.0 * v / total } else { 0.0 };
    let order1: f64 = scales.iter().sum();
    let aggregates = FiAggregates {
        coarse: pct(coarse),
        scales: scales.iter().map(|&v| pct(v)).collect(),
        orientations: orientations
            .iter()
            .map(|&v| if order1 > 0.0 { pct(order1) * v / order1 } else { 0.0 })
            .collect(),
        soil_moisture: pct(sm),
    };
    Ok(ScatFeatureImportance {
        scattering,
        paths,
        pooled_shape: bank.output_shape(),
        soil_moisture,
        aggregates,
    })
}

/// Mean absolute deviation of each column times its weight.
pub fn feature_importance(x: &SampleMatrix, beta: &[f64]) -> Vec<f64> {
    let n = x.n() as f64;
    (0..x.d())
        .map(|k| {
            let mean = x.rows().map(|r| r[k]).sum::<f64>() / n;
            let mad = x.rows().map(|r| (r[k] - mean).abs()).sum::<f64>() / n;
            mad * beta[k]
        })
        .collect()
}

/// Gaussian smoothing of each channel for display; longitude wraps, latitude clamps.
pub fn smooth_map(values: &[f64], n_lat: usize, n_lon: usize, sigma_px: f64) -> Vec<f64> {
    if sigma_px <= 0.0 {
        return values.to_vec();
    }
    let radius = (3.0 * sigma_px).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma_px).powi(2)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let cells = n_lat * n_lon;
    let mut out = values.to_vec();
    for ch in out.chunks_mut(cells) {
        let mut tmp = vec![0.0; cells];
        for i in 0..n_lat {
            for j in 0..n_lon {
                tmp[i * n_lon + j] = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, w)| {
                        w * ch[i * n_lon + (j as isize + t as isize - radius).rem_euclid(n_lon as isize) as usize]
                    })
                    .sum::<f64>()
                    / ksum;
            }
        }
        for i in 0..n_lat {
            for j in 0..n_lon {
                ch[i * n_lon + j] = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, w)| {
                        let ii = (i as isize + t as isize - radius).clamp(0, n_lat as isize - 1) as usize;
                        w * tmp[ii * n_lon + j]
                    })
                    .sum::<f64>()
                    / ksum;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{CnnConfig, CnnModel, OutputInit, ScatNetConfig};
    use rand_distr::{Distribution, StandardNormal};

    fn rows(n: usize, d: usize, seed: u64) -> SampleMatrix {
        let mut r = rng::stream(seed, &[]);
        SampleMatrix::new(n, d, (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
    }

    fn ga(pattern: Vec<f64>, n_lat: usize, n_lon: usize) -> GaModel {
        let channels = pattern.len() / (n_lat * n_lon);
        GaModel {
            pattern,
            sigma: 0.9,
            epsilon: 0.0,
            n_lat,
            n_lon,
            channels,
        }
    }

    #[test]
    fn ga_attribution_is_exact_and_complete() {
        let d = 12;
        let model = ga((0..d).map(|k| (k as f64 * 0.7).cos()).collect(), 2, 3);
        let bg = rows(30, d, 1);
        let x = rows(1, d, 2);
        for n in [1, 7, 64] {
            let cfg = ExpectedGradientsConfig {
                n_samples: n,
                ..Default::default()
            };
            let map = expected_gradients(&model, x.row(0), &bg, &cfg, &mut rng::stream(3, &[n as u64])).unwrap();
            assert!(map.completeness_residual().abs() < 1e-10);
        }
        // full coverage of the background recovers (x - mean) * M
        let small = rows(2, d, 4);
        let cfg = ExpectedGradientsConfig {
            n_samples: 20000,
            ..Default::default()
        };
        let map = expected_gradients(&model, x.row(0), &small, &cfg, &mut rng::stream(5, &[])).unwrap();
        for k in 0..d {
            let mean = 0.5 * (small.row(0)[k] + small.row(1)[k]);
            let expect = (x.row(0)[k] - mean) * model.pattern[k];
            assert!((map.values[k] - expect).abs() < 0.05 * model.pattern[k].abs() * 4.0 + 1e-9);
        }
    }

    #[test]
    fn empty_background_is_an_error() {
        let model = ga(vec![1.0; 4], 2, 2);
        let bg = SampleMatrix::zeros(0, 4);
        assert!(expected_gradients(&model, &[0.0; 4], &bg, &Default::default(), &mut rng::stream(0, &[])).is_err());
    }

    #[test]
    fn egfi_self_and_sign_flip() {
        let d = 8;
        let m: Vec<f64> = (0..d).map(|k| k as f64 - 3.5).collect();
        let a = ga(m.clone(), 2, 2);
        let b = ga(m.iter().map(|v| -v).collect(), 2, 2);
        let x = rows(5, d, 6);
        let bg = rows(20, d, 7);
        let cfg = ExpectedGradientsConfig {
            n_samples: 32,
            ..Default::default()
        };
        let same = egfi_comparison(&a, &a, &x, &bg, &cfg, 1).unwrap();
        assert!(same.correlations.iter().all(|c| (c - 1.0).abs() < 1e-12));
        let flip = egfi_comparison(&a, &b, &x, &bg, &cfg, 1).unwrap();
        assert!(flip.correlations.iter().all(|c| (c + 1.0).abs() < 1e-12));
    }

    #[test]
    fn cnn_completeness_shrinks_with_samples() {
        let (h, w) = (8, 8);
        let mut r = rng::stream(8, &[]);
        let model = CnnModel::new(
            h,
            w,
            vec![1.0; h * w],
            CnnConfig {
                conv_channels: vec![4, 4],
                kernel: 3,
                stride: 2,
                dense: 8,
            },
            OutputInit { mean: 0.0, std: 1.0 },
            &mut r,
        )
        .unwrap();
        let bg = rows(50, 2 * h * w, 9);
        let x = rows(1, 2 * h * w, 10);
        let spread = |n: usize| {
            let res: Vec<f64> = (0..12)
                .map(|s| {
                    let cfg = ExpectedGradientsConfig {
                        n_samples: n,
                        ..Default::default()
                    };
                    expected_gradients(&model, x.row(0), &bg, &cfg, &mut rng::stream(s, &[n as u64]))
                        .unwrap()
                        .completeness_residual()
                })
                .collect();
            mean_std(&res).1
        };
        let (s16, s256) = (spread(16), spread(256));
        // 16x more samples: about 4x smaller spread
        assert!(s256 < s16 / 2.0, "{s16} -> {s256}");
    }

    #[test]
    fn optimal_input_aligns_with_ga_pattern() {
        let (h, w) = (4, 5);
        let d = 2 * h * w;
        let m: Vec<f64> = (0..d).map(|k| ((k * 7) % 5) as f64 * 0.1 - 0.2).collect();
        let model = ga(m.clone(), h, w);
        let cfg = OptimalInputConfig {
            lambda2: 100.0,
            lambda_r: 0.0,
            lambda_orth: 0.0,
            n0: 0.7,
            steps: 5000,
            ..OptimalInputConfig::reference()
        };
        let s0: Vec<f64> = rows(1, d, 11).row(0).iter().map(|v| v * 0.1).collect();
        let out = optimal_input(&model, &s0, h, w, &cfg, None).unwrap();
        let cos = dot(&out.input, &m) / (norm(&out.input) * norm(&m));
        assert!(cos > 0.999999, "cosine {cos}");
        let exact = cfg.n0 + norm(&m) / (2.0 * cfg.lambda2);
        assert!((out.norm - exact).abs() < 1e-6 * exact);
        assert!(out.trace.windows(2).all(|p| p[1] <= p[0]));
        assert_eq!(out.config, cfg);
    }

    #[test]
    fn unregularised_ascent_keeps_decreasing() {
        let model = ga(vec![1.0, -2.0, 0.5, 0.0], 2, 2);
        let cfg = OptimalInputConfig {
            lambda2: 0.0,
            lambda_r: 0.0,
            lambda_orth: 0.0,
            steps: 50,
            step_size: 1e-3,
            ..OptimalInputConfig::reference()
        };
        let out = optimal_input(&model, &[0.0; 4], 2, 2, &cfg, None).unwrap();
        assert_eq!(out.trace.len(), 51);
        assert!(out.trace.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn orthogonality_needs_ga_and_holds_ga_index() {
        let (h, w) = (3, 4);
        let d = 2 * h * w;
        let nonlinear_dir: Vec<f64> = (0..d).map(|k| if k % 2 == 0 { 1.0 } else { 0.2 }).collect();
        let target = ga(nonlinear_dir, h, w);
        let reference = ga((0..d).map(|k| if k < d / 2 { 1.0 } else { 0.0 }).collect(), h, w);
        let cfg = OptimalInputConfig {
            lambda_r: 0.0,
            lambda_orth: 1e4,
            n0: 1.0,
            ..OptimalInputConfig::reference()
        };
        assert!(optimal_input(&target, &vec![0.1; d], h, w, &cfg, None).is_err());
        let s0 = vec![0.1; d];
        let out = optimal_input(&target, &s0, h, w, &cfg, Some(&reference)).unwrap();
        assert!((reference.index(&out.input) - reference.index(&s0)).abs() < 1e-3);
    }

    #[test]
    fn reference_config_is_echoed() {
        let cfg = OptimalInputConfig::default();
        assert_eq!(
            (cfg.lambda2, cfg.lambda_r, cfg.lambda_orth, cfg.n0, cfg.r0),
            (100.0, 0.1, 10.0, 0.7, 28.0)
        );
        let json = serde_json::to_value(&cfg).unwrap();
        assert_eq!(json["lambda_orth"], 10.0);
        let bad = OptimalInputConfig { lambda2: -1.0, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stnr_cases() {
        let same = vec![vec![1.0, -2.0], vec![1.0, -2.0], vec![1.0, -2.0]];
        let s = stnr(&same).unwrap();
        assert!(s.floored.iter().all(|&f| f));
        let alt = vec![vec![0.5, 2.0], vec![-0.5, -2.0], vec![0.5, 2.0], vec![-0.5, -2.0]];
        let s = stnr(&alt).unwrap();
        assert!(s.values.iter().all(|v| v.abs() < 1e-15));
        let data = rows(6, 5, 12);
        let ens: Vec<Vec<f64>> = data.rows().map(<[f64]>::to_vec).collect();
        let s = stnr(&ens).unwrap();
        for k in 0..5 {
            let col: Vec<f64> = ens.iter().map(|v| v[k]).collect();
            let mean = col.iter().sum::<f64>() / 6.0;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
            assert!((s.values[k] - mean / sd).abs() < 1e-12);
        }
        assert!(stnr(&ens[..1]).is_err());
    }

    #[test]
    fn decomposition_identity() {
        let d = 8;
        let a = ga((0..d).map(|k| k as f64).collect(), 2, 2);
        let b = ga((0..d).map(|k| (k as f64).sin()).collect(), 2, 2);
        let x = rows(10, d, 13);
        let dec = ga_perturbation_decomposition(&b, &a, &x).unwrap();
        let mu = b.predict_batch(&x).unwrap();
        for i in 0..10 {
            assert!((dec.mu_ga[i] + dec.mu_pert[i] - mu[i].mu).abs() <= 1e-14 * mu[i].mu.abs().max(1.0));
        }
        let same = ga_perturbation_decomposition(&a, &a, &x).unwrap();
        assert!(same.mu_pert.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn feature_importance_rules() {
        let x = rows(40, 3, 14);
        let fi = feature_importance(&x, &[0.0, 2.0, -1.0]);
        assert_eq!(fi[0], 0.0);
        assert!(fi[2] < 0.0);
        let mut scaled = x.clone();
        for i in 0..scaled.n() {
            scaled.row_mut(i)[1] *= 4.0;
        }
        let fi2 = feature_importance(&scaled, &[0.0, 0.5, -1.0]);
        assert!((fi2[1] - fi[1]).abs() < 1e-12);
    }

    #[test]
    fn scatnet_aggregates_sum_to_hundred() {
        let (h, w) = (8, 16);
        let x = rows(30, 2 * h * w, 15);
        let cfg = ScatNetConfig {
            scales: 2,
            orientations: 4,
            max_order: 1,
        };
        let (mut model, _) = ScatNetModel::new(
            h,
            w,
            vec![1, 2, 3],
            cfg,
            &x,
            OutputInit { mean: 0.0, std: 1.0 },
            &mut rng::stream(16, &[]),
        )
        .unwrap();
        model.params[0]
            .data
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = ((i * 13) % 7) as f64 - 3.0);
        let fi = scatnet_feature_importance(&model, &x).unwrap();
        assert!((fi.aggregates.total() - 100.0).abs() < 1e-9);
        let orient: f64 = fi.aggregates.orientations.iter().sum();
        let scales: f64 = fi.aggregates.scales.iter().sum();
        assert!((orient - scales).abs() < 1e-9);
        let (hs, ws) = fi.pooled_shape;
        assert_eq!(fi.channel_map(0).len(), hs * ws);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let v = vec![2.5; 2 * 4 * 6];
        let s = smooth_map(&v, 4, 6, 1.3);
        assert!(s.iter().all(|x| (x - 2.5).abs() < 1e-12));
        assert_eq!(smooth_map(&v, 4, 6, 0.0), v);
    }
}
