//! Probabilistic scores for Gaussian predictions, the climatological baseline
//! and skill scores relative to it.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Exceedance probability used for the climatological BCE baseline.
pub const CLIMATOLOGY_EXCEEDANCE: f64 = 0.05;

pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z - HALF_LN_2PI).exp()
}

pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// `1 - Φ(z)` without cancellation in the upper tail.
pub fn norm_sf(z: f64) -> f64 {
    0.5 * erfc(z / SQRT_2)
}

/// Predictive normal distribution for the heatwave amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianPrediction {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "invalid prediction mu={mu}, sigma={sigma}"
            )));
        }
        Ok(Self { mu, sigma })
    }

    /// `P(A >= a)`.
    pub fn exceedance(&self, a: f64) -> f64 {
        norm_sf((a - self.mu) / self.sigma)
    }
}

/// Closed-form CRPS of a normal forecast.
pub fn crps_gaussian(pred: GaussianPrediction, y: f64) -> f64 {
    let z = (y - pred.mu) / pred.sigma;
    pred.sigma * (z * (2.0 * norm_cdf(z) - 1.0) + 2.0 * norm_pdf(z) - INV_SQRT_PI)
}

pub fn nll_gaussian(pred: GaussianPrediction, y: f64) -> f64 {
    let z = (y - pred.mu) / pred.sigma;
    0.5 * z * z + pred.sigma.ln() + HALF_LN_2PI
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross entropy of the event `A >= a5`.
pub fn bce(pred: GaussianPrediction, y: f64, a5: f64) -> f64 {
    let z = (a5 - pred.mu) / pred.sigma;
    if y < a5 {
        -clamp_prob(norm_cdf(z)).ln()
    } else {
        -clamp_prob(norm_sf(z)).ln()
    }
}

/// BCE of a forecast issuing a fixed exceedance probability.
pub fn bce_constant(exceed: f64, y: f64, a5: f64) -> f64 {
    if y < a5 {
        -clamp_prob(1.0 - exceed).ln()
    } else {
        -clamp_prob(exceed).ln()
    }
}

/// Permutation-invariant mean: sort, then pairwise summation.
pub fn stable_mean(values: &[f64]) -> f64 {
    fn pairwise(v: &[f64]) -> f64 {
        if v.len() <= 16 {
            v.iter().sum()
        } else {
            let (a, b) = v.split_at(v.len() / 2);
            pairwise(a) + pairwise(b)
        }
    }
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    pairwise(&v) / v.len() as f64
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn threshold_quantile(targets: &[f64], q: f64) -> Result<f64> {
    if targets.len() < 20 {
        return Err(Error::TooFewSamples {
            need: 20,
            got: targets.len(),
        });
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidInput(format!("quantile {q} outside [0, 1]")));
    }
    let mut v = targets.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Number of quadrature nodes for the climatological CRPS.
pub const CLIM_QUADRATURE_POINTS: usize = 4096;

/// Gaussian-kernel density estimate of the training targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClimatologyModel {
    kde_points: Vec<f64>,
    bandwidth: f64,
    exceedance_prob: f64,
    lo: f64,
    hi: f64,
    /// Trapezoid prefix integrals of `F^2` and `(1 - F)^2` on the node grid.
    cdf_sq: Vec<f64>,
    ccdf_sq: Vec<f64>,
    cdf_nodes: Vec<f64>,
}

pub fn fit_climatology(train_targets: &[f64]) -> Result<ClimatologyModel> {
    if train_targets.len() < 30 {
        return Err(Error::TooFewSamples {
            need: 30,
            got: train_targets.len(),
        });
    }
    if train_targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite target".into()));
    }
    let n = train_targets.len() as f64;
    let mean = train_targets.iter().sum::<f64>() / n;
    let std = (train_targets.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let silverman = 1.06 * std * n.powf(-0.2);
    let bandwidth = silverman.max(1e-6 * std.max(1.0));

    let mut kde_points = train_targets.to_vec();
    kde_points.sort_by(f64::total_cmp);
    let lo = kde_points[0] - 10.0 * bandwidth;
    let hi = kde_points[kde_points.len() - 1] + 10.0 * bandwidth;
    let mut model = ClimatologyModel {
        kde_points,
        bandwidth,
        exceedance_prob: CLIMATOLOGY_EXCEEDANCE,
        lo,
        hi,
        cdf_sq: Vec::new(),
        ccdf_sq: Vec::new(),
        cdf_nodes: Vec::new(),
    };
    let step = model.step();
    let nodes: Vec<f64> = (0..CLIM_QUADRATURE_POINTS)
        .map(|k| model.cdf(lo + step * k as f64))
        .collect();
    let mut cdf_sq = vec![0.0; nodes.len()];
    let mut ccdf_sq = vec![0.0; nodes.len()];
    for k in 1..nodes.len() {
        cdf_sq[k] = cdf_sq[k - 1] + 0.5 * step * (nodes[k - 1].powi(2) + nodes[k].powi(2));
        ccdf_sq[k] = ccdf_sq[k - 1] + 0.5 * step * ((1.0 - nodes[k - 1]).powi(2) + (1.0 - nodes[k]).powi(2));
    }
    model.cdf_sq = cdf_sq;
    model.ccdf_sq = ccdf_sq;
    model.cdf_nodes = nodes;
    Ok(model)
}

impl ClimatologyModel {
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn points(&self) -> &[f64] {
        &self.kde_points
    }

    pub fn exceedance_prob(&self) -> f64 {
        self.exceedance_prob
    }

    fn step(&self) -> f64 {
        (self.hi - self.lo) / (CLIM_QUADRATURE_POINTS - 1) as f64
    }

    pub fn mean(&self) -> f64 {
        self.kde_points.iter().sum::<f64>() / self.kde_points.len() as f64
    }

    pub fn density(&self, y: f64) -> f64 {
        let h = self.bandwidth;
        self.kde_points.iter().map(|&x| norm_pdf((y - x) / h)).sum::<f64>() / (h * self.kde_points.len() as f64)
    }

    pub fn cdf(&self, y: f64) -> f64 {
        let h = self.bandwidth;
        self.kde_points.iter().map(|&x| norm_cdf((y - x) / h)).sum::<f64>() / self.kde_points.len() as f64
    }

    pub fn nll(&self, y: f64) -> f64 {
        -self.density(y).max(f64::MIN_POSITIVE).ln()
    }

    /// CRPS by trapezoid quadrature of the mixture CDF on the node grid, split
    /// exactly at the observation.
    pub fn crps(&self, y: f64) -> f64 {
        let last = CLIM_QUADRATURE_POINTS - 1;
        if y <= self.lo {
            return (self.lo - y) + self.ccdf_sq[last];
        }
        if y >= self.hi {
            return self.cdf_sq[last] + (y - self.hi);
        }
        let step = self.step();
        let k = (((y - self.lo) / step).floor() as usize).min(last - 1);
        let xk = self.lo + step * k as f64;
        let fy = self.cdf(y);
        let fk = self.cdf_nodes[k];
        let fk1 = self.cdf_nodes[k + 1];
        let left = y - xk;
        let right = xk + step - y;
        let below = self.cdf_sq[k] + 0.5 * left * (fk * fk + fy * fy);
        let above =
            0.5 * right * ((1.0 - fy).powi(2) + (1.0 - fk1).powi(2)) + (self.ccdf_sq[last] - self.ccdf_sq[k + 1]);
        below + above
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Skills {
    pub crpss: f64,
    pub nlls: f64,
    pub bces: f64,
}

/// Skills with the standard error of each, from per-sample score spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkillEvaluation {
    pub skills: Skills,
    pub stderr: Skills,
    pub model_crps: f64,
    pub model_nll: f64,
    pub model_bce: f64,
    pub clim_crps: f64,
    pub clim_nll: f64,
    pub clim_bce: f64,
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let m = stable_mean(v);
    let n = v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let dev: Vec<f64> = v.iter().map(|x| (x - m).powi(2)).collect();
    let var = stable_mean(&dev) * n / (n - 1.0);
    (m, (var / n).sqrt())
}

pub fn skill_scores(
    predictions: &[GaussianPrediction],
    targets: &[f64],
    clim: &ClimatologyModel,
    a5: f64,
) -> Result<Skills> {
    skill_evaluation(predictions, targets, clim, a5).map(|e| e.skills)
}

pub fn skill_evaluation(
    predictions: &[GaussianPrediction],
    targets: &[f64],
    clim: &ClimatologyModel,
    a5: f64,
) -> Result<SkillEvaluation> {
    if predictions.len() != targets.len() {
        return Err(Error::shape(targets.len(), predictions.len()));
    }
    if targets.is_empty() {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let crps_m: Vec<f64> = predictions
        .iter()
        .zip(targets)
        .map(|(p, &y)| crps_gaussian(*p, y))
        .collect();
    let nll_m: Vec<f64> = predictions
        .iter()
        .zip(targets)
        .map(|(p, &y)| nll_gaussian(*p, y))
        .collect();
    let bce_m: Vec<f64> = predictions.iter().zip(targets).map(|(p, &y)| bce(*p, y, a5)).collect();
    let crps_c: Vec<f64> = targets.iter().map(|&y| clim.crps(y)).collect();
    let nll_c: Vec<f64> = targets.iter().map(|&y| clim.nll(y)).collect();
    let bce_c: Vec<f64> = targets
        .iter()
        .map(|&y| bce_constant(clim.exceedance_prob(), y, a5))
        .collect();

    let (cm, cm_se) = mean_and_se(&crps_m);
    let (nm, nm_se) = mean_and_se(&nll_m);
    let (bm, bm_se) = mean_and_se(&bce_m);
    let cc = stable_mean(&crps_c);
    let nc = stable_mean(&nll_c);
    let bc = stable_mean(&bce_c);
    for (metric, value) in [("CRPS", cc), ("NLL", nc), ("BCE", bc)] {
        if !(value > 0.0) {
            return Err(Error::DegenerateBaseline { metric, value });
        }
    }
    Ok(SkillEvaluation {
        skills: Skills {
            crpss: 1.0 - cm / cc,
            nlls: 1.0 - nm / nc,
            bces: 1.0 - bm / bc,
        },
        stderr: Skills {
            crpss: cm_se / cc,
            nlls: nm_se / nc,
            bces: bm_se / bc,
        },
        model_crps: cm,
        model_nll: nm,
        model_bce: bm,
        clim_crps: cc,
        clim_nll: nc,
        clim_bce: bc,
    })
}

/// Skills over cross-validation folds with mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillReport {
    pub per_fold: Vec<Skills>,
    pub mean: Skills,
    pub std: Skills,
}

impl SkillReport {
    pub fn from_folds(per_fold: Vec<Skills>) -> Self {
        let stat = |f: fn(&Skills) -> f64| {
            let v: Vec<f64> = per_fold.iter().map(f).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let s = if v.len() > 1 {
                (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            (m, s)
        };
        let (c, cs) = stat(|s| s.crpss);
        let (n, ns) = stat(|s| s.nlls);
        let (b, bs) = stat(|s| s.bces);
        Self {
            per_fold,
            mean: Skills {
                crpss: c,
                nlls: n,
                bces: b,
            },
            std: Skills {
                crpss: cs,
                nlls: ns,
                bces: bs,
            },
        }
    }
}
