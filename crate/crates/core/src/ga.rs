//! Gaussian approximation: a linear projection `M . X` for the mean with a
//! constant residual spread, fitted in one step under a spatial-gradient
//! smoothness penalty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{conjugate_gradient, dot, SampleMatrix};
use crate::metrics::{fit_climatology, skill_evaluation, threshold_quantile, GaussianPrediction, Skills};

/// Quadratic roughness form `H2(M) = |D M|^2` where `D` stacks forward
/// differences along longitude (periodic) and latitude (open), per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessOperator {
    pub n_lat: usize,
    pub n_lon: usize,
    /// Penalty multiplier per channel.
    pub channel_weights: Vec<f64>,
}

impl SmoothnessOperator {
    pub fn new(n_lat: usize, n_lon: usize, channel_weights: Vec<f64>) -> Self {
        Self {
            n_lat,
            n_lon,
            channel_weights,
        }
    }

    pub fn uniform(n_lat: usize, n_lon: usize, channels: usize) -> Self {
        Self::new(n_lat, n_lon, vec![1.0; channels])
    }

    pub fn dim(&self) -> usize {
        self.n_lat * self.n_lon * self.channel_weights.len()
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::shape(self.dim(), len));
        }
        Ok(())
    }

    /// Unweighted sum of squared differences of one channel.
    fn channel_value(&self, m: &[f64]) -> f64 {
        let (h, w) = (self.n_lat, self.n_lon);
        let mut s = 0.0;
        for i in 0..h {
            for j in 0..w {
                let v = m[i * w + j];
                let east = m[i * w + (j + 1) % w];
                s += (east - v).powi(2);
                if i + 1 < h {
                    s += (m[(i + 1) * w + j] - v).powi(2);
                }
            }
        }
        s
    }

    /// `out += weight * D^T D m` for one channel.
    fn channel_apply(&self, m: &[f64], weight: f64, out: &mut [f64]) {
        let (h, w) = (self.n_lat, self.n_lon);
        for i in 0..h {
            for j in 0..w {
                let a = i * w + j;
                let e = i * w + (j + 1) % w;
                let d = weight * (m[e] - m[a]);
                out[e] += d;
                out[a] -= d;
                if i + 1 < h {
                    let n = (i + 1) * w + j;
                    let d = weight * (m[n] - m[a]);
                    out[n] += d;
                    out[a] -= d;
                }
            }
        }
    }

    /// Weighted quadratic form `sum_c w_c H2(m_c)`.
    pub fn value(&self, m: &[f64]) -> Result<f64> {
        self.check(m.len())?;
        let n = self.n_lat * self.n_lon;
        Ok(self
            .channel_weights
            .iter()
            .zip(m.chunks_exact(n))
            .map(|(w, c)| w * self.channel_value(c))
            .sum())
    }

    /// `out = H m` with channel weights (the gradient of `value` is `2 H m`).
    pub fn apply(&self, m: &[f64], out: &mut [f64]) {
        let n = self.n_lat * self.n_lon;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (c, &w) in self.channel_weights.iter().enumerate() {
            if w != 0.0 {
                self.channel_apply(&m[c * n..(c + 1) * n], w, &mut out[c * n..(c + 1) * n]);
            }
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let n = self.n_lat * self.n_lon;
        let mut d = Vec::with_capacity(self.dim());
        for &w in &self.channel_weights {
            for i in 0..self.n_lat {
                let lat_edges = if self.n_lat == 1 {
                    0.0
                } else if i == 0 || i + 1 == self.n_lat {
                    1.0
                } else {
                    2.0
                };
                for _ in 0..self.n_lon {
                    d.push(w * (2.0 + lat_edges));
                }
            }
        }
        debug_assert_eq!(d.len(), n * self.channel_weights.len());
        d
    }
}

/// Roughness of a pattern: unweighted sum over channels of squared gradients.
pub fn h2(m: &[f64], n_lat: usize, n_lon: usize, channels: usize) -> Result<f64> {
    SmoothnessOperator::uniform(n_lat, n_lon, channels).value(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaModel {
    pub pattern: Vec<f64>,
    pub sigma: f64,
    pub epsilon: f64,
    pub n_lat: usize,
    pub n_lon: usize,
    pub channels: usize,
}

impl GaModel {
    pub fn dim(&self) -> usize {
        self.pattern.len()
    }

    pub fn index(&self, x: &[f64]) -> f64 {
        dot(&self.pattern, x)
    }

    pub fn parameter_count(&self) -> (usize, usize) {
        (self.pattern.len() + 1, 0)
    }

    pub fn h2(&self) -> f64 {
        h2(&self.pattern, self.n_lat, self.n_lon, self.channels).unwrap_or(f64::NAN)
    }
}

pub fn predict_ga(model: &GaModel, x: &[f64]) -> Result<GaussianPrediction> {
    if x.len() != model.dim() {
        return Err(Error::shape(model.dim(), x.len()));
    }
    Ok(GaussianPrediction {
        mu: model.index(x),
        sigma: model.sigma,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaOptions {
    pub n_lat: usize,
    pub n_lon: usize,
    pub channel_weights: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl GaOptions {
    pub fn new(n_lat: usize, n_lon: usize, channels: usize) -> Self {
        Self {
            n_lat,
            n_lon,
            channel_weights: vec![1.0; channels],
            tol: 1e-10,
            max_iter: 4000,
        }
    }
}

/// Normal equations of the regularised least-squares problem, prepared once
/// and solved for several penalty strengths.
pub struct GaProblem<'a> {
    x: &'a SampleMatrix,
    active: Vec<usize>,
    compact: Option<SampleMatrix>,
    rhs: Vec<f64>,
    data_diag: Vec<f64>,
    smooth: SmoothnessOperator,
    targets: &'a [f64],
    opts: GaOptions,
}

impl<'a> GaProblem<'a> {
    pub fn new(x: &'a SampleMatrix, targets: &'a [f64], opts: GaOptions) -> Result<Self> {
        if x.n() < 2 {
            return Err(Error::TooFewSamples { need: 2, got: x.n() });
        }
        if targets.len() != x.n() {
            return Err(Error::shape(x.n(), targets.len()));
        }
        let smooth = SmoothnessOperator::new(opts.n_lat, opts.n_lon, opts.channel_weights.clone());
        if smooth.dim() != x.d() {
            return Err(Error::shape(smooth.dim(), x.d()));
        }
        let d = x.d();
        let mut nonzero = vec![false; d];
        for r in x.rows() {
            for (nz, v) in nonzero.iter_mut().zip(r) {
                *nz |= *v != 0.0;
            }
        }
        let active: Vec<usize> = (0..d).filter(|&c| nonzero[c]).collect();
        let compact = (active.len() < d).then(|| x.select_columns(&active));
        let n = x.n() as f64;
        let mut rhs = vec![0.0; d];
        x.matvec_t(targets, &mut rhs);
        rhs.iter_mut().for_each(|v| *v /= n);
        let mut data_diag = vec![0.0; d];
        for r in x.rows() {
            for (dd, v) in data_diag.iter_mut().zip(r) {
                *dd += v * v;
            }
        }
        data_diag.iter_mut().for_each(|v| *v /= n);
        Ok(Self {
            x,
            active,
            compact,
            rhs,
            data_diag,
            smooth,
            targets,
            opts,
        })
    }

    /// `out = (X^T X / N) v` using only the non-zero columns.
    fn gram_apply(&self, v: &[f64], out: &mut [f64]) {
        let n = self.x.n();
        let mut u = vec![0.0; n];
        match &self.compact {
            Some(c) => {
                let vc: Vec<f64> = self.active.iter().map(|&j| v[j]).collect();
                c.matvec(&vc, &mut u);
                let mut g = vec![0.0; self.active.len()];
                c.matvec_t(&u, &mut g);
                out.iter_mut().for_each(|o| *o = 0.0);
                for (k, &j) in self.active.iter().enumerate() {
                    out[j] = g[k] / n as f64;
                }
            }
            None => {
                self.x.matvec(v, &mut u);
                self.x.matvec_t(&u, out);
                out.iter_mut().for_each(|o| *o /= n as f64);
            }
        }
    }

    /// Regularised objective `mean (A - M.X)^2 + eps H(M)`.
    pub fn objective(&self, m: &[f64], epsilon: f64) -> f64 {
        let mut pred = vec![0.0; self.x.n()];
        self.x.matvec(m, &mut pred);
        let mse = pred.iter().zip(self.targets).map(|(p, a)| (a - p).powi(2)).sum::<f64>() / self.x.n() as f64;
        mse + epsilon * self.smooth.value(m).unwrap_or(f64::NAN)
    }

    pub fn solve(&self, epsilon: f64, warm_start: Option<&[f64]>) -> Result<GaModel> {
        if !(epsilon >= 0.0) {
            return Err(Error::InvalidInput(format!("epsilon must be >= 0, got {epsilon}")));
        }
        let d = self.x.d();
        let h_diag = self.smooth.diagonal();
        let diag: Vec<f64> = self
            .data_diag
            .iter()
            .zip(&h_diag)
            .map(|(a, h)| a + epsilon * h)
            .collect();
        let mut m = warm_start.map_or_else(|| vec![0.0; d], <[f64]>::to_vec);
        let apply = |v: &[f64], out: &mut [f64]| {
            self.gram_apply(v, out);
            if epsilon > 0.0 {
                let mut hv = vec![0.0; v.len()];
                self.smooth.apply(v, &mut hv);
                for (o, h) in out.iter_mut().zip(&hv) {
                    *o += epsilon * h;
                }
            }
        };
        conjugate_gradient(apply, &self.rhs, &diag, &mut m, self.opts.tol, self.opts.max_iter)?;
        let sigma = residual_sigma(self.x, self.targets, &m)?;
        Ok(GaModel {
            pattern: m,
            sigma,
            epsilon,
            n_lat: self.opts.n_lat,
            n_lon: self.opts.n_lon,
            channels: self.opts.channel_weights.len(),
        })
    }
}

/// `sigma^2 = Var[A] - E[F A]^2 / Var[F]` with `F = M . X` on the training set.
pub fn residual_sigma(x: &SampleMatrix, a: &[f64], m: &[f64]) -> Result<f64> {
    let n = x.n() as f64;
    let mut f = vec![0.0; x.n()];
    x.matvec(m, &mut f);
    let mean_a = a.iter().sum::<f64>() / n;
    let var_a = a.iter().map(|v| (v - mean_a).powi(2)).sum::<f64>() / n;
    let mean_f = f.iter().sum::<f64>() / n;
    let var_f = f.iter().map(|v| (v - mean_f).powi(2)).sum::<f64>() / n;
    let e_fa = dot(&f, a) / n;
    let var = if var_f > 0.0 {
        var_a - e_fa * e_fa / var_f
    } else {
        var_a
    };
    if !(var > 0.0) {
        return Err(Error::InconsistentVariance(var));
    }
    Ok(var.sqrt())
}

pub fn fit_ga(x: &SampleMatrix, a: &[f64], epsilon: f64, opts: GaOptions) -> Result<GaModel> {
    GaProblem::new(x, a, opts)?.solve(epsilon, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    /// `None` when the solve failed (e.g. CG did not converge).
    pub skills: Option<Skills>,
    pub stderr: Option<Skills>,
    pub h2: Option<f64>,
    pub error: Option<String>,
}

/// Fit one model per penalty strength and score each on the validation split.
/// Penalties must be ascending; each solve warm-starts from the previous one.
pub fn epsilon_sweep(
    x: &SampleMatrix,
    a: &[f64],
    epsilons: &[f64],
    val_x: &SampleMatrix,
    val_a: &[f64],
    quantile: f64,
    opts: GaOptions,
) -> Result<(Vec<SweepRow>, Vec<Option<GaModel>>)> {
    if epsilons.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput("epsilon list must be ascending".into()));
    }
    let clim = fit_climatology(a)?;
    let a5 = threshold_quantile(a, quantile)?;
    let problem = GaProblem::new(x, a, opts)?;
    let mut rows = Vec::with_capacity(epsilons.len());
    let mut models = Vec::with_capacity(epsilons.len());
    let mut warm: Option<Vec<f64>> = None;
    for &eps in epsilons {
        match problem.solve(eps, warm.as_deref()) {
            Ok(model) => {
                let preds: Vec<GaussianPrediction> = val_x
                    .rows()
                    .map(|r| GaussianPrediction {
                        mu: model.index(r),
                        sigma: model.sigma,
                    })
                    .collect();
                let ev = skill_evaluation(&preds, val_a, &clim, a5)?;
                warm = Some(model.pattern.clone());
                rows.push(SweepRow {
                    epsilon: eps,
                    skills: Some(ev.skills),
                    stderr: Some(ev.stderr),
                    h2: Some(model.h2()),
                    error: None,
                });
                models.push(Some(model));
            }
            Err(e) => {
                rows.push(SweepRow {
                    epsilon: eps,
                    skills: None,
                    stderr: None,
                    h2: None,
                    error: Some(e.to_string()),
                });
                models.push(None);
            }
        }
    }
    Ok((rows, models))
}

/// Sweep rows averaged over folds; the standard error is that of the fold mean.
pub fn pool_sweeps(per_fold: &[Vec<SweepRow>]) -> Vec<SweepRow> {
    let Some(first) = per_fold.first() else {
        return Vec::new();
    };
    let k = per_fold.len() as f64;
    (0..first.len())
        .map(|i| {
            let eps = first[i].epsilon;
            let ok: Vec<&SweepRow> = per_fold.iter().filter_map(|f| f.get(i)).collect();
            if ok.iter().any(|r| r.skills.is_none()) || ok.len() != per_fold.len() {
                let err = ok
                    .iter()
                    .find_map(|r| r.error.clone())
                    .unwrap_or_else(|| "missing row".into());
                return SweepRow {
                    epsilon: eps,
                    skills: None,
                    stderr: None,
                    h2: None,
                    error: Some(err),
                };
            }
            let mean = |f: fn(&Skills) -> f64| ok.iter().map(|r| f(r.skills.as_ref().unwrap())).sum::<f64>() / k;
            let se = |f: fn(&Skills) -> f64| {
                (ok.iter().map(|r| f(r.stderr.as_ref().unwrap()).powi(2)).sum::<f64>()).sqrt() / k
            };
            SweepRow {
                epsilon: eps,
                skills: Some(Skills {
                    crpss: mean(|s| s.crpss),
                    nlls: mean(|s| s.nlls),
                    bces: mean(|s| s.bces),
                }),
                stderr: Some(Skills {
                    crpss: se(|s| s.crpss),
                    nlls: se(|s| s.nlls),
                    bces: se(|s| s.bces),
                }),
                h2: Some(ok.iter().map(|r| r.h2.unwrap()).sum::<f64>() / k),
                error: None,
            }
        })
        .collect()
}

/// Largest penalty whose validation BCES lies within one pooled standard
/// error of the best row.
pub fn select_epsilon(rows: &[SweepRow]) -> Option<usize> {
    let ok: Vec<(usize, f64, f64)> = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| Some((i, r.skills?.bces, r.stderr?.bces)))
        .collect();
    if ok.is_empty() {
        return None;
    }
    let best = ok.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
    let pooled = (ok.iter().map(|t| t.2 * t.2).sum::<f64>() / ok.len() as f64).sqrt();
    ok.iter()
        .filter(|t| t.1 >= best - pooled)
        .max_by(|a, b| rows[a.0].epsilon.total_cmp(&rows[b.0].epsilon))
        .map(|t| t.0)
}
