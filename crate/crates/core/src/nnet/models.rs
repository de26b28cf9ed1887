//! The three trainable models: IINN, ScatNet heads and a compact CNN.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::autodiff::{sigma_from_raw, sigmoid, softplus_inverse, Tape, Tensor, Var};
use super::{OutputTarget, Predictor, Trainable};
use crate::error::{Error, Result};
use crate::ga::SmoothnessOperator;
use crate::linalg::{dot, SampleMatrix};
use crate::metrics::{norm_pdf, GaussianPrediction};
use crate::rng::Rng;
use crate::scattering::{FilterBank, ScatPath};

/// Uniform fan-in initialisation `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn init_weight(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor {
        shape: vec![fan_in, fan_out],
        data,
    }
}

/// Mean and spread used to start the output heads at climatology.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputInit {
    pub mean: f64,
    pub std: f64,
}

impl OutputInit {
    pub fn from_targets(y: &[f64]) -> Self {
        let n = y.len().max(1) as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt().max(1e-6),
        }
    }
}

/// Cotangents on `(mu, raw_sigma)` for an attribution target.
pub(crate) fn output_seeds(mu: &[f64], raw: &[f64], target: OutputTarget) -> (Vec<f64>, Vec<f64>) {
    let n = mu.len();
    match target {
        OutputTarget::Mu => (vec![1.0; n], vec![0.0; n]),
        OutputTarget::Sigma => (vec![0.0; n], raw.iter().map(|r| sigmoid(*r)).collect()),
        OutputTarget::Exceedance(a) => {
            let mut gm = Vec::with_capacity(n);
            let mut gs = Vec::with_capacity(n);
            for (m, r) in mu.iter().zip(raw) {
                let s = sigma_from_raw(*r);
                let z = (a - m) / s;
                gm.push(norm_pdf(z) / s);
                gs.push(norm_pdf(z) * z / s * sigmoid(*r));
            }
            (gm, gs)
        }
    }
}

const PREDICT_CHUNK: usize = 256;

/// Batched forward pass without keeping gradients.
pub(crate) fn predict_with<M: Trainable + Sync>(model: &M, inputs: &SampleMatrix) -> Vec<GaussianPrediction> {
    let idx: Vec<usize> = (0..inputs.n()).collect();
    idx.par_chunks(PREDICT_CHUNK)
        .flat_map_iter(|chunk| {
            let mut tape = Tape::new();
            let params: Vec<Var> = model.parameters().iter().map(|p| tape.leaf(p.clone())).collect();
            let x = tape.leaf(model.batch_tensor(inputs, chunk));
            let (mu, raw) = model.forward(&mut tape, &params, x);
            let out: Vec<GaussianPrediction> = tape
                .value(mu)
                .data
                .iter()
                .zip(&tape.value(raw).data)
                .map(|(&m, &r)| GaussianPrediction {
                    mu: m,
                    sigma: sigma_from_raw(r),
                })
                .collect();
            out
        })
        .collect()
}

/// Gradient of the target output w.r.t. the batch tensor given to `forward`.
fn tensor_gradients<M: Trainable + Sync>(model: &M, inputs: &SampleMatrix, target: OutputTarget) -> Vec<Vec<f64>> {
    let idx: Vec<usize> = (0..inputs.n()).collect();
    idx.par_chunks(PREDICT_CHUNK)
        .flat_map_iter(|chunk| {
            let mut tape = Tape::new();
            let params: Vec<Var> = model.parameters().iter().map(|p| tape.leaf(p.clone())).collect();
            let x = tape.leaf(model.batch_tensor(inputs, chunk));
            let (mu, raw) = model.forward(&mut tape, &params, x);
            let (gm, gs) = output_seeds(&tape.value(mu).data, &tape.value(raw).data, target);
            let grads = tape.backward_seeded(&[(mu, Tensor::vector(gm)), (raw, Tensor::vector(gs))]);
            let gx = grads
                .get(x)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&tape.value(x).shape));
            let per = gx.len() / chunk.len();
            let rows: Vec<Vec<f64>> = gx.data.chunks_exact(per).map(<[f64]>::to_vec).collect();
            rows
        })
        .collect()
}

// ---------------------------------------------------------------- IINN

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IinnConfig {
    pub hidden: Vec<usize>,
    /// Replace both heads by affine maps of the index.
    pub affine_heads: bool,
    pub epsilon: f64,
}

impl Default for IinnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            affine_heads: false,
            epsilon: 0.0,
        }
    }
}

/// Projection onto a learned pattern, then scalar MLP heads for mean and spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IinnModel {
    pub config: IinnConfig,
    pub n_lat: usize,
    pub n_lon: usize,
    pub channel_weights: Vec<f64>,
    #[serde(skip)]
    pub params: Vec<Tensor>,
}

impl IinnModel {
    pub fn new(
        n_lat: usize,
        n_lon: usize,
        channel_weights: Vec<f64>,
        config: IinnConfig,
        init: OutputInit,
        rng: &mut Rng,
    ) -> Result<Self> {
        if config.hidden.contains(&0) {
            return Err(Error::Config("IINN hidden layer sizes must be positive".into()));
        }
        let d = n_lat * n_lon * channel_weights.len();
        let mut params = vec![Tensor::zeros(&[d, 1])];
        let raw_std = softplus_inverse(init.std);
        for out_bias in [init.mean, raw_std] {
            let mut fan_in = 1;
            let layers: Vec<usize> = if config.affine_heads {
                vec![]
            } else {
                config.hidden.clone()
            };
            for &h in &layers {
                params.push(init_weight(rng, fan_in, h));
                // the pattern starts at zero, so zero biases would leave every unit inactive
                params.push(Tensor::vector(vec![0.1; h]));
                fan_in = h;
            }
            params.push(init_weight(rng, fan_in, 1));
            params.push(Tensor::vector(vec![out_bias]));
        }
        Ok(Self {
            config,
            n_lat,
            n_lon,
            channel_weights,
            params,
        })
    }

    pub fn pattern(&self) -> &[f64] {
        &self.params[0].data
    }

    fn smoothness(&self) -> SmoothnessOperator {
        SmoothnessOperator::new(self.n_lat, self.n_lon, self.channel_weights.clone())
    }

    fn head_layers(&self) -> usize {
        if self.config.affine_heads {
            1
        } else {
            self.config.hidden.len() + 1
        }
    }

    fn head(&self, tape: &mut Tape, params: &[Var], index: Var) -> Var {
        let layers = self.head_layers();
        let mut h = index;
        for k in 0..layers {
            h = tape.matmul(h, params[2 * k]);
            h = tape.add_bias(h, params[2 * k + 1]);
            if k + 1 < layers {
                h = tape.relu(h);
            }
        }
        let n = tape.value(h).len();
        tape.reshape(h, &[n])
    }

    /// Mean head evaluated on index values `F = M . x`.
    pub fn mean_head(&self, index: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let f = tape.leaf(Tensor::new(vec![index.len(), 1], index.to_vec()).expect("column"));
        let per = 2 * self.head_layers();
        let mu = self.head(&mut tape, &params[1..1 + per], f);
        tape.value(mu).data.clone()
    }
}

impl Trainable for IinnModel {
    fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn batch_tensor(&self, inputs: &SampleMatrix, idx: &[usize]) -> Tensor {
        Tensor {
            shape: vec![idx.len(), inputs.d()],
            data: inputs.select_rows(idx).data().to_vec(),
        }
    }

    fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> (Var, Var) {
        let index = tape.matmul(x, params[0]);
        let per = 2 * self.head_layers();
        let mu = self.head(tape, &params[1..1 + per], index);
        let raw = self.head(tape, &params[1 + per..1 + 2 * per], index);
        (mu, raw)
    }

    fn penalty(&self, grads: Option<&mut [Tensor]>) -> f64 {
        let eps = self.config.epsilon;
        if eps == 0.0 {
            return 0.0;
        }
        let op = self.smoothness();
        let m = self.pattern();
        if let Some(g) = grads {
            let mut hm = vec![0.0; m.len()];
            op.apply(m, &mut hm);
            for (gi, h) in g[0].data.iter_mut().zip(&hm) {
                *gi += 2.0 * eps * h;
            }
        }
        eps * op.value(m).unwrap_or(f64::NAN)
    }
}

impl Predictor for IinnModel {
    fn input_dim(&self) -> usize {
        self.params[0].len()
    }

    fn predict_batch(&self, x: &SampleMatrix) -> Result<Vec<GaussianPrediction>> {
        check_dim(self.input_dim(), x.d())?;
        Ok(predict_with(self, x))
    }

    fn input_gradients(&self, x: &SampleMatrix, target: OutputTarget) -> Result<SampleMatrix> {
        check_dim(self.input_dim(), x.d())?;
        SampleMatrix::from_rows(&tensor_gradients(self, x, target))
    }

    fn parameter_count(&self) -> (usize, usize) {
        (self.params.iter().map(Tensor::len).sum(), 0)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::shape(expected, got));
    }
    Ok(())
}

// ---------------------------------------------------------------- ScatNet

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatNetConfig {
    pub scales: usize,
    pub orientations: usize,
    /// 0 gives the coarse variant, 1 the standard one.
    pub max_order: usize,
}

impl Default for ScatNetConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            orientations: 8,
            max_order: 1,
        }
    }
}

/// Linear heads on standardised scattering features of `z500` plus the raw
/// soil-moisture pixels inside the region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScatNetModel {
    pub config: ScatNetConfig,
    pub n_lat: usize,
    pub n_lon: usize,
    pub sm_cells: Vec<usize>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    #[serde(skip)]
    pub params: Vec<Tensor>,
    #[serde(skip)]
    bank: Option<FilterBank>,
}

impl ScatNetModel {
    /// Build the bank, fit feature standardisation on `train` and return the
    /// model together with the prepared training features.
    pub fn new(
        n_lat: usize,
        n_lon: usize,
        sm_cells: Vec<usize>,
        config: ScatNetConfig,
        train: &SampleMatrix,
        init: OutputInit,
        rng: &mut Rng,
    ) -> Result<(Self, SampleMatrix)> {
        if config.max_order > 1 {
            return Err(Error::Config("ScatNet uses scattering orders 0 or 1".into()));
        }
        let bank = FilterBank::with_padding(config.scales, config.orientations, n_lat, n_lon)?;
        let mut model = Self {
            config,
            n_lat,
            n_lon,
            sm_cells,
            feature_mean: Vec::new(),
            feature_std: Vec::new(),
            params: Vec::new(),
            bank: Some(bank),
        };
        check_dim(2 * n_lat * n_lon, train.d())?;
        let raw = model
            .bank()?
            .scatter_rows(&model.z500_part(train), model.config.max_order)?;
        let n = raw.n().max(1) as f64;
        let f = raw.d();
        let mut mean = vec![0.0; f];
        for r in raw.rows() {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; f];
        for r in raw.rows() {
            var.iter_mut()
                .zip(r)
                .zip(&mean)
                .for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
        }
        model.feature_mean = mean;
        model.feature_std = var
            .iter()
            .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        let prepared = model.assemble(&raw, train);
        model.reinitialize(init, rng);
        Ok((model, prepared))
    }

    /// Fresh head weights, keeping the fitted feature standardisation.
    pub fn reinitialize(&mut self, init: OutputInit, rng: &mut Rng) {
        let mut w = init_weight(rng, self.feature_count(), 2);
        w.data.iter_mut().for_each(|v| *v *= 0.1);
        self.params = vec![w, Tensor::vector(vec![init.mean, softplus_inverse(init.std)])];
    }

    pub fn bank(&self) -> Result<&FilterBank> {
        self.bank
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("filter bank not built".into()))
    }

    /// Rebuild the fixed filter bank after deserialisation.
    pub fn rebuild_bank(&mut self) -> Result<()> {
        self.bank = Some(FilterBank::with_padding(
            self.config.scales,
            self.config.orientations,
            self.n_lat,
            self.n_lon,
        )?);
        Ok(())
    }

    fn cells(&self) -> usize {
        self.n_lat * self.n_lon
    }

    fn z500_part(&self, x: &SampleMatrix) -> SampleMatrix {
        let cols: Vec<usize> = (0..self.cells()).collect();
        x.select_columns(&cols)
    }

    fn assemble(&self, scat: &SampleMatrix, x: &SampleMatrix) -> SampleMatrix {
        let hw = self.cells();
        let rows: Vec<Vec<f64>> = scat
            .rows()
            .zip(x.rows())
            .map(|(s, r)| {
                let mut v: Vec<f64> = s
                    .iter()
                    .zip(&self.feature_mean)
                    .zip(&self.feature_std)
                    .map(|((v, m), sd)| (v - m) / sd)
                    .collect();
                v.extend(self.sm_cells.iter().map(|&c| r[hw + c]));
                v
            })
            .collect();
        SampleMatrix::from_rows(&rows).expect("rows share a width")
    }

    /// Model inputs (standardised features and soil-moisture pixels) for raw rows.
    pub fn prepare(&self, x: &SampleMatrix) -> Result<SampleMatrix> {
        check_dim(2 * self.cells(), x.d())?;
        let scat = self.bank()?.scatter_rows(&self.z500_part(x), self.config.max_order)?;
        Ok(self.assemble(&scat, x))
    }

    pub fn feature_count(&self) -> usize {
        self.feature_mean.len() + self.sm_cells.len()
    }

    pub fn scattering_feature_count(&self) -> usize {
        self.feature_mean.len()
    }

    /// Path of every scattering feature, in feature order.
    pub fn feature_paths(&self) -> Result<Vec<ScatPath>> {
        let paths = self.bank()?.paths(self.config.max_order);
        let (hs, ws) = self.bank()?.output_shape();
        Ok((0..hs * ws).flat_map(|_| paths.iter().copied()).collect())
    }

    /// Weights of the mean head.
    pub fn beta_mu(&self) -> Vec<f64> {
        self.params[0].data.iter().step_by(2).copied().collect()
    }

    pub fn beta_sigma(&self) -> Vec<f64> {
        self.params[0].data.iter().skip(1).step_by(2).copied().collect()
    }

    pub fn predict_prepared(&self, features: &SampleMatrix) -> Result<Vec<GaussianPrediction>> {
        check_dim(self.feature_count(), features.d())?;
        Ok(predict_with(self, features))
    }
}

impl Trainable for ScatNetModel {
    fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn batch_tensor(&self, inputs: &SampleMatrix, idx: &[usize]) -> Tensor {
        Tensor {
            shape: vec![idx.len(), inputs.d()],
            data: inputs.select_rows(idx).data().to_vec(),
        }
    }

    fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> (Var, Var) {
        let h = tape.matmul(x, params[0]);
        let h = tape.add_bias(h, params[1]);
        (tape.column(h, 0), tape.column(h, 1))
    }
}

impl Predictor for ScatNetModel {
    fn input_dim(&self) -> usize {
        2 * self.cells()
    }

    fn predict_batch(&self, x: &SampleMatrix) -> Result<Vec<GaussianPrediction>> {
        let prepared = self.prepare(x)?;
        Ok(predict_with(self, &prepared))
    }

    fn input_gradients(&self, x: &SampleMatrix, target: OutputTarget) -> Result<SampleMatrix> {
        let prepared = self.prepare(x)?;
        let preds: Vec<(f64, f64)> = prepared
            .rows()
            .map(|r| {
                let out = dot(r, &self.beta_mu()) + self.params[1].data[0];
                let raw = dot(r, &self.beta_sigma()) + self.params[1].data[1];
                (out, raw)
            })
            .collect();
        let mu: Vec<f64> = preds.iter().map(|p| p.0).collect();
        let raw: Vec<f64> = preds.iter().map(|p| p.1).collect();
        let (gm, gs) = output_seeds(&mu, &raw, target);
        let (bm, bs) = (self.beta_mu(), self.beta_sigma());
        let nf = self.scattering_feature_count();
        let hw = self.cells();
        let bank = self.bank()?;
        let rows: Vec<Result<Vec<f64>>> = (0..x.n())
            .into_par_iter()
            .map(|i| {
                let gfeat: Vec<f64> = (0..self.feature_count())
                    .map(|k| gm[i] * bm[k] + gs[i] * bs[k])
                    .collect();
                let gscat: Vec<f64> = gfeat[..nf].iter().zip(&self.feature_std).map(|(g, s)| g / s).collect();
                let mut out = bank.scatter_vjp(&x.row(i)[..hw], &gscat, self.config.max_order)?;
                out.resize(2 * hw, 0.0);
                for (k, &c) in self.sm_cells.iter().enumerate() {
                    out[hw + c] += gfeat[nf + k];
                }
                Ok(out)
            })
            .collect();
        SampleMatrix::from_rows(&rows.into_iter().collect::<Result<Vec<_>>>()?)
    }

    fn parameter_count(&self) -> (usize, usize) {
        let trainable = self.params.iter().map(Tensor::len).sum();
        let fixed = self.bank.as_ref().map_or(0, FilterBank::coefficient_count);
        (trainable, fixed)
    }
}

// ---------------------------------------------------------------- CNN

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub dense: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![16, 32, 32],
            kernel: 3,
            stride: 2,
            dense: 64,
        }
    }
}

/// Convolution stack on the two-channel image, dense layer, two heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnModel {
    pub config: CnnConfig,
    pub n_lat: usize,
    pub n_lon: usize,
    /// 1 inside the soil-moisture region, 0 elsewhere.
    pub sm_mask: Vec<f64>,
    #[serde(skip)]
    pub params: Vec<Tensor>,
}

impl CnnModel {
    pub fn new(
        n_lat: usize,
        n_lon: usize,
        sm_mask: Vec<f64>,
        config: CnnConfig,
        init: OutputInit,
        rng: &mut Rng,
    ) -> Result<Self> {
        if config.conv_channels.is_empty() || config.kernel == 0 || config.stride == 0 || config.dense == 0 {
            return Err(Error::Config("invalid CNN architecture".into()));
        }
        check_dim(n_lat * n_lon, sm_mask.len())?;
        let mut params = Vec::new();
        let mut cin = 2;
        let (mut h, mut w) = (n_lat, n_lon);
        let pad = config.kernel / 2;
        for &c in &config.conv_channels {
            params.push(init_weight(rng, config.kernel * config.kernel * cin, c));
            params.push(Tensor::zeros(&[c]));
            cin = c;
            h = (h + 2 * pad - config.kernel) / config.stride + 1;
            w = (w + 2 * pad - config.kernel) / config.stride + 1;
        }
        let flat = h * w * cin;
        params.push(init_weight(rng, flat, config.dense));
        params.push(Tensor::zeros(&[config.dense]));
        params.push(init_weight(rng, config.dense, 2));
        params.push(Tensor::vector(vec![init.mean, softplus_inverse(init.std)]));
        Ok(Self {
            config,
            n_lat,
            n_lon,
            sm_mask,
            params,
        })
    }

    fn cells(&self) -> usize {
        self.n_lat * self.n_lon
    }

    fn channel_mask(&self) -> Vec<f64> {
        self.sm_mask.iter().flat_map(|&m| [1.0, m]).collect()
    }
}

impl Trainable for CnnModel {
    fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Rows are channel-major `[z500 cells, sm cells]`; the tensor is NHWC.
    fn batch_tensor(&self, inputs: &SampleMatrix, idx: &[usize]) -> Tensor {
        let hw = self.cells();
        let mut data = Vec::with_capacity(idx.len() * hw * 2);
        for &i in idx {
            let r = inputs.row(i);
            for p in 0..hw {
                data.push(r[p]);
                data.push(r[hw + p]);
            }
        }
        Tensor {
            shape: vec![idx.len(), self.n_lat, self.n_lon, 2],
            data,
        }
    }

    fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> (Var, Var) {
        let batch = tape.value(x).shape[0];
        let mut h = tape.mul_const(x, self.channel_mask());
        let n_conv = self.config.conv_channels.len();
        for k in 0..n_conv {
            h = tape.conv2d(
                h,
                params[2 * k],
                self.config.kernel,
                self.config.stride,
                self.config.kernel / 2,
            );
            h = tape.add_bias(h, params[2 * k + 1]);
            h = tape.relu(h);
        }
        let flat = tape.value(h).len() / batch;
        h = tape.reshape(h, &[batch, flat]);
        h = tape.matmul(h, params[2 * n_conv]);
        h = tape.add_bias(h, params[2 * n_conv + 1]);
        h = tape.relu(h);
        h = tape.matmul(h, params[2 * n_conv + 2]);
        h = tape.add_bias(h, params[2 * n_conv + 3]);
        (tape.column(h, 0), tape.column(h, 1))
    }
}

impl Predictor for CnnModel {
    fn input_dim(&self) -> usize {
        2 * self.cells()
    }

    fn predict_batch(&self, x: &SampleMatrix) -> Result<Vec<GaussianPrediction>> {
        check_dim(self.input_dim(), x.d())?;
        Ok(predict_with(self, x))
    }

    fn input_gradients(&self, x: &SampleMatrix, target: OutputTarget) -> Result<SampleMatrix> {
        check_dim(self.input_dim(), x.d())?;
        let hw = self.cells();
        let nhwc = tensor_gradients(self, x, target);
        let rows: Vec<Vec<f64>> = nhwc
            .iter()
            .map(|g| {
                let mut out = vec![0.0; 2 * hw];
                for p in 0..hw {
                    out[p] = g[2 * p];
                    out[hw + p] = g[2 * p + 1];
                }
                out
            })
            .collect();
        SampleMatrix::from_rows(&rows)
    }

    fn parameter_count(&self) -> (usize, usize) {
        (self.params.iter().map(Tensor::len).sum(), 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ga::GaModel;
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    fn random_rows(n: usize, d: usize, seed: u64) -> SampleMatrix {
        let mut rng = stream(seed, &[]);
        let data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        SampleMatrix::new(n, d, data).unwrap()
    }

    fn perturb_params<M: Trainable>(m: &mut M, seed: u64) {
        let mut rng = stream(seed, &[1]);
        for p in m.parameters_mut() {
            for v in &mut p.data {
                *v += 0.3 * rng.random_range(-1.0..1.0);
            }
        }
    }

    /// Central differences of the target output against analytic input gradients.
    fn check_input_gradients(model: &dyn Predictor, x: &SampleMatrix, target: OutputTarget, coords: &[usize]) {
        let grads = model.input_gradients(x, target).unwrap();
        let h = 1e-5;
        for i in 0..x.n() {
            for &k in coords {
                let mut plus = x.row(i).to_vec();
                let mut minus = plus.clone();
                plus[k] += h;
                minus[k] -= h;
                let fp = target.evaluate(&model.predict(&plus).unwrap());
                let fm = target.evaluate(&model.predict(&minus).unwrap());
                let fd = (fp - fm) / (2.0 * h);
                let an = grads.row(i)[k];
                assert!(
                    (fd - an).abs() <= 1e-5 + 1e-4 * fd.abs().max(an.abs()),
                    "{target:?} sample {i} coord {k}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    fn targets() -> [OutputTarget; 3] {
        [OutputTarget::Mu, OutputTarget::Sigma, OutputTarget::Exceedance(0.4)]
    }

    #[test]
    fn iinn_parameter_count_and_gradients() {
        let (h, w) = (4, 6);
        let mut rng = stream(3, &[]);
        let init = OutputInit { mean: 0.1, std: 1.2 };
        let mut model = IinnModel::new(h, w, vec![1.0, 1.0], IinnConfig::default(), init, &mut rng).unwrap();
        let d = 2 * h * w;
        assert_eq!(model.parameter_count().0, d + 2 * (16 + 16 + 16 * 16 + 16 + 16 + 1));
        // zero pattern: every sample gets the same forecast
        let x = random_rows(3, d, 4);
        let p0 = model.predict_batch(&x).unwrap();
        for p in &p0 {
            assert!((p.mu - p0[0].mu).abs() < 1e-12 && (p.sigma - p0[0].sigma).abs() < 1e-12);
        }
        perturb_params(&mut model, 5);
        for t in targets() {
            check_input_gradients(&model, &x, t, &(0..d).step_by(5).collect::<Vec<_>>());
        }
    }

    #[test]
    fn affine_iinn_is_affine_in_the_index() {
        let mut rng = stream(8, &[]);
        let cfg = IinnConfig {
            affine_heads: true,
            ..IinnConfig::default()
        };
        let mut model =
            IinnModel::new(2, 3, vec![1.0, 1.0], cfg, OutputInit { mean: 0.0, std: 1.0 }, &mut rng).unwrap();
        perturb_params(&mut model, 9);
        let mu = model.mean_head(&[-1.0, 0.0, 1.0, 2.0]);
        assert!(((mu[1] - mu[0]) - (mu[3] - mu[2])).abs() < 1e-12);
        assert_eq!(model.parameter_count().0, 12 + 4);
    }

    #[test]
    fn iinn_penalty_gradient_matches_finite_difference() {
        let mut rng = stream(10, &[]);
        let cfg = IinnConfig {
            epsilon: 0.7,
            ..IinnConfig::default()
        };
        let mut model =
            IinnModel::new(3, 4, vec![1.0, 0.5], cfg, OutputInit { mean: 0.0, std: 1.0 }, &mut rng).unwrap();
        perturb_params(&mut model, 11);
        let mut grads: Vec<Tensor> = model.params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        model.penalty(Some(&mut grads));
        let h = 1e-6;
        for k in 0..model.params[0].len() {
            let mut plus = model.clone();
            plus.params[0].data[k] += h;
            let mut minus = model.clone();
            minus.params[0].data[k] -= h;
            let fd = (plus.penalty(None) - minus.penalty(None)) / (2.0 * h);
            assert!(
                (fd - grads[0].data[k]).abs() < 1e-6,
                "coord {k}: {fd} vs {}",
                grads[0].data[k]
            );
        }
    }

    #[test]
    fn scatnet_gradients_and_mask_invariance() {
        let (h, w) = (8, 16);
        let x = random_rows(40, 2 * h * w, 12);
        let cells: Vec<usize> = vec![3 * w + 4, 3 * w + 5, 4 * w + 4];
        let cfg = ScatNetConfig {
            scales: 2,
            orientations: 4,
            max_order: 1,
        };
        let mut rng = stream(13, &[]);
        let (mut model, prepared) = ScatNetModel::new(
            h,
            w,
            cells.clone(),
            cfg,
            &x,
            OutputInit { mean: 0.0, std: 1.0 },
            &mut rng,
        )
        .unwrap();
        assert_eq!(prepared.d(), model.feature_count());
        // standardised on the training rows
        for k in 0..model.scattering_feature_count() {
            let col: f64 = prepared.rows().map(|r| r[k]).sum::<f64>() / prepared.n() as f64;
            assert!(col.abs() < 1e-9);
        }
        perturb_params(&mut model, 14);
        let probe = x.select_rows(&[0, 1]);
        let coords: Vec<usize> = (0..h * w).step_by(9).chain(cells.iter().map(|c| h * w + c)).collect();
        for t in targets() {
            check_input_gradients(&model, &probe, t, &coords);
        }
        // soil moisture outside the region never reaches the model
        let mut shifted = probe.clone();
        for i in 0..shifted.n() {
            for c in 0..h * w {
                if !cells.contains(&c) {
                    shifted.row_mut(i)[h * w + c] += 5.0;
                }
            }
        }
        let a = model.predict_batch(&probe).unwrap();
        let b = model.predict_batch(&shifted).unwrap();
        assert_eq!(a, b);
        let (trainable, fixed) = model.parameter_count();
        assert_eq!(trainable, 2 * model.feature_count() + 2);
        assert_eq!(fixed, model.bank().unwrap().coefficient_count());
    }

    #[test]
    fn coarse_scatnet_has_one_channel() {
        let (h, w) = (8, 16);
        let x = random_rows(10, 2 * h * w, 15);
        let cfg = ScatNetConfig {
            scales: 2,
            orientations: 4,
            max_order: 0,
        };
        let mut rng = stream(16, &[]);
        let (model, _) =
            ScatNetModel::new(h, w, vec![0], cfg, &x, OutputInit { mean: 0.0, std: 1.0 }, &mut rng).unwrap();
        let (hs, ws) = model.bank().unwrap().output_shape();
        assert_eq!(model.scattering_feature_count(), hs * ws);
    }

    #[test]
    fn cnn_shapes_gradients_and_mask() {
        let (h, w) = (8, 12);
        let mut mask = vec![0.0; h * w];
        mask[2 * w + 3] = 1.0;
        mask[2 * w + 4] = 1.0;
        let cfg = CnnConfig {
            conv_channels: vec![4, 6],
            kernel: 3,
            stride: 2,
            dense: 8,
        };
        let mut rng = stream(17, &[]);
        let model = CnnModel::new(h, w, mask.clone(), cfg, OutputInit { mean: 0.0, std: 1.0 }, &mut rng).unwrap();
        // 8x12 -> 4x6 -> 2x3
        let expected = (9 * 2 * 4 + 4) + (9 * 4 * 6 + 6) + (2 * 3 * 6 * 8 + 8) + (8 * 2 + 2);
        assert_eq!(model.parameter_count().0, expected);
        let x = random_rows(2, 2 * h * w, 18);
        let coords: Vec<usize> = (0..h * w)
            .step_by(7)
            .chain([h * w + 2 * w + 3, h * w + 2 * w + 4])
            .collect();
        for t in targets() {
            check_input_gradients(&model, &x, t, &coords);
        }
        let g = model.input_gradients(&x, OutputTarget::Mu).unwrap();
        for c in 0..h * w {
            if mask[c] == 0.0 {
                assert_eq!(g.row(0)[h * w + c], 0.0);
            }
        }
    }

    #[test]
    fn default_cnn_size() {
        let mut rng = stream(19, &[]);
        let model = CnnModel::new(
            32,
            64,
            vec![0.0; 32 * 64],
            CnnConfig::default(),
            OutputInit { mean: 0.0, std: 1.0 },
            &mut rng,
        )
        .unwrap();
        // 32x64 -> 16x32 -> 8x16 -> 4x8 with 32 channels
        let expected = (18 * 16 + 16) + (144 * 32 + 32) + (288 * 32 + 32) + (4 * 8 * 32 * 64 + 64) + (64 * 2 + 2);
        assert_eq!(model.parameter_count().0, expected);
    }

    #[test]
    fn ga_gradients_are_scaled_patterns() {
        let model = GaModel {
            pattern: vec![0.5, -1.0, 2.0],
            sigma: 0.8,
            epsilon: 0.0,
            n_lat: 1,
            n_lon: 3,
            channels: 1,
        };
        let x = random_rows(2, 3, 20);
        for t in targets() {
            check_input_gradients(&model, &x, t, &[0, 1, 2]);
        }
    }
}
