//! 2-D wavelet scattering transform with a Morlet filter bank, modulus
//! nonlinearity and Gaussian pooling followed by `2^J` subsampling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{frequency, Fft2, C64};
use crate::linalg::SampleMatrix;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Morlet constants; the bandwidth and centre frequency scale with `2^j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorletParams {
    pub sigma0: f64,
    pub xi0: f64,
    /// Aspect ratio of the envelope; `None` means `4 / L`.
    pub slant: Option<f64>,
}

impl Default for MorletParams {
    fn default() -> Self {
        Self {
            sigma0: 0.8,
            xi0: 3.0 * std::f64::consts::PI / 4.0,
            slant: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "order", rename_all = "snake_case")]
pub enum ScatPath {
    Zero,
    One { j: usize, l: usize },
    Two { j1: usize, l1: usize, j2: usize, l2: usize },
}

impl ScatPath {
    pub fn order(&self) -> usize {
        match self {
            ScatPath::Zero => 0,
            ScatPath::One { .. } => 1,
            ScatPath::Two { .. } => 2,
        }
    }
}

/// Fixed Fourier-domain filters for one input shape.
#[derive(Debug, Clone)]
pub struct FilterBank {
    scales: usize,
    orientations: usize,
    n_lat: usize,
    n_lon: usize,
    padded_lat: usize,
    params: MorletParams,
    psi_hat: Vec<Vec<f64>>,
    phi_hat: Vec<f64>,
    lp_max: f64,
    fft: Fft2,
    fft_small: Fft2,
}

/// Feature maps of shape `(n_lat / 2^J, n_lon / 2^J, C)`, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatteringFeatures {
    pub height: usize,
    pub width: usize,
    pub paths: Vec<ScatPath>,
    pub values: Vec<f64>,
}

impl ScatteringFeatures {
    pub fn channels(&self) -> usize {
        self.paths.len()
    }

    pub fn at(&self, i: usize, j: usize, c: usize) -> f64 {
        self.values[(i * self.width + j) * self.paths.len() + c]
    }

    /// One channel as an `height x width` map.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        let nc = self.paths.len();
        self.values.iter().skip(c).step_by(nc).copied().collect()
    }
}

fn periodized(omega1: f64, omega2: f64, f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut s = 0.0;
    for p in -2..=2 {
        for q in -2..=2 {
            s += f(omega1 + TWO_PI * p as f64, omega2 + TWO_PI * q as f64);
        }
    }
    s
}

fn envelope(w1: f64, w2: f64, sigma: f64, xi: f64, theta: f64, slant: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    let par = w1 * c + w2 * s - xi;
    let perp = -w1 * s + w2 * c;
    (-0.5 * sigma * sigma * (par * par + perp * perp / (slant * slant))).exp()
}

/// Zero-mean Morlet filter at scale `j`, orientation `l * pi / L`, sampled on
/// the `h x w` DFT frequencies and periodized. Not normalised.
pub fn morlet_hat(h: usize, w: usize, j: usize, l: usize, orientations: usize, params: MorletParams) -> Vec<f64> {
    let slant = params.slant.unwrap_or(4.0 / orientations as f64);
    let sigma = params.sigma0 * (1u64 << j) as f64;
    let xi = params.xi0 / (1u64 << j) as f64;
    let theta = l as f64 * std::f64::consts::PI / orientations as f64;
    let gabor = |a: f64, b: f64| envelope(a, b, sigma, xi, theta, slant);
    let gauss = |a: f64, b: f64| envelope(a, b, sigma, 0.0, theta, slant);
    let kappa = periodized(0.0, 0.0, gabor) / periodized(0.0, 0.0, gauss);
    let mut filt = Vec::with_capacity(h * w);
    for k1 in 0..h {
        let w1 = frequency(k1, h);
        for k2 in 0..w {
            let w2 = frequency(k2, w);
            filt.push(periodized(w1, w2, gabor) - kappa * periodized(w1, w2, gauss));
        }
    }
    filt
}

pub fn build_filter_bank(scales: usize, orientations: usize, n_lat: usize, n_lon: usize) -> Result<FilterBank> {
    FilterBank::build(scales, orientations, n_lat, n_lon, n_lat, MorletParams::default())
}

impl FilterBank {
    /// Bank for an arbitrary latitude count: the field is reflect-padded at
    /// the last latitude row up to a multiple of `2^J`. Longitude must divide.
    pub fn with_padding(scales: usize, orientations: usize, n_lat: usize, n_lon: usize) -> Result<Self> {
        let factor = 1usize << scales.min(30);
        let padded = n_lat.div_ceil(factor) * factor;
        Self::build(scales, orientations, n_lat, n_lon, padded, MorletParams::default())
    }

    pub fn build(
        scales: usize,
        orientations: usize,
        n_lat: usize,
        n_lon: usize,
        padded_lat: usize,
        params: MorletParams,
    ) -> Result<Self> {
        if scales == 0 || orientations == 0 || scales > 16 {
            return Err(Error::InvalidInput(format!(
                "scattering needs 1 <= J <= 16 and L >= 1, got J={scales}, L={orientations}"
            )));
        }
        let factor = 1usize << scales;
        if !padded_lat.is_multiple_of(factor) {
            return Err(Error::PadRequired {
                dim: "n_lat",
                size: padded_lat,
                factor,
            });
        }
        if !n_lon.is_multiple_of(factor) {
            return Err(Error::PadRequired {
                dim: "n_lon",
                size: n_lon,
                factor,
            });
        }
        if padded_lat < n_lat || n_lat < 2 {
            return Err(Error::InvalidInput(format!(
                "invalid latitude padding {n_lat} -> {padded_lat}"
            )));
        }
        let (h, w) = (padded_lat, n_lon);
        let psi_hat = (0..scales)
            .flat_map(|j| (0..orientations).map(move |l| (j, l)))
            .map(|(j, l)| morlet_hat(h, w, j, l, orientations, params))
            .collect();
        let sigma_phi = params.sigma0 * factor as f64;
        let low = |a: f64, b: f64| (-0.5 * sigma_phi * sigma_phi * (a * a + b * b)).exp();
        let dc = periodized(0.0, 0.0, low);
        let mut phi_hat = Vec::with_capacity(h * w);
        for k1 in 0..h {
            for k2 in 0..w {
                phi_hat.push(periodized(frequency(k1, h), frequency(k2, w), low) / dc);
            }
        }
        let mut bank = Self {
            scales,
            orientations,
            n_lat,
            n_lon,
            padded_lat,
            params,
            psi_hat,
            phi_hat,
            lp_max: 0.0,
            fft: Fft2::new(h, w),
            fft_small: Fft2::new(h / factor, w / factor),
        };
        bank.normalize();
        Ok(bank)
    }

    /// Index of the frequency `-omega`.
    fn mirror(&self, idx: usize) -> usize {
        let (h, w) = (self.padded_lat, self.n_lon);
        let (k1, k2) = (idx / w, idx % w);
        ((h - k1) % h) * w + (w - k2) % w
    }

    fn band_energy(&self) -> Vec<f64> {
        (0..self.phi_hat.len())
            .map(|k| {
                let m = self.mirror(k);
                0.5 * self.psi_hat.iter().map(|p| p[k] * p[k] + p[m] * p[m]).sum::<f64>()
            })
            .collect()
    }

    /// Rescale band-pass filters so that the Littlewood-Paley sum peaks at 1.
    fn normalize(&mut self) {
        let band = self.band_energy();
        let lp_max = |c: f64| {
            self.phi_hat
                .iter()
                .zip(&band)
                .map(|(p, b)| p * p + c * c * b)
                .fold(0.0, f64::max)
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        while lp_max(hi) <= 1.0 {
            hi *= 2.0;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if lp_max(mid) <= 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        for p in &mut self.psi_hat {
            p.iter_mut().for_each(|v| *v *= lo);
        }
        self.lp_max = self.littlewood_paley().into_iter().fold(0.0, f64::max);
    }

    /// Littlewood-Paley sum `|phi|^2 + 1/2 sum (|psi(w)|^2 + |psi(-w)|^2)` per frequency.
    pub fn littlewood_paley(&self) -> Vec<f64> {
        self.band_energy()
            .iter()
            .zip(&self.phi_hat)
            .map(|(b, p)| p * p + b)
            .collect()
    }

    pub fn frame_bound(&self) -> f64 {
        self.lp_max
    }

    pub fn scales(&self) -> usize {
        self.scales
    }

    pub fn orientations(&self) -> usize {
        self.orientations
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.n_lat, self.n_lon)
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        (self.padded_lat, self.n_lon)
    }

    pub fn output_shape(&self) -> (usize, usize) {
        let f = 1 << self.scales;
        (self.padded_lat / f, self.n_lon / f)
    }

    pub fn params(&self) -> MorletParams {
        self.params
    }

    pub fn psi_hat(&self, j: usize, l: usize) -> &[f64] {
        &self.psi_hat[j * self.orientations + l]
    }

    pub fn phi_hat(&self) -> &[f64] {
        &self.phi_hat
    }

    /// Number of stored filter coefficients (band-pass plus low-pass).
    pub fn coefficient_count(&self) -> usize {
        (self.psi_hat.len() + 1) * self.phi_hat.len()
    }

    pub fn paths(&self, max_order: usize) -> Vec<ScatPath> {
        let mut out = vec![ScatPath::Zero];
        if max_order >= 1 {
            for j in 0..self.scales {
                for l in 0..self.orientations {
                    out.push(ScatPath::One { j, l });
                }
            }
        }
        if max_order >= 2 {
            for j1 in 0..self.scales {
                for l1 in 0..self.orientations {
                    for j2 in j1 + 1..self.scales {
                        for l2 in 0..self.orientations {
                            out.push(ScatPath::Two { j1, l1, j2, l2 });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn channel_count(&self, max_order: usize) -> usize {
        self.paths(max_order.min(2)).len()
    }

    fn reflect_row(&self, i: usize) -> usize {
        let n = self.n_lat;
        let period = 2 * (n - 1);
        let m = i % period;
        if m < n {
            m
        } else {
            period - m
        }
    }

    fn pad(&self, x: &[f64]) -> Vec<f64> {
        let w = self.n_lon;
        let mut out = Vec::with_capacity(self.padded_lat * w);
        for i in 0..self.padded_lat {
            let src = self.reflect_row(i);
            out.extend_from_slice(&x[src * w..(src + 1) * w]);
        }
        out
    }

    fn unpad_adjoint(&self, g: &[f64]) -> Vec<f64> {
        let w = self.n_lon;
        let mut out = vec![0.0; self.n_lat * w];
        for i in 0..self.padded_lat {
            let src = self.reflect_row(i);
            for j in 0..w {
                out[src * w + j] += g[i * w + j];
            }
        }
        out
    }

    /// Low-pass then subsample: fold the filtered spectrum onto the coarse grid.
    fn pool(&self, spec: &[C64]) -> Vec<f64> {
        let (h, w) = (self.padded_lat, self.n_lon);
        let (hs, ws) = self.output_shape();
        let mut small = vec![C64::new(0.0, 0.0); hs * ws];
        for k1 in 0..h {
            for k2 in 0..w {
                let k = k1 * w + k2;
                small[(k1 % hs) * ws + k2 % ws] += spec[k] * self.phi_hat[k];
            }
        }
        self.fft_small.inverse(&mut small);
        let s = 1.0 / (h * w) as f64;
        small.iter().map(|v| v.re * s).collect()
    }

    /// Adjoint of `pool`, returned in the Fourier domain of the full grid.
    fn pool_adjoint_spectrum(&self, grad: &[f64]) -> Vec<C64> {
        let (h, w) = (self.padded_lat, self.n_lon);
        let (hs, ws) = self.output_shape();
        let g_hat = self.fft_small.forward_real(grad);
        let mut out = Vec::with_capacity(h * w);
        for k1 in 0..h {
            for k2 in 0..w {
                out.push(g_hat[(k1 % hs) * ws + k2 % ws] * self.phi_hat[k1 * w + k2]);
            }
        }
        out
    }

    fn check_input(&self, x: &[f64], max_order: usize) -> Result<()> {
        if max_order > 2 {
            return Err(Error::InvalidInput(format!(
                "scattering order must be 0, 1 or 2, got {max_order}"
            )));
        }
        if x.len() != self.n_lat * self.n_lon {
            return Err(Error::shape(self.n_lat * self.n_lon, x.len()));
        }
        Ok(())
    }

    fn wavelet_modulus_spectrum(&self, spec: &[C64], filter: &[f64]) -> (Vec<C64>, Vec<C64>) {
        let mut u: Vec<C64> = spec.iter().zip(filter).map(|(s, f)| s * f).collect();
        self.fft.inverse_normalized(&mut u);
        let mut m: Vec<C64> = u.iter().map(|v| C64::new(v.norm(), 0.0)).collect();
        self.fft.forward(&mut m);
        (u, m)
    }

    pub fn scatter(&self, x: &[f64], max_order: usize) -> Result<ScatteringFeatures> {
        self.check_input(x, max_order)?;
        let padded = self.pad(x);
        let spec = self.fft.forward_real(&padded);
        let mut maps = vec![self.pool(&spec)];
        if max_order >= 1 {
            let mut first = Vec::with_capacity(self.psi_hat.len());
            for filt in &self.psi_hat {
                let (_, m) = self.wavelet_modulus_spectrum(&spec, filt);
                maps.push(self.pool(&m));
                first.push(m);
            }
            if max_order >= 2 {
                for j1 in 0..self.scales {
                    for l1 in 0..self.orientations {
                        let m1 = &first[j1 * self.orientations + l1];
                        for j2 in j1 + 1..self.scales {
                            for l2 in 0..self.orientations {
                                let (_, m2) = self.wavelet_modulus_spectrum(m1, self.psi_hat(j2, l2));
                                maps.push(self.pool(&m2));
                            }
                        }
                    }
                }
            }
        }
        let (hs, ws) = self.output_shape();
        let nc = maps.len();
        let mut values = vec![0.0; hs * ws * nc];
        for (c, map) in maps.iter().enumerate() {
            for (p, v) in map.iter().enumerate() {
                values[p * nc + c] = *v;
            }
        }
        Ok(ScatteringFeatures {
            height: hs,
            width: ws,
            paths: self.paths(max_order),
            values,
        })
    }

    /// Order-0 features only (the low-passed, subsampled field).
    pub fn scatter_coarse(&self, x: &[f64]) -> Result<ScatteringFeatures> {
        self.scatter(x, 0)
    }

    /// Vector-Jacobian product of `scatter` for orders 0 and 1: given
    /// `grad` laid out like the features, return the gradient w.r.t. `x`.
    pub fn scatter_vjp(&self, x: &[f64], grad: &[f64], max_order: usize) -> Result<Vec<f64>> {
        self.check_input(x, max_order)?;
        if max_order > 1 {
            return Err(Error::InvalidInput(
                "scattering gradient supports orders 0 and 1".into(),
            ));
        }
        let nc = self.channel_count(max_order);
        let (hs, ws) = self.output_shape();
        if grad.len() != hs * ws * nc {
            return Err(Error::shape(hs * ws * nc, grad.len()));
        }
        let channel = |c: usize| -> Vec<f64> { grad.iter().skip(c).step_by(nc).copied().collect() };
        let mut acc = self.pool_adjoint_spectrum(&channel(0));
        if max_order == 1 {
            let spec = self.fft.forward_real(&self.pad(x));
            for (k, filt) in self.psi_hat.iter().enumerate() {
                let g = channel(k + 1);
                if g.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let mut u: Vec<C64> = spec.iter().zip(filt).map(|(s, f)| s * f).collect();
                self.fft.inverse_normalized(&mut u);
                let mut g_mod = self.pool_adjoint_spectrum(&g);
                self.fft.inverse_normalized(&mut g_mod);
                let mut g_u: Vec<C64> = u
                    .iter()
                    .zip(&g_mod)
                    .map(|(u, gm)| {
                        let n = u.norm();
                        if n > 0.0 {
                            u * (gm.re / n)
                        } else {
                            C64::new(0.0, 0.0)
                        }
                    })
                    .collect();
                self.fft.forward(&mut g_u);
                for ((a, gu), f) in acc.iter_mut().zip(&g_u).zip(filt) {
                    *a += gu * f;
                }
            }
        }
        self.fft.inverse_normalized(&mut acc);
        let grad_padded: Vec<f64> = acc.iter().map(|v| v.re).collect();
        Ok(self.unpad_adjoint(&grad_padded))
    }

    /// Scatter every row (one field each) in parallel; row order is preserved.
    pub fn scatter_rows(&self, fields: &SampleMatrix, max_order: usize) -> Result<SampleMatrix> {
        let rows: Vec<&[f64]> = fields.rows().collect();
        let feats: Vec<Vec<f64>> = rows
            .par_iter()
            .map(|r| self.scatter(r, max_order).map(|f| f.values))
            .collect::<Result<_>>()?;
        SampleMatrix::from_rows(&feats)
    }
}
