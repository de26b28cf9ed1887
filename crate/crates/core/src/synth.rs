//! Synthetic predictors and heatwave targets with planted, known predictability.
//!
//! Channel 0 (`z500`) is a hemisphere-wide Gaussian random field, channel 1
//! (`sm`) lives only inside the heatwave region. Both follow an AR(1) process
//! in time. The target mixes a smooth linear projection of the predictors with
//! the band-pass energy of `z500` at one wavelet scale and orientation.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{frequency, Fft2, C64};
use crate::grid::{Field, FieldSeries, GeoGrid, RegionBox, RegionMask, TargetSeries};
use crate::io;
use crate::linalg::{conjugate_gradient, dot};
use crate::rng::{self, Rng};
use crate::scattering::{morlet_hat, MorletParams};

pub const CHANNELS: [&str; 2] = ["z500", "sm"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_lat: usize,
    pub n_lon: usize,
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub n_years: usize,
    pub start_year: i32,
    pub days_per_season: u32,
    pub heatwave_days: u32,
    /// Spatial correlation scale in grid points.
    pub corr_length: f64,
    pub sm_corr_length: Option<f64>,
    pub ar1: f64,
    pub linear_gain: f64,
    pub nonlinear_gain: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub region: RegionBox,
    pub band_region: RegionBox,
    pub band_scale: usize,
    pub band_orientation: usize,
    pub band_orientations: usize,
    /// Share of the planted pattern's squared norm on the soil-moisture channel.
    pub sm_pattern_fraction: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_lat: 32,
            n_lon: 64,
            lat_min: 20.0,
            lat_max: 80.0,
            lon_min: -180.0,
            n_years: 100,
            start_year: 0,
            days_per_season: 92,
            heatwave_days: 14,
            corr_length: 1.5,
            sm_corr_length: None,
            ar1: 0.5,
            linear_gain: 1.0,
            nonlinear_gain: 0.0,
            noise_std: 1.0,
            seed: 0,
            region: RegionBox {
                lat_min: 43.0,
                lat_max: 50.0,
                lon_min: -5.0,
                lon_max: 8.0,
            },
            band_region: RegionBox {
                lat_min: 35.0,
                lat_max: 60.0,
                lon_min: -40.0,
                lon_max: 30.0,
            },
            band_scale: 1,
            band_orientation: 2,
            band_orientations: 8,
            sm_pattern_fraction: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn grid(&self) -> Result<GeoGrid> {
        GeoGrid::regular(self.n_lat, self.n_lon, self.lat_min, self.lat_max, self.lon_min)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.corr_length > 0.0) || self.sm_corr_length.is_some_and(|c| !(c > 0.0)) {
            return bad("corr_length must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.ar1) {
            return bad(format!("ar1 must be in [0, 1), got {}", self.ar1));
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be >= 0".into());
        }
        if self.n_years == 0 || self.heatwave_days == 0 || self.heatwave_days > self.days_per_season {
            return bad("need n_years >= 1 and 1 <= heatwave_days <= days_per_season".into());
        }
        if self.band_orientation >= self.band_orientations {
            return bad("band_orientation must be < band_orientations".into());
        }
        if !(0.0..=1.0).contains(&self.sm_pattern_fraction) {
            return bad("sm_pattern_fraction must be in [0, 1]".into());
        }
        Ok(())
    }
}

/// Everything planted by the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Unit-norm planted pattern, one map per channel.
    #[serde(skip)]
    pub pattern: Vec<Vec<f64>>,
    pub channels: Vec<String>,
    pub band_scale: usize,
    pub band_orientation: usize,
    pub band_orientations: usize,
    pub band_theta: f64,
    pub band_region: RegionBox,
    pub linear_gain: f64,
    pub nonlinear_gain: f64,
    pub residual_std: f64,
    /// Standard deviation of `pattern . X` used to normalise the linear index.
    pub index_std: f64,
    pub band_mean: f64,
    pub band_std: f64,
}

impl GroundTruth {
    pub fn flat_pattern(&self) -> Vec<f64> {
        self.pattern.concat()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub z500: FieldSeries,
    pub sm: FieldSeries,
    pub t2m: FieldSeries,
    pub region: RegionMask,
    /// Heatwave amplitude per valid window start.
    pub targets: TargetSeries,
    /// Unit-variance linear index per target.
    pub linear_index: Vec<f64>,
    /// Unit-variance band-energy term per target.
    pub band_term: Vec<f64>,
    pub truth: GroundTruth,
}

/// Spectral sampler for a periodic Gaussian random field with Gaussian
/// covariance of scale `corr_length`, normalised to unit pointwise variance.
#[derive(Debug, Clone)]
struct GrfSampler {
    h: usize,
    w: usize,
    spectrum: Vec<f64>,
    amplitude: Vec<f64>,
    fft: Fft2,
}

impl GrfSampler {
    fn new(h: usize, w: usize, corr_length: f64) -> Self {
        let mut spectrum = Vec::with_capacity(h * w);
        for k1 in 0..h {
            let a = frequency(k1, h);
            for k2 in 0..w {
                let b = frequency(k2, w);
                spectrum.push((-0.5 * corr_length * corr_length * (a * a + b * b)).exp());
            }
        }
        let mean = spectrum.iter().sum::<f64>() / spectrum.len() as f64;
        spectrum.iter_mut().for_each(|s| *s /= mean);
        let amplitude = spectrum.iter().map(|s| s.sqrt()).collect();
        Self {
            h,
            w,
            spectrum,
            amplitude,
            fft: Fft2::new(h, w),
        }
    }

    /// Fourier coefficients of a fresh realisation.
    fn sample_spectrum(&self, rng: &mut Rng) -> Vec<C64> {
        let white: Vec<f64> = (0..self.h * self.w).map(|_| StandardNormal.sample(rng)).collect();
        let mut spec = self.fft.forward_real(&white);
        for (s, a) in spec.iter_mut().zip(&self.amplitude) {
            *s *= a;
        }
        spec
    }

    fn to_field(&self, spec: &[C64]) -> Vec<f64> {
        let mut buf = spec.to_vec();
        self.fft.inverse_normalized(&mut buf);
        buf.iter().map(|v| v.re).collect()
    }

    /// `Var[m . x]` for a pattern on the sampler grid.
    fn projection_variance(&self, pattern: &[f64]) -> f64 {
        let m_hat = self.fft.forward_real(pattern);
        m_hat
            .iter()
            .zip(&self.spectrum)
            .map(|(m, s)| m.norm_sqr() * s)
            .sum::<f64>()
            / (self.h * self.w) as f64
    }
}

fn extension_rows(corr_length: f64) -> usize {
    (4.0 * corr_length).ceil() as usize
}

fn check_corr(grid: &GeoGrid, corr_length: f64) -> Result<()> {
    let limit = grid.n_lat().min(grid.n_lon()) as f64 / 2.0;
    if !(corr_length > 0.0) || corr_length >= limit {
        return Err(Error::CorrelationTooLong {
            corr_length,
            n_lat: grid.n_lat(),
            n_lon: grid.n_lon(),
        });
    }
    Ok(())
}

/// One zero-mean, unit-variance realisation on `grid`. The field is
/// synthesised on a latitude-extended periodic grid and cropped, so the
/// first and last latitude rows are not artificially correlated.
pub fn gaussian_random_field(grid: &GeoGrid, corr_length: f64, rng: &mut Rng) -> Result<Field> {
    check_corr(grid, corr_length)?;
    let sampler = GrfSampler::new(grid.n_lat() + extension_rows(corr_length), grid.n_lon(), corr_length);
    let full = sampler.to_field(&sampler.sample_spectrum(rng));
    Field::new(grid.clone(), full[..grid.n_cells()].to_vec())
}

fn nearest_index(values: &[f64], target: f64, periodic: bool) -> usize {
    let dist = |v: f64| {
        if periodic {
            let d = (v - target).rem_euclid(360.0);
            d.min(360.0 - d)
        } else {
            (v - target).abs()
        }
    };
    (0..values.len())
        .min_by(|&a, &b| dist(values[a]).total_cmp(&dist(values[b])))
        .unwrap_or(0)
}

/// Smooth dipole over the region on `z500` plus a uniform negative weight on
/// soil moisture inside the region, jointly unit-norm.
fn planted_pattern(grid: &GeoGrid, region: &RegionMask, cfg: &GeneratorConfig) -> Vec<Vec<f64>> {
    let (h, w) = (grid.n_lat(), grid.n_lon());
    let lat_c = 0.5 * (cfg.region.lat_min + cfg.region.lat_max);
    let lon_c = cfg.region.lon_min + 0.5 * (cfg.region.lon_max - cfg.region.lon_min).rem_euclid(360.0);
    let ci = nearest_index(grid.lat(), lat_c, false) as f64;
    let cj = nearest_index(grid.lon(), lon_c, true) as f64;
    let blob = |i: usize, j: usize, bi: f64, bj: f64, width: f64| {
        let dj = (j as f64 - bj).rem_euclid(w as f64);
        let dj = dj.min(w as f64 - dj);
        (-((i as f64 - bi).powi(2) + dj * dj) / (2.0 * width * width)).exp()
    };
    let width = (w as f64 / 16.0).max(1.5);
    let mut z = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            z[i * w + j] = blob(i, j, ci, cj, width) - 0.7 * blob(i, j, ci, cj - 2.5 * width, width);
        }
    }
    let mut sm: Vec<f64> = region.mask().iter().map(|&m| if m { -1.0 } else { 0.0 }).collect();
    let scale = |v: &mut Vec<f64>, target: f64| {
        let n = dot(v, v).sqrt();
        if n > 0.0 {
            let s = target.sqrt() / n;
            v.iter_mut().for_each(|x| *x *= s);
        }
    };
    scale(&mut z, 1.0 - cfg.sm_pattern_fraction);
    scale(&mut sm, cfg.sm_pattern_fraction);
    vec![z, sm]
}

/// Mean and standard deviation of the regional mean of `|psi * x|^2` for a
/// stationary Gaussian field, from Isserlis' theorem.
fn band_moments(sampler: &GrfSampler, psi_hat: &[f64], cells: &[usize]) -> (f64, f64) {
    let (h, w) = (sampler.h, sampler.w);
    let n = h * w;
    let mut r: Vec<C64> = (0..n)
        .map(|k| C64::new(psi_hat[k] * psi_hat[k] * sampler.spectrum[k], 0.0))
        .collect();
    let mirror = |k: usize| ((h - k / w) % h) * w + (w - k % w) % w;
    let mut p: Vec<C64> = (0..n)
        .map(|k| C64::new(psi_hat[k] * psi_hat[mirror(k)] * sampler.spectrum[k], 0.0))
        .collect();
    sampler.fft.inverse_normalized(&mut r);
    sampler.fft.inverse_normalized(&mut p);
    let mean = r[0].re;
    let mut var = 0.0;
    for &a in cells {
        for &b in cells {
            let di = (a / w + h - b / w) % h;
            let dj = (a % w + w - b % w) % w;
            let k = di * w + dj;
            var += r[k].norm_sqr() + p[k].norm_sqr();
        }
    }
    let m = cells.len() as f64;
    (mean, (var / (m * m)).sqrt())
}

/// Daily regional values whose `duration`-day running means equal `targets`,
/// choosing the minimum-norm solution.
fn running_mean_preimage(targets: &[f64], duration: usize) -> Result<Vec<f64>> {
    let n = targets.len();
    let days = n + duration - 1;
    let t = duration as f64;
    let apply = |z: &[f64], out: &mut [f64]| {
        let mut r = vec![0.0; days];
        for (i, zi) in z.iter().enumerate() {
            for v in &mut r[i..i + duration] {
                *v += zi / t;
            }
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o = r[i..i + duration].iter().sum::<f64>() / t;
        }
    };
    let mut z = vec![0.0; n];
    conjugate_gradient(apply, targets, &vec![1.0 / t; n], &mut z, 1e-13, 20 * n + 100)?;
    let mut r = vec![0.0; days];
    for (i, zi) in z.iter().enumerate() {
        for v in &mut r[i..i + duration] {
            *v += zi / t;
        }
    }
    Ok(r)
}

fn seasonal(day: u32, days: u32) -> f64 {
    (std::f64::consts::PI * (day as f64 + 0.5) / days as f64).sin()
}

pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let sm_corr = cfg.sm_corr_length.unwrap_or(cfg.corr_length);
    check_corr(&grid, cfg.corr_length)?;
    check_corr(&grid, sm_corr)?;
    let region = cfg.region.mask(&grid)?;
    let band_region = cfg.band_region.mask(&grid)?;
    let (n_lat, n_lon) = (grid.n_lat(), grid.n_lon());
    let cells = grid.n_cells();
    let ext = extension_rows(cfg.corr_length.max(sm_corr));
    let he = n_lat + ext;
    let z_sampler = GrfSampler::new(he, n_lon, cfg.corr_length);
    let sm_sampler = GrfSampler::new(he, n_lon, sm_corr);

    let pattern = planted_pattern(&grid, &region, cfg);
    let padded = |p: &[f64]| {
        let mut v = p.to_vec();
        v.resize(he * n_lon, 0.0);
        v
    };
    let index_var =
        z_sampler.projection_variance(&padded(&pattern[0])) + sm_sampler.projection_variance(&padded(&pattern[1]));
    let index_std = index_var.sqrt();

    let psi = morlet_hat(
        he,
        n_lon,
        cfg.band_scale,
        cfg.band_orientation,
        cfg.band_orientations,
        MorletParams::default(),
    );
    let band_cells = band_region.indices();
    let (band_mean, band_std) = band_moments(&z_sampler, &psi, &band_cells);

    let days = cfg.days_per_season;
    let duration = cfg.heatwave_days as usize;
    let n_time = cfg.n_years * days as usize;
    let mut z_vals = Vec::with_capacity(n_time * cells);
    let mut sm_vals = Vec::with_capacity(n_time * cells);
    let mut t2m_vals = Vec::with_capacity(n_time * cells);
    let mut year_lab = Vec::with_capacity(n_time);
    let mut day_lab = Vec::with_capacity(n_time);
    let mut target_year = Vec::new();
    let mut target_day = Vec::new();
    let mut amplitude = Vec::new();
    let mut linear_index = Vec::new();
    let mut band_term = Vec::new();
    let innovation = (1.0 - cfg.ar1 * cfg.ar1).sqrt();
    let mask = region.mask();

    for y in 0..cfg.n_years {
        let year = cfg.start_year + y as i32;
        let mut z_rng = rng::stream(cfg.seed, &[y as u64, 0]);
        let mut sm_rng = rng::stream(cfg.seed, &[y as u64, 1]);
        let mut noise_rng = rng::stream(cfg.seed, &[y as u64, 2]);
        let mut z_spec = z_sampler.sample_spectrum(&mut z_rng);
        let mut sm_spec = sm_sampler.sample_spectrum(&mut sm_rng);
        let mut year_targets = Vec::new();
        for d in 0..days {
            if d > 0 {
                let zn = z_sampler.sample_spectrum(&mut z_rng);
                let sn = sm_sampler.sample_spectrum(&mut sm_rng);
                for (s, n) in z_spec.iter_mut().zip(&zn) {
                    *s = *s * cfg.ar1 + n * innovation;
                }
                for (s, n) in sm_spec.iter_mut().zip(&sn) {
                    *s = *s * cfg.ar1 + n * innovation;
                }
            }
            let z = z_sampler.to_field(&z_spec);
            let sm = sm_sampler.to_field(&sm_spec);
            let season = seasonal(d, days);
            z_vals.extend(z[..cells].iter().map(|v| 5600.0 + 30.0 * season + 60.0 * v));
            sm_vals.extend(
                sm[..cells]
                    .iter()
                    .zip(mask)
                    .map(|(v, &m)| if m { 0.3 - 0.05 * season + 0.05 * v } else { 0.0 }),
            );
            year_lab.push(year);
            day_lab.push(d);
            if (d as usize) + duration <= days as usize {
                let idx = (dot(&pattern[0], &z[..cells]) + dot(&pattern[1], &sm[..cells])) / index_std;
                let mut u: Vec<C64> = z_spec.iter().zip(&psi).map(|(s, p)| s * p).collect();
                z_sampler.fft.inverse_normalized(&mut u);
                let raw = band_cells.iter().map(|&c| u[c].norm_sqr()).sum::<f64>() / band_cells.len() as f64;
                let band = (raw - band_mean) / band_std;
                let eps: f64 = StandardNormal.sample(&mut noise_rng);
                let a = cfg.linear_gain * idx + cfg.nonlinear_gain * band + cfg.noise_std * eps;
                target_year.push(year);
                target_day.push(d);
                amplitude.push(a);
                year_targets.push(a);
                linear_index.push(idx);
                band_term.push(band);
            }
        }
        let regional = running_mean_preimage(&year_targets, duration)?;
        for d in 0..days {
            let v = 290.0 + 6.0 * seasonal(d, days) + regional[d as usize];
            t2m_vals.extend(std::iter::repeat_n(v, cells));
        }
    }
    let series = |values| FieldSeries::new(grid.clone(), values, year_lab.clone(), day_lab.clone(), days);
    let truth = GroundTruth {
        pattern,
        channels: CHANNELS.iter().map(|c| c.to_string()).collect(),
        band_scale: cfg.band_scale,
        band_orientation: cfg.band_orientation,
        band_orientations: cfg.band_orientations,
        band_theta: cfg.band_orientation as f64 * std::f64::consts::PI / cfg.band_orientations as f64,
        band_region: cfg.band_region,
        linear_gain: cfg.linear_gain,
        nonlinear_gain: cfg.nonlinear_gain,
        residual_std: cfg.noise_std,
        index_std,
        band_mean,
        band_std,
    };
    Ok(SyntheticDataset {
        z500: series(z_vals)?,
        sm: series(sm_vals)?,
        t2m: series(t2m_vals)?,
        region,
        targets: TargetSeries {
            year: target_year,
            day_of_season: target_day,
            values: amplitude,
        },
        linear_index,
        band_term,
        truth,
    })
}

/// Region description stored next to generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionFile {
    pub region: RegionBox,
    pub heatwave_days: u32,
}

/// Write predictors and `t2m` as `data.*`, plus `region.json`, `truth.json`,
/// `truth_pattern.*` and `targets.json`.
pub fn write_dataset(dir: &Path, cfg: &GeneratorConfig, ds: &SyntheticDataset) -> Result<()> {
    io::write_series(dir, "data", &[("z500", &ds.z500), ("sm", &ds.sm), ("t2m", &ds.t2m)])?;
    io::write_json(
        &dir.join("region.json"),
        &RegionFile {
            region: cfg.region,
            heatwave_days: cfg.heatwave_days,
        },
    )?;
    io::write_json(&dir.join("truth.json"), &ds.truth)?;
    let maps: Vec<(&str, &[f64])> = CHANNELS
        .iter()
        .zip(&ds.truth.pattern)
        .map(|(c, p)| (*c, p.as_slice()))
        .collect();
    io::write_maps(dir, "truth_pattern", ds.z500.grid(), &maps)?;
    io::write_json(&dir.join("targets.json"), &ds.targets)?;
    Ok(())
}
