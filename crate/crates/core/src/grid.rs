//! Gridded field data model, anomaly/standardization preprocessing, region
//! averaging and the heatwave amplitude target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular latitude-longitude grid. Longitude is periodic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoGrid {
    lat: Vec<f64>,
    lon: Vec<f64>,
}

impl GeoGrid {
    pub fn new(lat: Vec<f64>, lon: Vec<f64>) -> Result<Self> {
        if lat.len() < 2 || lon.len() < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2x2 points, got {}x{}",
                lat.len(),
                lon.len()
            )));
        }
        if lat.iter().chain(&lon).any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite coordinate".into()));
        }
        let increasing = lat.windows(2).all(|w| w[1] > w[0]);
        let decreasing = lat.windows(2).all(|w| w[1] < w[0]);
        if !increasing && !decreasing {
            return Err(Error::InvalidGrid("latitude is not strictly monotone".into()));
        }
        let step = lon[1] - lon[0];
        if step == 0.0
            || lon
                .windows(2)
                .any(|w| ((w[1] - w[0]) - step).abs() > 1e-9 * step.abs().max(1.0))
        {
            return Err(Error::InvalidGrid("longitude is not uniformly spaced".into()));
        }
        Ok(Self { lat, lon })
    }

    /// Evenly spaced latitudes in `[lat_min, lat_max]` and a full periodic
    /// longitude circle starting at `lon_min`.
    pub fn regular(n_lat: usize, n_lon: usize, lat_min: f64, lat_max: f64, lon_min: f64) -> Result<Self> {
        if n_lat < 2 || n_lon < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2x2 points, got {n_lat}x{n_lon}"
            )));
        }
        let dlat = (lat_max - lat_min) / (n_lat - 1) as f64;
        let dlon = 360.0 / n_lon as f64;
        Self::new(
            (0..n_lat).map(|i| lat_min + dlat * i as f64).collect(),
            (0..n_lon).map(|j| lon_min + dlon * j as f64).collect(),
        )
    }

    pub fn n_lat(&self) -> usize {
        self.lat.len()
    }

    pub fn n_lon(&self) -> usize {
        self.lon.len()
    }

    pub fn n_cells(&self) -> usize {
        self.lat.len() * self.lon.len()
    }

    pub fn lat(&self) -> &[f64] {
        &self.lat
    }

    pub fn lon(&self) -> &[f64] {
        &self.lon
    }
}

/// One 2D field, row-major `(lat, lon)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: GeoGrid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: GeoGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::shape(grid.n_cells(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("field contains non-finite values".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: GeoGrid, value: f64) -> Self {
        let n = grid.n_cells();
        Self {
            grid,
            values: vec![value; n],
        }
    }

    pub fn grid(&self) -> &GeoGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.n_lon() + j]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// A time-ordered stack of fields of one variable with `(year, day_of_season)`
/// labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSeries {
    grid: GeoGrid,
    values: Vec<f64>,
    year: Vec<i32>,
    day_of_season: Vec<u32>,
    days_per_season: u32,
}

pub const DEFAULT_DAYS_PER_SEASON: u32 = 92;

impl FieldSeries {
    pub fn new(
        grid: GeoGrid,
        values: Vec<f64>,
        year: Vec<i32>,
        day_of_season: Vec<u32>,
        days_per_season: u32,
    ) -> Result<Self> {
        let n_time = year.len();
        if day_of_season.len() != n_time {
            return Err(Error::shape(n_time, day_of_season.len()));
        }
        if values.len() != n_time * grid.n_cells() {
            return Err(Error::shape(n_time * grid.n_cells(), values.len()));
        }
        if day_of_season.iter().any(|&d| d >= days_per_season) {
            return Err(Error::InvalidInput("day_of_season out of range".into()));
        }
        let sorted = year
            .iter()
            .zip(&day_of_season)
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| (w[0].0, w[0].1) < (w[1].0, w[1].1));
        if !sorted {
            return Err(Error::InvalidInput(
                "entries must be strictly sorted by (year, day_of_season)".into(),
            ));
        }
        Ok(Self {
            grid,
            values,
            year,
            day_of_season,
            days_per_season,
        })
    }

    pub fn from_fields(
        fields: &[Field],
        year: Vec<i32>,
        day_of_season: Vec<u32>,
        days_per_season: u32,
    ) -> Result<Self> {
        let grid = fields
            .first()
            .ok_or_else(|| Error::InvalidInput("empty field list".into()))?
            .grid()
            .clone();
        let mut values = Vec::with_capacity(fields.len() * grid.n_cells());
        for f in fields {
            if f.grid() != &grid {
                return Err(Error::InvalidGrid("fields do not share one grid".into()));
            }
            values.extend_from_slice(f.values());
        }
        Self::new(grid, values, year, day_of_season, days_per_season)
    }

    pub fn grid(&self) -> &GeoGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.year.len()
    }

    pub fn is_empty(&self) -> bool {
        self.year.is_empty()
    }

    pub fn year(&self) -> &[i32] {
        &self.year
    }

    pub fn day_of_season(&self) -> &[u32] {
        &self.day_of_season
    }

    pub fn days_per_season(&self) -> u32 {
        self.days_per_season
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn snapshot(&self, t: usize) -> &[f64] {
        let n = self.grid.n_cells();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn field(&self, t: usize) -> Field {
        Field {
            grid: self.grid.clone(),
            values: self.snapshot(t).to_vec(),
        }
    }

    pub fn distinct_years(&self) -> Vec<i32> {
        let mut years = self.year.clone();
        years.dedup();
        years
    }

    /// Entries whose year is in `years` (which must be sorted).
    pub fn select_years(&self, years: &[i32]) -> FieldSeries {
        let n = self.grid.n_cells();
        let keep: Vec<usize> = (0..self.len())
            .filter(|&t| years.binary_search(&self.year[t]).is_ok())
            .collect();
        let mut values = Vec::with_capacity(keep.len() * n);
        for &t in &keep {
            values.extend_from_slice(self.snapshot(t));
        }
        FieldSeries {
            grid: self.grid.clone(),
            values,
            year: keep.iter().map(|&t| self.year[t]).collect(),
            day_of_season: keep.iter().map(|&t| self.day_of_season[t]).collect(),
            days_per_season: self.days_per_season,
        }
    }

    /// Index of the entry labelled `(year, day)`, if present.
    pub fn position(&self, year: i32, day: u32) -> Option<usize> {
        let mut lo = 0;
        let mut hi = self.len();
        while lo < hi {
            let mid = (lo + hi) / 2;
            match (self.year[mid], self.day_of_season[mid]).cmp(&(year, day)) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => return Some(mid),
            }
        }
        None
    }

    pub(crate) fn map_values(&self, values: Vec<f64>) -> FieldSeries {
        FieldSeries {
            grid: self.grid.clone(),
            values,
            year: self.year.clone(),
            day_of_season: self.day_of_season.clone(),
            days_per_season: self.days_per_season,
        }
    }

    /// Elementwise `alpha * self + beta * other`; labels must match.
    pub fn linear_combination(&self, alpha: f64, other: &FieldSeries, beta: f64) -> Result<FieldSeries> {
        if self.grid != other.grid || self.year != other.year || self.day_of_season != other.day_of_season {
            return Err(Error::InvalidInput("series labels or grids differ".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        Ok(self.map_values(values))
    }
}

/// Latitude/longitude box in degrees, as stored in configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl RegionBox {
    pub fn mask(&self, grid: &GeoGrid) -> Result<RegionMask> {
        RegionMask::from_box(grid, self.lat_min, self.lat_max, self.lon_min, self.lon_max)
    }
}

/// Boolean region mask over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMask {
    grid: GeoGrid,
    mask: Vec<bool>,
}

impl RegionMask {
    pub fn new(grid: GeoGrid, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != grid.n_cells() {
            return Err(Error::shape(grid.n_cells(), mask.len()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyMask);
        }
        Ok(Self { grid, mask })
    }

    /// Cells whose centre lies inside the latitude/longitude box. Longitudes
    /// are compared modulo 360.
    pub fn from_box(grid: &GeoGrid, lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        let width = (lon_max - lon_min).rem_euclid(360.0);
        let mut mask = Vec::with_capacity(grid.n_cells());
        for &la in grid.lat() {
            for &lo in grid.lon() {
                let offset = (lo - lon_min).rem_euclid(360.0);
                mask.push(la >= lat_min && la <= lat_max && offset <= width);
            }
        }
        Self::new(grid.clone(), mask)
    }

    pub fn grid(&self) -> &GeoGrid {
        &self.grid
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

/// Quadrature used for the spatial mean over a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaWeighting {
    #[default]
    CosLat,
    Uniform,
}

/// Removed day-of-season climatology and per-cell scale, fitted on a training
/// split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub days_per_season: u32,
    pub n_cells: usize,
    /// `(day_of_season, cell)` means.
    pub mean: Vec<f64>,
    /// Number of training entries behind each day-of-season mean.
    pub day_count: Vec<usize>,
    /// Per-cell standard deviation of the training anomalies.
    pub std: Vec<f64>,
    pub degenerate: Vec<bool>,
}

/// Relative threshold below which a cell's spread is treated as zero.
pub const DEGENERATE_REL_STD: f64 = 1e-12;

/// Subtract the multi-year mean of each `(day_of_season, cell)` and record
/// per-cell anomaly spread.
pub fn compute_anomaly(series: &FieldSeries) -> Result<(FieldSeries, StandardizationStats)> {
    let n_years = series.distinct_years().len();
    if n_years < 2 {
        return Err(Error::InsufficientYears { need: 2, got: n_years });
    }
    let n = series.grid.n_cells();
    let days = series.days_per_season as usize;
    let mut mean = vec![0.0; days * n];
    let mut day_count = vec![0usize; days];
    for t in 0..series.len() {
        let d = series.day_of_season[t] as usize;
        day_count[d] += 1;
        for (m, v) in mean[d * n..(d + 1) * n].iter_mut().zip(series.snapshot(t)) {
            *m += v;
        }
    }
    for d in 0..days {
        if day_count[d] > 0 {
            let inv = 1.0 / day_count[d] as f64;
            mean[d * n..(d + 1) * n].iter_mut().for_each(|m| *m *= inv);
        }
    }

    let mut stats = StandardizationStats {
        days_per_season: series.days_per_season,
        n_cells: n,
        mean,
        day_count,
        std: vec![0.0; n],
        degenerate: vec![false; n],
    };
    let anomalies = apply_anomaly(series, &stats)?;

    let mut sum = vec![0.0; n];
    let mut sumsq = vec![0.0; n];
    for t in 0..anomalies.len() {
        for (c, v) in anomalies.snapshot(t).iter().enumerate() {
            sum[c] += v;
            sumsq[c] += v * v;
        }
    }
    let count = anomalies.len() as f64;
    let var: Vec<f64> = sum
        .iter()
        .zip(&sumsq)
        .map(|(s, q)| (q / count - (s / count).powi(2)).max(0.0))
        .collect();
    let scale = (var.iter().sum::<f64>() / n as f64).sqrt();
    for c in 0..n {
        let s = var[c].sqrt();
        stats.std[c] = s;
        stats.degenerate[c] = !(s > DEGENERATE_REL_STD * scale) || scale == 0.0;
    }
    Ok((anomalies, stats))
}

/// Subtract a previously fitted day-of-season climatology.
pub fn apply_anomaly(series: &FieldSeries, stats: &StandardizationStats) -> Result<FieldSeries> {
    let n = series.grid.n_cells();
    if n != stats.n_cells || series.days_per_season != stats.days_per_season {
        return Err(Error::shape(
            format!("{} cells / {} days", stats.n_cells, stats.days_per_season),
            format!("{} cells / {} days", n, series.days_per_season),
        ));
    }
    let mut values = series.values.clone();
    for t in 0..series.len() {
        let d = series.day_of_season[t] as usize;
        if stats.day_count[d] == 0 {
            return Err(Error::InvalidInput(format!(
                "day_of_season {d} has no climatology in the fitted stats"
            )));
        }
        let m = &stats.mean[d * n..(d + 1) * n];
        for (v, mu) in values[t * n..(t + 1) * n].iter_mut().zip(m) {
            *v -= mu;
        }
    }
    Ok(series.map_values(values))
}

/// Divide anomalies by the per-cell training spread. Degenerate cells map to 0.
pub fn standardize(series: &FieldSeries, stats: &StandardizationStats) -> Result<FieldSeries> {
    let n = series.grid.n_cells();
    if n != stats.n_cells {
        return Err(Error::shape(stats.n_cells, n));
    }
    let mut values = series.values.clone();
    for chunk in values.chunks_mut(n) {
        for ((v, s), &deg) in chunk.iter_mut().zip(&stats.std).zip(&stats.degenerate) {
            *v = if deg { 0.0 } else { *v / s };
        }
    }
    Ok(series.map_values(values))
}

/// Area-weighted mean over the masked cells of one snapshot.
pub fn area_average_values(values: &[f64], mask: &RegionMask, weighting: AreaWeighting) -> f64 {
    let n_lon = mask.grid.n_lon();
    let mut num = 0.0;
    let mut den = 0.0;
    for (idx, (&m, v)) in mask.mask.iter().zip(values).enumerate() {
        if m {
            let w = match weighting {
                AreaWeighting::CosLat => mask.grid.lat[idx / n_lon].to_radians().cos(),
                AreaWeighting::Uniform => 1.0,
            };
            num += w * v;
            den += w;
        }
    }
    num / den
}

pub fn area_average(field: &Field, mask: &RegionMask, weighting: AreaWeighting) -> Result<f64> {
    if field.grid != mask.grid {
        return Err(Error::InvalidGrid("field and mask grids differ".into()));
    }
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(area_average_values(&field.values, mask, weighting))
}

/// Scalar series labelled by `(year, day_of_season)` of the window start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSeries {
    pub year: Vec<i32>,
    pub day_of_season: Vec<u32>,
    pub values: Vec<f64>,
}

impl TargetSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Heatwave amplitude: mean of the region-averaged anomaly over a `duration`
/// day window starting at each day. Windows that would leave the season are
/// omitted.
pub fn heatwave_amplitude(
    temp_anomaly: &FieldSeries,
    mask: &RegionMask,
    duration: u32,
    weighting: AreaWeighting,
) -> Result<TargetSeries> {
    if duration == 0 || duration > temp_anomaly.days_per_season {
        return Err(Error::InvalidInput(format!(
            "window length {duration} must be in 1..={}",
            temp_anomaly.days_per_season
        )));
    }
    if temp_anomaly.grid != mask.grid {
        return Err(Error::InvalidGrid("series and mask grids differ".into()));
    }
    let daily: Vec<f64> = (0..temp_anomaly.len())
        .map(|t| area_average_values(temp_anomaly.snapshot(t), mask, weighting))
        .collect();
    let span = duration as usize;
    let mut out = TargetSeries {
        year: Vec::new(),
        day_of_season: Vec::new(),
        values: Vec::new(),
    };
    for t in 0..temp_anomaly.len() {
        let (y, d) = (temp_anomaly.year[t], temp_anomaly.day_of_season[t]);
        if d + duration > temp_anomaly.days_per_season || t + span > temp_anomaly.len() {
            continue;
        }
        // sorted unique labels: the window is complete iff its last entry is (y, d + T - 1)
        let last = t + span - 1;
        if temp_anomaly.year[last] != y || temp_anomaly.day_of_season[last] != d + duration - 1 {
            continue;
        }
        let sum: f64 = daily[t..=last].iter().sum();
        out.year.push(y);
        out.day_of_season.push(d);
        out.values.push(sum / duration as f64);
    }
    Ok(out)
}
