//! On-disk field format: a JSON header plus one raw little-endian `f32` file
//! per channel, row-major `(time, lat, lon)`.
//!
//! For a header `dir/<stem>.json` the channel `c` lives in `dir/<stem>.<c>.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldSeries, GeoGrid, DEFAULT_DAYS_PER_SEASON};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesHeader {
    pub n_lat: usize,
    pub n_lon: usize,
    pub lat: Vec<f64>,
    pub lon: Vec<f64>,
    pub n_time: usize,
    pub year: Vec<i32>,
    pub day_of_season: Vec<u32>,
    pub channels: Vec<String>,
    #[serde(default = "default_days")]
    pub days_per_season: u32,
}

fn default_days() -> u32 {
    DEFAULT_DAYS_PER_SEASON
}

pub fn channel_path(dir: &Path, stem: &str, channel: &str) -> PathBuf {
    dir.join(format!("{stem}.{channel}.bin"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_f32(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::InvalidInput(format!(
            "{}: length not a multiple of 4",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn write_f64(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for &v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f64(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidInput(format!(
            "{}: length not a multiple of 8",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Write channels that share grid and labels under `dir/<stem>.json`.
pub fn write_series(dir: &Path, stem: &str, channels: &[(&str, &FieldSeries)]) -> Result<()> {
    let (_, first) = channels
        .first()
        .ok_or_else(|| Error::InvalidInput("no channels to write".into()))?;
    for (name, s) in channels {
        if s.grid() != first.grid() || s.year() != first.year() || s.day_of_season() != first.day_of_season() {
            return Err(Error::InvalidInput(format!(
                "channel {name} does not share grid/labels"
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = SeriesHeader {
        n_lat: first.grid().n_lat(),
        n_lon: first.grid().n_lon(),
        lat: first.grid().lat().to_vec(),
        lon: first.grid().lon().to_vec(),
        n_time: first.len(),
        year: first.year().to_vec(),
        day_of_season: first.day_of_season().to_vec(),
        channels: channels.iter().map(|(n, _)| n.to_string()).collect(),
        days_per_season: first.days_per_season(),
    };
    write_json(&dir.join(format!("{stem}.json")), &header)?;
    for (name, s) in channels {
        write_f32(&channel_path(dir, stem, name), s.values())?;
    }
    Ok(())
}

pub fn read_series(dir: &Path, stem: &str) -> Result<Vec<(String, FieldSeries)>> {
    let header: SeriesHeader = read_json(&dir.join(format!("{stem}.json")))?;
    if header.lat.len() != header.n_lat || header.lon.len() != header.n_lon {
        return Err(Error::shape(
            format!("{}x{}", header.n_lat, header.n_lon),
            format!("{}x{}", header.lat.len(), header.lon.len()),
        ));
    }
    if header.year.len() != header.n_time {
        return Err(Error::shape(header.n_time, header.year.len()));
    }
    let grid = GeoGrid::new(header.lat.clone(), header.lon.clone())?;
    header
        .channels
        .iter()
        .map(|name| {
            let values = read_f32(&channel_path(dir, stem, name))?;
            let s = FieldSeries::new(
                grid.clone(),
                values,
                header.year.clone(),
                header.day_of_season.clone(),
                header.days_per_season,
            )?;
            Ok((name.clone(), s))
        })
        .collect()
}

/// Write static maps (one snapshot per channel), e.g. projection patterns.
pub fn write_maps(dir: &Path, stem: &str, grid: &GeoGrid, maps: &[(&str, &[f64])]) -> Result<()> {
    let series: Vec<(String, FieldSeries)> = maps
        .iter()
        .map(|(name, v)| {
            Ok((
                name.to_string(),
                FieldSeries::new(grid.clone(), v.to_vec(), vec![0], vec![0], 1)?,
            ))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<(&str, &FieldSeries)> = series.iter().map(|(n, s)| (n.as_str(), s)).collect();
    write_series(dir, stem, &refs)
}
