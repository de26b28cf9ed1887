//! Skill tables, text summaries and map exports.

use std::fmt::Write as _;
use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use super::run::RunManifest;
use crate::error::{Error, Result};
use crate::grid::GeoGrid;
use crate::io;
use crate::metrics::Skills;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    #[serde(deserialize_with = "nan_null::scalar")]
    pub mean: f64,
    #[serde(deserialize_with = "nan_null::scalar")]
    pub std: f64,
    #[serde(deserialize_with = "nan_null::vec")]
    pub folds: Vec<f64>,
}

/// JSON writes NaN as `null`; read it back as NaN.
pub(crate) mod nan_null {
    use serde::{Deserialize, Deserializer};

    pub fn scalar<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub fn vec<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?
            .into_iter()
            .map(|v| v.unwrap_or(f64::NAN))
            .collect())
    }
}

impl MetricSummary {
    pub fn from_folds(folds: Vec<f64>) -> Self {
        let n = folds.len().max(1) as f64;
        let mean = folds.iter().sum::<f64>() / n;
        let std = (folds.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { mean, std, folds }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillTable {
    pub crpss: MetricSummary,
    pub nlls: MetricSummary,
    pub bces: MetricSummary,
}

impl SkillTable {
    pub fn from_folds(per_fold: &[Skills]) -> Self {
        Self {
            crpss: MetricSummary::from_folds(per_fold.iter().map(|s| s.crpss).collect()),
            nlls: MetricSummary::from_folds(per_fold.iter().map(|s| s.nlls).collect()),
            bces: MetricSummary::from_folds(per_fold.iter().map(|s| s.bces).collect()),
        }
    }

    pub fn metrics(&self) -> [(&'static str, &MetricSummary); 3] {
        [("CRPSS", &self.crpss), ("NLLS", &self.nlls), ("BCES", &self.bces)]
    }
}

/// `model, metric, mean, std, fold_0, ..., fold_{k-1}`.
pub fn skills_csv(rows: &[(String, &SkillTable)], n_folds: usize) -> String {
    let mut out = String::from("model,metric,mean,std");
    for k in 0..n_folds {
        let _ = write!(out, ",fold_{k}");
    }
    out.push('\n');
    for (model, table) in rows {
        for (metric, m) in table.metrics() {
            let _ = write!(out, "{model},{metric},{},{}", m.mean, m.std);
            for v in &m.folds {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

/// Mean ± std per model and metric, and the best model per metric.
pub fn summary_text(rows: &[(String, &SkillTable)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>18} {:>18} {:>18}", "model", "CRPSS", "NLLS", "BCES");
    for (model, t) in rows {
        let cell = |m: &MetricSummary| format!("{:.4} ± {:.4}", m.mean, m.std);
        let _ = writeln!(
            out,
            "{:<16} {:>18} {:>18} {:>18}",
            model,
            cell(&t.crpss),
            cell(&t.nlls),
            cell(&t.bces)
        );
    }
    out.push('\n');
    for i in 0..3 {
        let best = rows
            .iter()
            .max_by(|a, b| a.1.metrics()[i].1.mean.total_cmp(&b.1.metrics()[i].1.mean));
        if let Some((model, t)) = best {
            let (name, m) = t.metrics()[i];
            let _ = writeln!(out, "best {name}: {model} ({:.4})", m.mean);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMeta {
    pub min: f64,
    pub max: f64,
    pub n_lat: usize,
    pub n_lon: usize,
    /// Image rows run from the northernmost latitude down.
    pub north_up: bool,
}

/// 8-bit grayscale image of one map (min black, max white) with a JSON
/// sidecar recording the value range.
pub fn write_heatmap(path: &Path, values: &[f64], n_lat: usize, n_lon: usize) -> Result<HeatmapMeta> {
    if values.len() != n_lat * n_lon {
        return Err(Error::shape(n_lat * n_lon, values.len()));
    }
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let min = finite.clone().fold(f64::INFINITY, f64::min);
    let max = finite.fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };
    let mut img = GrayImage::new(n_lon as u32, n_lat as u32);
    for i in 0..n_lat {
        for j in 0..n_lon {
            let v = values[i * n_lon + j];
            let level = if v.is_finite() {
                ((v - min) / span * 255.0).round() as u8
            } else {
                0
            };
            img.put_pixel(j as u32, (n_lat - 1 - i) as u32, Luma([level]));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let meta = HeatmapMeta {
        min,
        max,
        n_lat,
        n_lon,
        north_up: true,
    };
    io::write_json(&path.with_extension("json"), &meta)?;
    Ok(meta)
}

/// Binary-grid export of per-channel maps, plus heatmaps when requested.
/// Returns the written paths relative to `root`.
pub fn export_maps(
    root: &Path,
    rel_dir: &str,
    stem: &str,
    grid: &GeoGrid,
    channels: &[&str],
    values: &[f64],
    heatmaps: bool,
) -> Result<Vec<String>> {
    let cells = grid.n_cells();
    if values.len() != cells * channels.len() {
        return Err(Error::shape(cells * channels.len(), values.len()));
    }
    let dir = root.join(rel_dir);
    let maps: Vec<(&str, &[f64])> = channels
        .iter()
        .zip(values.chunks(cells))
        .map(|(c, v)| (*c, v))
        .collect();
    io::write_maps(&dir, stem, grid, &maps)?;
    let mut written = vec![format!("{rel_dir}/{stem}.json")];
    for (c, v) in &maps {
        written.push(format!("{rel_dir}/{stem}.{c}.bin"));
        if heatmaps {
            let name = format!("{stem}_{c}.png");
            write_heatmap(&dir.join(&name), v, grid.n_lat(), grid.n_lon())?;
            written.push(format!("{rel_dir}/{name}"));
        }
    }
    Ok(written)
}

/// What `report` wrote and which manifest artifacts were missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOutcome {
    pub written: Vec<String>,
    pub missing: Vec<String>,
}

/// Re-emit the CSV table and text summary from a manifest, listing any
/// recorded artifact that no longer exists.
pub fn report(manifest: &RunManifest, out: &Path) -> Result<ReportOutcome> {
    if manifest.models.is_empty() {
        return Err(Error::InvalidInput("manifest lists no models".into()));
    }
    let rows: Vec<(String, &SkillTable)> = manifest
        .models
        .iter()
        .map(|m| (m.label.clone(), &m.test_skills))
        .collect();
    let csv = skills_csv(&rows, manifest.folds.len());
    let summary = summary_text(&rows);
    std::fs::write(out.join("skills.csv"), csv).map_err(|e| Error::io(out.join("skills.csv"), e))?;
    std::fs::write(out.join("summary.txt"), &summary).map_err(|e| Error::io(out.join("summary.txt"), e))?;
    let missing = manifest
        .artifacts
        .iter()
        .chain(manifest.models.iter().flat_map(|m| m.checkpoints.iter()))
        .filter(|a| !out.join(a).exists())
        .cloned()
        .collect();
    Ok(ReportOutcome {
        written: vec!["skills.csv".into(), "summary.txt".into()],
        missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(c: [f64; 2]) -> SkillTable {
        SkillTable::from_folds(&[
            Skills {
                crpss: c[0],
                nlls: 0.1,
                bces: 0.2,
            },
            Skills {
                crpss: c[1],
                nlls: 0.3,
                bces: 0.4,
            },
        ])
    }

    #[test]
    fn csv_schema() {
        let t = table([0.1, 0.3]);
        let csv = skills_csv(&[("ga".into(), &t)], 2);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "model,metric,mean,std,fold_0,fold_1");
        assert_eq!(lines.len(), 4);
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first[..2], ["ga", "CRPSS"]);
        assert!((first[2].parse::<f64>().unwrap() - 0.2).abs() < 1e-15);
        assert!((first[3].parse::<f64>().unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn summary_names_best_model() {
        let a = table([0.1, 0.1]);
        let b = table([0.2, 0.4]);
        let s = summary_text(&[("ga".into(), &a), ("cnn".into(), &b)]);
        assert!(s.contains("best CRPSS: cnn"));
    }

    #[test]
    fn heatmap_range_and_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<f64> = (0..12).map(|v| v as f64 - 3.0).collect();
        let path = dir.path().join("m.png");
        let meta = write_heatmap(&path, &values, 3, 4).unwrap();
        assert_eq!((meta.min, meta.max), (-3.0, 8.0));
        let side: HeatmapMeta = io::read_json(&dir.path().join("m.json")).unwrap();
        assert_eq!(side, meta);
        let img = image::open(&path).unwrap().to_luma8();
        // last latitude row (north) at the top, maximum value
        assert_eq!(img.get_pixel(3, 0)[0], 255);
        assert_eq!(img.get_pixel(0, 2)[0], 0);
    }
}
