//! Year splits and per-fold preparation of design matrices and targets.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig};
use crate::error::{Error, Result};
use crate::grid::{apply_anomaly, compute_anomaly, heatwave_amplitude, standardize, FieldSeries, RegionMask};
use crate::io;
use crate::linalg::SampleMatrix;
use crate::metrics::{fit_climatology, threshold_quantile, ClimatologyModel};
use crate::nnet::ScatNetModel;
use crate::synth::{generate_dataset, RegionFile};

/// Predictor channels plus temperature, on one grid.
#[derive(Debug, Clone)]
pub struct RawData {
    pub z500: FieldSeries,
    pub sm: FieldSeries,
    pub t2m: FieldSeries,
    pub region: RegionMask,
    pub heatwave_days: u32,
}

impl RawData {
    pub fn n_lat(&self) -> usize {
        self.z500.grid().n_lat()
    }

    pub fn n_lon(&self) -> usize {
        self.z500.grid().n_lon()
    }

    pub fn years(&self) -> Vec<i32> {
        self.z500.distinct_years()
    }
}

pub fn load_data(source: &DataSource) -> Result<RawData> {
    match source {
        DataSource::Synthetic(cfg) => {
            let ds = generate_dataset(cfg)?;
            Ok(RawData {
                z500: ds.z500,
                sm: ds.sm,
                t2m: ds.t2m,
                region: ds.region,
                heatwave_days: cfg.heatwave_days,
            })
        }
        DataSource::Path(dir) => {
            let mut channels: HashMap<String, FieldSeries> = io::read_series(dir, "data")?.into_iter().collect();
            let mut take = |name: &str| {
                channels
                    .remove(name)
                    .ok_or_else(|| Error::InvalidInput(format!("{}: channel `{name}` missing", dir.display())))
            };
            let (z500, sm, t2m) = (take("z500")?, take("sm")?, take("t2m")?);
            let region: RegionFile = io::read_json(&dir.join("region.json"))?;
            let mask = region.region.mask(z500.grid())?;
            Ok(RawData {
                z500,
                sm,
                t2m,
                region: mask,
                heatwave_days: region.heatwave_days,
            })
        }
    }
}

/// Validation blocks: `n_folds` contiguous runs of years covering `years`.
pub fn make_folds(years: &[i32], n_folds: usize) -> Result<Vec<Vec<i32>>> {
    if n_folds == 0 || years.len() < n_folds {
        return Err(Error::InsufficientYears {
            need: n_folds.max(1),
            got: years.len(),
        });
    }
    let base = years.len() / n_folds;
    let extra = years.len() % n_folds;
    let mut out = Vec::with_capacity(n_folds);
    let mut start = 0;
    for k in 0..n_folds {
        let len = base + usize::from(k < extra);
        out.push(years[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldYears {
    pub train: Vec<i32>,
    pub val: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearSplit {
    pub test: Vec<i32>,
    pub folds: Vec<FoldYears>,
}

/// Trailing test years, then folds over the (optionally reduced) remainder.
pub fn split_years(years: &[i32], cfg: &ExperimentConfig) -> Result<YearSplit> {
    let mut years = years.to_vec();
    years.sort_unstable();
    years.dedup();
    let n_test = ((years.len() as f64) * cfg.test_fraction).round().max(1.0) as usize;
    if years.len() < n_test + cfg.n_folds {
        return Err(Error::InsufficientYears {
            need: n_test + cfg.n_folds,
            got: years.len(),
        });
    }
    let test = years.split_off(years.len() - n_test);
    if let Some(r) = cfg.reduced_years {
        if r < years.len() {
            years.truncate(r);
        }
    }
    let folds = if cfg.disjoint_folds {
        make_folds(&years, cfg.n_folds)?
            .into_iter()
            .map(|block| {
                let n_val = (block.len() / 5).max(1);
                if block.len() < 2 {
                    return Err(Error::InsufficientYears {
                        need: 2,
                        got: block.len(),
                    });
                }
                Ok(FoldYears {
                    train: block[..block.len() - n_val].to_vec(),
                    val: block[block.len() - n_val..].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        make_folds(&years, cfg.n_folds)?
            .into_iter()
            .map(|val| FoldYears {
                train: years.iter().copied().filter(|y| !val.contains(y)).collect(),
                val,
            })
            .collect()
    };
    Ok(YearSplit { test, folds })
}

/// Design matrix, targets and labels for one set of years.
#[derive(Debug, Clone)]
pub struct Samples {
    pub x: SampleMatrix,
    pub y: Vec<f64>,
    pub year: Vec<i32>,
    pub day: Vec<u32>,
}

/// Cached ScatNet structure with its prepared inputs on every split.
#[derive(Debug, Clone)]
pub struct ScatFeatures {
    pub template: ScatNetModel,
    pub train: SampleMatrix,
    pub val: SampleMatrix,
    pub test: SampleMatrix,
}

/// Everything one fold's models see. Statistics come from the training years only.
#[derive(Debug)]
pub struct FoldData {
    pub index: usize,
    pub years: FoldYears,
    pub train: Samples,
    pub val: Samples,
    pub test: Samples,
    pub a5: f64,
    pub climatology: ClimatologyModel,
    pub n_lat: usize,
    pub n_lon: usize,
    /// Grid cells of the soil-moisture region.
    pub sm_cells: Vec<usize>,
    pub scat_cache: Mutex<HashMap<(usize, usize, usize), ScatFeatures>>,
}

impl FoldData {
    pub fn cells(&self) -> usize {
        self.n_lat * self.n_lon
    }

    pub fn sm_mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cells()];
        self.sm_cells.iter().for_each(|&c| m[c] = 1.0);
        m
    }
}

pub fn prepare_fold(
    raw: &RawData,
    index: usize,
    years: &FoldYears,
    test_years: &[i32],
    cfg: &ExperimentConfig,
) -> Result<FoldData> {
    let duration = cfg.heatwave_days.unwrap_or(raw.heatwave_days);
    let train_of = |s: &FieldSeries| s.select_years(&years.train);
    let (_, z_stats) = compute_anomaly(&train_of(&raw.z500))?;
    let (_, sm_stats) = compute_anomaly(&train_of(&raw.sm))?;
    let (_, t_stats) = compute_anomaly(&train_of(&raw.t2m))?;
    let z = standardize(&apply_anomaly(&raw.z500, &z_stats)?, &z_stats)?;
    let sm = standardize(&apply_anomaly(&raw.sm, &sm_stats)?, &sm_stats)?;
    let t_anom = apply_anomaly(&raw.t2m, &t_stats)?;
    let targets = heatwave_amplitude(&t_anom, &raw.region, duration, cfg.area_weighting)?;
    let sm_cells = raw.region.indices();
    let cells = z.grid().n_cells();

    let build = |set: &[i32]| -> Result<Samples> {
        let mut rows = Vec::new();
        let mut out = Samples {
            x: SampleMatrix::zeros(0, 2 * cells),
            y: Vec::new(),
            year: Vec::new(),
            day: Vec::new(),
        };
        for k in 0..targets.len() {
            let (yr, d) = (targets.year[k], targets.day_of_season[k]);
            if !set.contains(&yr) || d % cfg.sample_stride != 0 {
                continue;
            }
            let t = z
                .position(yr, d)
                .ok_or_else(|| Error::InvalidInput(format!("no predictor snapshot for year {yr} day {d}")))?;
            let mut row = Vec::with_capacity(2 * cells);
            row.extend_from_slice(z.snapshot(t));
            let snap = sm.snapshot(t);
            row.resize(2 * cells, 0.0);
            for &c in &sm_cells {
                row[cells + c] = snap[c];
            }
            rows.extend(row);
            out.y.push(targets.values[k]);
            out.year.push(yr);
            out.day.push(d);
        }
        out.x = SampleMatrix::new(out.y.len(), 2 * cells, rows)?;
        Ok(out)
    };
    let train = build(&years.train)?;
    let val = build(&years.val)?;
    let test = build(test_years)?;
    if train.y.len() < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: train.y.len(),
        });
    }
    let a5 = threshold_quantile(&train.y, cfg.quantile)?;
    let climatology = fit_climatology(&train.y)?;
    Ok(FoldData {
        index,
        years: years.clone(),
        train,
        val,
        test,
        a5,
        climatology,
        n_lat: raw.n_lat(),
        n_lon: raw.n_lon(),
        sm_cells,
        scat_cache: Mutex::new(HashMap::new()),
    })
}
