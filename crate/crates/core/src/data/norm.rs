use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{BasinRecord, BasinSeries, Region};
use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::task_graph::Task;

/// Region-wide z-score statistics fitted on the training rows only.
/// Features are the forcings followed by the static attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub feature_names: Vec<String>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: [f64; 3],
    pub target_std: [f64; 3],
}

/// Population mean and standard deviation, two-pass.
fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (sum, n) = values
        .clone()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

fn check_std(name: &str, mean: f64, std: f64) -> Result<()> {
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::ZeroVariance(name.to_string()));
    }
    Ok(())
}

impl NormStats {
    pub fn fit(region: &Region, train: Range<usize>) -> Result<NormStats> {
        region.validate()?;
        if train.is_empty() || train.end > region.dates().len() {
            return Err(Error::Config(format!(
                "training rows {train:?} invalid for {} days",
                region.dates().len()
            )));
        }
        let recs = &region.records;
        let mut names = region.forcing_names.clone();
        names.extend(region.static_names.iter().cloned());
        let mut feature_mean = Vec::with_capacity(names.len());
        let mut feature_std = Vec::with_capacity(names.len());
        for (f, name) in region.forcing_names.iter().enumerate() {
            let it = recs
                .iter()
                .flat_map(|r| train.clone().map(move |t| r.forcings.get(t, f)));
            let (m, s) = moments(it);
            check_std(name, m, s)?;
            feature_mean.push(m);
            feature_std.push(s);
        }
        // Every basin contributes the same number of rows, so the broadcast
        // static channel has the moments of the per-basin values.
        for (a, name) in region.static_names.iter().enumerate() {
            let (m, s) = moments(recs.iter().map(|r| r.statics[a]));
            check_std(name, m, s)?;
            feature_mean.push(m);
            feature_std.push(s);
        }
        let mut target_mean = [0.0; 3];
        let mut target_std = [0.0; 3];
        for task in Task::ALL {
            let k = task.index();
            let it = recs
                .iter()
                .flat_map(|r| train.clone().map(move |t| r.targets.get(t, k)));
            let (m, s) = moments(it);
            check_std(task.name(), m, s)?;
            target_mean[k] = m;
            target_std[k] = s;
        }
        Ok(NormStats {
            feature_names: names,
            feature_mean,
            feature_std,
            target_mean,
            target_std,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.feature_names.len()
    }

    /// Normalized model inputs and targets for `rows` of one basin.
    pub fn apply(&self, record: &BasinRecord, rows: Range<usize>) -> Result<BasinSeries> {
        let nf = record.forcings.cols();
        if nf + record.statics.len() != self.input_dim() || rows.end > record.len() {
            return Err(Error::shape(
                "NormStats::apply",
                format!(
                    "basin '{}' does not match the fitted schema",
                    record.basin_id
                ),
            ));
        }
        let statics: Vec<f64> = record
            .statics
            .iter()
            .enumerate()
            .map(|(a, v)| (v - self.feature_mean[nf + a]) / self.feature_std[nf + a])
            .collect();
        let t0 = rows.start;
        let x = Mat::from_fn(rows.len(), self.input_dim(), |i, f| {
            if f < nf {
                (record.forcings.get(t0 + i, f) - self.feature_mean[f]) / self.feature_std[f]
            } else {
                statics[f - nf]
            }
        });
        let y = Mat::from_fn(rows.len(), 3, |i, k| {
            (record.targets.get(t0 + i, k) - self.target_mean[k]) / self.target_std[k]
        });
        Ok(BasinSeries {
            basin_id: record.basin_id.clone(),
            x,
            y,
        })
    }

    pub fn normalize_target(&self, task: Task, v: f64) -> f64 {
        let k = task.index();
        (v - self.target_mean[k]) / self.target_std[k]
    }

    pub fn denormalize_target(&self, task: Task, v: f64) -> f64 {
        let k = task.index();
        v * self.target_std[k] + self.target_mean[k]
    }

    /// Inverse of the feature transform in [`NormStats::apply`], row-wise.
    pub fn denormalize_features(&self, x: &Mat) -> Mat {
        Mat::from_fn(x.rows(), x.cols(), |i, f| {
            x.get(i, f) * self.feature_std[f] + self.feature_mean[f]
        })
    }
}
