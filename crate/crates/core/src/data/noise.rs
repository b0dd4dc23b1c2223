use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::BasinRecord;
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::task_graph::Task;

/// Which splits consume the corrupted intermediate series.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    #[default]
    Both,
    TrainOnly,
    TestOnly,
}

impl NoiseTarget {
    pub fn affects_training(self) -> bool {
        matches!(self, NoiseTarget::Both | NoiseTarget::TrainOnly)
    }

    pub fn affects_test(self) -> bool {
        matches!(self, NoiseTarget::Both | NoiseTarget::TestOnly)
    }
}

/// Copies `records` and adds `level · σ_b · N(0, 1)` to every step of the
/// soil-water and snowpack series, where `σ_b` is the basin's own standard
/// deviation of that series over `sigma_rows`. Streamflow is left untouched.
pub fn inject_noise(
    records: &[BasinRecord],
    level: f64,
    seed: u64,
    sigma_rows: Range<usize>,
) -> Result<Vec<BasinRecord>> {
    if !(level >= 0.0 && level.is_finite()) {
        return Err(Error::Config(format!(
            "noise level {level} must be a finite value >= 0"
        )));
    }
    let mut out = records.to_vec();
    if level == 0.0 {
        return Ok(out);
    }
    let root = Rng::new(seed);
    for (b, rec) in out.iter_mut().enumerate() {
        if sigma_rows.is_empty() || sigma_rows.end > rec.len() {
            return Err(Error::Config(format!(
                "noise reference rows {sigma_rows:?} invalid for basin '{}'",
                rec.basin_id
            )));
        }
        let mut rng = root.fork(b as u64);
        for task in [Task::SoilWater, Task::Snowpack] {
            let k = task.index();
            let n = sigma_rows.len() as f64;
            let mean = sigma_rows
                .clone()
                .map(|t| rec.targets.get(t, k))
                .sum::<f64>()
                / n;
            let var = sigma_rows
                .clone()
                .map(|t| (rec.targets.get(t, k) - mean).powi(2))
                .sum::<f64>()
                / n;
            let scale = level * var.sqrt();
            for t in 0..rec.len() {
                let v = rec.targets.get(t, k) + scale * rng.normal();
                rec.targets.set(t, k, v);
            }
        }
    }
    Ok(out)
}
