//! End-to-end runs: split and normalize a region, train ensembles, predict
//! the test period and score it, plus one-axis ablation grids.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{inject_noise, BasinSeries, NormStats, Region};
use crate::error::{Error, Result};
use crate::evaluation::{best_count, BasinScores, EvalReport, ReportMeta};
use crate::segmentation::make_plan;
use crate::task_graph::{ModelVariant, Task, TaskGraphConfig};
use crate::training::{
    ensemble_predict, train_ensemble, Checkpoint, Forecast, MemberRun, TrainData,
};

/// A region split and normalized for one run configuration.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub region: String,
    pub data: TrainData,
    pub test: Vec<BasinSeries>,
    /// Dates of the test view, starting with its context day.
    pub test_dates: Vec<NaiveDate>,
    /// Observed streamflow over the test view, physical units.
    pub test_observed: Vec<Vec<f64>>,
    /// Per-basin mean streamflow over the training rows.
    pub train_mean: Vec<f64>,
    pub train_days: usize,
}

impl Prepared {
    pub fn input_dim(&self) -> usize {
        self.data.norm.input_dim()
    }
}

pub fn prepare(region: &Region, cfg: &RunConfig) -> Result<Prepared> {
    region.validate()?;
    let split = cfg.data.effective_split()?;
    let idx = split.indices(region.dates())?;
    let noisy = inject_noise(
        &region.records,
        cfg.noise.level,
        cfg.noise.seed,
        idx.train_core.clone(),
    )?;
    let pick = |use_noise: bool| if use_noise { &noisy } else { &region.records };
    let train_records = pick(cfg.noise.target.affects_training());
    let test_records = pick(cfg.noise.target.affects_test());

    let fit_region = Region {
        records: train_records.clone(),
        ..region.clone()
    };
    let norm = NormStats::fit(&fit_region, idx.train_core.clone())?;
    let view = |records: &[crate::data::BasinRecord], rows: &std::ops::Range<usize>| {
        records
            .iter()
            .map(|r| norm.apply(r, rows.clone()))
            .collect::<Result<Vec<_>>>()
    };
    let train = view(train_records, &idx.train)?;
    let val = view(train_records, &idx.val)?;
    let test = view(test_records, &idx.test)?;
    let sf = Task::Streamflow.index();
    let test_observed = region
        .records
        .iter()
        .map(|r| idx.test.clone().map(|t| r.targets.get(t, sf)).collect())
        .collect();
    let train_mean = region
        .records
        .iter()
        .map(|r| {
            idx.train_core
                .clone()
                .map(|t| r.targets.get(t, sf))
                .sum::<f64>()
                / idx.train_core.len() as f64
        })
        .collect();
    Ok(Prepared {
        region: region.name.clone(),
        data: TrainData { train, val, norm },
        test,
        test_dates: region.dates()[idx.test.clone()].to_vec(),
        test_observed,
        train_mean,
        train_days: idx.train_core.len(),
    })
}

pub fn network_config(cfg: &RunConfig, variant: ModelVariant, input_dim: usize) -> TaskGraphConfig {
    TaskGraphConfig {
        variant,
        input_dim,
        hidden: cfg.model.hidden,
        dropout: cfg.model.dropout,
        seed: 0,
    }
}

/// Config hash for one variant of a run; members of an ensemble share it.
pub fn variant_hash(cfg: &RunConfig, variant: ModelVariant) -> String {
    format!("{}:{}", cfg.config_hash(), variant.name())
}

pub fn train_variant(
    prepared: &Prepared,
    cfg: &RunConfig,
    variant: ModelVariant,
    jobs: usize,
) -> Result<Vec<MemberRun>> {
    train_ensemble(
        &network_config(cfg, variant, prepared.input_dim()),
        &cfg.train,
        cfg.segment.window,
        cfg.segment.stride,
        &prepared.data,
        &variant_hash(cfg, variant),
        jobs,
    )
}

/// Ensemble forecast of the test period and its report.
pub fn evaluate_variant(
    prepared: &Prepared,
    cfg: &RunConfig,
    variant: ModelVariant,
    checkpoints: &[Checkpoint],
) -> Result<(EvalReport, Vec<Forecast>)> {
    let expected = variant_hash(cfg, variant);
    if let Some(c) = checkpoints.iter().find(|c| c.config_hash != expected) {
        return Err(Error::Usage(format!(
            "checkpoint hash {} does not match the configuration ({expected})",
            c.config_hash
        )));
    }
    let test_len = prepared.test.first().map_or(0, BasinSeries::len);
    let plan = make_plan(test_len, cfg.segment.window, cfg.segment.stride)?;
    let forecasts = ensemble_predict(checkpoints, &prepared.test, &plan)?;
    let end = plan.covered_end();
    let scores: Vec<BasinScores> = forecasts
        .iter()
        .zip(&prepared.test_observed)
        .zip(&prepared.train_mean)
        .map(|((f, obs), &m)| BasinScores {
            basin_id: &f.basin_id,
            observed: &obs[1..end],
            predicted: &f.sf,
            train_mean: m,
        })
        .collect();
    let meta = ReportMeta {
        variant: variant.name().to_string(),
        region: prepared.region.clone(),
        window: cfg.segment.window,
        stride: cfg.segment.stride,
        train_days: prepared.train_days,
        noise_level: cfg.noise.level,
    };
    let report = EvalReport::build(meta, &scores)?;
    Ok((report, forecasts))
}

/// Per-basin CSV with columns date, sf_obs, sf_pred, sw_pred, sno_pred.
pub fn write_predictions(dir: &Path, prepared: &Prepared, forecasts: &[Forecast]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (f, obs) in forecasts.iter().zip(&prepared.test_observed) {
        let path = dir.join(format!("{}.csv", f.basin_id));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["date", "sf_obs", "sf_pred", "sw_pred", "sno_pred"])?;
        let opt = |v: Option<&[f64]>, i: usize| v.map(|s| s[i].to_string()).unwrap_or_default();
        for i in 0..f.sf.len() {
            w.write_record([
                prepared.test_dates[i + 1].format("%Y-%m-%d").to_string(),
                obs[i + 1].to_string(),
                f.sf[i].to_string(),
                opt(f.task(Task::SoilWater), i),
                opt(f.task(Task::Snowpack), i),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub variant: ModelVariant,
    pub runs: Vec<MemberRun>,
    pub report: EvalReport,
    pub forecasts: Vec<Forecast>,
}

/// Trains and scores every configured variant in memory.
pub fn run_experiment(region: &Region, cfg: &RunConfig, jobs: usize) -> Result<Vec<VariantResult>> {
    cfg.validate()?;
    let prepared = prepare(region, cfg)?;
    cfg.model
        .variants
        .iter()
        .map(|&variant| {
            let runs = train_variant(&prepared, cfg, variant, jobs)?;
            let checkpoints: Vec<Checkpoint> = runs.iter().map(|r| r.checkpoint.clone()).collect();
            let (report, forecasts) = evaluate_variant(&prepared, cfg, variant, &checkpoints)?;
            Ok(VariantResult {
                variant,
                runs,
                report,
                forecasts,
            })
        })
        .collect()
}

/// Best-basin counts across reports, in canonical variant order.
pub fn compare(reports: &[EvalReport]) -> Result<Vec<(String, usize)>> {
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by_key(|r| {
        r.metadata
            .variant
            .parse::<ModelVariant>()
            .map_or(usize::MAX, |v| v as usize)
    });
    let models: Vec<(String, _)> = sorted
        .iter()
        .map(|r| (r.metadata.variant.clone(), r.nse_by_basin()))
        .collect();
    best_count(&models)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Window,
    Stride,
    TrainYears,
    Noise,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Window => "window",
            AblationAxis::Stride => "stride",
            AblationAxis::TrainYears => "train_years",
            AblationAxis::Noise => "noise",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            AblationAxis::Window => vec![365.0, 182.0, 90.0, 30.0, 14.0],
            AblationAxis::Stride => vec![365.0, 182.0, 90.0],
            AblationAxis::TrainYears => vec![7.0, 6.0, 5.0, 4.0, 3.0, 2.0],
            AblationAxis::Noise => vec![0.0, 0.01, 0.1, 0.5, 1.0, 2.0],
        }
    }

    /// `base` with only this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig> {
        let count = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!(
                    "{} value {value} must be a positive integer",
                    self.name()
                )))
            }
        };
        let mut cfg = base.clone();
        match self {
            AblationAxis::Window => {
                let w = count()?;
                cfg.segment.window = w;
                cfg.segment.stride = (w / 2).max(1);
            }
            AblationAxis::Stride => {
                cfg.segment.window = 365;
                cfg.segment.stride = count()?;
            }
            AblationAxis::TrainYears => cfg.data.train_years = Some(count()? as u32),
            AblationAxis::Noise => cfg.noise.level = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "window" => Ok(AblationAxis::Window),
            "stride" => Ok(AblationAxis::Stride),
            "train_years" => Ok(AblationAxis::TrainYears),
            "noise" => Ok(AblationAxis::Noise),
            _ => Err(Error::Usage(format!(
                "unknown ablation axis '{s}' (expected window, stride, train_years or noise)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub value: f64,
    pub config_hash: String,
    pub reports: Vec<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axis: AblationAxis,
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    /// Writes `grid.json` and the plot-ready `curves.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("grid.json");
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        let mut w = csv::Writer::from_path(dir.join("curves.csv"))?;
        w.write_record([
            "axis",
            "value",
            "variant",
            "rmse_mean",
            "nse_mean",
            "nse_median",
            "error",
        ])?;
        for c in &self.cells {
            if let Some(err) = &c.error {
                w.write_record([self.axis.name(), &c.value.to_string(), "", "", "", "", err])?;
            }
            for r in &c.reports {
                let a = &r.aggregates;
                w.write_record([
                    self.axis.name(),
                    &c.value.to_string(),
                    &r.metadata.variant,
                    &a.rmse_mean.to_string(),
                    &a.nse_mean.to_string(),
                    &a.nse_median.to_string(),
                    "",
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(dir.join("curves.csv"), e))
    }
}

/// Runs the full experiment once per axis value. A failing cell is
/// recorded and the grid continues. `on_cell` sees each finished cell.
pub fn run_ablation(
    region: &Region,
    base: &RunConfig,
    axis: AblationAxis,
    values: &[f64],
    jobs: usize,
    mut on_cell: impl FnMut(&AblationCell, &[VariantResult]),
) -> AblationGrid {
    let values = if values.is_empty() {
        axis.default_values()
    } else {
        values.to_vec()
    };
    let cells = values
        .into_iter()
        .map(|value| {
            let outcome = axis
                .apply(base, value)
                .and_then(|cfg| Ok((cfg.config_hash(), run_experiment(region, &cfg, jobs)?)));
            let (cell, results) = match outcome {
                Ok((hash, results)) => (
                    AblationCell {
                        value,
                        config_hash: hash,
                        reports: results.iter().map(|r| r.report.clone()).collect(),
                        error: None,
                    },
                    results,
                ),
                Err(e) => {
                    log::warn!("{axis} = {value} failed: {e}");
                    (
                        AblationCell {
                            value,
                            config_hash: String::new(),
                            reports: Vec::new(),
                            error: Some(e.to_string()),
                        },
                        Vec::new(),
                    )
                }
            };
            on_cell(&cell, &results);
            cell
        })
        .collect();
    AblationGrid { axis, cells }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_defaults() {
        assert_eq!(AblationAxis::Noise.default_values().len(), 6);
        assert_eq!(AblationAxis::Window.default_values().len(), 5);
        assert_eq!(AblationAxis::Stride.default_values(), [365.0, 182.0, 90.0]);
        assert_eq!(AblationAxis::TrainYears.default_values().len(), 6);
        assert!(matches!(
            "depth".parse::<AblationAxis>(),
            Err(Error::Usage(_))
        ));
        assert_eq!(
            "train-years".parse::<AblationAxis>().unwrap(),
            AblationAxis::TrainYears
        );
    }

    #[test]
    fn axis_changes_only_its_setting() {
        let base = RunConfig::default();
        let w = AblationAxis::Window.apply(&base, 30.0).unwrap();
        assert_eq!((w.segment.window, w.segment.stride), (30, 15));
        assert_eq!(w.train, base.train);
        let s = AblationAxis::Stride.apply(&base, 90.0).unwrap();
        assert_eq!((s.segment.window, s.segment.stride), (365, 90));
        let n = AblationAxis::Noise.apply(&base, 0.5).unwrap();
        assert_eq!(n.noise.level, 0.5);
        assert_eq!(n.segment, base.segment);
        assert!(AblationAxis::Window.apply(&base, 2.5).is_err());
        assert!(AblationAxis::TrainYears.apply(&base, 9.0).is_err());
    }
}
