//! Basin records, CSV ingestion, date splits, normalization, noise injection
//! and the synthetic bucket-model generator.

mod ingest;
mod noise;
mod norm;
mod synth;

use std::ops::Range;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::task_graph::Task;

pub use ingest::{load_region, write_region, Schema, ATTRIBUTES_FILE, TIMESERIES_DIR};
pub use noise::{inject_noise, NoiseTarget};
pub use norm::NormStats;
pub use synth::{simulate, synth_generate, BasinParams, Forcing, SimulationTrace, SynthConfig};

/// Column names used by CARAVAN for the three targets.
pub const CARAVAN_TARGETS: [&str; 3] = [
    "snow_depth_water_equivalent",
    "volumetric_soil_water_layer_1",
    "streamflow",
];

/// Raw daily data for one basin. Target columns follow [`Task`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct BasinRecord {
    pub basin_id: String,
    pub dates: Vec<NaiveDate>,
    pub statics: Vec<f64>,
    /// `T × F`.
    pub forcings: Mat,
    /// `T × 3`.
    pub targets: Mat,
}

impl BasinRecord {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn target(&self, task: Task) -> Vec<f64> {
        self.targets.col(task.index())
    }
}

/// Basins sharing one date axis and one feature schema.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub name: String,
    pub forcing_names: Vec<String>,
    pub static_names: Vec<String>,
    pub records: Vec<BasinRecord>,
}

impl Region {
    pub fn input_dim(&self) -> usize {
        self.forcing_names.len() + self.static_names.len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        self.records.first().map_or(&[], |r| &r.dates)
    }

    /// Checks the shared-date-axis invariant.
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.records.first() else {
            return Err(Error::Data(format!("region '{}' has no basins", self.name)));
        };
        for r in &self.records {
            if r.dates != first.dates {
                return Err(Error::Data(format!(
                    "basin '{}' does not share the date axis of '{}'",
                    r.basin_id, first.basin_id
                )));
            }
            if r.statics.len() != self.static_names.len()
                || r.forcings.cols() != self.forcing_names.len()
                || r.forcings.rows() != r.len()
                || r.targets.shape() != (r.len(), 3)
            {
                return Err(Error::Data(format!(
                    "basin '{}' does not match the region schema",
                    r.basin_id
                )));
            }
        }
        Ok(())
    }
}

/// Inclusive date range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        DateRange { start, end }
    }

    pub fn days(&self) -> i64 {
        (self.end - self.start).num_days() + 1
    }

    /// The last `years` calendar years of this range.
    pub fn last_years(&self, years: u32) -> Result<DateRange> {
        let start = self
            .end
            .checked_sub_months(chrono::Months::new(12 * years))
            .map(|d| d + Duration::days(1))
            .ok_or_else(|| {
                Error::Config(format!("cannot take {years} years before {}", self.end))
            })?;
        if start < self.start {
            return Err(Error::Config(format!(
                "{years} years exceed the range {} to {}",
                self.start, self.end
            )));
        }
        Ok(DateRange {
            start,
            end: self.end,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: DateRange,
    pub val: DateRange,
    pub test: DateRange,
}

/// Row ranges of each split. `context` marks views that begin with one
/// observed day before the split, which seeds the first conditional init.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    /// Training rows proper, without any context day. Statistics use these.
    pub train_core: Range<usize>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("train", self.train),
            ("val", self.val),
            ("test", self.test),
        ] {
            if r.end < r.start {
                return Err(Error::Config(format!("{name} range ends before it starts")));
            }
        }
        if !(self.train.end < self.val.start && self.val.end < self.test.start) {
            return Err(Error::Config(
                "splits must be disjoint and ordered train < val < test".into(),
            ));
        }
        Ok(())
    }

    /// Resolves the split against a daily date axis.
    pub fn indices(&self, dates: &[NaiveDate]) -> Result<SplitIndices> {
        self.validate()?;
        let (Some(&first), Some(&last)) = (dates.first(), dates.last()) else {
            return Err(Error::Config("empty date axis".into()));
        };
        let locate = |name: &str, r: DateRange| -> Result<Range<usize>> {
            if r.start < first || r.end > last {
                return Err(Error::Config(format!(
                    "{name} range {} to {} outside the record span {first} to {last}",
                    r.start, r.end
                )));
            }
            let a = (r.start - first).num_days() as usize;
            let b = (r.end - first).num_days() as usize + 1;
            Ok(a..b)
        };
        let with_context = |r: Range<usize>| r.start.saturating_sub(1)..r.end;
        let train_core = locate("train", self.train)?;
        Ok(SplitIndices {
            train: with_context(train_core.clone()),
            val: with_context(locate("val", self.val)?),
            test: with_context(locate("test", self.test)?),
            train_core,
        })
    }
}

/// Model-ready view of one basin in normalized space.
#[derive(Clone, Debug, PartialEq)]
pub struct BasinSeries {
    pub basin_id: String,
    /// `T × D`: normalized forcings followed by normalized statics.
    pub x: Mat,
    /// `T × 3` normalized targets in task order.
    pub y: Mat,
}

impl BasinSeries {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}
