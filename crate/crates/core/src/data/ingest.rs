use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BasinRecord, Region, CARAVAN_TARGETS};
use crate::error::{Error, Result};
use crate::numerics::Mat;

pub const ATTRIBUTES_FILE: &str = "attributes.csv";
pub const TIMESERIES_DIR: &str = "timeseries";

/// Column mapping for a dataset directory.
///
/// Empty `forcings` or `statics` lists mean "every column that is not the
/// date, a target or the basin id". With explicit lists, other columns are
/// ignored with a warning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schema {
    pub region: String,
    pub date_column: String,
    pub forcings: Vec<String>,
    pub statics: Vec<String>,
    /// Snowpack, soil water and streamflow column names, in that order.
    pub targets: [String; 3],
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            region: "region".into(),
            date_column: "date".into(),
            forcings: Vec::new(),
            statics: Vec::new(),
            targets: CARAVAN_TARGETS.map(String::from),
        }
    }
}

fn ingestion(file: &Path, row: usize, detail: impl Into<String>) -> Error {
    Error::Ingestion {
        file: file.to_path_buf(),
        row,
        detail: detail.into(),
    }
}

fn open(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn header(reader: &mut csv::Reader<fs::File>, path: &Path) -> Result<Vec<String>> {
    Ok(reader
        .headers()
        .map_err(|e| ingestion(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect())
}

/// Positions of `wanted` in `header`, naming the first missing column.
fn locate(header: &[String], wanted: &[String], path: &Path) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|w| {
            header
                .iter()
                .position(|h| h == w)
                .ok_or_else(|| ingestion(path, 1, format!("missing column '{w}'")))
        })
        .collect()
}

fn warn_unused(header: &[String], used: &HashSet<&str>, path: &Path) {
    for h in header {
        if !used.contains(h.as_str()) {
            log::warn!("{}: ignoring unknown column '{h}'", path.display());
        }
    }
}

fn parse_value(raw: &str, path: &Path, row: usize, column: &str) -> Result<f64> {
    if raw.is_empty() {
        return Err(ingestion(
            path,
            row,
            format!("missing value in column '{column}'"),
        ));
    }
    let v: f64 = raw.parse().map_err(|_| {
        ingestion(
            path,
            row,
            format!("cannot parse '{raw}' in column '{column}'"),
        )
    })?;
    if !v.is_finite() {
        return Err(ingestion(
            path,
            row,
            format!("missing value in column '{column}'"),
        ));
    }
    Ok(v)
}

struct Attributes {
    ids: Vec<String>,
    names: Vec<String>,
    values: Vec<Vec<f64>>,
}

fn read_attributes(path: &Path, schema: &Schema) -> Result<Attributes> {
    let mut reader = open(path)?;
    let head = header(&mut reader, path)?;
    let id_col = locate(&head, &["basin_id".to_string()], path)?[0];
    let names: Vec<String> = if schema.statics.is_empty() {
        head.iter().filter(|h| *h != "basin_id").cloned().collect()
    } else {
        let mut used: HashSet<&str> = schema.statics.iter().map(String::as_str).collect();
        used.insert("basin_id");
        warn_unused(&head, &used, path);
        schema.statics.clone()
    };
    let cols = locate(&head, &names, path)?;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| ingestion(path, row, e.to_string()))?;
        let id = rec.get(id_col).unwrap_or_default().to_string();
        if id.is_empty() {
            return Err(ingestion(path, row, "empty basin_id"));
        }
        if !seen.insert(id.clone()) {
            return Err(ingestion(path, row, format!("duplicate basin '{id}'")));
        }
        let vals = cols
            .iter()
            .zip(&names)
            .map(|(&c, n)| parse_value(rec.get(c).unwrap_or_default(), path, row, n))
            .collect::<Result<Vec<_>>>()?;
        ids.push(id);
        values.push(vals);
    }
    Ok(Attributes { ids, names, values })
}

/// Forcing columns of a timeseries header under `schema`.
fn forcing_names(head: &[String], schema: &Schema, path: &Path) -> Vec<String> {
    if schema.forcings.is_empty() {
        head.iter()
            .filter(|h| **h != schema.date_column && !schema.targets.contains(h))
            .cloned()
            .collect()
    } else {
        let mut used: HashSet<&str> = schema.forcings.iter().map(String::as_str).collect();
        used.insert(&schema.date_column);
        used.extend(schema.targets.iter().map(String::as_str));
        warn_unused(head, &used, path);
        schema.forcings.clone()
    }
}

fn read_timeseries(
    path: &Path,
    schema: &Schema,
    forcings: &[String],
) -> Result<(Vec<NaiveDate>, Mat, Mat)> {
    let mut reader = open(path)?;
    let head = header(&mut reader, path)?;
    let date_col = locate(&head, std::slice::from_ref(&schema.date_column), path)?[0];
    let f_cols = locate(&head, forcings, path)?;
    let t_cols = locate(&head, &schema.targets, path)?;
    let mut dates: Vec<NaiveDate> = Vec::new();
    let mut f_data = Vec::new();
    let mut t_data = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| ingestion(path, row, e.to_string()))?;
        let raw_date = rec.get(date_col).unwrap_or_default();
        let date = NaiveDate::parse_from_str(raw_date, "%Y-%m-%d")
            .map_err(|_| ingestion(path, row, format!("invalid date '{raw_date}'")))?;
        if let Some(&prev) = dates.last() {
            let expected = prev + Duration::days(1);
            if date != expected {
                return Err(ingestion(
                    path,
                    row,
                    format!("date gap: expected {expected}, found {date}"),
                ));
            }
        }
        dates.push(date);
        for (&c, n) in f_cols.iter().zip(forcings) {
            f_data.push(parse_value(rec.get(c).unwrap_or_default(), path, row, n)?);
        }
        for (&c, n) in t_cols.iter().zip(&schema.targets) {
            t_data.push(parse_value(rec.get(c).unwrap_or_default(), path, row, n)?);
        }
    }
    if dates.is_empty() {
        return Err(ingestion(path, 2, "no data rows"));
    }
    let t = dates.len();
    Ok((
        dates,
        Mat::from_vec(t, forcings.len(), f_data)?,
        Mat::from_vec(t, 3, t_data)?,
    ))
}

/// Loads `<dir>/attributes.csv` and `<dir>/timeseries/<basin_id>.csv` for
/// every basin listed in the attribute file.
pub fn load_region(dir: &Path, schema: &Schema) -> Result<Region> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let attrs = read_attributes(&dir.join(ATTRIBUTES_FILE), schema)?;
    let paths: Vec<PathBuf> = attrs
        .ids
        .iter()
        .map(|id| dir.join(TIMESERIES_DIR).join(format!("{id}.csv")))
        .collect();
    let Some(first) = paths.first() else {
        return Err(Error::Data(format!(
            "{} lists no basins",
            dir.join(ATTRIBUTES_FILE).display()
        )));
    };
    let first_head = header(&mut open(first)?, first)?;
    let forcings = forcing_names(&first_head, schema, first);

    let series = paths
        .par_iter()
        .map(|p| read_timeseries(p, schema, &forcings))
        .collect::<Result<Vec<_>>>()?;
    let records = attrs
        .ids
        .into_iter()
        .zip(attrs.values)
        .zip(series)
        .map(
            |((basin_id, statics), (dates, forcings, targets))| BasinRecord {
                basin_id,
                dates,
                statics,
                forcings,
                targets,
            },
        )
        .collect();
    let region = Region {
        name: schema.region.clone(),
        forcing_names: forcings,
        static_names: attrs.names,
        records,
    };
    region.validate()?;
    Ok(region)
}

/// Writes `region` in the layout read by [`load_region`]. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_region(dir: &Path, region: &Region, schema: &Schema) -> Result<()> {
    let ts_dir = dir.join(TIMESERIES_DIR);
    fs::create_dir_all(&ts_dir).map_err(|e| Error::io(&ts_dir, e))?;

    let attr_path = dir.join(ATTRIBUTES_FILE);
    let mut w = csv::Writer::from_path(&attr_path).map_err(|e| csv_io(&attr_path, e))?;
    let mut head = vec!["basin_id".to_string()];
    head.extend(region.static_names.iter().cloned());
    w.write_record(&head)?;
    for r in &region.records {
        let mut row = vec![r.basin_id.clone()];
        row.extend(r.statics.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&attr_path, e))?;

    for r in &region.records {
        let path = ts_dir.join(format!("{}.csv", r.basin_id));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
        let mut head = vec![schema.date_column.clone()];
        head.extend(region.forcing_names.iter().cloned());
        head.extend(schema.targets.iter().cloned());
        w.write_record(&head)?;
        for (i, date) in r.dates.iter().enumerate() {
            let mut row = vec![date.format("%Y-%m-%d").to_string()];
            row.extend(r.forcings.row(i).iter().map(|v| v.to_string()));
            row.extend(r.targets.row(i).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}
