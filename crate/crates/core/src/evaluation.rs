//! Per-basin RMSE and NSE, aggregates, ECDF points and best-model counts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `sqrt(mean((y − ŷ)²))`.
pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.is_empty() || y.len() != yhat.len() {
        return Err(Error::Metric(format!(
            "rmse needs equal non-empty series, got {} and {}",
            y.len(),
            yhat.len()
        )));
    }
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// `1 − Σ(y − ŷ)² / Σ(y − ȳ_ref)²` with `ȳ_ref` the training-period mean.
pub fn nse(y: &[f64], yhat: &[f64], ref_mean: f64) -> Result<f64> {
    if y.is_empty() || y.len() != yhat.len() {
        return Err(Error::Metric(format!(
            "nse needs equal non-empty series, got {} and {}",
            y.len(),
            yhat.len()
        )));
    }
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    let sst: f64 = y.iter().map(|a| (a - ref_mean) * (a - ref_mean)).sum();
    if !(sst > 0.0) {
        return Err(Error::ZeroVariance("streamflow".into()));
    }
    Ok(1.0 - sse / sst)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EcdfPoint {
    pub value: f64,
    pub fraction: f64,
}

/// Distinct sorted values with the fraction of samples at or below each.
pub fn ecdf(values: &[f64]) -> Result<Vec<EcdfPoint>> {
    if values.is_empty() {
        return Err(Error::Metric("ecdf of an empty sample".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Metric("ecdf of a sample containing NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<EcdfPoint> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let fraction = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.value == v => last.fraction = fraction,
            _ => out.push(EcdfPoint { value: v, fraction }),
        }
    }
    Ok(out)
}

/// Median, taking the lower middle element for even counts.
pub fn lower_median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Metric("median of an empty sample".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[(sorted.len() - 1) / 2])
}

/// Number of basins where each model has the highest NSE. Ties go to the
/// model listed first.
pub fn best_count(models: &[(String, BTreeMap<String, f64>)]) -> Result<Vec<(String, usize)>> {
    let Some((_, first)) = models.first() else {
        return Err(Error::Metric("best_count needs at least one model".into()));
    };
    for (name, m) in models {
        if !m.keys().eq(first.keys()) {
            return Err(Error::Metric(format!(
                "model '{name}' was scored on a different basin set"
            )));
        }
    }
    let mut counts = vec![0usize; models.len()];
    for basin in first.keys() {
        let mut best = 0;
        for (i, (_, m)) in models.iter().enumerate().skip(1) {
            if m[basin] > models[best].1[basin] {
                best = i;
            }
        }
        counts[best] += 1;
    }
    Ok(models.iter().map(|(n, _)| n.clone()).zip(counts).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasinMetrics {
    pub basin_id: String,
    pub rmse: f64,
    /// Absent when the basin's observations do not vary around the
    /// reference mean.
    pub nse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub rmse_mean: f64,
    pub nse_mean: f64,
    pub nse_median: f64,
    pub n_basins: usize,
    pub n_excluded: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub variant: String,
    pub region: String,
    pub window: usize,
    pub stride: usize,
    pub train_days: usize,
    pub noise_level: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMeta,
    pub basins: Vec<BasinMetrics>,
    pub aggregates: Aggregates,
    pub ecdf: Vec<EcdfPoint>,
}

/// Observed and predicted streamflow of one basin plus its training mean.
pub struct BasinScores<'a> {
    pub basin_id: &'a str,
    pub observed: &'a [f64],
    pub predicted: &'a [f64],
    pub train_mean: f64,
}

impl EvalReport {
    pub fn build(metadata: ReportMeta, basins: &[BasinScores<'_>]) -> Result<EvalReport> {
        let mut rows = Vec::with_capacity(basins.len());
        for b in basins {
            let r = rmse(b.observed, b.predicted)?;
            let n = match nse(b.observed, b.predicted, b.train_mean) {
                Ok(v) => Some(v),
                Err(Error::ZeroVariance(_)) => {
                    log::warn!(
                        "basin '{}' has zero streamflow variance; excluded from NSE",
                        b.basin_id
                    );
                    None
                }
                Err(e) => return Err(e),
            };
            rows.push(BasinMetrics {
                basin_id: b.basin_id.to_string(),
                rmse: r,
                nse: n,
            });
        }
        let aggregates = Self::aggregate(&rows)?;
        let nses: Vec<f64> = rows.iter().filter_map(|r| r.nse).collect();
        Ok(EvalReport {
            metadata,
            ecdf: ecdf(&nses)?,
            basins: rows,
            aggregates,
        })
    }

    /// Aggregates derived from a per-basin table.
    pub fn aggregate(rows: &[BasinMetrics]) -> Result<Aggregates> {
        if rows.is_empty() {
            return Err(Error::Metric("no basins to aggregate".into()));
        }
        let nses: Vec<f64> = rows.iter().filter_map(|r| r.nse).collect();
        if nses.is_empty() {
            return Err(Error::Metric("every basin was excluded from NSE".into()));
        }
        Ok(Aggregates {
            rmse_mean: rows.iter().map(|r| r.rmse).sum::<f64>() / rows.len() as f64,
            nse_mean: nses.iter().sum::<f64>() / nses.len() as f64,
            nse_median: lower_median(&nses)?,
            n_basins: rows.len(),
            n_excluded: rows.len() - nses.len(),
        })
    }

    pub fn nse_by_basin(&self) -> BTreeMap<String, f64> {
        self.basins
            .iter()
            .filter_map(|b| Some((b.basin_id.clone(), b.nse?)))
            .collect()
    }

    /// Writes `report.json`, `basins.csv` and `ecdf.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json_path = dir.join("report.json");
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: json_path.clone(),
            source: e,
        })?;
        fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;

        let mut w = csv::Writer::from_path(dir.join("basins.csv"))?;
        w.write_record(["basin_id", "rmse", "nse"])?;
        for b in &self.basins {
            w.write_record([
                b.basin_id.clone(),
                b.rmse.to_string(),
                b.nse.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()
            .map_err(|e| Error::io(dir.join("basins.csv"), e))?;

        let mut w = csv::Writer::from_path(dir.join("ecdf.csv"))?;
        w.write_record(["nse", "fraction"])?;
        for p in &self.ecdf {
            w.write_record([p.value.to_string(), p.fraction.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(dir.join("ecdf.csv"), e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 3.5355339059327378).abs() < 1e-15);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn nse_examples() {
        assert_eq!(nse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 2.0).unwrap(), 1.0);
        assert_eq!(nse(&[1.0, 2.0, 3.0], &[1.0, 1.0, 3.0], 2.0).unwrap(), 0.5);
        assert_eq!(nse(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0], 2.0).unwrap(), 0.0);
        assert!(matches!(
            nse(&[2.0, 2.0], &[1.0, 1.0], 2.0),
            Err(Error::ZeroVariance(_))
        ));
    }

    #[test]
    fn ecdf_examples() {
        assert_eq!(
            ecdf(&[0.4]).unwrap(),
            vec![EcdfPoint {
                value: 0.4,
                fraction: 1.0
            }]
        );
        let e = ecdf(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(
            e.iter().map(|p| p.value).collect::<Vec<_>>(),
            [1.0, 2.0, 3.0]
        );
        assert_eq!(
            e.iter().map(|p| p.fraction).collect::<Vec<_>>(),
            [1.0 / 3.0, 2.0 / 3.0, 1.0]
        );
        let tied = ecdf(&[1.0, 1.0, 2.0, 2.0]).unwrap();
        assert_eq!(
            tied,
            vec![
                EcdfPoint {
                    value: 1.0,
                    fraction: 0.5
                },
                EcdfPoint {
                    value: 2.0,
                    fraction: 1.0
                }
            ]
        );
        assert!(ecdf(&[]).is_err());
    }

    #[test]
    fn median_convention() {
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.0);
        assert_eq!(lower_median(&[5.0, 1.0, 3.0]).unwrap(), 3.0);
    }

    fn scores(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn best_count_rules() {
        let a = scores(&[("x", 0.5), ("y", 0.7), ("z", 0.1)]);
        assert_eq!(
            best_count(&[("A".into(), a.clone())]).unwrap(),
            vec![("A".into(), 3)]
        );
        let worse = scores(&[("x", 0.1), ("y", 0.2), ("z", 0.0)]);
        assert_eq!(
            best_count(&[("A".into(), a.clone()), ("B".into(), worse)]).unwrap(),
            vec![("A".into(), 3), ("B".into(), 0)]
        );
        let tie = scores(&[("x", 0.5), ("y", 0.9), ("z", 0.1)]);
        assert_eq!(
            best_count(&[("B".into(), tie.clone()), ("A".into(), a.clone())]).unwrap(),
            vec![("B".into(), 3), ("A".into(), 0)]
        );
        assert_eq!(
            best_count(&[("A".into(), a.clone()), ("B".into(), tie)]).unwrap(),
            vec![("A".into(), 2), ("B".into(), 1)]
        );
        let other = scores(&[("x", 0.5)]);
        assert!(best_count(&[("A".into(), a), ("B".into(), other)]).is_err());
    }

    #[test]
    fn report_aggregates_and_exclusion() {
        let obs = [
            vec![1.0, 2.0, 3.0],
            vec![2.0, 2.0, 2.0],
            vec![0.0, 4.0, 2.0],
        ];
        let pred = [
            vec![1.0, 1.0, 3.0],
            vec![2.0, 2.5, 2.0],
            vec![1.0, 3.0, 2.0],
        ];
        let ids = ["a", "b", "c"];
        let basins: Vec<BasinScores> = (0..3)
            .map(|i| BasinScores {
                basin_id: ids[i],
                observed: &obs[i],
                predicted: &pred[i],
                train_mean: 2.0,
            })
            .collect();
        let r = EvalReport::build(ReportMeta::default(), &basins).unwrap();
        assert_eq!(r.basins[1].nse, None);
        assert_eq!(r.aggregates.n_excluded, 1);
        assert_eq!(r.aggregates.nse_mean, (0.5 + 0.75) / 2.0);
        assert_eq!(r.aggregates.nse_median, 0.5);
        assert_eq!(EvalReport::aggregate(&r.basins).unwrap(), r.aggregates);
        let tmp = tempfile::tempdir().unwrap();
        r.write(tmp.path()).unwrap();
        let text = fs::read_to_string(tmp.path().join("basins.csv")).unwrap();
        assert_eq!(text.lines().nth(2).unwrap(), "b,0.28867513459481287,");
    }

    fn naive_rmse(y: &[f64], p: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..y.len() {
            s += (y[i] - p[i]).powi(2);
        }
        (s / y.len() as f64).sqrt()
    }

    #[test]
    fn rmse_matches_naive() {
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let n = 1 + (rng.uniform() * 50.0) as usize;
            let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            assert!((rmse(&y, &p).unwrap() - naive_rmse(&y, &p)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn nse_at_most_one(y in prop::collection::vec(-10.0f64..10.0, 2..40), shift in -5.0f64..5.0) {
            let yhat: Vec<f64> = y.iter().enumerate().map(|(i, v)| v + shift * (i % 3) as f64).collect();
            let m = y.iter().sum::<f64>() / y.len() as f64 + 0.3;
            let v = nse(&y, &yhat, m).unwrap();
            prop_assert!(v <= 1.0);
            prop_assert_eq!(nse(&y, &y, m).unwrap(), 1.0);
            if shift.abs() > 1e-3 && y.len() >= 2 {
                prop_assert!(v < 1.0);
            }
        }

        #[test]
        fn rmse_scale_equivariant(y in prop::collection::vec(-10.0f64..10.0, 1..30), a in -4.0f64..4.0) {
            let p: Vec<f64> = y.iter().map(|v| v * 0.5 + 1.0).collect();
            let ys: Vec<f64> = y.iter().map(|v| a * v).collect();
            let ps: Vec<f64> = p.iter().map(|v| a * v).collect();
            let lhs = rmse(&ys, &ps).unwrap();
            let rhs = a.abs() * rmse(&y, &p).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1.0));
        }

        #[test]
        fn nse_affine_invariant(y in prop::collection::vec(-10.0f64..10.0, 2..30), a in 0.1f64..5.0, c in -5.0f64..5.0) {
            let p: Vec<f64> = y.iter().map(|v| v * 0.8 - 0.2).collect();
            let m = 0.7;
            prop_assume!(y.iter().any(|v| (v - m).abs() > 1e-3));
            let base = nse(&y, &p, m).unwrap();
            let ys: Vec<f64> = y.iter().map(|v| a * v + c).collect();
            let ps: Vec<f64> = p.iter().map(|v| a * v + c).collect();
            let moved = nse(&ys, &ps, a * m + c).unwrap();
            prop_assert!((base - moved).abs() < 1e-9 * base.abs().max(1.0));
        }

        #[test]
        fn ecdf_is_a_cdf(v in prop::collection::vec(-3.0f64..3.0, 1..60)) {
            let e = ecdf(&v).unwrap();
            prop_assert!(e.windows(2).all(|w| w[0].value < w[1].value && w[0].fraction < w[1].fraction));
            prop_assert!(e[0].fraction > 0.0);
            prop_assert_eq!(e.last().unwrap().fraction, 1.0);
            let mut rev = v.clone();
            rev.reverse();
            prop_assert_eq!(ecdf(&rev).unwrap(), e);
        }
    }
}
