//! Sliding-window plans, training batches with observed conditional inits,
//! chronological inference and overlap-aware reconstruction.
//!
//! Index 0 of every series is never predicted: segment starts begin at 1 so
//! that an observed value at `start − 1` always exists.

use serde::{Deserialize, Serialize};

use crate::data::BasinSeries;
use crate::error::{Error, Result};
use crate::numerics::{Mat, Rng};
use crate::task_graph::{DropoutMasks, Network, SegmentPrediction, Task};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    window: usize,
    stride: usize,
    len: usize,
    starts: Vec<usize>,
}

/// Starts `1, 1 + s, 1 + 2s, ...` up to `len − w`. A trailing remainder
/// shorter than a stride gets no extra segment.
pub fn make_plan(len: usize, window: usize, stride: usize) -> Result<SegmentPlan> {
    if window == 0 || stride == 0 || stride > window {
        return Err(Error::Planning(format!(
            "need 1 <= stride <= window, got window {window}, stride {stride}"
        )));
    }
    if len < window + 1 {
        return Err(Error::Planning(format!(
            "series of {len} days is too short for a {window}-day window"
        )));
    }
    let starts = (1..=len - window).step_by(stride).collect();
    Ok(SegmentPlan {
        window,
        stride,
        len,
        starts,
    })
}

impl SegmentPlan {
    /// A plan with explicit sorted starts; the stride is informational.
    pub fn from_starts(
        len: usize,
        window: usize,
        stride: usize,
        starts: Vec<usize>,
    ) -> Result<SegmentPlan> {
        if window == 0 || starts.is_empty() {
            return Err(Error::Planning("empty plan".into()));
        }
        if starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Planning("starts must be strictly increasing".into()));
        }
        if starts[0] < 1 || starts[starts.len() - 1] + window > len {
            return Err(Error::Planning(format!(
                "starts must lie in [1, {}]",
                len.saturating_sub(window)
            )));
        }
        Ok(SegmentPlan {
            window,
            stride,
            len,
            starts,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn count(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// One past the last predicted index.
    pub fn covered_end(&self) -> usize {
        self.starts[self.starts.len() - 1] + self.window
    }

    /// The segment whose prediction is used at `t`, with its in-segment
    /// offset: among covering segments, the one with the largest offset,
    /// i.e. the earliest start.
    pub fn choose(&self, t: usize) -> Option<(usize, usize)> {
        let k = self.starts.partition_point(|&s| s + self.window <= t);
        let start = *self.starts.get(k)?;
        (start <= t).then(|| (k, t - start))
    }
}

/// Stitches per-segment predictions (each of length `w`) into the series
/// over indices `[1, covered_end)`; element `i` holds index `i + 1`.
pub fn reconstruct(plan: &SegmentPlan, preds: &[Vec<f64>]) -> Result<Vec<f64>> {
    if preds.len() != plan.count() || preds.iter().any(|p| p.len() != plan.window) {
        return Err(Error::shape(
            "reconstruct",
            format!(
                "{} segment predictions for a plan of {}",
                preds.len(),
                plan.count()
            ),
        ));
    }
    let end = plan.covered_end();
    let mut out = Vec::with_capacity(end - 1);
    let mut t = 1;
    while t < end {
        match plan.choose(t) {
            Some((k, off)) => out.push(preds[k][off]),
            None => {
                let gap_end = (t..end).find(|&u| plan.choose(u).is_some()).unwrap_or(end);
                return Err(Error::CoverageGap {
                    start: t,
                    end: gap_end,
                });
            }
        }
        t += 1;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SegmentRef {
    pub basin: usize,
    pub start: usize,
}

/// Every (basin, start) pair of a plan, basin-major.
pub fn segment_refs(plan: &SegmentPlan, n_basins: usize) -> Vec<SegmentRef> {
    (0..n_basins)
        .flat_map(|basin| {
            plan.starts
                .iter()
                .map(move |&start| SegmentRef { basin, start })
        })
        .collect()
}

/// One epoch of shuffled mini-batches; the last one may be short.
pub fn epoch_batches(
    refs: &[SegmentRef],
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<SegmentRef>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order = refs.to_vec();
    rng.shuffle(&mut order);
    Ok(order
        .chunks(batch_size)
        .map(<[SegmentRef]>::to_vec)
        .collect())
}

/// Time-major slices for a set of segments: row `s·B + b` is step `s` of
/// sample `b`. `inits` holds the observed targets at `start − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentBatch {
    pub refs: Vec<SegmentRef>,
    pub window: usize,
    pub x: Mat,
    pub y: Mat,
    pub inits: Mat,
}

impl SegmentBatch {
    pub fn batch(&self) -> usize {
        self.refs.len()
    }
}

pub fn assemble_batch(
    series: &[BasinSeries],
    window: usize,
    refs: &[SegmentRef],
) -> Result<SegmentBatch> {
    let b = refs.len();
    let Some(first) = series.first() else {
        return Err(Error::Data("no basins to batch".into()));
    };
    let d = first.x.cols();
    for r in refs {
        let s = series
            .get(r.basin)
            .ok_or_else(|| Error::Data(format!("basin index {} out of range", r.basin)))?;
        if r.start == 0 || r.start + window > s.len() || s.x.cols() != d {
            return Err(Error::Planning(format!(
                "segment at {} does not fit basin '{}' of length {}",
                r.start,
                s.basin_id,
                s.len()
            )));
        }
    }
    let mut x = Mat::zeros(window * b, d);
    let mut y = Mat::zeros(window * b, 3);
    for step in 0..window {
        for (j, r) in refs.iter().enumerate() {
            let s = &series[r.basin];
            x.row_mut(step * b + j)
                .copy_from_slice(s.x.row(r.start + step));
            y.row_mut(step * b + j)
                .copy_from_slice(s.y.row(r.start + step));
        }
    }
    let inits = Mat::from_fn(b, 3, |j, k| {
        series[refs[j].basin].y.get(refs[j].start - 1, k)
    });
    Ok(SegmentBatch {
        refs: refs.to_vec(),
        window,
        x,
        y,
        inits,
    })
}

/// Reconstructed predictions of one basin over `[1, covered_end)`, in
/// normalized space.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSeries {
    pub sf: Vec<f64>,
    pub sw: Option<Vec<f64>>,
    pub sno: Option<Vec<f64>>,
}

impl TaskSeries {
    pub fn task(&self, task: Task) -> Option<&[f64]> {
        match task {
            Task::Streamflow => Some(&self.sf),
            Task::SoilWater => self.sw.as_deref(),
            Task::Snowpack => self.sno.as_deref(),
        }
    }

    pub fn task_mut(&mut self, task: Task) -> Option<&mut Vec<f64>> {
        match task {
            Task::Streamflow => Some(&mut self.sf),
            Task::SoilWater => self.sw.as_mut(),
            Task::Snowpack => self.sno.as_mut(),
        }
    }
}

/// Runs every segment in start order, all basins batched per start. For
/// conditional-init variants the init at `τ` is the reconstructed prediction
/// at `τ − 1`; the first segment uses the observed value at index 0.
pub fn infer_chronological(
    net: &Network,
    series: &[BasinSeries],
    plan: &SegmentPlan,
) -> Result<Vec<TaskSeries>> {
    let order: Vec<usize> = (0..plan.count()).collect();
    infer_in_order(net, series, plan, &order)
}

/// As [`infer_chronological`] but visiting segments in `order`, which must be
/// a permutation of the plan's segments. Conditional-init variants only
/// accept ascending order because each init depends on earlier segments.
pub fn infer_in_order(
    net: &Network,
    series: &[BasinSeries],
    plan: &SegmentPlan,
    order: &[usize],
) -> Result<Vec<TaskSeries>> {
    let mut seen = vec![false; plan.count()];
    for &k in order {
        if k >= plan.count() || std::mem::replace(&mut seen[k], true) {
            return Err(Error::Usage(
                "segment order is not a permutation of the plan".into(),
            ));
        }
    }
    if order.len() != plan.count() {
        return Err(Error::Usage(
            "segment order is not a permutation of the plan".into(),
        ));
    }
    let cmb = net.variant().conditional_init();
    if cmb && order.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Usage(format!(
            "{} chains predictions and must run segments chronologically",
            net.variant()
        )));
    }
    if series.is_empty() {
        return Err(Error::Data("no basins to predict".into()));
    }
    if let Some(s) = series.iter().find(|s| s.len() != plan.len()) {
        return Err(Error::Planning(format!(
            "basin '{}' has {} days, plan expects {}",
            s.basin_id,
            s.len(),
            plan.len()
        )));
    }

    let n = series.len();
    let w = plan.window;
    let mut preds: Vec<Option<SegmentPrediction>> = vec![None; plan.count()];
    for &k in order {
        let start = plan.starts[k];
        let refs: Vec<SegmentRef> = (0..n).map(|basin| SegmentRef { basin, start }).collect();
        let batch = assemble_batch(series, w, &refs)?;
        let inits = if !cmb {
            None
        } else if start == 1 {
            Some(batch.inits.clone())
        } else {
            let (j, off) = plan.choose(start - 1).ok_or(Error::CoverageGap {
                start: start - 1,
                end: start,
            })?;
            let source = preds[j].as_ref().ok_or_else(|| {
                Error::Usage(format!(
                    "segment {j} has not been predicted before segment {k}"
                ))
            })?;
            let mut m = Mat::zeros(n, 3);
            for task in Task::ALL {
                let v = source.task(task).ok_or_else(|| {
                    Error::Usage(format!(
                        "{} does not predict {}",
                        net.variant(),
                        task.name()
                    ))
                })?;
                for b in 0..n {
                    m.set(b, task.index(), v[off * n + b]);
                }
            }
            Some(m)
        };
        let (p, _) = net.forward_segment(&batch.x, n, inits.as_ref(), &DropoutMasks::none())?;
        preds[k] = Some(p);
    }
    let preds: Vec<SegmentPrediction> =
        preds.into_iter().map(|p| p.expect("all visited")).collect();

    (0..n)
        .map(|b| {
            let per_task = |task: Task| -> Result<Option<Vec<f64>>> {
                if preds[0].task(task).is_none() {
                    return Ok(None);
                }
                let segs: Vec<Vec<f64>> = preds
                    .iter()
                    .map(|p| p.sample_series(task, b).expect("task present"))
                    .collect();
                reconstruct(plan, &segs).map(Some)
            };
            Ok(TaskSeries {
                sf: per_task(Task::Streamflow)?.expect("streamflow always predicted"),
                sw: per_task(Task::SoilWater)?,
                sno: per_task(Task::Snowpack)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_graph::{ModelVariant, TaskGraphConfig};

    #[test]
    fn plan_examples() {
        let p = make_plan(731, 365, 182).unwrap();
        assert_eq!(p.starts(), &[1, 183, 365]);
        assert_eq!(make_plan(366, 365, 182).unwrap().starts(), &[1]);
        assert_eq!(make_plan(2557, 365, 182).unwrap().count(), 13);
        assert!(matches!(make_plan(365, 365, 1), Err(Error::Planning(_))));
        assert!(make_plan(100, 10, 11).is_err());
        assert!(make_plan(100, 10, 0).is_err());
    }

    #[test]
    fn plan_count_formula() {
        for (t, w, s) in [
            (2557, 14, 7),
            (2557, 90, 45),
            (1000, 30, 30),
            (40, 39, 1),
            (3654, 365, 182),
        ] {
            let p = make_plan(t, w, s).unwrap();
            assert_eq!(p.count(), (t - w - 1) / s + 1);
            assert!(p.covered_end() <= t);
        }
    }

    #[test]
    fn overlap_filled_from_earlier_segment() {
        let p = make_plan(731, 365, 182).unwrap();
        for t in 183..366 {
            assert_eq!(p.choose(t).unwrap().0, 0);
        }
        assert_eq!(p.choose(366), Some((1, 183)));
        assert_eq!(p.choose(0), None);
        assert_eq!(p.choose(730), None);
    }

    #[test]
    fn init_source_under_half_stride() {
        // With s = w/2 the step before segment k is covered by k−1 and k−2;
        // the larger offset belongs to k−2.
        let p = make_plan(200, 20, 10).unwrap();
        for k in 2..p.count() {
            let tau = p.starts()[k];
            assert_eq!(p.choose(tau - 1), Some((k - 2, 19)));
        }
        assert_eq!(p.choose(p.starts()[1] - 1), Some((0, 9)));
    }

    #[test]
    fn reconstruct_gap_is_named() {
        let p = SegmentPlan::from_starts(50, 5, 5, vec![1, 10]).unwrap();
        let err = reconstruct(&p, &[vec![0.0; 5], vec![0.0; 5]]).unwrap_err();
        assert!(matches!(err, Error::CoverageGap { start: 6, end: 10 }));
    }

    #[test]
    fn single_segment_passthrough() {
        let p = make_plan(6, 5, 5).unwrap();
        let seg = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(reconstruct(&p, std::slice::from_ref(&seg)).unwrap(), seg);
    }

    fn series(n: usize, len: usize, d: usize, seed: u64) -> Vec<BasinSeries> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|b| BasinSeries {
                basin_id: format!("b{b}"),
                x: Mat::from_fn(len, d, |_, _| rng.normal()),
                y: Mat::from_fn(len, 3, |_, _| rng.normal()),
            })
            .collect()
    }

    #[test]
    fn batches_cover_every_segment_once() {
        let p = make_plan(100, 10, 5).unwrap();
        let refs = segment_refs(&p, 3);
        let mut rng = Rng::new(1);
        let batches = epoch_batches(&refs, 4, &mut rng).unwrap();
        assert_eq!(batches.len(), refs.len().div_ceil(4));
        let mut all: Vec<_> = batches.concat();
        all.sort_by_key(|r| (r.basin, r.start));
        assert_eq!(all, refs);
        let again = epoch_batches(&refs, 4, &mut Rng::new(1)).unwrap();
        assert_eq!(batches, again);
    }

    #[test]
    fn reference_batch_count() {
        let p = make_plan(2557, 365, 182).unwrap();
        let refs = segment_refs(&p, 319);
        assert_eq!(refs.len(), 4147);
        assert_eq!(
            epoch_batches(&refs, 64, &mut Rng::new(0)).unwrap().len(),
            65
        );
    }

    #[test]
    fn batch_layout_and_inits() {
        let s = series(2, 30, 3, 2);
        let refs = [
            SegmentRef { basin: 1, start: 4 },
            SegmentRef { basin: 0, start: 9 },
        ];
        let b = assemble_batch(&s, 5, &refs).unwrap();
        assert_eq!(b.x.row(2 * 2 + 1), s[0].x.row(11));
        assert_eq!(b.y.row(3 * 2), s[1].y.row(7));
        assert_eq!(b.inits.row(0), s[1].y.row(3));
        assert_eq!(b.inits.row(1), s[0].y.row(8));
        assert!(assemble_batch(
            &s,
            5,
            &[SegmentRef {
                basin: 0,
                start: 26
            }]
        )
        .is_err());
        assert!(assemble_batch(&s, 5, &[SegmentRef { basin: 0, start: 0 }]).is_err());
    }

    fn net(variant: ModelVariant) -> Network {
        Network::build(TaskGraphConfig {
            variant,
            input_dim: 3,
            hidden: 5,
            dropout: 0.0,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn non_cmb_order_invariance() {
        let s = series(3, 60, 3, 4);
        let p = make_plan(60, 10, 5).unwrap();
        let mut order: Vec<usize> = (0..p.count()).collect();
        Rng::new(5).shuffle(&mut order);
        for v in [
            ModelVariant::Stl,
            ModelVariant::Smtl,
            ModelVariant::Hmtl,
            ModelVariant::HmtlPe,
        ] {
            let n = net(v);
            let a = infer_chronological(&n, &s, &p).unwrap();
            let b = infer_in_order(&n, &s, &p, &order).unwrap();
            assert_eq!(a, b, "{v}");
        }
        let cmb = net(ModelVariant::Hcmtl);
        assert!(matches!(
            infer_in_order(&cmb, &s, &p, &order),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn cmb_chains_reconstructed_predictions() {
        let s = series(2, 61, 3, 6);
        let p = make_plan(61, 10, 10).unwrap();
        let n = net(ModelVariant::HmtlCmb);
        let out = infer_chronological(&n, &s, &p).unwrap();
        // Replay segment k with the init read from the reconstruction.
        for k in 0..p.count() {
            let start = p.starts()[k];
            let refs: Vec<_> = (0..2).map(|basin| SegmentRef { basin, start }).collect();
            let batch = assemble_batch(&s, 10, &refs).unwrap();
            let inits = if start == 1 {
                batch.inits.clone()
            } else {
                Mat::from_fn(2, 3, |b, k| out[b].task(Task::ALL[k]).unwrap()[start - 2])
            };
            let (pred, _) = n
                .forward_segment(&batch.x, 2, Some(&inits), &DropoutMasks::none())
                .unwrap();
            for b in 0..2 {
                let seg = pred.sample_series(Task::Streamflow, b).unwrap();
                assert_eq!(&out[b].sf[start - 1..start - 1 + 10], &seg[..]);
            }
        }
    }

    #[test]
    fn cmb_first_segment_uses_observation() {
        let mut s = series(1, 21, 3, 7);
        let p = make_plan(21, 10, 10).unwrap();
        let n = net(ModelVariant::Hcmtl);
        let a = infer_chronological(&n, &s, &p).unwrap();
        s[0].y.set(0, Task::Streamflow.index(), 5.0);
        let b = infer_chronological(&n, &s, &p).unwrap();
        assert_ne!(a[0].sf[0], b[0].sf[0]);
        assert_eq!(a[0].sw, b[0].sw);
    }

    #[test]
    fn stl_has_no_intermediate_series() {
        let s = series(2, 30, 3, 8);
        let out = infer_chronological(&net(ModelVariant::Stl), &s, &make_plan(30, 10, 5).unwrap())
            .unwrap();
        assert!(out[0].sw.is_none() && out[0].sno.is_none());
        assert_eq!(out[0].sf.len(), 25);
    }
}
