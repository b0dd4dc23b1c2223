//! Segment loss, the epoch loop with validation-based checkpoint selection,
//! and ensembles.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BasinSeries, NormStats};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Mat, Rng};
use crate::segmentation::{
    assemble_batch, epoch_batches, infer_chronological, make_plan, segment_refs, SegmentPlan,
    TaskSeries,
};
use crate::task_graph::{
    DropoutMasks, ModelVariant, Network, SegmentPrediction, Task, TaskGraphConfig, TaskUpstream,
};

/// How validation supplies conditional init values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMode {
    /// Observed values before each segment, as during training.
    #[default]
    Observed,
    /// Chronological inference chaining the model's own predictions.
    Chained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// One ensemble member per seed.
    pub seeds: Vec<u64>,
    /// Rescale the gradient when its global norm exceeds this value.
    pub clip_norm: Option<f64>,
    pub validation: ValidationMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 64,
            epochs: 200,
            seeds: (0..6).collect(),
            clip_norm: None,
            validation: ValidationMode::Observed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config(
                "at least one ensemble seed is required".into(),
            ));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("ensemble seeds must be distinct".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c} must be > 0")));
            }
        }
        Ok(())
    }
}

/// `(1/B) Σ_rows Σ_tasks (ŷ − y)²` over the tasks the variant trains, with
/// its gradient with respect to each prediction. `targets` is `(t·B) × 3`.
pub fn segment_loss(
    pred: &SegmentPrediction,
    targets: &Mat,
    variant: ModelVariant,
) -> Result<(f64, TaskUpstream)> {
    let rows = pred.sf.len();
    if targets.shape() != (rows, 3) || pred.batch * pred.steps != rows {
        return Err(Error::shape(
            "segment_loss",
            format!("{rows} predictions against {:?} targets", targets.shape()),
        ));
    }
    let b = pred.batch as f64;
    let mut loss = 0.0;
    let mut up = TaskUpstream {
        sf: vec![0.0; rows],
        sw: None,
        sno: None,
    };
    for &task in variant.trained_tasks() {
        let yhat = pred.task(task).ok_or_else(|| {
            Error::shape(
                "segment_loss",
                format!("{variant} lacks {} predictions", task.name()),
            )
        })?;
        let k = task.index();
        let mut grad = vec![0.0; rows];
        for (r, (g, &p)) in grad.iter_mut().zip(yhat).enumerate() {
            let e = p - targets.get(r, k);
            loss += e * e;
            *g = 2.0 * e / b;
        }
        match task {
            Task::Streamflow => up.sf = grad,
            Task::SoilWater => up.sw = Some(grad),
            Task::Snowpack => up.sno = Some(grad),
        }
    }
    Ok((loss / b, up))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub val_mse: f64,
    pub config_hash: String,
    pub seed: u64,
    pub network: Network,
    pub norm: NormStats,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        if !ck.val_mse.is_finite() {
            return Err(Error::Data(format!(
                "{}: validation MSE is not finite",
                path.display()
            )));
        }
        Ok(ck)
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub member: usize,
    pub seed: u64,
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub wall_time_s: f64,
}

pub fn write_run_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Normalized splits plus the statistics that produced them.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<BasinSeries>,
    pub val: Vec<BasinSeries>,
    pub norm: NormStats,
}

#[derive(Clone, Debug)]
pub struct MemberRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Per-step validation error, summed over the variant's trained tasks.
pub fn validation_mse(
    net: &Network,
    val: &[BasinSeries],
    plan: &SegmentPlan,
    mode: ValidationMode,
) -> Result<f64> {
    let variant = net.variant();
    match mode {
        ValidationMode::Observed => {
            let refs = segment_refs(plan, val.len());
            let mut total = 0.0;
            for chunk in refs.chunks(256) {
                let batch = assemble_batch(val, plan.window(), chunk)?;
                let (pred, _) = net.forward_segment(
                    &batch.x,
                    chunk.len(),
                    Some(&batch.inits),
                    &DropoutMasks::none(),
                )?;
                let (loss, _) = segment_loss(&pred, &batch.y, variant)?;
                total += loss * chunk.len() as f64;
            }
            Ok(total / (refs.len() * plan.window()) as f64)
        }
        ValidationMode::Chained => {
            let preds = infer_chronological(net, val, plan)?;
            let mut total = 0.0;
            let mut steps = 0usize;
            for (p, s) in preds.iter().zip(val) {
                for &task in variant.trained_tasks() {
                    let yhat = p.task(task).expect("trained task predicted");
                    for (i, v) in yhat.iter().enumerate() {
                        total += (v - s.y.get(i + 1, task.index())).powi(2);
                    }
                }
                steps += p.sf.len();
            }
            Ok(total / steps as f64)
        }
    }
}

/// Trains one ensemble member and keeps the parameters of the epoch with
/// the lowest validation MSE.
#[allow(clippy::too_many_arguments)]
pub fn train_member(
    net_cfg: &TaskGraphConfig,
    cfg: &TrainConfig,
    window: usize,
    stride: usize,
    data: &TrainData,
    member: usize,
    seed: u64,
    config_hash: &str,
) -> Result<MemberRun> {
    cfg.validate()?;
    let Some(first) = data.train.first() else {
        return Err(Error::Data("no training basins".into()));
    };
    let val_len = data.val.first().map_or(0, BasinSeries::len);
    let train_plan = make_plan(first.len(), window, stride)?;
    let val_plan = make_plan(val_len, window, stride)?;
    let variant = net_cfg.variant;
    let mut net = Network::build(TaskGraphConfig {
        seed,
        ..net_cfg.clone()
    })?;
    let root = Rng::new(seed);
    let mut shuffle_rng = root.fork(101);
    let mut dropout_rng = root.fork(102);
    let mut adam = AdamState::new(net.modules.len(), cfg.lr);
    let refs = segment_refs(&train_plan, data.train.len());

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Network)> = None;
    for epoch in 1..=cfg.epochs {
        let clock = Instant::now();
        let mut sum = 0.0;
        for (bi, refs_b) in epoch_batches(&refs, cfg.batch_size, &mut shuffle_rng)?
            .iter()
            .enumerate()
        {
            let context = || format!("member {member} (seed {seed}), epoch {epoch}, batch {bi}");
            let batch = assemble_batch(&data.train, window, refs_b)?;
            let b = refs_b.len();
            let masks = DropoutMasks::sample(&net, b, &mut dropout_rng)?;
            let (pred, trace) = net.forward_segment(&batch.x, b, Some(&batch.inits), &masks)?;
            let (loss, up) = segment_loss(&pred, &batch.y, variant)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    context: context(),
                    detail: format!(
                        "loss is {loss}; parameter norm {:.6e}",
                        net.modules.sq_norm().sqrt()
                    ),
                });
            }
            sum += loss * b as f64;
            let mut grads = net.backward_segment(&trace, &up)?;
            if let Some(max) = cfg.clip_norm {
                let norm = grads.params.sq_norm().sqrt();
                if norm > max {
                    grads.params.scale(max / norm);
                }
            }
            adam.step_slices(
                &mut net.modules.tensors_mut(),
                &grads.params.tensors(),
                &context(),
            )?;
        }
        let train_mse = sum / (refs.len() * window) as f64;
        let val_mse = validation_mse(&net, &data.val, &val_plan, cfg.validation)?;
        if !val_mse.is_finite() {
            return Err(Error::Training {
                context: format!("member {member} (seed {seed}), epoch {epoch}"),
                detail: format!(
                    "validation MSE is {val_mse}; parameter norm {:.6e}",
                    net.modules.sq_norm().sqrt()
                ),
            });
        }
        log::debug!(
            "{variant} member {member} epoch {epoch}: train {train_mse:.5} val {val_mse:.5}"
        );
        log.push(EpochRecord {
            member,
            seed,
            epoch,
            train_mse,
            val_mse,
            wall_time_s: clock.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(_, v, _)| val_mse < *v) {
            best = Some((epoch, val_mse, net.clone()));
        }
    }
    let (epoch, val_mse, network) = best.expect("at least one epoch");
    Ok(MemberRun {
        checkpoint: Checkpoint {
            epoch,
            val_mse,
            config_hash: config_hash.to_string(),
            seed,
            network,
            norm: data.norm.clone(),
        },
        log,
    })
}

/// Trains one member per seed on up to `jobs` threads. Results are ordered
/// like `cfg.seeds` and do not depend on scheduling.
pub fn train_ensemble(
    net_cfg: &TaskGraphConfig,
    cfg: &TrainConfig,
    window: usize,
    stride: usize,
    data: &TrainData,
    config_hash: &str,
    jobs: usize,
) -> Result<Vec<MemberRun>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| {
        cfg.seeds
            .par_iter()
            .enumerate()
            .map(|(m, &seed)| {
                train_member(net_cfg, cfg, window, stride, data, m, seed, config_hash)
            })
            .collect()
    })
}

/// Denormalized ensemble prediction for one basin over `[1, covered_end)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub basin_id: String,
    pub sf: Vec<f64>,
    pub sw: Option<Vec<f64>>,
    pub sno: Option<Vec<f64>>,
}

impl Forecast {
    pub fn task(&self, task: Task) -> Option<&[f64]> {
        match task {
            Task::Streamflow => Some(&self.sf),
            Task::SoilWater => self.sw.as_deref(),
            Task::Snowpack => self.sno.as_deref(),
        }
    }
}

/// Mean of the members' chained reconstructions, each member feeding its
/// own predictions forward, then mapped back to physical units.
pub fn ensemble_predict(
    checkpoints: &[Checkpoint],
    series: &[BasinSeries],
    plan: &SegmentPlan,
) -> Result<Vec<Forecast>> {
    let Some(first) = checkpoints.first() else {
        return Err(Error::Usage(
            "ensemble prediction needs at least one checkpoint".into(),
        ));
    };
    if let Some(c) = checkpoints
        .iter()
        .find(|c| c.config_hash != first.config_hash)
    {
        return Err(Error::Usage(format!(
            "checkpoint config hashes differ: {} vs {}",
            first.config_hash, c.config_hash
        )));
    }
    let members = checkpoints
        .iter()
        .map(|c| infer_chronological(&c.network, series, plan))
        .collect::<Result<Vec<_>>>()?;
    let n = members.len() as f64;
    let mut mean: Vec<TaskSeries> = members[0].clone();
    for m in &members[1..] {
        for (acc, s) in mean.iter_mut().zip(m) {
            for task in Task::ALL {
                if let (Some(a), Some(v)) = (acc.task_mut(task), s.task(task)) {
                    a.iter_mut().zip(v).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let norm = &first.norm;
    Ok(mean
        .into_iter()
        .zip(series)
        .map(|(m, s)| {
            let denorm = |task: Task, v: Vec<f64>| -> Vec<f64> {
                v.into_iter()
                    .map(|x| norm.denormalize_target(task, x / n))
                    .collect()
            };
            Forecast {
                basin_id: s.basin_id.clone(),
                sf: denorm(Task::Streamflow, m.sf),
                sw: m.sw.map(|v| denorm(Task::SoilWater, v)),
                sno: m.sno.map(|v| denorm(Task::Snowpack, v)),
            }
        })
        .collect())
}
