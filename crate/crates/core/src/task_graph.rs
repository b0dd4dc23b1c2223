//! The six model variants and the wiring between their task modules.
//!
//! Hierarchical variants run a soil-water module and a snowpack module on the
//! forcings, then feed either their predictions (value connection) or their
//! hidden states (embedding connection) into the streamflow module at the
//! same time step. Conditional-init variants append the target's value from
//! the step before the segment as a constant input channel to each module.
//! Information never flows from streamflow back to the intermediate tasks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::{
    sequence_backward, sequence_forward, LinearHead, LstmParams, LstmState, SequenceTrace,
};
use crate::numerics::{dropout_mask, finite_diff_grad, rel_err, Mat, Rng};

/// Prediction targets, in the column order of every target matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Snowpack,
    SoilWater,
    Streamflow,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Snowpack, Task::SoilWater, Task::Streamflow];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Snowpack => "snowpack",
            Task::SoilWater => "soil_water",
            Task::Streamflow => "streamflow",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connection {
    None,
    Values,
    Embeddings,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "STL")]
    Stl,
    #[serde(rename = "SMTL")]
    Smtl,
    #[serde(rename = "HMTL")]
    Hmtl,
    #[serde(rename = "HMTL-CMB")]
    HmtlCmb,
    #[serde(rename = "HMTL-PE")]
    HmtlPe,
    #[serde(rename = "HCMTL")]
    Hcmtl,
}

impl ModelVariant {
    /// Canonical order, also used to break ties between models.
    pub const ALL: [ModelVariant; 6] = [
        ModelVariant::Stl,
        ModelVariant::Smtl,
        ModelVariant::Hmtl,
        ModelVariant::HmtlCmb,
        ModelVariant::HmtlPe,
        ModelVariant::Hcmtl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Stl => "STL",
            ModelVariant::Smtl => "SMTL",
            ModelVariant::Hmtl => "HMTL",
            ModelVariant::HmtlCmb => "HMTL-CMB",
            ModelVariant::HmtlPe => "HMTL-PE",
            ModelVariant::Hcmtl => "HCMTL",
        }
    }

    pub fn is_hierarchical(self) -> bool {
        !matches!(self, ModelVariant::Stl | ModelVariant::Smtl)
    }

    pub fn connection(self) -> Connection {
        match self {
            ModelVariant::Stl | ModelVariant::Smtl => Connection::None,
            ModelVariant::Hmtl | ModelVariant::HmtlCmb => Connection::Values,
            ModelVariant::HmtlPe | ModelVariant::Hcmtl => Connection::Embeddings,
        }
    }

    pub fn conditional_init(self) -> bool {
        matches!(self, ModelVariant::HmtlCmb | ModelVariant::Hcmtl)
    }

    /// Tasks whose error enters the loss.
    pub fn trained_tasks(self) -> &'static [Task] {
        match self {
            ModelVariant::Stl => &[Task::Streamflow],
            _ => &Task::ALL,
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('_', "-");
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown model variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskGraphConfig {
    pub variant: ModelVariant,
    pub input_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl TaskGraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 {
            return Err(Error::Config(format!(
                "input_dim ({}) and hidden ({}) must be at least 1",
                self.input_dim, self.hidden
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Input width of the soil-water and snowpack modules, if present.
    pub fn intermediate_input_width(&self) -> Option<usize> {
        self.variant
            .is_hierarchical()
            .then(|| self.input_dim + usize::from(self.variant.conditional_init()))
    }

    pub fn sf_input_width(&self) -> usize {
        let cmb = usize::from(self.variant.conditional_init());
        self.input_dim
            + cmb
            + match self.variant.connection() {
                Connection::None => 0,
                Connection::Values => 2,
                Connection::Embeddings => 2 * self.hidden,
            }
    }

    pub fn sf_outputs(&self) -> usize {
        match self.variant {
            ModelVariant::Smtl => 3,
            _ => 1,
        }
    }
}

/// Closed-form parameter count: per module `4H(D+H) + 8H + O(H+1)`.
pub fn param_count(config: &TaskGraphConfig) -> usize {
    let h = config.hidden;
    let module = |d: usize, o: usize| LstmParams::count_for(d, h) + LinearHead::count_for(h, o);
    let intermediates = config
        .intermediate_input_width()
        .map_or(0, |d| 2 * module(d, 1));
    intermediates + module(config.sf_input_width(), config.sf_outputs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskModule {
    pub lstm: LstmParams,
    pub head: LinearHead,
}

impl TaskModule {
    fn init(input_dim: usize, hidden: usize, outputs: usize, rng: &mut Rng) -> Self {
        let lstm = LstmParams::init(input_dim, hidden, rng);
        let head = LinearHead::init(hidden, outputs, rng);
        TaskModule { lstm, head }
    }

    fn zeros_like(&self) -> Self {
        TaskModule {
            lstm: LstmParams::zeros(self.lstm.input_dim(), self.lstm.hidden()),
            head: LinearHead::zeros(self.lstm.hidden(), self.head.outputs()),
        }
    }

    fn tensors(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.lstm.tensors().into_iter().chain(self.head.tensors())
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> + '_ {
        self.lstm
            .tensors_mut()
            .into_iter()
            .chain(self.head.tensors_mut())
    }
}

/// The trainable modules of a network; also used to hold their gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleSet {
    pub sw: Option<TaskModule>,
    pub sno: Option<TaskModule>,
    pub sf: TaskModule,
}

impl ModuleSet {
    pub fn zeros_like(&self) -> Self {
        ModuleSet {
            sw: self.sw.as_ref().map(TaskModule::zeros_like),
            sno: self.sno.as_ref().map(TaskModule::zeros_like),
            sf: self.sf.zeros_like(),
        }
    }

    /// All parameter arrays in a fixed order: soil water, snowpack, streamflow.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.sw
            .iter()
            .chain(self.sno.iter())
            .chain(std::iter::once(&self.sf))
            .flat_map(TaskModule::tensors)
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.sw
            .iter_mut()
            .chain(self.sno.iter_mut())
            .chain(std::iter::once(&mut self.sf))
            .flat_map(TaskModule::tensors_mut)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::shape(
                "ModuleSet::set_flat",
                format!("{} values for {} parameters", values.len(), self.len()),
            ));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&values[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum()
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= alpha);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: TaskGraphConfig,
    pub modules: ModuleSet,
}

/// Per-module `B × H` dropout masks for one batch of segments.
#[derive(Clone, Debug, Default)]
pub struct DropoutMasks {
    pub sw: Option<Mat>,
    pub sno: Option<Mat>,
    pub sf: Option<Mat>,
}

impl DropoutMasks {
    pub fn none() -> Self {
        DropoutMasks::default()
    }

    /// Fresh masks for every module present in `net`; empty when dropout is 0.
    pub fn sample(net: &Network, batch: usize, rng: &mut Rng) -> Result<Self> {
        let rate = net.config.dropout;
        if rate == 0.0 {
            return Ok(DropoutMasks::none());
        }
        let h = net.config.hidden;
        let mut draw =
            || -> Result<Mat> { Mat::from_vec(batch, h, dropout_mask(rng, batch * h, rate)?) };
        let hierarchical = net.config.variant.is_hierarchical();
        let sw = if hierarchical { Some(draw()?) } else { None };
        let sno = if hierarchical { Some(draw()?) } else { None };
        Ok(DropoutMasks {
            sw,
            sno,
            sf: Some(draw()?),
        })
    }
}

/// Predictions for a batch of segments; each vector has one entry per row
/// `s·B + b` of the time-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPrediction {
    pub batch: usize,
    pub steps: usize,
    pub sf: Vec<f64>,
    pub sw: Option<Vec<f64>>,
    pub sno: Option<Vec<f64>>,
}

impl SegmentPrediction {
    pub fn task(&self, task: Task) -> Option<&[f64]> {
        match task {
            Task::Streamflow => Some(&self.sf),
            Task::SoilWater => self.sw.as_deref(),
            Task::Snowpack => self.sno.as_deref(),
        }
    }

    /// Series of one sample across the segment.
    pub fn sample_series(&self, task: Task, sample: usize) -> Option<Vec<f64>> {
        self.task(task).map(|v| {
            (0..self.steps)
                .map(|s| v[s * self.batch + sample])
                .collect()
        })
    }
}

#[derive(Clone, Debug)]
pub struct SegmentTrace {
    sw: Option<SequenceTrace>,
    sno: Option<SequenceTrace>,
    sf: SequenceTrace,
}

impl SegmentTrace {
    pub fn sw(&self) -> Option<&SequenceTrace> {
        self.sw.as_ref()
    }

    pub fn sno(&self) -> Option<&SequenceTrace> {
        self.sno.as_ref()
    }

    pub fn sf(&self) -> &SequenceTrace {
        &self.sf
    }
}

/// `∂L/∂ŷ` for each task, in the time-major row layout.
#[derive(Clone, Debug)]
pub struct TaskUpstream {
    pub sf: Vec<f64>,
    pub sw: Option<Vec<f64>>,
    pub sno: Option<Vec<f64>>,
}

impl TaskUpstream {
    pub fn zeros(rows: usize) -> Self {
        TaskUpstream {
            sf: vec![0.0; rows],
            sw: Some(vec![0.0; rows]),
            sno: Some(vec![0.0; rows]),
        }
    }

    fn task(&self, task: Task) -> Option<&[f64]> {
        match task {
            Task::Streamflow => Some(&self.sf),
            Task::SoilWater => self.sw.as_deref(),
            Task::Snowpack => self.sno.as_deref(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegmentGrads {
    pub params: ModuleSet,
    /// `B × 3` gradient with respect to the conditional init values (zero
    /// for variants without conditional init).
    pub d_inits: Mat,
    /// `(t·B) × D`.
    pub d_x: Mat,
}

impl Network {
    pub fn build(config: TaskGraphConfig) -> Result<Network> {
        config.validate()?;
        let root = Rng::new(config.seed);
        let h = config.hidden;
        let (sw, sno) = match config.intermediate_input_width() {
            Some(d) => (
                Some(TaskModule::init(d, h, 1, &mut root.fork(1))),
                Some(TaskModule::init(d, h, 1, &mut root.fork(2))),
            ),
            None => (None, None),
        };
        let sf = TaskModule::init(
            config.sf_input_width(),
            h,
            config.sf_outputs(),
            &mut root.fork(3),
        );
        Ok(Network {
            config,
            modules: ModuleSet { sw, sno, sf },
        })
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    /// Number of allocated parameters, counted array by array.
    pub fn allocated_params(&self) -> usize {
        self.modules.len()
    }

    fn check_inputs(&self, x: &Mat, batch: usize, inits: Option<&Mat>) -> Result<()> {
        if batch == 0 || x.rows() == 0 || !x.rows().is_multiple_of(batch) {
            return Err(Error::shape(
                "forward_segment",
                format!("{} rows for batch {batch}", x.rows()),
            ));
        }
        if x.cols() != self.config.input_dim {
            return Err(Error::shape(
                "forward_segment",
                format!(
                    "{} input columns, network expects {}",
                    x.cols(),
                    self.config.input_dim
                ),
            ));
        }
        if self.config.variant.conditional_init() {
            match inits {
                None => {
                    return Err(Error::Usage(format!(
                        "{} needs conditional init values",
                        self.config.variant
                    )))
                }
                Some(m) if m.shape() != (batch, 3) => {
                    return Err(Error::shape("forward_segment", "init values must be B x 3"))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Runs one batch of segments. `x` is `(t·B) × D`, `inits` is `B × 3` in
    /// task order and only read by conditional-init variants.
    pub fn forward_segment(
        &self,
        x: &Mat,
        batch: usize,
        inits: Option<&Mat>,
        masks: &DropoutMasks,
    ) -> Result<(SegmentPrediction, SegmentTrace)> {
        self.check_inputs(x, batch, inits)?;
        let rows = x.rows();
        let steps = rows / batch;
        let h = self.config.hidden;
        let cmb = self.config.variant.conditional_init();
        let zero_state = LstmState::zeros(batch, h);
        let m = &self.modules;

        if !self.config.variant.is_hierarchical() {
            let (pred, trace) = sequence_forward(
                &m.sf.lstm,
                &m.sf.head,
                x,
                batch,
                &zero_state,
                masks.sf.as_ref(),
            )?;
            let prediction = if pred.cols() == 3 {
                SegmentPrediction {
                    batch,
                    steps,
                    sf: pred.col(Task::Streamflow.index()),
                    sw: Some(pred.col(Task::SoilWater.index())),
                    sno: Some(pred.col(Task::Snowpack.index())),
                }
            } else {
                SegmentPrediction {
                    batch,
                    steps,
                    sf: pred.into_vec(),
                    sw: None,
                    sno: None,
                }
            };
            return Ok((
                prediction,
                SegmentTrace {
                    sw: None,
                    sno: None,
                    sf: trace,
                },
            ));
        }

        let (sw_mod, sno_mod) = match (&m.sw, &m.sno) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Usage(
                    "hierarchical network without intermediate modules".into(),
                ))
            }
        };
        let aux_input = |task: Task| -> Mat {
            if cmb {
                let inits = inits.expect("checked above");
                with_init_column(x, batch, inits, task)
            } else {
                x.clone()
            }
        };
        let (sw_pred, sw_trace) = sequence_forward(
            &sw_mod.lstm,
            &sw_mod.head,
            &aux_input(Task::SoilWater),
            batch,
            &zero_state,
            masks.sw.as_ref(),
        )?;
        let (sno_pred, sno_trace) = sequence_forward(
            &sno_mod.lstm,
            &sno_mod.head,
            &aux_input(Task::Snowpack),
            batch,
            &zero_state,
            masks.sno.as_ref(),
        )?;

        let width = self.config.sf_input_width();
        let d = self.config.input_dim;
        let mut sf_in = Mat::zeros(rows, width);
        for r in 0..rows {
            let b = r % batch;
            let row = sf_in.row_mut(r);
            row[..d].copy_from_slice(x.row(r));
            let mut c = d;
            if cmb {
                row[c] = inits
                    .expect("checked above")
                    .get(b, Task::Streamflow.index());
                c += 1;
            }
            match self.config.variant.connection() {
                Connection::Values => {
                    row[c] = sw_pred.get(r, 0);
                    row[c + 1] = sno_pred.get(r, 0);
                }
                Connection::Embeddings => {
                    row[c..c + h].copy_from_slice(sw_trace.hidden().row(r));
                    row[c + h..c + 2 * h].copy_from_slice(sno_trace.hidden().row(r));
                }
                Connection::None => unreachable!("hierarchical variants are connected"),
            }
        }
        let (sf_pred, sf_trace) = sequence_forward(
            &m.sf.lstm,
            &m.sf.head,
            &sf_in,
            batch,
            &zero_state,
            masks.sf.as_ref(),
        )?;

        Ok((
            SegmentPrediction {
                batch,
                steps,
                sf: sf_pred.into_vec(),
                sw: Some(sw_pred.into_vec()),
                sno: Some(sno_pred.into_vec()),
            },
            SegmentTrace {
                sw: Some(sw_trace),
                sno: Some(sno_trace),
                sf: sf_trace,
            },
        ))
    }

    /// Reverse pass through [`Network::forward_segment`].
    pub fn backward_segment(
        &self,
        trace: &SegmentTrace,
        upstream: &TaskUpstream,
    ) -> Result<SegmentGrads> {
        let batch = trace.sf.batch();
        let rows = batch * trace.sf.steps();
        let d = self.config.input_dim;
        let h = self.config.hidden;
        let cmb = self.config.variant.conditional_init();
        let m = &self.modules;
        let mut grads = m.zeros_like();
        let mut d_inits = Mat::zeros(batch, 3);
        let mut d_x = Mat::zeros(rows, d);

        for task in Task::ALL {
            if let Some(v) = upstream.task(task) {
                if v.len() != rows {
                    return Err(Error::shape(
                        "backward_segment",
                        format!(
                            "{} upstream rows for {}, expected {rows}",
                            v.len(),
                            task.name()
                        ),
                    ));
                }
            }
        }

        if !self.config.variant.is_hierarchical() {
            let outs = m.sf.head.outputs();
            let d_pred = if outs == 3 {
                let mut dp = Mat::zeros(rows, 3);
                for task in Task::ALL {
                    if let Some(v) = upstream.task(task) {
                        for (r, g) in v.iter().enumerate() {
                            dp.set(r, task.index(), *g);
                        }
                    }
                }
                dp
            } else {
                Mat::column(&upstream.sf)
            };
            let g = sequence_backward(&trace.sf, &m.sf.lstm, &m.sf.head, &d_pred, None)?;
            grads.sf = TaskModule {
                lstm: g.params,
                head: g.head,
            };
            return Ok(SegmentGrads {
                params: grads,
                d_inits,
                d_x: g.d_inputs,
            });
        }

        let (sw_mod, sno_mod, sw_tr, sno_tr) = match (&m.sw, &m.sno, &trace.sw, &trace.sno) {
            (Some(a), Some(b), Some(ta), Some(tb)) => (a, b, ta, tb),
            _ => {
                return Err(Error::Usage(
                    "trace does not match a hierarchical network".into(),
                ))
            }
        };

        let gsf = sequence_backward(
            &trace.sf,
            &m.sf.lstm,
            &m.sf.head,
            &Mat::column(&upstream.sf),
            None,
        )?;
        let dsf_in = &gsf.d_inputs;
        let mut c = d;
        for r in 0..rows {
            for (dst, v) in d_x.row_mut(r).iter_mut().zip(&dsf_in.row(r)[..d]) {
                *dst += v;
            }
        }
        if cmb {
            for r in 0..rows {
                let b = r % batch;
                let cur = d_inits.get(b, Task::Streamflow.index());
                d_inits.set(b, Task::Streamflow.index(), cur + dsf_in.get(r, c));
            }
            c += 1;
        }
        grads.sf = TaskModule {
            lstm: gsf.params,
            head: gsf.head,
        };

        let own = |task: Task| -> Vec<f64> {
            upstream
                .task(task)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; rows])
        };
        let (mut d_sw, mut d_sno) = (own(Task::SoilWater), own(Task::Snowpack));
        let (extra_sw, extra_sno) = match self.config.variant.connection() {
            Connection::Values => {
                for r in 0..rows {
                    d_sw[r] += dsf_in.get(r, c);
                    d_sno[r] += dsf_in.get(r, c + 1);
                }
                (None, None)
            }
            Connection::Embeddings => (
                Some(Mat::from_fn(rows, h, |r, k| dsf_in.get(r, c + k))),
                Some(Mat::from_fn(rows, h, |r, k| dsf_in.get(r, c + h + k))),
            ),
            Connection::None => unreachable!("hierarchical variants are connected"),
        };

        let pairs = [
            (Task::SoilWater, sw_mod, sw_tr, d_sw, extra_sw),
            (Task::Snowpack, sno_mod, sno_tr, d_sno, extra_sno),
        ];
        let mut module_grads = Vec::with_capacity(2);
        for (task, module, tr, dp, extra) in pairs {
            let g = sequence_backward(
                tr,
                &module.lstm,
                &module.head,
                &Mat::column(&dp),
                extra.as_ref(),
            )?;
            for r in 0..rows {
                let src = g.d_inputs.row(r);
                for (dst, v) in d_x.row_mut(r).iter_mut().zip(&src[..d]) {
                    *dst += v;
                }
                if cmb {
                    let b = r % batch;
                    let cur = d_inits.get(b, task.index());
                    d_inits.set(b, task.index(), cur + src[d]);
                }
            }
            module_grads.push(TaskModule {
                lstm: g.params,
                head: g.head,
            });
        }
        grads.sno = module_grads.pop();
        grads.sw = module_grads.pop();

        Ok(SegmentGrads {
            params: grads,
            d_inits,
            d_x,
        })
    }
}

/// `[x | init]` where the init column repeats each sample's value for `task`.
fn with_init_column(x: &Mat, batch: usize, inits: &Mat, task: Task) -> Mat {
    let d = x.cols();
    let mut out = Mat::zeros(x.rows(), d + 1);
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        row[..d].copy_from_slice(x.row(r));
        row[d] = inits.get(r % batch, task.index());
    }
    out
}

/// Result of comparing analytic gradients with central differences.
#[derive(Clone, Copy, Debug)]
pub struct GradientCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Checks every parameter, input and conditional-init gradient of a freshly
/// built network against central differences (`h = 1e-5`). The scalar probed
/// is `Σ_task Σ R_task ⊙ ŷ_task` with random weights `R` over the tasks in
/// `tasks`, under fixed random dropout masks when `dropout > 0`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    variant: ModelVariant,
    seed: u64,
    input_dim: usize,
    hidden: usize,
    steps: usize,
    batch: usize,
    dropout: f64,
    tasks: &[Task],
) -> Result<GradientCheck> {
    let mut net = Network::build(TaskGraphConfig {
        variant,
        input_dim,
        hidden,
        dropout,
        seed,
    })?;
    let mut rng = Rng::new(seed ^ 0xA5A5_5A5A);
    let rows = steps * batch;
    let x = Mat::from_fn(rows, input_dim, |_, _| rng.normal());
    let inits = Mat::from_fn(batch, 3, |_, _| rng.normal());
    let masks = DropoutMasks::sample(&net, batch, &mut rng)?;
    let mut weights = TaskUpstream {
        sf: vec![0.0; rows],
        sw: None,
        sno: None,
    };
    for &task in tasks {
        let w: Vec<f64> = (0..rows).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        match task {
            Task::Streamflow => weights.sf = w,
            Task::SoilWater => weights.sw = Some(w),
            Task::Snowpack => weights.sno = Some(w),
        }
    }

    let (_, trace) = net.forward_segment(&x, batch, Some(&inits), &masks)?;
    let grads = net.backward_segment(&trace, &weights)?;
    let mut analytic = grads.params.flat();
    analytic.extend_from_slice(grads.d_x.as_slice());
    let cmb = variant.conditional_init();
    if cmb {
        analytic.extend_from_slice(grads.d_inits.as_slice());
    }

    let n_params = net.modules.len();
    let mut point = net.modules.flat();
    point.extend_from_slice(x.as_slice());
    if cmb {
        point.extend_from_slice(inits.as_slice());
    }

    let probe = |pred: &SegmentPrediction| -> f64 {
        Task::ALL
            .iter()
            .filter_map(|&t| {
                Some(
                    pred.task(t)?
                        .iter()
                        .zip(weights.task(t)?)
                        .map(|(a, b)| a * b)
                        .sum::<f64>(),
                )
            })
            .sum()
    };
    let mut x2 = x.clone();
    let mut inits2 = inits.clone();
    let numeric = finite_diff_grad(
        |v| {
            net.modules.set_flat(&v[..n_params]).expect("length fixed");
            x2.as_mut_slice()
                .copy_from_slice(&v[n_params..n_params + rows * input_dim]);
            if cmb {
                inits2
                    .as_mut_slice()
                    .copy_from_slice(&v[n_params + rows * input_dim..]);
            }
            let (pred, _) = net
                .forward_segment(&x2, batch, Some(&inits2), &masks)
                .expect("shapes fixed");
            probe(&pred)
        },
        &point,
        1e-5,
    )?;

    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max);
    Ok(GradientCheck {
        max_rel_err,
        checked: analytic.len(),
    })
}
