//! Single-layer LSTM with a linear read-out head and its exact reverse pass.
//!
//! Sequences are batched in time-major layout: a sequence batch of `B`
//! samples over `t` steps is a `(t·B) × D` matrix whose row `s·B + b` holds
//! step `s` of sample `b`. With `B = 1` this is simply one row per step.
//!
//! Gate blocks in `w_x`, `w_h` and both biases are ordered `[f, i, c̃, o]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemm, sigmoid, tanh, Mat, Operand, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// `4H × D` input weights.
    pub w_x: Mat,
    /// `4H × H` recurrent weights.
    pub w_h: Mat,
    pub b_ih: Vec<f64>,
    pub b_hh: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmParams {
            w_x: Mat::zeros(4 * hidden, input_dim),
            w_h: Mat::zeros(4 * hidden, hidden),
            b_ih: vec![0.0; 4 * hidden],
            b_hh: vec![0.0; 4 * hidden],
        }
    }

    /// Uniform `(-1/√H, 1/√H)` for every weight and bias, then `+1` on the
    /// forget block of `b_ih`.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let mut p = LstmParams::zeros(input_dim, hidden);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|w| *w = rng.uniform_range(-k, k));
        }
        p.b_ih[..hidden].iter_mut().for_each(|b| *b += 1.0);
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w_h.cols()
    }

    /// `4H(D + H) + 8H`.
    pub fn count_for(input_dim: usize, hidden: usize) -> usize {
        4 * hidden * (input_dim + hidden) + 8 * hidden
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w_x.as_slice(),
            self.w_h.as_slice(),
            &self.b_ih,
            &self.b_hh,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_x.as_mut_slice(),
            self.w_h.as_mut_slice(),
            &mut self.b_ih,
            &mut self.b_hh,
        ]
    }
}

/// Linear read-out `ŷ = W_y h + b_y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    /// `O × H`.
    pub w_y: Mat,
    pub b_y: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(hidden: usize, outputs: usize) -> Self {
        LinearHead {
            w_y: Mat::zeros(outputs, hidden),
            b_y: vec![0.0; outputs],
        }
    }

    pub fn init(hidden: usize, outputs: usize, rng: &mut Rng) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let mut head = LinearHead::zeros(hidden, outputs);
        for t in head.tensors_mut() {
            t.iter_mut().for_each(|w| *w = rng.uniform_range(-k, k));
        }
        head
    }

    pub fn outputs(&self) -> usize {
        self.w_y.rows()
    }

    pub fn count_for(hidden: usize, outputs: usize) -> usize {
        outputs * (hidden + 1)
    }

    pub fn tensors(&self) -> [&[f64]; 2] {
        [self.w_y.as_slice(), &self.b_y]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [self.w_y.as_mut_slice(), &mut self.b_y]
    }
}

/// Hidden and cell state for a batch of `B` sequences (`B × H` each).
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Mat,
    pub c: Mat,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        LstmState {
            h: Mat::zeros(batch, hidden),
            c: Mat::zeros(batch, hidden),
        }
    }

    pub fn batch(&self) -> usize {
        self.h.rows()
    }
}

/// Gate activations of one cell step.
#[derive(Clone, Debug, PartialEq)]
pub struct GateCache {
    pub forget: Vec<f64>,
    pub input: Vec<f64>,
    pub candidate: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellOutput {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub gates: GateCache,
}

/// Turns pre-activations `z = [f|i|c̃|o]` into activations in place and
/// advances the cell and hidden state.
#[inline]
fn activate(z: &mut [f64], c_prev: &[f64], c: &mut [f64], tanh_c: &mut [f64], h: &mut [f64]) {
    let hid = c.len();
    let (f, rest) = z.split_at_mut(hid);
    let (i, rest) = rest.split_at_mut(hid);
    let (g, o) = rest.split_at_mut(hid);
    for k in 0..hid {
        f[k] = sigmoid(f[k]);
        i[k] = sigmoid(i[k]);
        g[k] = tanh(g[k]);
        o[k] = sigmoid(o[k]);
        c[k] = f[k] * c_prev[k] + i[k] * g[k];
        tanh_c[k] = tanh(c[k]);
        h[k] = o[k] * tanh_c[k];
    }
}

/// One LSTM step for a single sample.
pub fn cell_forward(
    params: &LstmParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<CellOutput> {
    let hid = params.hidden();
    if x.len() != params.input_dim() || h_prev.len() != hid || c_prev.len() != hid {
        return Err(Error::shape(
            "cell_forward",
            format!(
                "x {} / h {} / c {} against D={} H={hid}",
                x.len(),
                h_prev.len(),
                c_prev.len(),
                params.input_dim()
            ),
        ));
    }
    let mut z: Vec<f64> = params
        .b_ih
        .iter()
        .zip(&params.b_hh)
        .map(|(a, b)| a + b)
        .collect();
    for (r, zr) in z.iter_mut().enumerate() {
        *zr += dot(params.w_x.row(r), x) + dot(params.w_h.row(r), h_prev);
    }
    let mut c = vec![0.0; hid];
    let mut tanh_c = vec![0.0; hid];
    let mut h = vec![0.0; hid];
    activate(&mut z, c_prev, &mut c, &mut tanh_c, &mut h);
    Ok(CellOutput {
        h,
        c,
        gates: GateCache {
            forget: z[..hid].to_vec(),
            input: z[hid..2 * hid].to_vec(),
            candidate: z[2 * hid..3 * hid].to_vec(),
            output: z[3 * hid..].to_vec(),
        },
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Everything the reverse pass needs from a forward unroll.
#[derive(Clone, Debug)]
pub struct SequenceTrace {
    batch: usize,
    steps: usize,
    inputs: Mat,
    init: LstmState,
    /// Gate activations, `(t·B) × 4H`.
    gates: Mat,
    cells: Mat,
    tanh_cells: Mat,
    hidden: Mat,
    /// Hidden states after dropout, as seen by the head. `None` when no mask.
    head_input: Option<Mat>,
    mask: Option<Mat>,
}

impl SequenceTrace {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Hidden states `(t·B) × H`, before dropout.
    pub fn hidden(&self) -> &Mat {
        &self.hidden
    }

    pub fn cells(&self) -> &Mat {
        &self.cells
    }

    pub fn gates(&self) -> &Mat {
        &self.gates
    }

    /// State after the last step.
    pub fn final_state(&self) -> LstmState {
        let first = (self.steps - 1) * self.batch;
        let hid = self.hidden.cols();
        LstmState {
            h: Mat::from_vec(
                self.batch,
                hid,
                self.hidden.row_block(first, self.batch).to_vec(),
            )
            .expect("block shape"),
            c: Mat::from_vec(
                self.batch,
                hid,
                self.cells.row_block(first, self.batch).to_vec(),
            )
            .expect("block shape"),
        }
    }
}

/// Unrolls the cell over `inputs` and applies the head at every step.
///
/// `mask` is an optional `B × H` dropout mask shared by all steps of a
/// sample; it only affects what the head sees. Returns `(t·B) × O`
/// predictions and the trace.
pub fn sequence_forward(
    params: &LstmParams,
    head: &LinearHead,
    inputs: &Mat,
    batch: usize,
    init: &LstmState,
    mask: Option<&Mat>,
) -> Result<(Mat, SequenceTrace)> {
    let hid = params.hidden();
    let d = params.input_dim();
    if batch == 0 || inputs.rows() == 0 || !inputs.rows().is_multiple_of(batch) {
        return Err(Error::shape(
            "sequence_forward",
            format!("{} input rows for batch {batch}", inputs.rows()),
        ));
    }
    if inputs.cols() != d {
        return Err(Error::shape(
            "sequence_forward",
            format!("input width {} but module expects {d}", inputs.cols()),
        ));
    }
    if init.h.shape() != (batch, hid) || init.c.shape() != (batch, hid) {
        return Err(Error::shape("sequence_forward", "initial state shape"));
    }
    if head.w_y.cols() != hid {
        return Err(Error::shape("sequence_forward", "head width"));
    }
    if let Some(m) = mask {
        if m.shape() != (batch, hid) {
            return Err(Error::shape("sequence_forward", "dropout mask shape"));
        }
    }
    let steps = inputs.rows() / batch;
    let rows = inputs.rows();
    let g4 = 4 * hid;

    // Input projections for every step at once.
    let mut gates = Mat::zeros(rows, g4);
    gemm(
        gates.as_mut_slice(),
        rows,
        g4,
        d,
        Operand::of(inputs),
        Operand::t(&params.w_x),
        false,
    );
    let bias: Vec<f64> = params
        .b_ih
        .iter()
        .zip(&params.b_hh)
        .map(|(a, b)| a + b)
        .collect();
    for r in 0..rows {
        for (z, b) in gates.row_mut(r).iter_mut().zip(&bias) {
            *z += b;
        }
    }

    let mut cells = Mat::zeros(rows, hid);
    let mut tanh_cells = Mat::zeros(rows, hid);
    let mut hidden = Mat::zeros(rows, hid);
    for s in 0..steps {
        let first = s * batch;
        let (h_done, h_rest) = hidden.as_mut_slice().split_at_mut(first * hid);
        let h_prev: &[f64] = if s == 0 {
            init.h.as_slice()
        } else {
            &h_done[(first - batch) * hid..]
        };
        let z = gates.row_block_mut(first, batch);
        gemm(
            z,
            batch,
            g4,
            hid,
            Operand::new(h_prev, batch, hid, false),
            Operand::t(&params.w_h),
            true,
        );
        let (c_done, c_rest) = cells.as_mut_slice().split_at_mut(first * hid);
        let c_prev: &[f64] = if s == 0 {
            init.c.as_slice()
        } else {
            &c_done[(first - batch) * hid..]
        };
        let tc = tanh_cells.row_block_mut(first, batch);
        for b in 0..batch {
            let span = b * hid..(b + 1) * hid;
            activate(
                &mut z[b * g4..(b + 1) * g4],
                &c_prev[span.clone()],
                &mut c_rest[span.clone()],
                &mut tc[span.clone()],
                &mut h_rest[span],
            );
        }
    }

    let head_input = mask.map(|m| {
        let mut dropped = hidden.clone();
        for r in 0..rows {
            for (h, k) in dropped.row_mut(r).iter_mut().zip(m.row(r % batch)) {
                *h *= k;
            }
        }
        dropped
    });
    let seen = head_input.as_ref().unwrap_or(&hidden);
    let outs = head.outputs();
    let mut preds = Mat::zeros(rows, outs);
    gemm(
        preds.as_mut_slice(),
        rows,
        outs,
        hid,
        Operand::of(seen),
        Operand::t(&head.w_y),
        false,
    );
    for r in 0..rows {
        for (p, b) in preds.row_mut(r).iter_mut().zip(&head.b_y) {
            *p += b;
        }
    }

    let trace = SequenceTrace {
        batch,
        steps,
        inputs: inputs.clone(),
        init: init.clone(),
        gates,
        cells,
        tanh_cells,
        hidden,
        head_input,
        mask: mask.cloned(),
    };
    Ok((preds, trace))
}

/// Gradients of a scalar loss with respect to everything a sequence depends on.
#[derive(Clone, Debug)]
pub struct SequenceGrads {
    pub params: LstmParams,
    pub head: LinearHead,
    pub d_init: LstmState,
    /// `(t·B) × D`.
    pub d_inputs: Mat,
}

/// Reverse pass through [`sequence_forward`].
///
/// `d_pred` is `∂L/∂ŷ` (`(t·B) × O`); `d_h_extra` carries gradient reaching the
/// hidden states from other consumers (e.g. a downstream module fed with
/// these hidden states).
pub fn sequence_backward(
    trace: &SequenceTrace,
    params: &LstmParams,
    head: &LinearHead,
    d_pred: &Mat,
    d_h_extra: Option<&Mat>,
) -> Result<SequenceGrads> {
    let hid = params.hidden();
    let d = params.input_dim();
    let batch = trace.batch;
    let steps = trace.steps;
    let rows = batch * steps;
    let g4 = 4 * hid;
    if trace.hidden.cols() != hid || trace.inputs.cols() != d {
        return Err(Error::Usage(
            "sequence trace was produced by a module with different dimensions".into(),
        ));
    }
    if d_pred.shape() != (rows, head.outputs()) {
        return Err(Error::shape(
            "sequence_backward",
            format!(
                "d_pred {:?}, expected ({rows}, {})",
                d_pred.shape(),
                head.outputs()
            ),
        ));
    }
    if let Some(e) = d_h_extra {
        if e.shape() != (rows, hid) {
            return Err(Error::shape("sequence_backward", "d_h_extra shape"));
        }
    }

    let seen = trace.head_input.as_ref().unwrap_or(&trace.hidden);
    let mut head_grads = LinearHead::zeros(hid, head.outputs());
    gemm(
        head_grads.w_y.as_mut_slice(),
        head.outputs(),
        hid,
        rows,
        Operand::t(d_pred),
        Operand::of(seen),
        false,
    );
    head_grads.b_y = d_pred.col_sums();

    let mut dh_all = Mat::zeros(rows, hid);
    gemm(
        dh_all.as_mut_slice(),
        rows,
        hid,
        head.outputs(),
        Operand::of(d_pred),
        Operand::of(&head.w_y),
        false,
    );
    if let Some(m) = &trace.mask {
        for r in 0..rows {
            for (g, k) in dh_all.row_mut(r).iter_mut().zip(m.row(r % batch)) {
                *g *= k;
            }
        }
    }
    if let Some(e) = d_h_extra {
        dh_all.add_assign(e)?;
    }

    let mut dz = Mat::zeros(rows, g4);
    let mut dh_rec = vec![0.0; batch * hid];
    let mut dc_next = vec![0.0; batch * hid];
    for s in (0..steps).rev() {
        let first = s * batch;
        for b in 0..batch {
            let r = first + b;
            let gate = trace.gates.row(r);
            let (f, i, g, o) = (
                &gate[..hid],
                &gate[hid..2 * hid],
                &gate[2 * hid..3 * hid],
                &gate[3 * hid..],
            );
            let tc = trace.tanh_cells.row(r);
            let c_prev = if s == 0 {
                trace.init.c.row(b)
            } else {
                trace.cells.row(r - batch)
            };
            let dh_step = dh_all.row(r);
            let dzr = dz.row_mut(r);
            for k in 0..hid {
                let j = b * hid + k;
                let dh = dh_step[k] + dh_rec[j];
                let dc = dc_next[j] + dh * o[k] * (1.0 - tc[k] * tc[k]);
                dzr[k] = dc * c_prev[k] * f[k] * (1.0 - f[k]);
                dzr[hid + k] = dc * g[k] * i[k] * (1.0 - i[k]);
                dzr[2 * hid + k] = dc * i[k] * (1.0 - g[k] * g[k]);
                dzr[3 * hid + k] = dh * tc[k] * o[k] * (1.0 - o[k]);
                dc_next[j] = dc * f[k];
            }
        }
        gemm(
            &mut dh_rec,
            batch,
            hid,
            g4,
            Operand::new(dz.row_block(first, batch), batch, g4, false),
            Operand::of(&params.w_h),
            false,
        );
    }

    let mut grads = LstmParams::zeros(d, hid);
    gemm(
        grads.w_x.as_mut_slice(),
        g4,
        d,
        rows,
        Operand::t(&dz),
        Operand::of(&trace.inputs),
        false,
    );
    gemm(
        grads.w_h.as_mut_slice(),
        g4,
        hid,
        batch,
        Operand::new(dz.row_block(0, batch), batch, g4, true),
        Operand::of(&trace.init.h),
        false,
    );
    if steps > 1 {
        let tail = (steps - 1) * batch;
        gemm(
            grads.w_h.as_mut_slice(),
            g4,
            hid,
            tail,
            Operand::new(dz.row_block(batch, tail), tail, g4, true),
            Operand::new(trace.hidden.row_block(0, tail), tail, hid, false),
            true,
        );
    }
    let db = dz.col_sums();
    grads.b_ih = db.clone();
    grads.b_hh = db;

    let mut d_inputs = Mat::zeros(rows, d);
    gemm(
        d_inputs.as_mut_slice(),
        rows,
        d,
        g4,
        Operand::of(&dz),
        Operand::of(&params.w_x),
        false,
    );

    Ok(SequenceGrads {
        params: grads,
        head: head_grads,
        d_init: LstmState {
            h: Mat::from_vec(batch, hid, dh_rec)?,
            c: Mat::from_vec(batch, hid, dc_next)?,
        },
        d_inputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, rel_err};

    fn random_mat(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.uniform_range(-scale, scale))
    }

    #[test]
    fn zero_params_zero_state() {
        let p = LstmParams::zeros(3, 4);
        let out = cell_forward(&p, &[0.3, -1.0, 2.0], &[0.0; 4], &[0.0; 4]).unwrap();
        assert!(out.gates.forget.iter().all(|&v| v == 0.5));
        assert!(out.gates.input.iter().all(|&v| v == 0.5));
        assert!(out.gates.output.iter().all(|&v| v == 0.5));
        assert!(out.gates.candidate.iter().all(|&v| v == 0.0));
        assert!(out.c.iter().chain(&out.h).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_unit_cell() {
        let p = LstmParams::zeros(2, 3);
        let out = cell_forward(&p, &[1.0, 1.0], &[0.0; 3], &[1.0; 3]).unwrap();
        for (&c, &h) in out.c.iter().zip(&out.h) {
            assert_eq!(c, 0.5);
            assert!((h - 0.5 * 0.5f64.tanh()).abs() < 1e-15);
            assert!((h - 0.231059).abs() < 1e-6);
        }
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut p = LstmParams::zeros(1, 2);
        p.b_ih[..2].iter_mut().for_each(|b| *b = 10.0);
        let v = [3.0, -2.0];
        let out = cell_forward(&p, &[0.0], &[0.0; 2], &v).unwrap();
        for (c, v) in out.c.iter().zip(v) {
            assert!((c - v * sigmoid(10.0)).abs() < 1e-15);
            assert!(c.abs() >= 0.99995 * v.abs());
        }
    }

    #[test]
    fn cell_shape_error() {
        let p = LstmParams::zeros(2, 3);
        assert!(cell_forward(&p, &[1.0], &[0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn single_step_matches_cell_and_head() {
        let mut rng = Rng::new(4);
        let p = LstmParams::init(5, 8, &mut rng);
        let head = LinearHead::init(8, 2, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let init = LstmState {
            h: random_mat(&mut rng, 1, 8, 0.5),
            c: random_mat(&mut rng, 1, 8, 0.5),
        };
        let (pred, trace) = sequence_forward(
            &p,
            &head,
            &Mat::from_vec(1, 5, x.clone()).unwrap(),
            1,
            &init,
            None,
        )
        .unwrap();
        let cell = cell_forward(&p, &x, init.h.row(0), init.c.row(0)).unwrap();
        for k in 0..8 {
            assert!((trace.hidden().get(0, k) - cell.h[k]).abs() < 1e-14);
            assert!((trace.cells().get(0, k) - cell.c[k]).abs() < 1e-14);
        }
        for o in 0..2 {
            let y = dot(head.w_y.row(o), &cell.h) + head.b_y[o];
            assert!((pred.get(0, o) - y).abs() < 1e-14);
        }
    }

    #[test]
    fn batched_rows_match_individual_sequences() {
        let mut rng = Rng::new(21);
        let (d, h, t, b) = (3, 5, 6, 4);
        let p = LstmParams::init(d, h, &mut rng);
        let head = LinearHead::init(h, 1, &mut rng);
        let x = random_mat(&mut rng, t * b, d, 1.0);
        let init = LstmState::zeros(b, h);
        let (pred, _) = sequence_forward(&p, &head, &x, b, &init, None).unwrap();
        for s in 0..b {
            let xs = Mat::from_fn(t, d, |r, c| x.get(r * b + s, c));
            let (ps, _) =
                sequence_forward(&p, &head, &xs, 1, &LstmState::zeros(1, h), None).unwrap();
            for r in 0..t {
                assert!((ps.get(r, 0) - pred.get(r * b + s, 0)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn order_sensitivity() {
        let mut rng = Rng::new(8);
        let p = LstmParams::init(2, 6, &mut rng);
        let head = LinearHead::init(6, 1, &mut rng);
        let x = random_mat(&mut rng, 10, 2, 2.0);
        let rev = Mat::from_fn(10, 2, |r, c| x.get(9 - r, c));
        let init = LstmState::zeros(1, 6);
        let (a, _) = sequence_forward(&p, &head, &x, 1, &init, None).unwrap();
        let (b, _) = sequence_forward(&p, &head, &rev, 1, &init, None).unwrap();
        let b_rev: Vec<f64> = b.as_slice().iter().rev().copied().collect();
        assert!(a
            .as_slice()
            .iter()
            .zip(&b_rev)
            .any(|(u, v)| (u - v).abs() > 1e-6));
    }

    #[test]
    fn doubling_head_weights_doubles_output() {
        let mut rng = Rng::new(2);
        let p = LstmParams::init(3, 4, &mut rng);
        let mut head = LinearHead::init(4, 1, &mut rng);
        head.b_y = vec![0.0];
        let x = random_mat(&mut rng, 7, 3, 1.0);
        let init = LstmState::zeros(1, 4);
        let (a, ta) = sequence_forward(&p, &head, &x, 1, &init, None).unwrap();
        head.w_y.scale(2.0);
        let (b, tb) = sequence_forward(&p, &head, &x, 1, &init, None).unwrap();
        assert_eq!(ta.hidden(), tb.hidden());
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((2.0 * u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = Rng::new(5);
        let p = LstmParams::init(3, 4, &mut rng);
        let head = LinearHead::init(4, 2, &mut rng);
        let x = random_mat(&mut rng, 12, 3, 1.0);
        let mask = random_mat(&mut rng, 2, 4, 1.0);
        let init = LstmState::zeros(2, 4);
        let (a, _) = sequence_forward(&p, &head, &x, 2, &init, Some(&mask)).unwrap();
        let (b, _) = sequence_forward(&p, &head, &x, 2, &init, Some(&mask)).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn gate_ranges_hold() {
        let mut rng = Rng::new(77);
        let p = LstmParams::init(4, 6, &mut rng);
        let head = LinearHead::init(6, 1, &mut rng);
        let x = random_mat(&mut rng, 30, 4, 50.0);
        let (_, trace) = sequence_forward(&p, &head, &x, 1, &LstmState::zeros(1, 6), None).unwrap();
        let g = trace.gates();
        for r in 0..g.rows() {
            for (k, &v) in g.row(r).iter().enumerate() {
                if (12..18).contains(&k) {
                    assert!((-1.0..=1.0).contains(&v));
                } else {
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
        assert!(trace.hidden().is_finite() && trace.cells().is_finite());
    }

    #[test]
    fn zero_upstream_gradient() {
        let mut rng = Rng::new(6);
        let p = LstmParams::init(5, 8, &mut rng);
        let head = LinearHead::init(8, 1, &mut rng);
        let x = random_mat(&mut rng, 12, 5, 1.0);
        let (_, trace) = sequence_forward(&p, &head, &x, 1, &LstmState::zeros(1, 8), None).unwrap();
        let g = sequence_backward(&trace, &p, &head, &Mat::zeros(12, 1), None).unwrap();
        for t in g.params.tensors().iter().chain(g.head.tensors().iter()) {
            assert!(t.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_rejects_mismatched_trace() {
        let mut rng = Rng::new(6);
        let p = LstmParams::init(5, 8, &mut rng);
        let other = LstmParams::init(4, 8, &mut rng);
        let head = LinearHead::init(8, 1, &mut rng);
        let x = random_mat(&mut rng, 3, 5, 1.0);
        let (_, trace) = sequence_forward(&p, &head, &x, 1, &LstmState::zeros(1, 8), None).unwrap();
        let err = sequence_backward(&trace, &other, &head, &Mat::zeros(3, 1), None).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    /// Scalar probe loss `Σ R⊙ŷ + Σ E⊙h` whose upstream gradients are `R` and `E`.
    struct Probe {
        r: Mat,
        e: Mat,
    }

    impl Probe {
        fn loss(&self, pred: &Mat, hidden: &Mat) -> f64 {
            let a: f64 = pred
                .as_slice()
                .iter()
                .zip(self.r.as_slice())
                .map(|(x, y)| x * y)
                .sum();
            let b: f64 = hidden
                .as_slice()
                .iter()
                .zip(self.e.as_slice())
                .map(|(x, y)| x * y)
                .sum();
            a + b
        }
    }

    /// Flattens (params, head, inputs, init) in a fixed order.
    fn pack(p: &LstmParams, head: &LinearHead, x: &Mat, init: &LstmState) -> Vec<f64> {
        let mut v = Vec::new();
        for t in p.tensors() {
            v.extend_from_slice(t);
        }
        for t in head.tensors() {
            v.extend_from_slice(t);
        }
        v.extend_from_slice(x.as_slice());
        v.extend_from_slice(init.h.as_slice());
        v.extend_from_slice(init.c.as_slice());
        v
    }

    fn unpack(
        v: &[f64],
        p: &mut LstmParams,
        head: &mut LinearHead,
        x: &mut Mat,
        init: &mut LstmState,
    ) {
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&v[off..off + dst.len()]);
            off += dst.len();
        };
        for t in p.tensors_mut() {
            take(t);
        }
        for t in head.tensors_mut() {
            take(t);
        }
        take(x.as_mut_slice());
        take(init.h.as_mut_slice());
        take(init.c.as_mut_slice());
    }

    fn check_gradients(
        seed: u64,
        d: usize,
        h: usize,
        t: usize,
        b: usize,
        o: usize,
        with_mask: bool,
    ) -> f64 {
        let mut rng = Rng::new(seed);
        let p = LstmParams::init(d, h, &mut rng);
        let head = LinearHead::init(h, o, &mut rng);
        let x = random_mat(&mut rng, t * b, d, 1.0);
        let init = LstmState {
            h: random_mat(&mut rng, b, h, 0.5),
            c: random_mat(&mut rng, b, h, 0.5),
        };
        let mask = with_mask.then(|| {
            Mat::from_fn(
                b,
                h,
                |_, _| if rng.uniform() < 0.3 { 0.0 } else { 1.0 / 0.7 },
            )
        });
        let probe = Probe {
            r: random_mat(&mut rng, t * b, o, 1.0),
            e: random_mat(&mut rng, t * b, h, 1.0),
        };

        let (_, trace) = sequence_forward(&p, &head, &x, b, &init, mask.as_ref()).unwrap();
        let g = sequence_backward(&trace, &p, &head, &probe.r, Some(&probe.e)).unwrap();
        let analytic = pack(&g.params, &g.head, &g.d_inputs, &g.d_init);

        let base = pack(&p, &head, &x, &init);
        let (mut p2, mut head2, mut x2, mut init2) =
            (p.clone(), head.clone(), x.clone(), init.clone());
        let numeric = finite_diff_grad(
            |v| {
                unpack(v, &mut p2, &mut head2, &mut x2, &mut init2);
                let (pred, tr) =
                    sequence_forward(&p2, &head2, &x2, b, &init2, mask.as_ref()).unwrap();
                probe.loss(&pred, tr.hidden())
            },
            &base,
            1e-5,
        )
        .unwrap();
        analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| rel_err(a, n))
            .fold(0.0, f64::max)
    }

    #[test]
    fn bptt_matches_finite_differences() {
        for seed in 0..20 {
            let err = check_gradients(seed, 5, 8, 12, 1, 1, false);
            assert!(err < 1e-5, "seed {seed}: max rel err {err}");
        }
    }

    #[test]
    fn bptt_with_batch_mask_and_multi_output() {
        for seed in 100..105 {
            let err = check_gradients(seed, 4, 6, 7, 3, 3, true);
            assert!(err < 1e-5, "seed {seed}: max rel err {err}");
        }
    }

    #[test]
    fn counts() {
        assert_eq!(
            LstmParams::count_for(41, 256) + LinearHead::count_for(256, 1),
            306_433
        );
        let p = LstmParams::zeros(7, 3);
        let n: usize = p.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(n, LstmParams::count_for(7, 3));
    }
}
