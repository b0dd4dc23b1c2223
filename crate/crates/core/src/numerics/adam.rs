use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Applies one update to `params`, which may be split across several
    /// slices laid out back to back in the moment buffers.
    pub fn step_slices(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        context: &str,
    ) -> Result<()> {
        let total: usize = params.iter().map(|p| p.len()).sum();
        let gtotal: usize = grads.iter().map(|g| g.len()).sum();
        if params.len() != grads.len() || total != gtotal || total != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{total} params, {gtotal} grads, {} moments", self.m.len()),
            ));
        }
        if let Some(bad) = grads
            .iter()
            .flat_map(|g| g.iter())
            .position(|g| !g.is_finite())
        {
            return Err(Error::Training {
                context: format!("{context}, adam step {}", self.step + 1),
                detail: format!("non-finite gradient at flat index {bad}"),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut offset = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            for (((w, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            offset += p.len();
        }
        Ok(())
    }
}

/// Single-matrix Adam update.
pub fn adam_step(params: &mut Mat, grads: &Mat, state: &mut AdamState) -> Result<()> {
    if params.shape() != grads.shape() {
        return Err(Error::shape(
            "adam_step",
            format!("{:?} vs {:?}", params.shape(), grads.shape()),
        ));
    }
    state.step_slices(
        &mut [params.as_mut_slice()],
        &[grads.as_slice()],
        "adam_step",
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Mat::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(3, 0.001);
        for _ in 0..5 {
            adam_step(&mut p, &Mat::zeros(1, 3), &mut st).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = Mat::zeros(1, 1);
        let mut st = AdamState::new(1, 0.001);
        adam_step(&mut p, &Mat::filled(1, 1, 1.0), &mut st).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction.
        let expected = -0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p.get(0, 0) - expected).abs() < 1e-18);
        assert!((p.get(0, 0) + 0.000999999990).abs() < 1e-14);
    }

    #[test]
    fn momentum_persists() {
        let mut a = Mat::zeros(1, 1);
        let mut b = Mat::zeros(1, 1);
        let mut sa = AdamState::new(1, 0.001);
        let mut sb = AdamState::new(1, 0.001);
        let one = Mat::filled(1, 1, 1.0);
        adam_step(&mut a, &one, &mut sa).unwrap();
        adam_step(&mut a, &one, &mut sa).unwrap();
        adam_step(&mut b, &one, &mut sb).unwrap();
        adam_step(&mut b, &Mat::zeros(1, 1), &mut sb).unwrap();
        assert_ne!(a.get(0, 0), b.get(0, 0));
        // The zero-gradient second step still moves the parameter.
        assert!(b.get(0, 0) < -0.001);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = Mat::zeros(1, 2);
        let mut st = AdamState::new(2, 0.001);
        let g = Mat::from_vec(1, 2, vec![0.0, f64::NAN]).unwrap();
        let err = adam_step(&mut p, &g, &mut st).unwrap_err();
        assert!(matches!(err, Error::Training { .. }));
        assert_eq!(st.step, 0);
    }
}
