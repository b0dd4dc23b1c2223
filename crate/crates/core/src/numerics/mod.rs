//! Dense matrices, seeded randomness, the Adam optimizer and the
//! central-difference gradient oracle.

mod adam;
mod mat;
mod rng;

pub use adam::{adam_step, AdamState};
pub(crate) use mat::{gemm, Operand};
pub use mat::{sigmoid, sigmoid_mat, tanh, tanh_mat, Mat};
pub use rng::Rng;

use crate::error::{Error, Result};

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`, so no rescaling is needed at inference.
pub fn dropout_mask(rng: &mut Rng, len: usize, rate: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect())
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step {h} must be > 0"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Oracle { index: i });
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative error with denominator `max(1, |a|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_all_ones() {
        let mut rng = Rng::new(0);
        assert_eq!(dropout_mask(&mut rng, 17, 0.0).unwrap(), vec![1.0; 17]);
    }

    #[test]
    fn mask_mean_is_unbiased() {
        let mut rng = Rng::new(123);
        let mask = dropout_mask(&mut rng, 1_000_000, 0.4).unwrap();
        let mean = mask.iter().sum::<f64>() / mask.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(mask
            .iter()
            .all(|&m| m == 0.0 || (m - 1.0 / 0.6).abs() < 1e-15));
    }

    #[test]
    fn mask_is_deterministic() {
        let a = dropout_mask(&mut Rng::new(8), 64, 0.4).unwrap();
        let b = dropout_mask(&mut Rng::new(8), 64, 0.4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rate_out_of_range() {
        let mut rng = Rng::new(0);
        assert!(dropout_mask(&mut rng, 4, 1.0).is_err());
        assert!(dropout_mask(&mut rng, 4, -0.1).is_err());
    }

    #[test]
    fn fd_square() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn fd_constant_and_sum() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let g = finite_diff_grad(|x| x.iter().sum(), &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn fd_non_finite() {
        let err = finite_diff_grad(
            |x| if x[1] > 0.0 { f64::NAN } else { 0.0 },
            &[0.0, 0.0],
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Oracle { index: 1 }));
        assert!(finite_diff_grad(|x| x[0], &[0.0], 0.0).is_err());
    }
}
