// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central-difference gradient oracle.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default step for [`finite_diff`].
pub const DEFAULT_STEP: f64 = 1e-5;

/// Estimates `∂f/∂x` elementwise as `(f(x+he) − f(x−he)) / 2h`.
pub fn finite_diff<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidInput(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for k in 0..x.len() {
        let x0 = x.data()[k];
        probe.data_mut()[k] = x0 + h;
        let up = f(&probe)?;
        probe.data_mut()[k] = x0 - h;
        let down = f(&probe)?;
        probe.data_mut()[k] = x0;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!(
                "non-finite function value while probing element {k}"
            )));
        }
        out.data_mut()[k] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 5.0]]);
        let g = finite_diff(|t| Ok(t.sum()), &x, DEFAULT_STEP).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff(|t| Ok(t.data()[0].powi(2)), &x, DEFAULT_STEP).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_component_matches_jacobian_row() {
        // ∂s_j/∂x_k = s_j (δ_jk − s_k)
        let x = Tensor::row_vector(vec![0.2, -0.4, 1.1]);
        let s = x.softmax_rows().unwrap();
        let j = 1;
        let g = finite_diff(|t| Ok(t.softmax_rows()?.data()[j]), &x, DEFAULT_STEP).unwrap();
        for k in 0..3 {
            let delta = if j == k { 1.0 } else { 0.0 };
            let exact = s.data()[j] * (delta - s.data()[k]);
            assert!((g.data()[k] - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_value_is_an_oracle_failure() {
        let x = Tensor::scalar(0.0);
        let err = finite_diff(|t| Ok(1.0 / t.data()[0].abs().min(1e-300) * f64::INFINITY), &x, 1e-5);
        assert!(matches!(err, Err(Error::Oracle(_))));
    }
}
