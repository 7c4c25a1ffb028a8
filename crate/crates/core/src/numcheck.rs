//! Numerical comparison and finite-difference utilities.
//!
//! These are the independent oracles the test suites check analytic
//! gradients against; they deliberately share no code with the tape's
//! backward pass.

use crate::error::Result;
use crate::scalar::Real;
use crate::tensor::TensorBase;

/// Central-difference gradient of a scalar function of several tensors:
/// perturbs one element at a time by `±h` and differences the results.
pub fn central_diff_gradient<F, Func>(
    f: &Func,
    at: &[TensorBase<F>],
    h: F,
) -> Result<Vec<TensorBase<F>>>
where
    F: Real,
    Func: Fn(&[TensorBase<F>]) -> Result<F>,
{
    let two_h = h + h;
    let mut grads = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let mut grad = TensorBase::zeros(at[i].shape().to_vec());
        for j in 0..at[i].numel() {
            let mut plus = at.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = at.to_vec();
            minus[i].data_mut()[j] = minus[i].data()[j] - h;
            let fp = f(&plus)?;
            let fm = f(&minus)?;
            grad.data_mut()[j] = (fp - fm) / two_h;
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// `|a - b| <= atol + rtol * max(|a|, |b|)`.
pub fn within<F: Real>(a: F, b: F, rtol: F, atol: F) -> bool {
    let diff = (a - b).abs();
    diff <= atol + rtol * a.abs().max(b.abs())
}

/// Relative error `|a - b| / max(|a|, |b|)`, zero when both are zero.
pub fn rel_err<F: Real>(a: F, b: F) -> F {
    let scale = a.abs().max(b.abs());
    if scale == F::zero() {
        F::zero()
    } else {
        (a - b).abs() / scale
    }
}

/// Panicking form of [`within`] for tests.
#[track_caller]
pub fn assert_close<F: Real>(a: F, b: F, rtol: F, atol: F) {
    assert!(
        within(a, b, rtol, atol),
        "values differ: {a} vs {b} (rel err {})",
        rel_err(a, b)
    );
}

/// Elementwise [`within`] over two same-shaped tensors.
pub fn tensors_within<F: Real>(
    a: &TensorBase<F>,
    b: &TensorBase<F>,
    rtol: F,
    atol: F,
) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(&x, &y)| within(x, y, rtol, atol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_recovers_a_quadratic_gradient() {
        // f(x) = sum(x^2): gradient 2x.
        let f = |xs: &[TensorBase<f64>]| -> Result<f64> {
            Ok(xs[0].data().iter().map(|x| x * x).sum())
        };
        let at = TensorBase::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = central_diff_gradient(&f, &[at], 1e-6).unwrap();
        for (got, want) in g[0].data().iter().zip(&[2.0, -4.0, 1.0]) {
            assert_close(*got, *want, 1e-8, 1e-10);
        }
    }

    #[test]
    fn within_handles_zero_and_sign() {
        assert!(within(0.0, 0.0, 1e-9, 0.0));
        assert!(within(1.0, 1.0 + 5e-10, 1e-9, 0.0));
        assert!(!within(1.0, -1.0, 1e-9, 1e-9));
    }

    #[test]
    fn rel_err_is_symmetric_and_scale_free() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert_close(rel_err(1e-8, 2e-8), 0.5, 1e-12, 0.0);
        assert_eq!(rel_err(2.0, 1.0), rel_err(1.0, 2.0));
    }
}
