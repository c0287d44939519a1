//! Gradient verification by central finite differences.
//!
//! The harness evaluates a scalar-valued 64-bit function twice to rule out
//! hidden nondeterminism, computes the tape gradient once, then perturbs each
//! coordinate by ±ε and compares. Relative error uses max(|analytic|, |fd|)
//! as the denominator with an absolute floor so near-zero coordinates don't
//! blow up the ratio.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct GradCheckReport {
    /// Worst relative error over all coordinates.
    pub max_rel_error: f64,
    /// Coordinate index attaining it.
    pub worst_index: usize,
    /// Analytic and finite-difference values at the worst coordinate.
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Checks the gradient of `f` (value, gradient) against central differences.
///
/// `f` receives the point and must return the loss value together with the
/// gradient produced by a tape backward pass. The finite-difference probes
/// call `f` too but ignore the gradient it returns.
pub fn grad_check(
    f: &dyn Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
    point: &Tensor<f64>,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (value_a, grad) = f(point)?;
    let (value_b, _) = f(point)?;
    if value_a != value_b {
        return Err(Error::contract(format!(
            "grad_check: function is nondeterministic ({:e} vs {:e} at the same point)",
            value_a, value_b
        )));
    }
    if grad.shape() != point.shape() {
        return Err(Error::shape(
            "grad_check",
            &format!("{:?}", point.shape()),
            &format!("{:?}", grad.shape()),
        ));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        tolerance,
    };
    // Coordinates where both sides are this small are counted as agreeing;
    // dividing two rounding-error-sized numbers says nothing about the rule.
    let abs_floor = 1e-10;
    for idx in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[idx] += epsilon;
        let mut minus = point.clone();
        minus.data_mut()[idx] -= epsilon;
        let (vp, _) = f(&plus)?;
        let (vm, _) = f(&minus)?;
        let numeric = (vp - vm) / (2.0 * epsilon);
        let analytic = grad.data()[idx];
        if numeric.abs() < abs_floor && analytic.abs() < abs_floor {
            continue;
        }
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = idx;
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient_is_exact() {
        // f = 0.5‖x‖² has gradient x.
        let f = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let id = tape.param(x.clone());
            let sq = tape.mul(id, id)?;
            let s = tape.sum_all(sq);
            let loss = tape.mul_const(s, 0.5);
            tape.backward(loss)?;
            Ok((tape.value(loss).data()[0], tape.grad(id).unwrap().clone()))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[6], |_| rng.gen_range(-2.0..2.0));
        let report = grad_check(&f, &x, 1e-6, 1e-8).unwrap();
        assert!(report.passed(), "max rel error {:e}", report.max_rel_error);
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        // Returns the gradient of ‖x‖² but claims the loss is 0.5‖x‖²:
        // off by a factor of 2 everywhere.
        let f = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let id = tape.param(x.clone());
            let sq = tape.mul(id, id)?;
            let loss = tape.mul_const(sq, 0.5);
            let s = tape.sum_all(loss);
            tape.backward(s)?;
            let bad = tape.grad(id).unwrap().map(|g| g * 2.0);
            Ok((tape.value(s).data()[0], bad))
        };
        let x = Tensor::new(&[3], vec![1.0, -0.5, 2.0]).unwrap();
        let report = grad_check(&f, &x, 1e-6, 1e-4).unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let counter = Cell::new(0.0);
        let f = move |x: &Tensor<f64>| {
            counter.set(counter.get() + 1.0);
            Ok((x.sum() + counter.get(), Tensor::full(x.shape(), 1.0)))
        };
        let x = Tensor::new(&[2], vec![0.1, 0.2]).unwrap();
        let err = grad_check(&f, &x, 1e-6, 1e-4).unwrap_err();
        assert!(err.to_string().contains("nondeterministic"));
    }
}
