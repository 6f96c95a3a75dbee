//! Central-finite-difference verification of backward rules.

use super::{Tape, Tensor, TensorError, TensorId};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub passed: bool,
    pub tol: f64,
    pub max_rel_err: f64,
    /// `(input index, coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    fn empty(tol: f64) -> Self {
        GradCheckReport {
            passed: true,
            tol,
            max_rel_err: 0.0,
            worst: None,
            coords_checked: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Negative control: offset every analytic gradient before comparing,
    /// emulating a broken backward rule. The check must then fail.
    pub corrupt_analytic: bool,
}

impl GradCheckOptions {
    pub fn new(step: f64, tol: f64) -> Self {
        GradCheckOptions { step, tol, corrupt_analytic: false }
    }
}

/// Relative error with a floored denominator so near-zero pairs compare
/// sanely: `|a−b| / max(|a|, |b|, 1e-8)`.
pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-8))
}

/// Check the backward pass of a scalar-valued tensor function at `x`.
///
/// `f` rebuilds the computation on a fresh tape each call; the analytic
/// gradient from one `backward` run is compared coordinate by coordinate
/// against `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId, TensorError>,
{
    grad_check_multi(
        |tape, ids| f(tape, ids[0]),
        std::slice::from_ref(x),
        GradCheckOptions::new(step, tol),
    )
}

/// Multi-input variant of [`grad_check`]; checks every coordinate of every
/// input tensor that has `requires_grad` set.
pub fn grad_check_multi<F>(
    f: F,
    inputs: &[Tensor],
    opts: GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let eval = |points: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = points.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        let v = tape.values(loss);
        if v.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: tape.dims(loss).to_vec(),
            });
        }
        if !v[0].is_finite() {
            return Err(TensorError::NonFinite { context: "grad_check objective" });
        }
        Ok(v[0])
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    if !tape.values(loss)[0].is_finite() {
        return Err(TensorError::NonFinite { context: "grad_check objective" });
    }
    tape.backward(loss)?;

    let mut report = GradCheckReport::empty(opts.tol);
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let analytic: Vec<f64> = match tape.grad(ids[ti]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; input.numel()],
        };
        for (ci, &a) in analytic.iter().enumerate() {
            let orig = work[ti].values()[ci];
            work[ti].values_mut()[ci] = orig + opts.step;
            let plus = eval(&work)?;
            work[ti].values_mut()[ci] = orig - opts.step;
            let minus = eval(&work)?;
            work[ti].values_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = if opts.corrupt_analytic { a + 0.5 } else { a };
            let err = rel_err(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ti, ci));
            }
        }
    }
    report.passed = report.max_rel_err < opts.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        // f = Σ xᵢ²
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad();
        let report = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.sum_all(sq))
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        let x = Tensor::new(vec![2], vec![0.5, -0.25]).unwrap().with_grad();
        let mut opts = GradCheckOptions::new(1e-5, 1e-4);
        opts.corrupt_analytic = true;
        let report = grad_check_multi(
            |tape, ids| {
                let s = tape.scale(ids[0], 2.0);
                Ok(tape.sum_all(s))
            },
            std::slice::from_ref(&x),
            opts,
        )
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::new(vec![1], vec![1e308]).unwrap().with_grad();
        let err = grad_check(
            |tape, x| {
                let doubled = tape.scale(x, 10.0); // overflows to inf
                Ok(tape.sum_all(doubled))
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }
}
