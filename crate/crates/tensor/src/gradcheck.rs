use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Absolute floor in the relative-error denominator.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / (|analytic_i| + |numeric_i| + floor)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// First element where either side was not finite.
    pub non_finite: Option<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_error < tol
    }
}

/// Checks the gradient of a scalar function `f` at `x` against central
/// differences with step `h`. Always runs in `f64`.
///
/// Inputs sitting exactly on a ReLU kink should be perturbed by the caller
/// beforehand; the difference quotient is not meaningful there.
pub fn grad_check<F, E>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |input: &Tensor<f64>| -> Result<f64, E> {
        let mut tape = Tape::new();
        let v = tape.constant(input.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.wrt(xv).to_f64_vec();

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        non_finite: None,
        analytic,
        numeric,
    };
    for (i, (&a, &n)) in report.analytic.iter().zip(&report.numeric).enumerate() {
        if !a.is_finite() || !n.is_finite() {
            report.non_finite.get_or_insert(i);
            continue;
        }
        let rel = (a - n).abs() / (a.abs() + n.abs() + GRAD_CHECK_FLOOR);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}
