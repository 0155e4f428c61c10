use crate::error::{Error, Result};

use super::{ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
}

/// Denominator floor of the relative error.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients against the fourth-order central
/// difference `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
///
/// `loss_fn` builds a scalar loss on a fresh tape from the bound parameter
/// leaves (in store order). The relative error of each scalar parameter is
/// `|analytic − numeric| / max(GRADIENT_FLOOR, |analytic| + |numeric|)`; the report
/// holds the maximum.
pub fn finite_difference_check<F>(
    params: &ParamStore,
    step: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {step}"
        )));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = tape.bind(store);
        let loss = loss_fn(&mut tape, bound.vars())?;
        let v = tape.scalar(loss)?;
        if !v.is_finite() {
            return Err(Error::NonFinite("loss at perturbed point".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let loss = loss_fn(&mut tape, bound.vars())?;
    let analytic = tape.backward(loss)?;

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
    };
    for p in 0..params.len() {
        for k in 0..params.value(p).len() {
            let orig = params.value(p).data()[k];
            let mut at = |offset: f64| -> Result<f64> {
                work.value_mut(p).data_mut()[k] = orig + offset;
                eval(&work)
            };
            let (up2, up, down, down2) = (at(2.0 * step)?, at(step)?, at(-step)?, at(-2.0 * step)?);
            work.value_mut(p).data_mut()[k] = orig;

            let numeric = (-up2 + 8.0 * up - 8.0 * down + down2) / (12.0 * step);
            let a = analytic.get(p).data()[k];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(GRADIENT_FLOOR);
            if err > report.max_relative_error || report.worst_parameter.is_empty() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst_parameter = format!("{}[{k}]", params.name(p));
            }
        }
    }
    Ok(report)
}
