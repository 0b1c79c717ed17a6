//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::params::{Graph, ParameterSet};
use crate::numerics::tape::Var;
use crate::scalar::Scalar;

/// Denominator floor for the relative error, so entries whose true gradient is
/// zero are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of parameter elements compared.
    pub checked: usize,
}

fn eval<T: Scalar, F>(params: &ParameterSet<T>, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    let mut g = Graph::inference(params);
    let loss = loss_fn(&mut g)?;
    let value = g.value(loss).get(0, 0).as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {value}")));
    }
    Ok(value)
}

/// Compares tape gradients with central differences `(f(x+h) − f(x−h)) / 2h`
/// for every element of every non-frozen parameter and returns the worst
/// relative error `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn grad_check<T: Scalar, F>(params: &ParameterSet<T>, h: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-6, 1e-3]")));
    }
    let analytic = {
        let mut g = Graph::new(params);
        let loss = loss_fn(&mut g)?;
        let value = g.value(loss).get(0, 0).as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {value}")));
        }
        g.param_grads(loss)?
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = params.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        for i in 0..params.value(id).len() {
            let original = params.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = original + T::lit(h);
            let plus = eval(&work, &loss_fn)?;
            work.value_mut(id).data_mut()[i] = original - T::lit(h);
            let minus = eval(&work, &loss_fn)?;
            work.value_mut(id).data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i].as_f64());
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = params.get(id).name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
