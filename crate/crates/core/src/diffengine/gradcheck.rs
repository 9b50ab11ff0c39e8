use super::{ParamStore, Trace, Var};
use crate::error::{Error, Result};

/// Worst disagreement between reverse-mode and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the trace gradient of `f` with central differences of step `step`
/// for every scalar in `params`. Relative error is
/// `|analytic − numeric| / max(1e-8, |numeric|)`.
pub fn grad_check<F>(f: F, params: &ParamStore, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Trace, &ParamStore) -> Result<Var>,
{
    let mut trace = Trace::new();
    let loss = f(&mut trace, params)?;
    let grads = trace.backward(loss, params)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Trace::new();
        let l = f(&mut t, store)?;
        let v = t.value(l).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok(v)
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let analytic = grads.get(&name).expect("gradient for every parameter").data().to_vec();
        let len = analytic.len();
        for idx in 0..len {
            let original = params.get(&name).unwrap().data()[idx];
            let mut shifted = params.get(&name).unwrap().clone();
            shifted.data_mut()[idx] = original + step;
            probe.set(&name, shifted.clone())?;
            let plus = eval(&probe)?;
            shifted.data_mut()[idx] = original - step;
            probe.set(&name, shifted.clone())?;
            let minus = eval(&probe)?;
            shifted.data_mut()[idx] = original;
            probe.set(&name, shifted)?;

            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic[idx] - numeric).abs() / numeric.abs().max(1e-8);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = analytic[idx];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
