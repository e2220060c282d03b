//! Central finite differences against reverse-mode gradients.
//!
//! Only forward evaluations are used for the numeric side, so the check is
//! independent of every backward rule on the tape.

use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Step and denominator floor for [`check_params`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Gradients smaller than this in magnitude are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares d(loss)/d(param) for every scalar of every parameter.
pub fn check_params<L>(
    params: &ParamStore<f64>,
    loss: L,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = loss(&mut tape, &bound)?;
    tape.backward(out)?;
    let analytic = params.grads(&tape, &bound);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let o = loss(&mut t, &b)?;
        Ok(t.value(o)[0])
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
    for p in 0..params.len() {
        for i in 0..params.get(p).value.len() {
            let orig = params.get(p).value[i];
            probe.get_mut(p).value[i] = orig + opts.step;
            let up = eval(&probe)?;
            probe.get_mut(p).value[i] = orig - opts.step;
            let down = eval(&probe)?;
            probe.get_mut(p).value[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[p][i];
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = params.get(p).name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
