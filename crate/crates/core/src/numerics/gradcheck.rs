use super::{Gradient, ParamSet};
use crate::error::{Error, Result};

/// Worst relative error seen for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Relative-error floor: entries whose magnitudes are both below this are compared absolutely.
/// Structurally zero gradients (attention key biases, for one) leave only rounding noise of
/// order 1e-10 in the central difference, so the floor sits well above that.
const REL_FLOOR: f64 = 1e-5;

/// Compares `analytic` against central differences of `loss` at step `h`.
///
/// Relative error per entry is `|a − n| / max(|a|, |n|, 1e-5)`.
pub fn finite_diff_check<F>(params: &ParamSet, analytic: &Gradient, mut loss: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument("finite difference step must be positive".into()));
    }
    if !analytic.is_congruent(params) {
        return Err(Error::Shape("analytic gradient does not match parameters".into()));
    }
    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for id in 0..params.len() {
        let mut worst = (0.0f64, 0usize);
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = loss(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = loss(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > worst.0 {
                worst = (rel, i);
            }
        }
        report.push(ParamCheck {
            name: params.name(id).to_string(),
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    let passed = report.iter().all(|p| p.max_rel_error < tol);
    Ok(GradCheckReport {
        params: report,
        tolerance: tol,
        passed,
    })
}
