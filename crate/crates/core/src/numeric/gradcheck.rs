use super::{GradMap, ParamAccess, ParamName, Scalar};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport<S> {
    pub max_relative_error: S,
    pub worst_param: Option<(ParamName, usize)>,
    pub coordinates_checked: usize,
}

/// Compares the gradients returned by `loss_fn(params, true)` against
/// central finite differences of `loss_fn(params, false)` for every
/// coordinate of every parameter listed in the gradient map.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`; the floor keeps
/// coordinates whose true gradient is ~0 from amplifying rounding noise.
pub fn grad_check<S, P, F>(params: &mut P, epsilon: S, mut loss_fn: F) -> Result<GradCheckReport<S>>
where
    S: Scalar,
    P: ParamAccess<S> + ?Sized,
    F: FnMut(&P, bool) -> Result<(S, GradMap<S>)>,
{
    if !(epsilon >= S::lit(1e-6) && epsilon <= S::lit(1e-4)) {
        return Err(Error::Argument(format!(
            "finite-difference step {epsilon} outside [1e-6, 1e-4]"
        )));
    }
    let (base, grads) = loss_fn(params, true)?;
    if !base.is_finite() {
        return Err(Error::Numerical("non-finite loss".into()));
    }
    let floor = S::lit(1e-6);
    let two = S::lit(2.0);
    let mut report = GradCheckReport {
        max_relative_error: S::zero(),
        worst_param: None,
        coordinates_checked: 0,
    };
    for name in params.param_names() {
        let Some(analytic) = grads.get(name) else { continue };
        let n = analytic.len();
        for i in 0..n {
            let original = params.param(name).expect("listed parameter").data()[i];
            let p = params.param_mut(name).expect("listed parameter");
            p.data_mut()[i] = original + epsilon;
            let (up, _) = loss_fn(params, false)?;
            params.param_mut(name).expect("listed parameter").data_mut()[i] = original - epsilon;
            let (down, _) = loss_fn(params, false)?;
            params.param_mut(name).expect("listed parameter").data_mut()[i] = original;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss perturbing {name}[{i}]")));
            }
            let numeric = (up - down) / (two * epsilon);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            report.coordinates_checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_param = Some((name, i));
            }
        }
    }
    Ok(report)
}
