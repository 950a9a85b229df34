use super::params::ParameterSet;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so that gradients that are
/// both essentially zero compare as equal.
pub const REL_FLOOR: f64 = 1e-7;

/// Per unit of loss magnitude, the smallest gradient central differences
/// at `FD_STEP` resolve: round-off in the loss is about `1e-16 · |L|`,
/// divided by `2 · FD_STEP` and kept 1e4 below the 1e-4 tolerance.
pub const FD_RESOLUTION: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Denominator floor used, `max(REL_FLOOR, FD_RESOLUTION · max(1, |L|))`.
    pub floor: f64,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, REL_FLOOR)
}

pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients against central differences over every
/// scalar of every non-frozen parameter.
///
/// `loss_and_grad` must compute the loss and accumulate gradients into the
/// set's (already zeroed) gradient buffers. Parameter values are restored
/// exactly after each probe.
pub fn grad_check<F>(params: &mut ParameterSet, mut loss_and_grad: F) -> GradCheckReport
where
    F: FnMut(&mut ParameterSet) -> f64,
{
    params.zero_grads();
    let loss = loss_and_grad(params);
    let floor = REL_FLOOR.max(FD_RESOLUTION * loss.abs().max(1.0));
    let analytic: Vec<Vec<f64>> = params.ids().map(|id| params.grad(id).data().to_vec()).collect();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, floor };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if params.is_frozen(id) {
            continue;
        }
        for j in 0..params.value(id).len() {
            let original = params.value(id).data()[j];
            params.value_mut(id).data_mut()[j] = original + FD_STEP;
            params.zero_grads();
            let plus = loss_and_grad(params);
            params.value_mut(id).data_mut()[j] = original - FD_STEP;
            params.zero_grads();
            let minus = loss_and_grad(params);
            params.value_mut(id).data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error_with_floor(analytic[id.index()][j], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((params.name(id).to_string(), j));
            }
        }
    }
    params.zero_grads();
    report
}
