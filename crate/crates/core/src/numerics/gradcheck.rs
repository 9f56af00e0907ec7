use super::{ParamId, ParamSet, Tape, TensorError, Var};

/// Below this magnitude gradients are compared absolutely.
const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub max_abs_gradient: f64,
}

/// Compares reverse-mode gradients of a scalar loss against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`.
///
/// `loss` builds the scalar on a fresh tape over the supplied parameters.
/// At most `per_tensor` entries of each tensor are probed, spread evenly.
pub fn grad_check<F>(
    params: &ParamSet,
    epsilon: f64,
    per_tensor: usize,
    loss: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, TensorError>,
{
    let grads = {
        let mut tape = Tape::new(params);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };
    let eval = |p: &ParamSet| -> Result<f64, TensorError> {
        let mut tape = Tape::new(p);
        let l = loss(&mut tape)?;
        Ok(tape.value(l).data()[0])
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
        max_abs_gradient: 0.0,
    };
    let mut probe = params.clone();
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let len = params.get(id).len();
        let analytic = grads.param_or_zeros(id, len);
        let stride = (len / per_tensor.max(1)).max(1);
        for j in (0..len).step_by(stride).take(per_tensor) {
            let original = params.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = original + epsilon;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = original - epsilon;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(analytic[j], numeric);
            report.checked += 1;
            report.max_abs_gradient = report.max_abs_gradient.max(analytic[j].abs());
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((params.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}
