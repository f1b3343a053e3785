//! Differentiable-computation verification: central finite differences
//! against the analytic gradients produced by the tape.

pub mod rng;
pub mod tape;

use crate::error::{Result, SeerError};
use crate::params::{param_layout, read_param, write_param, Gradients, ParamTensors};

/// Outcome of checking the gradient of one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub param: String,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Compare analytic gradients against central finite differences for every
/// scalar in `params`.
///
/// `eval` must return the loss value together with its analytic gradients
/// at the supplied parameter point; it is re-invoked at perturbed points
/// (only the loss is used there). Perturbations are restored before
/// returning. The relative error denominator is
/// `max(1, |analytic|, |numeric|)`.
pub fn grad_check<P, F>(
    params: &mut P,
    mut eval: F,
    epsilon: f64,
    tol: f64,
) -> Result<Vec<GradCheckReport>>
where
    P: ParamTensors + ?Sized,
    F: FnMut(&P) -> Result<(f64, Gradients)>,
{
    if epsilon <= 0.0 {
        return Err(SeerError::Config(format!(
            "finite-difference step must be positive, got {epsilon}"
        )));
    }
    let (base, analytic) = eval(params)?;
    if !base.is_finite() {
        return Err(SeerError::NonFinite("loss at base point".to_string()));
    }

    let mut reports = Vec::new();
    for (name, count) in param_layout(params) {
        let mut max_rel = 0.0_f64;
        for flat in 0..count {
            let original = read_param(params, &name, flat);

            write_param(params, &name, flat, original + epsilon);
            let (plus, _) = eval(params)?;
            write_param(params, &name, flat, original - epsilon);
            let (minus, _) = eval(params)?;
            write_param(params, &name, flat, original);

            if !plus.is_finite() || !minus.is_finite() {
                return Err(SeerError::NonFinite(format!(
                    "loss while perturbing {name}[{flat}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic
                .get(&name)
                .map_or(0.0, |g| g[crate::params::flat_index(g.dim(), flat)]);
            let denom = 1.0_f64.max(a.abs()).max(numeric.abs());
            max_rel = max_rel.max(((a - numeric) / denom).abs());
        }
        reports.push(GradCheckReport {
            param: name,
            max_rel_error: max_rel,
            pass: max_rel <= tol,
        });
    }
    Ok(reports)
}

/// Render reports as `param,max_rel_error,pass` CSV.
pub fn reports_to_csv(reports: &[GradCheckReport]) -> String {
    let mut out = String::from("param,max_rel_error,pass\n");
    for r in reports {
        out.push_str(&format!("{},{},{}\n", r.param, r.max_rel_error, r.pass));
    }
    out
}
