//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::graph::Gradients;
use crate::numerics::registry::{ParamId, ParamRegistry};
use crate::numerics::scalar::Scalar;

/// Outcome of one finite-difference sweep.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Elements compared (params absent from the graph are skipped).
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Relative error with a floor so near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare `analytic` gradients against central differences of `loss`.
///
/// `loss` must be deterministic: it is re-evaluated with each parameter
/// element nudged by roughly `h` either way (the realized step is measured
/// after dtype rounding, so f32 parameters stay checkable). The registry is
/// restored bit-exactly afterwards.
pub fn check_against_fd<S: Scalar>(
    registry: &mut ParamRegistry<S>,
    mut loss: impl FnMut(&ParamRegistry<S>) -> Result<f64>,
    analytic: &Gradients<S>,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    if analytic.len() != registry.len() {
        return Err(Error::Usage(format!(
            "analytic gradients cover {} params, registry has {}",
            analytic.len(),
            registry.len()
        )));
    }
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for i in 0..registry.len() {
        let Some(grad) = analytic[i].as_ref() else {
            continue;
        };
        let numel = registry.value(ParamId(i)).numel();
        if grad.numel() != numel {
            return Err(Error::Shape(format!(
                "gradient for {:?} has {} elements, parameter has {numel}",
                registry.get(ParamId(i)).name,
                grad.numel()
            )));
        }
        for e in 0..numel {
            let original = registry.value(ParamId(i)).data()[e];
            let base = original.to_f64();

            let plus = S::from_f64(base + h);
            registry.get_mut(ParamId(i)).value.data_mut()[e] = plus;
            let f_plus = loss(registry)?;

            let minus = S::from_f64(base - h);
            registry.get_mut(ParamId(i)).value.data_mut()[e] = minus;
            let f_minus = loss(registry)?;

            registry.get_mut(ParamId(i)).value.data_mut()[e] = original;

            let span = plus.to_f64() - minus.to_f64();
            if span == 0.0 {
                return Err(Error::Usage(format!(
                    "step {h} vanishes at dtype precision for parameter {:?}",
                    registry.get(ParamId(i)).name
                )));
            }
            let numeric = (f_plus - f_minus) / span;
            let a = grad.data()[e].to_f64();
            let err = rel_err(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = registry.get(ParamId(i)).name.clone();
                report.worst_index = e;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
