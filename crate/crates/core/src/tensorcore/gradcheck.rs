//! Central finite-difference oracle for analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Result};

/// Gradient components smaller than this are compared in absolute terms.
/// Central differences in f64 with a 1e-5 step carry rounding noise near
/// 1e-11 for unit-sized losses, so tinier components cannot be resolved.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic - numeric| / max(REL_FLOOR, |numeric|)
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbed loss was not finite.
    pub skipped_non_finite: usize,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

/// Compare the analytic gradient of `build` against central differences.
///
/// `build` records a loss on the graph given one `Var` per entry of `params`
/// (registered as trainable leaves, in order). Tensors it creates itself are
/// frozen and never checked. `max_coords` caps the coordinates checked per
/// parameter; when set, coordinates are taken at an even stride.
pub fn check_gradients<F>(
    build: F,
    params: &[Tensor],
    step: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid!(
            "finite-difference step must be positive, got {step}"
        ));
    }
    if params.iter().any(|p| !p.all_finite()) {
        return Err(invalid!("parameters must be finite"));
    }

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_non_finite: 0,
        worst: None,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[pi].shape());
        let n = params[pi].len();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                log::warn!("gradcheck: non-finite loss around param {pi} coord {j}");
                report.skipped_non_finite += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, j));
            }
        }
    }
    Ok(report)
}
