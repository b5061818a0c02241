use super::adamw::Param;
use crate::error::Result;

/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries_checked: usize,
}

/// One compared gradient entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradEntry {
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.numeric.abs().max(1e-8)
    }
}

/// Finite-difference stencil.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(θ+ε) − f(θ−ε)) / 2ε`, error O(ε²).
    Central2,
    /// `(f(θ−2ε) − 8f(θ−ε) + 8f(θ+ε) − f(θ+2ε)) / 12ε`, error O(ε⁴).
    Central4,
}

/// Analytic vs central-difference gradient for every entry of every trainable
/// parameter (every `stride`-th entry when `stride > 1`).
///
/// `loss_fn(params, want_grad)` returns the loss and, when asked, one gradient
/// per parameter in the same order.
pub fn finite_diff_entries<F>(params: &mut [Param<f64>], loss_fn: F, eps: f64, stride: usize) -> Result<Vec<GradEntry>>
where
    F: FnMut(&[Param<f64>], bool) -> Result<(f64, Vec<Option<Vec<f64>>>)>,
{
    finite_diff_entries_with(params, loss_fn, eps, stride, Stencil::Central2)
}

pub fn finite_diff_entries_with<F>(
    params: &mut [Param<f64>],
    mut loss_fn: F,
    eps: f64,
    stride: usize,
    stencil: Stencil,
) -> Result<Vec<GradEntry>>
where
    F: FnMut(&[Param<f64>], bool) -> Result<(f64, Vec<Option<Vec<f64>>>)>,
{
    let (_, analytic) = loss_fn(params, true)?;
    let mut entries = Vec::new();
    let mut at = |params: &mut [Param<f64>], pi: usize, j: usize, x: f64| -> Result<f64> {
        params[pi].tensor.data[j] = x;
        Ok(loss_fn(params, false)?.0)
    };
    for pi in 0..params.len() {
        if !params[pi].trainable {
            continue;
        }
        for j in (0..params[pi].tensor.len()).step_by(stride.max(1)) {
            let orig = params[pi].tensor.data[j];
            let numeric = match stencil {
                Stencil::Central2 => (at(params, pi, j, orig + eps)? - at(params, pi, j, orig - eps)?) / (2.0 * eps),
                Stencil::Central4 => {
                    let p1 = at(params, pi, j, orig + eps)?;
                    let m1 = at(params, pi, j, orig - eps)?;
                    let p2 = at(params, pi, j, orig + 2.0 * eps)?;
                    let m2 = at(params, pi, j, orig - 2.0 * eps)?;
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps)
                }
            };
            params[pi].tensor.data[j] = orig;
            entries.push(GradEntry {
                param: pi,
                index: j,
                analytic: analytic.get(pi).and_then(Option::as_ref).map_or(0.0, |g| g[j]),
                numeric,
            });
        }
    }
    Ok(entries)
}

/// Central differences `(f(θ+ε) − f(θ−ε)) / 2ε` against analytic gradients;
/// reports the largest `|analytic − fd| / max(|fd|, 1e-8)`.
pub fn finite_diff_check<F>(params: &mut [Param<f64>], loss_fn: F, eps: f64, stride: usize) -> Result<GradCheckReport>
where
    F: FnMut(&[Param<f64>], bool) -> Result<(f64, Vec<Option<Vec<f64>>>)>,
{
    finite_diff_check_with(params, loss_fn, eps, stride, Stencil::Central2)
}

pub fn finite_diff_check_with<F>(params: &mut [Param<f64>], loss_fn: F, eps: f64, stride: usize, stencil: Stencil) -> Result<GradCheckReport>
where
    F: FnMut(&[Param<f64>], bool) -> Result<(f64, Vec<Option<Vec<f64>>>)>,
{
    let entries = finite_diff_entries_with(params, loss_fn, eps, stride, stencil)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        entries_checked: entries.len(),
    };
    for e in &entries {
        let rel = e.relative_error();
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_param = params[e.param].name.clone();
            report.worst_index = e.index;
            report.worst_analytic = e.analytic;
            report.worst_numeric = e.numeric;
        }
    }
    Ok(report)
}
