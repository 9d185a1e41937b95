//! Central finite-difference certification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::Result;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const MAGNITUDE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub passed: bool,
    /// Coordinates compared.
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares the tape gradient of `f` at `at` against
/// `(f(x + h e_k) - f(x - h e_k)) / 2h` for every coordinate `k`.
pub fn fd_check<F>(f: F, at: &Tensor, step: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |x: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = f(&mut g, v)?;
        g.value(out).item()
    };
    let mut g = Graph::new();
    let x = g.leaf(at.clone(), true);
    let out = f(&mut g, x)?;
    let grads = g.backward(out)?;
    let zeros = Tensor::zeros(at.shape());
    let analytic = grads.wrt(x).unwrap_or(&zeros);

    let mut worst: f64 = 0.0;
    let mut probe = at.clone();
    for k in 0..at.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[k] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[k] = orig;
        worst = worst.max(rel_error(analytic.data()[k], (up - down) / (2.0 * step)));
    }
    Ok(FdReport { max_rel_error: worst, passed: worst < tol, checked: at.len() })
}

/// Same check for a loss built from a whole [`ParamSet`]. Every `stride`-th
/// coordinate of each parameter is probed (`stride = 1` checks all of them).
pub fn fd_check_params<F>(params: &ParamSet, f: F, step: f64, tol: f64, stride: usize) -> Result<FdReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    let mut analytic = params.clone();
    analytic.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, &analytic)?;
    g.backward_into(out, &mut analytic)?;

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, p)?;
        g.value(out).item()
    };
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for id in params.ids() {
        for k in (0..params.value(id).len()).step_by(stride.max(1)) {
            let orig = probe.value(id).data()[k];
            probe.get_mut(id).value.data_mut()[k] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig;
            worst = worst.max(rel_error(analytic.grad(id).data()[k], (up - down) / (2.0 * step)));
            checked += 1;
        }
    }
    Ok(FdReport { max_rel_error: worst, passed: worst < tol, checked })
}
