//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the scalar loss, so it shares nothing
//! with the reverse pass it checks.

use ndarray::Array2;

use crate::params::{ParamId, ParamStore};
use crate::tape::{Matrix, Tape, Var};

/// Gradient-norm floor below which errors are effectively absolute.
pub const NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(parameter name, relative error)` per checked tensor.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    /// Norm of the full analytic gradient; a zero here means nothing was tested.
    pub analytic_norm: f64,
}

/// `||a - n|| / max(||a|| + ||n||, NORM_FLOOR)`.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff = (analytic - numeric).mapv(|v| v * v).sum().sqrt();
    let na = analytic.mapv(|v| v * v).sum().sqrt();
    let nn = numeric.mapv(|v| v * v).sum().sqrt();
    diff / (na + nn).max(NORM_FLOOR)
}

/// `(f(x + eps*d) - f(x - eps*d)) / (2 eps)`.
pub fn directional_derivative(f: impl Fn(&Matrix) -> f64, x: &Matrix, dir: &Matrix, eps: f64) -> f64 {
    let xp = x + &(dir * eps);
    let xm = x - &(dir * eps);
    (f(&xp) - f(&xm)) / (2.0 * eps)
}

/// Central-difference gradient of `f` with respect to one parameter tensor.
pub fn numeric_param_grad(store: &ParamStore, id: ParamId, eps: f64, f: impl Fn(&ParamStore) -> f64) -> Matrix {
    let mut work = store.clone();
    let base = store.value(id).clone();
    let mut out = Array2::zeros(base.dim());
    for ((i, j), _) in base.indexed_iter() {
        let mut plus = base.clone();
        plus[[i, j]] += eps;
        work.set(id, plus);
        let fp = f(&work);
        let mut minus = base.clone();
        minus[[i, j]] -= eps;
        work.set(id, minus);
        let fm = f(&work);
        out[[i, j]] = (fp - fm) / (2.0 * eps);
    }
    out
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences, for each parameter in `ids`.
///
/// `build` must be deterministic: any sampling noise has to be reseeded
/// identically on every call.
pub fn check_params(
    store: &ParamStore,
    ids: &[ParamId],
    eps: f64,
    build: impl Fn(&ParamStore) -> (Tape, Var),
) -> GradCheckReport {
    let (tape, root) = build(store);
    let grads = tape.backward(root);
    let mut per_param = Vec::with_capacity(ids.len());
    let mut max_rel = 0.0f64;
    let mut norm2 = 0.0;
    for &id in ids {
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(store.value(id).dim()));
        norm2 += analytic.mapv(|v| v * v).sum();
        let numeric = numeric_param_grad(store, id, eps, |s| {
            let (t, r) = build(s);
            t.scalar(r)
        });
        let rel = relative_error(&analytic, &numeric);
        max_rel = max_rel.max(rel);
        per_param.push((store.name(id).to_string(), rel));
    }
    GradCheckReport { per_param, max_rel_error: max_rel, analytic_norm: norm2.sqrt() }
}
