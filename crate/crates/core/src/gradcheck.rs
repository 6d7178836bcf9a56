//! Central finite-difference gradient checking against named parameters.
//!
//! Used by the gradient test suites; the finite-difference path only ever
//! evaluates the forward function, so it stays independent of the reverse
//! sweep it checks.

use crate::autodiff::Arr;
use crate::params::ParamStore;

/// Central finite differences of `f` with respect to every entry of the
/// named parameter tensor.
pub fn fd_param_gradient(
    f: &mut dyn FnMut(&ParamStore) -> f64,
    params: &ParamStore,
    name: &str,
    step: f64,
) -> Arr {
    let mut work = params.clone();
    let shape = params.get(name).raw_dim();
    let mut grad = Arr::zeros(shape.clone());
    for idx in ndarray::indices(shape) {
        let orig = params.get(name)[&idx];
        work.get_mut(name)[&idx] = orig + step;
        let fp = f(&work);
        work.get_mut(name)[&idx] = orig - step;
        let fm = f(&work);
        work.get_mut(name)[&idx] = orig;
        grad[&idx] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Per-tensor relative error `||a - b|| / max(||a||, ||b||, tiny)`.
pub fn relative_error(a: &Arr, b: &Arr) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let diff = (a - b).mapv(|x| x * x).sum().sqrt();
    let na = a.mapv(|x| x * x).sum().sqrt();
    let nb = b.mapv(|x| x * x).sum().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Check every parameter tensor of `params` against finite differences.
/// Returns `(name, relative_error)` for the worst tensor.
pub fn check_all_params(
    f: &mut dyn FnMut(&ParamStore) -> f64,
    analytic: &std::collections::BTreeMap<String, Arr>,
    params: &ParamStore,
    step: f64,
) -> (String, f64) {
    let mut worst = (String::new(), 0.0f64);
    for (name, grad) in analytic {
        let fd = fd_param_gradient(f, params, name, step);
        let rel = relative_error(grad, &fd);
        if rel > worst.1 {
            worst = (name.clone(), rel);
        }
    }
    worst
}
