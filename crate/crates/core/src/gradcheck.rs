//! Central finite-difference gradient verification.
//!
//! The checker re-evaluates a caller-supplied scalar loss with each parameter
//! element perturbed by ±h and compares the quotient against the analytic
//! gradient stored on the parameters. The loss closure must be deterministic
//! (no dropout, fixed data), otherwise the quotients are meaningless.

use std::collections::BTreeMap;

use crate::params::ParamStore;

/// Finite-difference gradients for every element of every parameter.
pub fn finite_diff_grads(
    store: &mut ParamStore,
    mut eval: impl FnMut(&ParamStore) -> f64,
    h: f64,
) -> BTreeMap<String, Vec<f64>> {
    let names: Vec<String> = store.names().cloned().collect();
    let mut out = BTreeMap::new();
    for name in names {
        let n = store.get(&name).numel();
        let mut fd = vec![0.0; n];
        for i in 0..n {
            let orig = store.get(&name).data()[i];
            store.get_mut(&name).data_mut()[i] = orig + h;
            let up = eval(store);
            store.get_mut(&name).data_mut()[i] = orig - h;
            let down = eval(store);
            store.get_mut(&name).data_mut()[i] = orig;
            fd[i] = (up - down) / (2.0 * h);
        }
        out.insert(name, fd);
    }
    out
}

/// Outcome of comparing analytic gradients against finite differences.
#[derive(Debug)]
pub struct GradCheckReport {
    /// Elements checked in total.
    pub checked: usize,
    /// Human-readable descriptions of failing elements.
    pub failures: Vec<String>,
    /// Largest relative error observed (over elements with |fd| > abs_tol).
    pub worst_rel: f64,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare the `grad` buffers on `store` against finite differences.
///
/// An element passes if `|analytic - fd| <= abs_tol` or the relative error
/// `|analytic - fd| / max(|fd|, |analytic|)` is at most `rel_tol`. Parameters
/// with no grad buffer are treated as all-zero analytic gradients.
pub fn compare_grads(
    store: &ParamStore,
    fd: &BTreeMap<String, Vec<f64>>,
    rel_tol: f64,
    abs_tol: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport { checked: 0, failures: Vec::new(), worst_rel: 0.0 };
    for (name, fd_grad) in fd {
        let tensor = store.get(name);
        let zero = vec![0.0; tensor.numel()];
        let analytic: &[f64] = tensor.grad.as_deref().unwrap_or(&zero);
        for (i, (&a, &f)) in analytic.iter().zip(fd_grad).enumerate() {
            report.checked += 1;
            let abs_err = (a - f).abs();
            if abs_err <= abs_tol {
                continue;
            }
            let rel = abs_err / f.abs().max(a.abs());
            report.worst_rel = report.worst_rel.max(rel);
            if rel > rel_tol {
                report.failures.push(format!("{name}[{i}]: analytic {a:.9e} vs fd {f:.9e} (rel {rel:.3e})"));
            }
        }
    }
    report
}
