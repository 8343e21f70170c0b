//! Central finite-difference gradient verification.
//!
//! These helpers are the independent oracle for every analytic gradient in
//! the crate: they only ever call a black-box loss closure, never the
//! backward pass under test.

use rand::seq::SliceRandom;
use rand::Rng;

use ndarray::ArrayD;

use super::params::ParamStore;

/// Outcome of a gradient check over a set of parameters.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (param name, flat index, analytic, numeric) for the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn ok(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with an absolute floor so near-zero pairs do not explode.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Central finite difference of `loss` w.r.t. one scalar entry of one param.
pub fn central_diff<F>(
    loss: &mut F,
    store: &mut ParamStore,
    name: &str,
    flat_idx: usize,
    eps: f64,
) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    let orig = store.get(name).as_slice().unwrap()[flat_idx];
    store.get_mut(name).as_slice_mut().unwrap()[flat_idx] = orig + eps;
    let lp = loss(store);
    store.get_mut(name).as_slice_mut().unwrap()[flat_idx] = orig - eps;
    let lm = loss(store);
    store.get_mut(name).as_slice_mut().unwrap()[flat_idx] = orig;
    (lp - lm) / (2.0 * eps)
}

/// Check analytic gradients (aligned with the store's insertion order)
/// against central differences. At most `max_per_param` entries per array
/// are tested, chosen uniformly with `rng`; pass `usize::MAX` to sweep all.
pub fn check_params<F>(
    loss: &mut F,
    store: &mut ParamStore,
    analytic: &[ArrayD<f64>],
    eps: f64,
    max_per_param: usize,
    rng: &mut impl Rng,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    assert_eq!(analytic.len(), store.len());
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    let names: Vec<String> = store.names().to_vec();
    for (pi, name) in names.iter().enumerate() {
        let n = store.get(name).len();
        let mut idxs: Vec<usize> = (0..n).collect();
        if n > max_per_param {
            idxs.shuffle(rng);
            idxs.truncate(max_per_param);
        }
        for idx in idxs {
            let num = central_diff(loss, store, name, idx, eps);
            let ana = analytic[pi].as_slice().unwrap()[idx];
            let err = rel_err(ana, num);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), idx, ana, num));
            }
        }
    }
    report
}

/// Central finite difference of `loss` w.r.t. entries of an input array
/// (for input-gradient checks). Returns the numeric gradient of the sampled
/// flat indices.
pub fn central_diff_input<F>(
    loss: &mut F,
    input: &mut ArrayD<f64>,
    flat_idx: usize,
    eps: f64,
) -> f64
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let orig = input.as_slice().unwrap()[flat_idx];
    input.as_slice_mut().unwrap()[flat_idx] = orig + eps;
    let lp = loss(input);
    input.as_slice_mut().unwrap()[flat_idx] = orig - eps;
    let lm = loss(input);
    input.as_slice_mut().unwrap()[flat_idx] = orig;
    (lp - lm) / (2.0 * eps)
}
