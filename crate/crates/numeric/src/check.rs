//! Central finite-difference utilities. These stay independent of the tape:
//! they only perturb parameter values and re-run a caller-supplied forward
//! closure, so they can act as the oracle for any analytic gradient.

use crate::params::{ParamId, ParamSet};

/// Central difference d f / d params[id][idx].
pub fn central_diff<F>(
    params: &mut ParamSet<f64>,
    id: ParamId,
    idx: usize,
    eps: f64,
    f: &mut F,
) -> f64
where
    F: FnMut(&ParamSet<f64>) -> f64,
{
    let orig = params.get(id).data[idx];
    params.get_mut(id).data[idx] = orig + eps;
    let fp = f(params);
    params.get_mut(id).data[idx] = orig - eps;
    let fm = f(params);
    params.get_mut(id).data[idx] = orig;
    (fp - fm) / (2.0 * eps)
}

/// Numeric gradient of every element of every parameter.
pub fn numeric_grads<F>(params: &mut ParamSet<f64>, eps: f64, mut f: F) -> Vec<(ParamId, Vec<f64>)>
where
    F: FnMut(&ParamSet<f64>) -> f64,
{
    let ids: Vec<ParamId> = params.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.get(id).numel();
        let mut g = Vec::with_capacity(n);
        for idx in 0..n {
            g.push(central_diff(params, id, idx, eps, &mut f));
        }
        out.push((id, g));
    }
    out
}

/// Relative error with an absolute floor for near-zero pairs.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Max relative error between analytic grads (from the tape) and the
/// finite-difference oracle.
pub fn max_rel_err(analytic: &[(ParamId, Vec<f64>)], numeric: &[(ParamId, Vec<f64>)]) -> f64 {
    let mut worst = 0.0f64;
    for (id, a) in analytic {
        let n = numeric
            .iter()
            .find(|(nid, _)| nid == id)
            .map(|(_, g)| g)
            .expect("missing numeric grad");
        assert_eq!(a.len(), n.len());
        for (&x, &y) in a.iter().zip(n) {
            worst = worst.max(rel_err(x, y));
        }
    }
    worst
}
