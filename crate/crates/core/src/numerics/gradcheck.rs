//! Central finite-difference oracle for analytic gradients.
//!
//! Runs in double precision so that a step of `1e-4` is not swamped by
//! storage rounding.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_group: String,
    pub checked: usize,
}

/// Relative error with a small floor so entries that are zero on both sides
/// compare equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the analytic gradient of `build`'s scalar output against central
/// differences for every entry of every trainable group.
pub fn check<F>(store: &mut ParamStore<f64>, step: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let report = {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = build(&mut g)?;
        Ok(g.scalar(loss))
    };
    let mut out = GradCheck { max_rel_err: 0.0, worst_group: String::new(), checked: 0 };
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let analytic = report.grad_or_zeros(id, store);
        for i in 0..analytic.len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let e = rel_err(analytic.data()[i], numeric);
            out.checked += 1;
            if e > out.max_rel_err {
                out.max_rel_err = e;
                out.worst_group = store.group(id).name.clone();
            }
        }
    }
    Ok(out)
}
