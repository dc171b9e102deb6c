use crate::error::{GesrError, Result};
use crate::numerics::graph::{Graph, ParamStore, Var};

/// Compares tape gradients against central finite differences.
///
/// `build` must construct the same scalar function each time it is called
/// (it runs once on a recording graph for the analytic gradient, then twice
/// per parameter entry for the +/- eps probes). Returns the worst relative
/// error over every scalar entry of every parameter, where the error is
/// |fd - analytic| / max(|fd|, |analytic|, 1e-6).
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, mut build: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(GesrError::Contract(format!(
            "grad_check eps {eps} outside [1e-6, 1e-4]"
        )));
    }

    store.zero_grads();
    let mut g = Graph::recording();
    let loss = build(&mut g, store)?;
    let base = g.scalar(loss)?;
    if !base.is_finite() {
        return Err(GesrError::NonFinite(format!("loss value {base}")));
    }
    g.backward(loss, store)?;
    let analytic: Vec<_> = store.ids().map(|id| store.get(id).grad.clone()).collect();

    let probe = |store: &ParamStore, build: &mut F| -> Result<f64> {
        let mut g = Graph::inference();
        let v = build(&mut g, store)?;
        let f = g.scalar(v)?;
        if !f.is_finite() {
            return Err(GesrError::NonFinite(format!(
                "finite-difference probe produced {f}"
            )));
        }
        Ok(f)
    };

    let mut worst: f64 = 0.0;
    for id in store.ids().collect::<Vec<_>>() {
        for k in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + eps;
            let f_plus = probe(store, &mut build)?;
            store.get_mut(id).value.data_mut()[k] = orig - eps;
            let f_minus = probe(store, &mut build)?;
            store.get_mut(id).value.data_mut()[k] = orig;

            let fd = (f_plus - f_minus) / (2.0 * eps);
            let an = analytic[id.index()].data()[k];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            if err > worst {
                worst = err;
            }
        }
    }
    store.zero_grads();
    Ok(worst)
}
