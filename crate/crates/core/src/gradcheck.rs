//! Central finite-difference oracle for the autodiff engine.

use crate::graph::{Graph, ParamVars, Var};
use crate::tensor::{ParamId, ParamStore, TensorError, TensorResult};

#[derive(Debug, Clone)]
pub struct FdReport {
    /// max |autodiff − fd| / (|autodiff| + 1e-8) over all checked elements
    pub max_rel_error: f64,
    pub worst_param: Option<ParamId>,
    pub worst_index: usize,
    pub elements_checked: usize,
}

fn loss_value<F>(store: &ParamStore, f: &F) -> TensorResult<f64>
where
    F: Fn(&mut Graph, &ParamVars) -> TensorResult<Var>,
{
    let mut g = Graph::new();
    let vars = g.bind(store, |_| false);
    let l = f(&mut g, &vars)?;
    Ok(g.scalar_value(l))
}

/// Compares reverse-mode gradients of `f` against `(f(θ+h) − f(θ−h)) / 2h` for every
/// element of every parameter in `params`.
pub fn finite_diff_check<F>(params: &ParamStore, h: f64, f: F) -> TensorResult<FdReport>
where
    F: Fn(&mut Graph, &ParamVars) -> TensorResult<Var>,
{
    finite_diff_check_with(params, h, &f, |store, _| loss_value(store, &f))
}

/// Same as [`finite_diff_check`] with a caller-supplied evaluator for the perturbed
/// losses. The evaluator also receives the id of the perturbed parameter so that it can
/// reuse work that does not depend on it.
pub fn finite_diff_check_with<F, E>(params: &ParamStore, h: f64, f: &F, mut eval: E) -> TensorResult<FdReport>
where
    F: Fn(&mut Graph, &ParamVars) -> TensorResult<Var>,
    E: FnMut(&ParamStore, Option<&ParamId>) -> TensorResult<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(TensorError::InvalidArgument(format!("finite-difference step must be > 0, got {h}")));
    }
    let first = eval(params, None)?;
    let second = eval(params, None)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic(first, second));
    }

    let mut g = Graph::new();
    let vars = g.bind(params, |_| true);
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        elements_checked: 0,
    };
    let mut work = params.clone();
    let ids: Vec<ParamId> = params.ids().cloned().collect();
    for id in &ids {
        let n = params.get(id).map_or(0, |t| t.numel());
        for i in 0..n {
            let orig = params.get(id).unwrap().data()[i];
            work.get_mut(id).unwrap().data_mut()[i] = orig + h;
            let up = eval(&work, Some(id))?;
            work.get_mut(id).unwrap().data_mut()[i] = orig - h;
            let down = eval(&work, Some(id))?;
            work.get_mut(id).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = grads[id].data()[i];
            let rel = (ad - fd).abs() / (ad.abs() + 1e-8);
            report.elements_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = Some(id.clone());
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
