//! Central finite-difference verification of analytic gradients.

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Worst-case agreement between analytic and numeric gradients for one
/// parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_abs_grad: f64,
}

impl GroupReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<L>(store: &ParamStore<f64>, loss: &L) -> Result<f64>
where
    L: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = loss(&mut g, store)?;
    let value = g.value(v);
    if !value.is_scalar_like() {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    let l = value.data()[0];
    if !l.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(l)
}

/// Compares the analytic gradient of `loss` with central differences of
/// step `h` for every entry of every parameter in `store`. `loss` must be
/// deterministic (fixed dropout seeds). Gradients in `store` are left
/// holding the analytic result.
pub fn check_params<L>(store: &mut ParamStore<f64>, h: f64, floor: f64, loss: L) -> Result<Vec<GroupReport>>
where
    L: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    g.backward_into(l, store)?;

    let ids: Vec<_> = store.ids().collect();
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).value.len();
        let mut report = GroupReport {
            name: store.get(id).name.clone(),
            entries: n,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            max_abs_grad: 0.0,
        };
        for i in 0..n {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval_loss(store, &loss);
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval_loss(store, &loss);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let analytic = store.get(id).grad.data()[i];
            report.max_abs_grad = report.max_abs_grad.max(analytic.abs());
            report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
            report.max_rel_error = report
                .max_rel_error
                .max(relative_error(analytic, numeric, floor));
        }
        reports.push(report);
    }
    Ok(reports)
}
