//! Central finite-difference gradient checking.

use serde::Serialize;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute rather than relative
/// terms; below it the finite-difference quotient is dominated by rounding.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `|analytic - numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Worst element of one parameter.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.max_rel_err < tol)
    }
}

fn eval_loss<F>(store: &ParamStore<f64>, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let v = tape.item(loss);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares the tape's gradient of every parameter element against
/// `(L(θ + eps) - L(θ - eps)) / 2eps`. `loss_fn` must be deterministic.
pub fn grad_check<F>(store: &mut ParamStore<f64>, eps: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    grad_check_with(store, eps, &mut loss_fn, |_| {})
}

/// Like [`grad_check`], with a hook to configure the analytic tape (used to
/// inject faults into backward rules).
pub fn grad_check_with<F, H>(
    store: &mut ParamStore<f64>,
    eps: f64,
    loss_fn: &mut F,
    prepare: H,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    H: FnOnce(&mut Tape<f64>),
{
    let mut tape = Tape::new();
    prepare(&mut tape);
    let loss = loss_fn(&mut tape, store)?;
    if !tape.item(loss).is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {}", tape.item(loss))));
    }
    let analytic = tape.backward(loss)?.param_grads(&tape, store);
    drop(tape);

    let ids: Vec<_> = store.iter().map(|(id, name, _)| (id, name.to_string())).collect();
    let mut params = Vec::with_capacity(ids.len());
    for ((id, name), grad) in ids.into_iter().zip(analytic) {
        let mut check = ParamCheck {
            name,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..grad.numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval_loss(store, loss_fn)?;
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval_loss(store, loss_fn)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            if err > check.max_rel_err || i == 0 {
                check.max_rel_err = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { params })
}
