//! Central-difference gradient checks.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn check_step(h: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    Ok(())
}

/// Components below this fraction of the largest `|a| + |n|` are compared
/// against that floor, since their central differences are dominated by
/// roundoff in the function value.
pub const RELATIVE_FLOOR: f64 = 1e-2;

/// Max over components of `|a - n| / max(|a| + |n|, floor)`.
fn worst_rel_err(pairs: &[(f64, f64)]) -> f64 {
    let scale = pairs.iter().map(|(a, n)| a.abs() + n.abs()).fold(0.0, f64::max);
    let floor = (RELATIVE_FLOOR * scale).max(1e-12);
    pairs
        .iter()
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn eval_scalar(store: &ParamStore, x: &Tensor, f: &impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new(store);
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, xv)?;
    let t = tape.value(y);
    if !t.is_scalar() {
        return Err(Error::InvalidArgument("grad_check needs a scalar function".into()));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check function value".into()));
    }
    Ok(v)
}

/// Worst relative error (see [`RELATIVE_FLOOR`]) between the tape gradient of `f` at `x` and a central
/// difference with step `h`.
pub fn grad_check(
    store: &ParamStore,
    x: &Tensor,
    h: f64,
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<f64> {
    check_step(h)?;
    let mut tape = Tape::new(store);
    let xv = tape.input(x.clone());
    let y = f(&mut tape, xv)?;
    if !tape.value(y).item().is_finite() {
        return Err(Error::NonFinite("grad_check function value".into()));
    }
    let grads = tape.backward(y)?;
    let analytic = grads.wrt(xv).expect("input leaf").clone();

    let mut pairs = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for k in 0..x.numel() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let fp = eval_scalar(store, &probe, &f)?;
        probe.data_mut()[k] = orig - h;
        let fm = eval_scalar(store, &probe, &f)?;
        probe.data_mut()[k] = orig;
        pairs.push((analytic.data()[k], (fp - fm) / (2.0 * h)));
    }
    Ok(worst_rel_err(&pairs))
}

/// Same as [`grad_check`] but differentiating with respect to parameters
/// `ids` of `store`. The closure builds the whole forward pass.
pub fn grad_check_params(
    store: &ParamStore,
    ids: &[ParamId],
    h: f64,
    f: impl Fn(&mut Tape) -> Result<Var>,
) -> Result<f64> {
    check_step(h)?;
    let mut tape = Tape::new(store);
    let y = f(&mut tape)?;
    if !tape.value(y).item().is_finite() {
        return Err(Error::NonFinite("grad_check function value".into()));
    }
    let grads = tape.backward(y)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let y = f(&mut tape)?;
        let v = tape.value(y).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check function value".into()));
        }
        Ok(v)
    };

    let mut probe = store.clone();
    let mut pairs = Vec::new();
    for &id in ids {
        let analytic = grads.param_or_zero(id, store);
        for k in 0..analytic.numel() {
            let orig = probe.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + h;
            let fp = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - h;
            let fm = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;
            pairs.push((analytic.data()[k], (fp - fm) / (2.0 * h)));
        }
    }
    Ok(worst_rel_err(&pairs))
}
