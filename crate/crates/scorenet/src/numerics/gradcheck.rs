//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor;

/// Compares the tape gradient of `f` at `x` against central finite
/// differences with step `h`, returning the worst relative error
/// |analytic - fd| / max(1, |fd|) over all components.
///
/// `f` must build a scalar-valued graph from its input node. The finite
/// difference quotient is formed in f64 to keep the subtraction from
/// swallowing the signal.
pub fn grad_check<F>(f: F, x: &Tensor, h: f32) -> Result<f32>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(h > 0.0 && h <= 0.1) {
        return Err(Error::contract(format!("grad_check: step h={h} outside (0, 0.1]")));
    }
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let loss = f(&mut tape, xid)?;
    let loss_val = tape.value(loss).item()?;
    if !loss_val.is_finite() {
        return Err(Error::numeric(format!("grad_check: f(x) is {loss_val}")));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<f32> = match grads.get(xid) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.len()],
    };

    let eval = |pt: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.constant(pt.clone());
        let out = f(&mut t, id)?;
        let v = t.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::numeric(format!("grad_check: f at perturbed point is {v}")));
        }
        Ok(v as f64)
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (eval(&xp)? - eval(&xm)?) / (2.0 * h as f64);
        let rel = (analytic[i] as f64 - fd).abs() / fd.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel as f32)
}
