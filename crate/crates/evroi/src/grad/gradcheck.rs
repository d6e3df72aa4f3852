//! Finite-difference gradient verification.
//!
//! The numerical side never touches [`Tape::backward`]: it re-runs the
//! caller's forward builder at perturbed parameter values and forms a
//! central difference, so it is an independent oracle for the analytic
//! gradients.

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

/// Builds a scalar loss on a fresh tape from parameter leaves created in
/// the given order; returns the loss node.
pub trait LossBuilder {
    fn build(&self, tape: &mut Tape, params: &[NodeId]) -> NodeId;
}

impl<F: Fn(&mut Tape, &[NodeId]) -> NodeId> LossBuilder for F {
    fn build(&self, tape: &mut Tape, params: &[NodeId]) -> NodeId {
        self(tape, params)
    }
}

/// Error statistics from a successful finite-difference sweep.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdStats {
    pub components: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

/// Evaluates the loss value at the given parameter values.
fn eval(builder: &impl LossBuilder, params: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = builder.build(&mut tape, &ids);
    tape.value(loss).item()
}

/// Checks every component of every parameter against a central
/// difference with step `h`. A component passes when its absolute error
/// is within `tol_abs` or its relative error within `tol_rel`; the first
/// component violating both fails the check.
pub fn check_gradients(
    builder: &impl LossBuilder,
    params: &[Tensor],
    h: f64,
    tol_rel: f64,
    tol_abs: f64,
) -> Result<FdStats, String> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = builder.build(&mut tape, &ids);
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;

    let mut stats = FdStats::default();
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = match grads.get(ids[pi]) {
            Some(g) => g.clone(),
            None => Tensor::zeros(param.shape.clone()),
        };
        for ci in 0..param.len() {
            let orig = param.data[ci];
            work[pi].data[ci] = orig + h;
            let fp = eval(builder, &work);
            work[pi].data[ci] = orig - h;
            let fm = eval(builder, &work);
            work[pi].data[ci] = orig;

            let fd = (fp - fm) / (2.0 * h);
            let an = analytic.data[ci];
            let abs_err = (fd - an).abs();
            let rel_err = abs_err / fd.abs().max(an.abs()).max(1e-300);
            stats.components += 1;
            stats.max_abs_err = stats.max_abs_err.max(abs_err);
            stats.max_rel_err = stats.max_rel_err.max(rel_err);
            if abs_err > tol_abs && rel_err > tol_rel {
                return Err(format!(
                    "param {pi} component {ci}: analytic {an:.9e} vs fd {fd:.9e} \
                     (abs {abs_err:.3e}, rel {rel_err:.3e})"
                ));
            }
        }
    }
    Ok(stats)
}
