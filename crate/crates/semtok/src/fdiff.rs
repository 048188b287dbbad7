//! Central-difference gradient estimates, used as the independent oracle for
//! everything `backward` produces. Deliberately knows nothing about the tape
//! internals beyond "perturb a leaf, re-run forward, read the loss".

use crate::error::Result;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// (f(x+h) − f(x−h)) / 2h for every coordinate of `point`.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    let mut probe = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let hi = f(&probe);
        probe[i] = point[i] - step;
        let lo = f(&probe);
        probe[i] = point[i];
        grad.push((hi - lo) / (2.0 * step));
    }
    grad
}

/// Finite-difference gradient of `loss` with respect to one leaf of an
/// already-built tape. Perturbs each element in place and re-runs the whole
/// forward pass, so it exercises exactly the computation `backward` claims
/// to differentiate.
pub fn finite_diff_leaf(tape: &mut Tape, leaf: NodeId, loss: NodeId, step: f64) -> Result<Tensor> {
    let shape = tape.value(leaf).shape().to_vec();
    let n = tape.value(leaf).len();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        tape.nudge_leaf(leaf, i, step)?;
        tape.forward();
        let hi = tape.value(loss).item();
        tape.nudge_leaf(leaf, i, -2.0 * step)?;
        tape.forward();
        let lo = tape.value(loss).item();
        tape.nudge_leaf(leaf, i, step)?;
        grad.push((hi - lo) / (2.0 * step));
    }
    tape.forward(); // restore every downstream value
    Tensor::from_vec(&shape, grad)
}
