//! Central finite-difference verification of tape gradients.

use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor};

/// Relative-error tolerance the gradient suite asserts at, per scalar mode.
pub fn grad_tolerance() -> Real {
    if cfg!(feature = "f64") {
        1e-5
    } else {
        1e-3
    }
}

/// Step size paired with [`grad_tolerance`].
pub fn default_eps() -> Real {
    if cfg!(feature = "f64") {
        1e-5
    } else {
        1e-3
    }
}

/// Compares the tape gradient of `f` at `point` against central differences.
///
/// `f` must produce a scalar from the given variable. Returns the maximum
/// over coordinates of |analytic - numeric| / max(1, |analytic|).
pub fn check_gradients<F>(mut f: F, point: &Tensor, eps: Real) -> Real
where
    F: FnMut(&mut Tape, VarId) -> VarId,
{
    let tracked = point.clone().requires_grad(true);
    let mut tape = Tape::new();
    let x = tape.leaf(&tracked);
    let loss = f(&mut tape, x);
    assert_eq!(tape.value(loss).numel(), 1, "f must return a scalar");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Real> = match tape.grad(x) {
        Some(g) => g.to_vec(),
        None => vec![0.0; point.numel()],
    };

    let eval = |data: Vec<Real>, f: &mut F| -> Real {
        let t = Tensor::new(point.shape(), data).expect("same shape");
        let mut tape = Tape::new();
        let x = tape.leaf_detached(&t);
        let loss = f(&mut tape, x);
        tape.value(loss).item()
    };

    let mut worst: Real = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.data().to_vec();
        let mut minus = point.data().to_vec();
        plus[i] += eps;
        minus[i] -= eps;
        let numeric = (eval(plus, &mut f) - eval(minus, &mut f)) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}
