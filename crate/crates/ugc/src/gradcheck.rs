//! Central finite-difference checks of tape gradients.

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

/// Relative L2 error between the tape gradient of `build` at `x0` and a
/// central difference with step `h`.
///
/// `build` receives a fresh tape and the input leaf and returns a scalar.
pub fn relative_error<F>(x0: &Tensor<f64>, h: f64, build: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let x = tape.param(x0.clone());
    let loss = build(&tape, x);
    let grads = tape.backward(loss);
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));
    let eval = |i: usize, delta: f64| {
        let mut xp = x0.clone();
        xp.data_mut()[i] += delta;
        let t = Tape::new();
        let v = t.param(xp);
        build(&t, v).item()
    };
    let numeric: Vec<f64> = (0..x0.numel()).map(|i| (eval(i, h) - eval(i, -h)) / (2.0 * h)).collect();
    let diff = analytic.data().iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let anorm = analytic.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(anorm).max(1e-12)
}

/// Identity that pins a closure to the signature [`relative_error`] expects.
pub fn loss_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Var<'t, f64>,
{
    f
}
