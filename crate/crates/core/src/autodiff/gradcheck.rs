//! Central finite-difference checks for reverse-mode gradients.
//!
//! The finite-difference side only ever evaluates the function forward, so
//! it is independent of the backward pass it checks.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing one input's analytic gradient to finite differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`; zero when both
    /// vanish.
    pub rel_err: f64,
}

/// Norm-wise relative error between two arrays.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = inputs
        .iter()
        .map(|t| t.as_standard_layout().into_owned())
        .collect();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].raw_dim());
        for idx in 0..inputs[k].len() {
            let orig = work[k].as_slice().unwrap()[idx];
            work[k].as_slice_mut().unwrap()[idx] = orig + step;
            let fp = f(&work)?;
            work[k].as_slice_mut().unwrap()[idx] = orig - step;
            let fm = f(&work)?;
            work[k].as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares reverse-mode gradients of `f` at `inputs` against central
/// differences with the given step.
pub fn check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<Vec<GradCheck>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&tape, &vars)?;
    let analytic = tape.grad_values(root, &vars)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.param(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let numeric = numeric_gradient(&eval, inputs, step)?;
    Ok(analytic
        .into_iter()
        .zip(numeric)
        .map(|(a, n)| {
            let rel_err = rel_err(&a, &n);
            GradCheck {
                analytic: a,
                numeric: n,
                rel_err,
            }
        })
        .collect())
}

/// Largest relative error across a set of checks.
pub fn max_rel_err(checks: &[GradCheck]) -> f64 {
    checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
}
