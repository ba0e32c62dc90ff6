//! Log-densities, score functions `∇ log p` and the Hyvärinen score.
//!
//! Graph-level functions take [`Var`]s with one row per sample so they can
//! be differentiated with respect to their parameters; the `*_values`
//! variants work on plain slices.

use std::f64::consts::PI;

use ndarray::{Array1, ArrayView1, IxDyn};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::GaussianPosterior;

/// `N(0, I_d)` prior of the standard VAE.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StdNormalPrior {
    pub dim: usize,
}

impl StdNormalPrior {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    /// `∇_z log p(z) = −z`.
    pub fn score<'t>(&self, z: Var<'t>) -> Var<'t> {
        z.neg()
    }

    pub fn score_values(&self, z: ArrayView1<'_, f64>) -> Array1<f64> {
        z.mapv(|v| -v)
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * (2.0 * PI).ln()
    }
}

/// Factorable polynomial exponential family,
/// `p_η(z) ∝ exp(Σ_j Σ_{k=1..K} η_jk z_j^k)`.
///
/// Only the unnormalized density and its score are ever needed.
#[derive(Clone, Debug, PartialEq)]
pub struct FpePrior {
    /// `d × K`; column `k−1` holds the coefficients of `z_j^k`.
    pub eta: Tensor,
}

impl FpePrior {
    pub fn new(eta: Tensor) -> Result<Self> {
        if eta.ndim() != 2 || eta.shape()[1] == 0 {
            return Err(Error::InvalidArgument(format!(
                "fpe eta must be d x K with K >= 1, got {:?}",
                eta.shape()
            )));
        }
        let prior = Self { eta };
        prior.warn_if_not_integrable();
        Ok(prior)
    }

    /// Coefficients reproducing `N(0, I_d)`: `η_j2 = −½`, all others zero.
    pub fn standard_normal(dim: usize, order: usize) -> Result<Self> {
        if order < 2 {
            return Err(Error::InvalidArgument(format!(
                "a Gaussian-equivalent fpe prior needs K >= 2, got {order}"
            )));
        }
        let mut eta = Tensor::zeros(IxDyn(&[dim, order]));
        for j in 0..dim {
            eta[[j, 1]] = -0.5;
        }
        Ok(Self { eta })
    }

    pub fn dim(&self) -> usize {
        self.eta.shape()[0]
    }

    pub fn order(&self) -> usize {
        self.eta.shape()[1]
    }

    /// Logs a warning for coordinates whose density cannot be normalized
    /// because the leading even coefficient is positive.
    pub fn warn_if_not_integrable(&self) {
        let k = self.order();
        if k % 2 == 0 {
            for j in 0..self.dim() {
                if self.eta[[j, k - 1]] > 0.0 {
                    log::warn!(
                        "fpe prior: eta[{j},{k}] = {} > 0, density is not integrable",
                        self.eta[[j, k - 1]]
                    );
                }
            }
        }
    }

    /// `∂/∂z_j log p_η(z) = Σ_k k η_jk z_j^{k−1}` for one point.
    pub fn score_values(&self, z: ArrayView1<'_, f64>) -> Array1<f64> {
        let k_max = self.order();
        Array1::from_shape_fn(z.len(), |j| {
            let mut acc = 0.0;
            let mut pow = 1.0;
            for k in 1..=k_max {
                acc += k as f64 * self.eta[[j, k - 1]] * pow;
                pow *= z[j];
            }
            acc
        })
    }

    /// `Σ_jk η_jk z_j^k` (no normalizer).
    pub fn unnormalized_log_density(&self, z: ArrayView1<'_, f64>) -> f64 {
        let mut acc = 0.0;
        for (j, &zj) in z.iter().enumerate() {
            let mut pow = zj;
            for k in 1..=self.order() {
                acc += self.eta[[j, k - 1]] * pow;
                pow *= zj;
            }
        }
        acc
    }
}

/// FPE score for a batch `z` (`n × d`) with coefficients `eta` (`d × K`)
/// on the graph; differentiable in both.
pub fn fpe_score<'t>(eta: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
    let es = eta.shape();
    let zs = z.shape();
    if es.len() != 2 || zs.len() != 2 || es[0] != zs[1] || es[1] == 0 {
        return Err(Error::shape("fpe_score", &es, &zs));
    }
    let mut acc: Option<Var<'t>> = None;
    for k in 1..=es[1] {
        let coeff = eta.slice_cols(k - 1, k)?.t()?.scale(k as f64);
        let term = if k == 1 {
            coeff.broadcast_to(&zs)?
        } else {
            z.powi(k as i32 - 1).mul(coeff)?
        };
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("K >= 1"))
}

/// Unnormalized FPE log-density per row, `n × 1`.
pub fn fpe_log_density<'t>(eta: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
    let es = eta.shape();
    let mut acc: Option<Var<'t>> = None;
    for k in 1..=es[1] {
        let coeff = eta.slice_cols(k - 1, k)?.t()?;
        let term = z.powi(k as i32).mul(coeff)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::shape("fpe_log_density", &es, &z.shape()))?
        .sum_axis(1)
}

/// `∇_z log q(z|x) = −(z − μ)/σ²`. For `z = μ + σ⊙ε` this is `−ε/σ`.
pub fn gaussian_posterior_score_z<'t>(post: &GaussianPosterior<'t>, z: Var<'t>) -> Result<Var<'t>> {
    Ok(z.sub(post.mu)?.div(post.sigma.square())?.neg())
}

/// Diagonal Gaussian log-density per row:
/// `−½ Σ_j [(z_j−μ_j)²/σ_j² + log(2πσ_j²)]`.
pub fn gaussian_log_density<'t>(post: &GaussianPosterior<'t>, z: Var<'t>) -> Result<Var<'t>> {
    let quad = z.sub(post.mu)?.div(post.sigma)?.square();
    let logs = post.sigma.square().scale(2.0 * PI).ln();
    quad.add(logs)?.sum_axis(1).map(|v| v.scale(-0.5))
}

/// Isotropic unit-variance Gaussian decoder,
/// `p_θ(x|z) ∝ exp(−½‖x − f_θ(z)‖²)`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianDecoderLikelihood<'t> {
    pub xhat: Var<'t>,
}

impl<'t> GaussianDecoderLikelihood<'t> {
    /// `log p_θ(x|z)` up to its constant, per row.
    pub fn log_density(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.sub(self.xhat)?.sq_norm_rows()?.scale(-0.5))
    }

    /// `∇_x log p_θ(x|z) = −(x − f_θ(z))`.
    pub fn score_x(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.sub(self.xhat)?.neg())
    }

    /// `Δ_x log p_θ(x|z) = −D`.
    pub fn laplacian_x(&self) -> f64 {
        -(self.xhat.shape()[1] as f64)
    }
}

/// Probabilities are clamped to this distance from {0, 1} before logs.
pub const BCE_CLAMP: f64 = 1e-7;

/// Bernoulli decoder with per-pixel probabilities `f_θ(z)`.
#[derive(Clone, Copy, Debug)]
pub struct BernoulliDecoderLikelihood<'t> {
    pub probs: Var<'t>,
}

impl<'t> BernoulliDecoderLikelihood<'t> {
    /// `−log p_θ(x|z)`: binary cross-entropy summed over coordinates, per
    /// row.
    pub fn nll(&self, x: Var<'t>) -> Result<Var<'t>> {
        let p = self.probs.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let tape: &Tape = x.tape();
        let one = tape.scalar(1.0);
        let pos = x.mul(p.ln())?;
        let neg = one.sub(x)?.mul(one.sub(p)?.ln())?;
        Ok(pos.add(neg)?.sum_axis(1)?.neg())
    }
}

/// Binary cross-entropy of plain arrays, summed over all elements.
pub fn bce_values(x: ArrayView1<'_, f64>, probs: ArrayView1<'_, f64>) -> f64 {
    x.iter()
        .zip(probs.iter())
        .map(|(&xi, &pi)| {
            let p = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(xi * p.ln() + (1.0 - xi) * (1.0 - p).ln())
        })
        .sum()
}

/// Hyvärinen score `½‖∇ log p‖² + Δ log p`.
pub fn hyvarinen_score(grad_log_p: &[f64], laplacian_log_p: f64) -> f64 {
    0.5 * grad_log_p.iter().map(|g| g * g).sum::<f64>() + laplacian_log_p
}

/// Hyvärinen score of an unnormalized log-density at `x`, with the gradient
/// and the Hessian diagonal taken by reverse mode. `log_p` maps a `1 × n`
/// row to a scalar.
pub fn hyvarinen_score_autodiff<F>(log_p: F, x: ArrayView1<'_, f64>) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let n = x.len();
    let tape = Tape::new();
    let xv = tape.param(x.to_owned().into_shape_with_order(IxDyn(&[1, n])).expect("row"));
    let g = tape.grad(log_p(xv)?, &[xv], true)?.remove(0);
    let mut laplacian = 0.0;
    for j in 0..n {
        let gj = g.slice_cols(j, j + 1)?.sum();
        let h = tape.grad(gj, &[xv], true)?.remove(0);
        laplacian += h.value()[[0, j]];
    }
    let grad: Vec<f64> = g.value().iter().copied().collect();
    Ok(hyvarinen_score(&grad, laplacian))
}

/// Closed-form Fisher divergence `E_p ½‖∇log p − ∇log q‖²` between
/// diagonal Gaussians `p = N(m1, s1²)` and `q = N(m2, s2²)`.
pub fn fisher_divergence_gaussians(m1: &[f64], s1: &[f64], m2: &[f64], s2: &[f64]) -> f64 {
    assert!(
        m1.len() == s1.len() && m1.len() == m2.len() && m1.len() == s2.len(),
        "dimension mismatch"
    );
    let mut acc = 0.0;
    for j in 0..m1.len() {
        // score difference at x = m1 + s1·u is δ + a·s1·u
        let a = 1.0 / (s1[j] * s1[j]) - 1.0 / (s2[j] * s2[j]);
        let delta = (m2[j] - m1[j]) / (s2[j] * s2[j]);
        acc += 0.5 * (delta * delta + a * a * s1[j] * s1[j]);
    }
    acc
}
