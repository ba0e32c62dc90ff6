//! Oracles shared by the integration and acceptance tests.

#![allow(dead_code)]

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use fisher_ae::autodiff::{tensor, Tape, Tensor};
use fisher_ae::losses::{fisher_ae_terms, FisherLossOptions, ModelRef, MonteCarloSpec};
use fisher_ae::nets::{AffineEncoder, Linear, LinearDecoder, Parameter, Prior};

fn linear(name: &str, w: Tensor, b: Tensor) -> Linear {
    Linear {
        weight: Parameter::new(format!("{name}.weight"), w),
        bias: Parameter::new(format!("{name}.bias"), b),
    }
}

fn normal_pdf(x: f64, m: f64, s: f64) -> f64 {
    (-0.5 * ((x - m) / s).powi(2)).exp() / (s * (2.0 * PI).sqrt())
}

fn trapezoid_weights(n: usize, h: f64) -> Vec<f64> {
    (0..n).map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h }).collect()
}

/// One-dimensional all-Gaussian model for the joint Fisher-divergence
/// identity: data `N(m⋆, s⋆²)`, encoder `N(a x + b, exp(c x + e)²)`, prior
/// `exp(η₁ z + η₂ z²)`, decoder `N(w z + v, 1)`.
pub struct ScalarGaussianModel {
    pub data_mean: f64,
    pub data_std: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub e: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub w: f64,
    pub v: f64,
}

impl Default for ScalarGaussianModel {
    fn default() -> Self {
        Self {
            data_mean: 0.3,
            data_std: 0.8,
            a: 0.5,
            b: -0.2,
            c: 0.1,
            e: (0.6f64).ln(),
            eta1: 0.2,
            eta2: -0.6,
            w: 1.3,
            v: 0.1,
        }
    }
}

pub struct QuadratureResult {
    /// `D_∇[p⋆ q_φ ‖ p_η p_θ]` from closed-form joint scores.
    pub joint_divergence: f64,
    /// `E_p⋆[L_F-AE]` from the library loss, Laplacian included.
    pub expected_loss: f64,
    /// `E_p⋆[s_∇[p⋆]]`.
    pub expected_data_score: f64,
}

impl QuadratureResult {
    pub fn gap(&self) -> f64 {
        (self.joint_divergence - (self.expected_loss - self.expected_data_score)).abs()
    }
}

impl ScalarGaussianModel {
    fn sigma(&self, x: f64) -> f64 {
        (self.c * x + self.e).exp()
    }

    fn parts(&self) -> (AffineEncoder, Prior, LinearDecoder) {
        let t = |v: f64| tensor(&[1, 1], vec![v]);
        let enc = AffineEncoder {
            mu: linear("encoder.mu", t(self.a), t(self.b)),
            log_sigma: linear("encoder.log_sigma", t(self.c), t(self.e)),
        };
        let mut prior = Prior::fpe(1, 2).unwrap();
        if let Prior::Fpe(eta) = &mut prior {
            eta.value = tensor(&[1, 2], vec![self.eta1, self.eta2]);
        }
        let dec = LinearDecoder {
            layer: linear("decoder", t(self.w), t(self.v)),
        };
        (enc, prior, dec)
    }

    /// Trapezoid rule on `[−r, r]²` with spacing `h`.
    pub fn quadrature(&self, r: f64, h: f64) -> QuadratureResult {
        let n = (2.0 * r / h).round() as usize + 1;
        let grid: Vec<f64> = (0..n).map(|i| -r + i as f64 * h).collect();
        let wts = trapezoid_weights(n, h);
        let (enc, prior, dec) = self.parts();
        let model = ModelRef {
            encoder: &enc,
            prior: &prior,
            decoder: &dec,
        };
        let opts = FisherLossOptions {
            include_laplacian: true,
            ..Default::default()
        };
        let (m, s) = (self.data_mean, self.data_std);

        let mut joint = 0.0;
        let mut loss = 0.0;
        let mut data_score = 0.0;
        for (i, &x) in grid.iter().enumerate() {
            let px = normal_pdf(x, m, s);
            if px == 0.0 {
                continue;
            }
            let mu = self.a * x + self.b;
            let sig = self.sigma(x);
            let dsig = self.c * sig;

            // library loss at every z on the line, via ε = (z − μ)/σ
            let eps = Tensor::from_shape_fn(IxDyn(&[n, 1]), |ix| (grid[ix[0]] - mu) / sig);
            let tape = Tape::new();
            let bound = model.bind(&tape, false);
            let rows = fisher_ae_terms(&bound, &tensor(&[1, 1], vec![x]), &eps, &opts)
                .unwrap()
                .rows()
                .sum_axis(Axis(1));

            let dlogp_star = -(x - m) / (s * s);
            data_score += wts[i] * px * (0.5 * dlogp_star * dlogp_star - 1.0 / (s * s));

            for (j, &z) in grid.iter().enumerate() {
                let q = normal_pdf(z, mu, sig);
                let weight = wts[i] * wts[j] * px * q;
                if weight == 0.0 {
                    continue;
                }
                let u = (z - mu) / sig;
                // ∇ log of p⋆(x) q(z|x)
                let gx_q = dlogp_star + u / sig * self.a + (u * u - 1.0) / sig * dsig;
                let gz_q = -u / sig;
                // ∇ log of p_η(z) p_θ(x|z)
                let r = x - (self.w * z + self.v);
                let gx_p = -r;
                let gz_p = self.eta1 + 2.0 * self.eta2 * z + self.w * r;
                joint += weight * 0.5 * ((gx_q - gx_p).powi(2) + (gz_q - gz_p).powi(2));
                loss += weight * rows[j];
            }
        }
        QuadratureResult {
            joint_divergence: joint,
            expected_loss: loss,
            expected_data_score: data_score,
        }
    }
}

/// `x = A z + w` with `A` (`D × d`) having orthogonal columns, together
/// with the exact posterior as an affine encoder, an `N(0, I)` FPE prior of
/// order 2 and the linear decoder `f(z) = A z`.
pub struct LinearGaussian {
    pub a: Array2<f64>,
    pub encoder: AffineEncoder,
    pub prior: Prior,
    pub decoder: LinearDecoder,
}

impl LinearGaussian {
    pub fn new(a: Array2<f64>) -> Self {
        let (dd, d) = a.dim();
        let ata = a.t().dot(&a);
        for i in 0..d {
            for j in 0..d {
                assert!(i == j || ata[[i, j]].abs() < 1e-12, "columns of A must be orthogonal");
            }
        }
        let post_var: Vec<f64> = (0..d).map(|j| 1.0 / (1.0 + ata[[j, j]])).collect();
        let mu_w = Array2::from_shape_fn((dd, d), |(i, j)| a[[i, j]] * post_var[j]);
        let ls_b = Array2::from_shape_fn((1, d), |(_, j)| 0.5 * post_var[j].ln());
        let encoder = AffineEncoder {
            mu: linear("encoder.mu", mu_w.into_dyn(), Tensor::zeros(IxDyn(&[1, d]))),
            log_sigma: linear("encoder.log_sigma", Tensor::zeros(IxDyn(&[dd, d])), ls_b.into_dyn()),
        };
        let decoder = LinearDecoder {
            layer: linear("decoder", a.t().to_owned().into_dyn(), Tensor::zeros(IxDyn(&[1, dd]))),
        };
        // FPE K=2 with η = (0, −½) is N(0, I)
        let prior = Prior::fpe(d, 2).unwrap();
        Self {
            a,
            encoder,
            prior,
            decoder,
        }
    }

    pub fn default_a() -> Array2<f64> {
        ndarray::array![[1.0, 0.5], [2.0, -1.0], [-1.0, -1.5]]
    }

    /// Closed-form `s_∇[N(0, AAᵀ + I)](x)`, using
    /// `(I + AAᵀ)⁻¹ = I − A (I + AᵀA)⁻¹ Aᵀ`.
    pub fn marginal_score(&self, x: &Array1<f64>) -> f64 {
        let dd = self.a.nrows();
        let inner = self.a.t().dot(&self.a) + Array2::<f64>::eye(self.a.ncols());
        let inner_inv = Array2::from_diag(&inner.diag().mapv(|v| 1.0 / v));
        let prec = Array2::<f64>::eye(dd) - self.a.dot(&inner_inv).dot(&self.a.t());
        let g = prec.dot(x);
        0.5 * g.dot(&g) - prec.diag().sum()
    }

    /// Per-sample loss rows (Laplacian included) at one `x`:
    /// `samples × [posterior_div, reconstruction, stability]`.
    pub fn loss_rows(&self, x: &Array1<f64>, samples: usize, seed: u64) -> Array2<f64> {
        let model = ModelRef {
            encoder: &self.encoder,
            prior: &self.prior,
            decoder: &self.decoder,
        };
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let eps = MonteCarloSpec::new(samples, seed).unwrap().draw(1, self.a.ncols());
        let xt = x.clone().into_shape_with_order((1, x.len())).unwrap().into_dyn();
        let opts = FisherLossOptions {
            include_laplacian: true,
            ..Default::default()
        };
        fisher_ae_terms(&bound, &xt, &eps, &opts).unwrap().rows()
    }

    pub fn random_x(&self, rng: &mut ChaCha8Rng) -> Array1<f64> {
        Array1::from_shape_simple_fn(self.a.nrows(), || 1.5 * rng.sample::<f64, _>(StandardNormal))
    }
}

pub fn mean_and_se(v: &Array1<f64>) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.mean().unwrap();
    let var = v.mapv(|x| (x - m) * (x - m)).sum() / (n - 1.0);
    (m, (var / n).sqrt())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
