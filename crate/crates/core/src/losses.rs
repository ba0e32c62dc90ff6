//! Fisher auto-encoder loss, the VAE ELBO baseline, and their per-term
//! breakdowns.
//!
//! Both losses work on a minibatch `x` (`B × D`) and a block of standard
//! normal draws `eps` (`L·B × d`). Row `l·B + i` of `eps` is sample `l` for
//! datum `i`, so the data rows are tiled `L` times. All reported values are
//! means over the `L·B` rows.

use ndarray::{concatenate, ArrayView2, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{AutoEncoder, Decoder, Encoder, Module, Prior};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FisherLossBreakdown {
    pub posterior_div: f64,
    pub reconstruction: f64,
    pub stability: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ElboBreakdown {
    pub kl: f64,
    pub bce: f64,
    pub total: f64,
}

/// Number of posterior samples per datum and the seed they are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MonteCarloSpec {
    pub samples: usize,
    pub seed: u64,
}

impl MonteCarloSpec {
    pub fn new(samples: usize, seed: u64) -> Result<Self> {
        if samples == 0 {
            return Err(Error::InvalidArgument("monte carlo needs L >= 1".into()));
        }
        Ok(Self { samples, seed })
    }

    /// `L·rows × dim` standard normal draws, sample-major.
    pub fn draw(&self, rows: usize, dim: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        standard_normal(&mut rng, self.samples * rows, dim)
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_shape_vec(IxDyn(&[rows, cols]), data).expect("shape matches length")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FisherLossOptions {
    /// Coefficient on `½‖x − f(z)‖²`; 2 gives the unhalved variant.
    pub recon_multiplier: f64,
    /// Adds the constant decoder Laplacian `−D` to the reconstruction term.
    /// Irrelevant for training; needed to compare against Hyvärinen scores.
    pub include_laplacian: bool,
}

impl Default for FisherLossOptions {
    fn default() -> Self {
        Self {
            recon_multiplier: 1.0,
            include_laplacian: false,
        }
    }
}

/// Borrowed view of an encoder/prior/decoder triple.
#[derive(Clone, Copy)]
pub struct ModelRef<'a> {
    pub encoder: &'a dyn Encoder,
    pub prior: &'a Prior,
    pub decoder: &'a dyn Decoder,
}

impl<'a> From<&'a AutoEncoder> for ModelRef<'a> {
    fn from(m: &'a AutoEncoder) -> Self {
        Self {
            encoder: &m.encoder,
            prior: &m.prior,
            decoder: &m.decoder,
        }
    }
}

impl<'a> ModelRef<'a> {
    pub fn bind<'t>(self, tape: &'t Tape, requires_grad: bool) -> Bound<'a, 't> {
        Bound {
            model: self,
            tape,
            encoder: self.encoder.bind(tape, requires_grad),
            prior: self.prior.bind(tape, requires_grad),
            decoder: self.decoder.bind(tape, requires_grad),
        }
    }
}

/// A model whose parameters live on a tape.
pub struct Bound<'a, 't> {
    pub model: ModelRef<'a>,
    pub tape: &'t Tape,
    pub encoder: Vec<Var<'t>>,
    pub prior: Vec<Var<'t>>,
    pub decoder: Vec<Var<'t>>,
}

impl<'t> Bound<'_, 't> {
    /// All parameter vars in `Module::parameters` order of an
    /// [`AutoEncoder`]: encoder, prior, decoder.
    pub fn params(&self) -> Vec<Var<'t>> {
        let mut p = self.encoder.clone();
        p.extend(&self.prior);
        p.extend(&self.decoder);
        p
    }
}

fn tile_rows(x: &Tensor, rows: usize) -> Result<Tensor> {
    let b = x.shape().first().copied().unwrap_or(0);
    if x.ndim() != 2 || b == 0 || rows % b != 0 {
        return Err(Error::shape("tile samples", x.shape(), &[rows]));
    }
    let x2 = x.view().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
    let copies = vec![x2; rows / b];
    Ok(concatenate(Axis(0), &copies)
        .expect("equal widths")
        .into_dyn())
}

/// Per-row Fisher AE terms, each `L·B × 1`.
#[derive(Clone, Copy, Debug)]
pub struct FisherTerms<'t> {
    pub posterior_div: Var<'t>,
    pub reconstruction: Var<'t>,
    pub stability: Var<'t>,
}

impl<'t> FisherTerms<'t> {
    /// Mean over rows of the three terms.
    pub fn total(&self) -> Result<Var<'t>> {
        Ok(self
            .posterior_div
            .add(self.reconstruction)?
            .add(self.stability)?
            .mean())
    }

    pub fn breakdown(&self) -> FisherLossBreakdown {
        let div = self.posterior_div.value().mean().unwrap_or(f64::NAN);
        let rec = self.reconstruction.value().mean().unwrap_or(f64::NAN);
        let stab = self.stability.value().mean().unwrap_or(f64::NAN);
        FisherLossBreakdown {
            posterior_div: div,
            reconstruction: rec,
            stability: stab,
            total: div + rec + stab,
        }
    }

    /// `rows × 3` matrix of `[posterior_div, reconstruction, stability]`.
    pub fn rows(&self) -> ndarray::Array2<f64> {
        let cols = [self.posterior_div, self.reconstruction, self.stability];
        let views: Vec<_> = cols.iter().map(|v| v.value()).collect();
        let views: Vec<ArrayView2<'_, f64>> = views
            .iter()
            .map(|v| v.view().into_dimensionality().expect("column"))
            .collect();
        concatenate(Axis(1), &views).expect("equal heights")
    }
}

/// Builds the three Fisher AE terms on the tape.
///
/// ① `½‖−ε/σ − ∇_z log p_η(z) − ∇_z log p_θ(x|z)‖²`, where the decoder score
/// `J_fᵀ(x − f(z))` is itself a create-graph gradient.
/// ② `½‖x − f(z)‖²` (times `recon_multiplier`).
/// ③ `½‖∇_x log q_φ(z|x)‖²` with `z` held at its sampled value. Writing the
/// density in terms of `μ(x), σ(x)`, this gradient is the VJP of the encoder
/// outputs with cotangents `∂/∂μ = ε/σ` and `∂/∂σ = (ε² − 1)/σ`. Moving `z`
/// with `x` instead would cancel the `μ` channel entirely.
pub fn fisher_ae_terms<'t>(
    m: &Bound<'_, 't>,
    x: &Tensor,
    eps: &Tensor,
    opts: &FisherLossOptions,
) -> Result<FisherTerms<'t>> {
    let tape = m.tape;
    let xv = tape.param(tile_rows(x, eps.shape()[0])?);
    let post = m.model.encoder.encode(&m.encoder, xv)?;
    let e = tape.constant(eps.clone());
    let z = post.reparameterize(e)?;
    let xhat = m.model.decoder.decode(&m.decoder, z)?;
    let resid = xv.sub(xhat)?;

    let loglik = resid.sq_norm_rows()?.sum().scale(-0.5);
    let dec_score = tape.grad(loglik, &[z], true)?.remove(0);
    let q_score = e.div(post.sigma)?.neg();
    let p_score = m.model.prior.score(&m.prior, z)?;
    let posterior_div = q_score
        .sub(p_score)?
        .sub(dec_score)?
        .sq_norm_rows()?
        .scale(0.5);

    let mut reconstruction = resid.sq_norm_rows()?.scale(0.5 * opts.recon_multiplier);
    if opts.include_laplacian {
        reconstruction = reconstruction.add_scalar(-(x.shape()[1] as f64));
    }

    let seed_mu = e.div(post.sigma)?;
    let seed_sigma = e.square().add_scalar(-1.0).div(post.sigma)?;
    let grad_x = tape
        .vjp(&[post.mu, post.sigma], &[seed_mu, seed_sigma], &[xv], true)?
        .remove(0);
    let stability = grad_x.sq_norm_rows()?.scale(0.5);

    Ok(FisherTerms {
        posterior_div,
        reconstruction,
        stability,
    })
}

/// Fisher AE loss and its differentiable mean, failing on non-finite
/// values.
pub fn fisher_ae_objective<'t>(
    m: &Bound<'_, 't>,
    x: &Tensor,
    eps: &Tensor,
    opts: &FisherLossOptions,
) -> Result<(Var<'t>, FisherLossBreakdown)> {
    let terms = fisher_ae_terms(m, x, eps, opts)?;
    let b = terms.breakdown();
    if !b.total.is_finite() {
        return Err(Error::NonFiniteLoss(Box::new(b)));
    }
    Ok((terms.total()?, b))
}

/// Value of the Fisher AE loss on a batch, with fresh draws from `mc`.
pub fn fisher_ae_loss<'a>(
    model: impl Into<ModelRef<'a>>,
    x: ArrayView2<'_, f64>,
    mc: &MonteCarloSpec,
    opts: &FisherLossOptions,
) -> Result<FisherLossBreakdown> {
    let model = model.into();
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let eps = mc.draw(x.nrows(), model.encoder.latent_dim());
    let (_, b) = fisher_ae_objective(&bound, &x.to_owned().into_dyn(), &eps, opts)?;
    Ok(b)
}

/// Term ① alone: the Fisher divergence between the encoder posterior and
/// the model posterior, estimated with `mc`.
pub fn posterior_fisher_divergence_estimate<'a>(
    model: impl Into<ModelRef<'a>>,
    x: ArrayView2<'_, f64>,
    mc: &MonteCarloSpec,
) -> Result<f64> {
    Ok(fisher_ae_loss(model, x, mc, &FisherLossOptions::default())?.posterior_div)
}

/// Per-row ELBO terms, each `L·B × 1`.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms<'t> {
    pub kl: Var<'t>,
    pub bce: Var<'t>,
}

impl<'t> ElboTerms<'t> {
    pub fn total(&self) -> Result<Var<'t>> {
        Ok(self.kl.add(self.bce)?.mean())
    }

    pub fn breakdown(&self) -> ElboBreakdown {
        let kl = self.kl.value().mean().unwrap_or(f64::NAN);
        let bce = self.bce.value().mean().unwrap_or(f64::NAN);
        ElboBreakdown {
            kl,
            bce,
            total: kl + bce,
        }
    }
}

/// Negative ELBO: closed-form `KL[q‖N(0, I)]` plus the Bernoulli
/// reconstruction cross-entropy at `z = μ + σ⊙ε`. The prior of `m` is not
/// consulted.
pub fn vae_elbo_terms<'t>(m: &Bound<'_, 't>, x: &Tensor, eps: &Tensor) -> Result<ElboTerms<'t>> {
    let tape = m.tape;
    let xv = tape.constant(tile_rows(x, eps.shape()[0])?);
    let post = m.model.encoder.encode(&m.encoder, xv)?;
    let z = post.reparameterize(tape.constant(eps.clone()))?;
    let probs = m.model.decoder.decode(&m.decoder, z)?;
    let var = post.sigma.square();
    let kl = post
        .mu
        .square()
        .add(var)?
        .sub(var.ln())?
        .add_scalar(-1.0)
        .sum_axis(1)?
        .scale(0.5);
    let bce = crate::distributions::BernoulliDecoderLikelihood { probs }.nll(xv)?;
    Ok(ElboTerms { kl, bce })
}

pub fn vae_elbo_objective<'t>(
    m: &Bound<'_, 't>,
    x: &Tensor,
    eps: &Tensor,
) -> Result<(Var<'t>, ElboBreakdown)> {
    let terms = vae_elbo_terms(m, x, eps)?;
    let b = terms.breakdown();
    if !b.total.is_finite() {
        return Err(Error::NonFiniteLoss(Box::new(FisherLossBreakdown {
            reconstruction: b.bce,
            total: b.total,
            ..Default::default()
        })));
    }
    Ok((terms.total()?, b))
}

/// Value of the negative ELBO on a batch.
pub fn vae_elbo_loss<'a>(
    model: impl Into<ModelRef<'a>>,
    x: ArrayView2<'_, f64>,
    mc: &MonteCarloSpec,
) -> Result<ElboBreakdown> {
    let model = model.into();
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    let eps = mc.draw(x.nrows(), model.encoder.latent_dim());
    let (_, b) = vae_elbo_objective(&bound, &x.to_owned().into_dyn(), &eps)?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{numeric_gradient, rel_err};
    use crate::autodiff::tensor;
    use crate::nets::{Activation, AffineEncoder, Linear, LinearDecoder, Parameter};
    use ndarray::{array, Array1, Array2};

    fn affine(mu_w: Tensor, mu_b: Tensor, ls_w: Tensor, ls_b: Tensor) -> AffineEncoder {
        AffineEncoder {
            mu: Linear {
                weight: Parameter::new("encoder.mu.weight", mu_w),
                bias: Parameter::new("encoder.mu.bias", mu_b),
            },
            log_sigma: Linear {
                weight: Parameter::new("encoder.log_sigma.weight", ls_w),
                bias: Parameter::new("encoder.log_sigma.bias", ls_b),
            },
        }
    }

    fn linear_dec(w: Tensor, b: Tensor) -> LinearDecoder {
        LinearDecoder {
            layer: Linear {
                weight: Parameter::new("decoder.weight", w),
                bias: Parameter::new("decoder.bias", b),
            },
        }
    }

    fn fpe(eta: Tensor) -> Prior {
        Prior::Fpe(Parameter::new("prior.eta", eta))
    }

    fn mean_and_se(v: &Array1<f64>) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.mean().unwrap();
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    fn rows_of<'a>(model: impl Into<ModelRef<'a>>, x: &Tensor, eps: &Tensor, opts: &FisherLossOptions) -> Array2<f64> {
        let model = model.into();
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        fisher_ae_terms(&bound, x, eps, opts).unwrap().rows()
    }

    #[test]
    fn mc_spec_rejects_zero_samples() {
        assert!(MonteCarloSpec::new(0, 1).is_err());
        let mc = MonteCarloSpec::new(3, 9).unwrap();
        assert_eq!(mc.draw(4, 2).shape(), &[12, 2]);
        assert_eq!(mc.draw(4, 2), mc.draw(4, 2));
    }

    #[test]
    fn perfect_autoencoder_has_zero_reconstruction() {
        let x = array![[0.3, -1.2, 2.0]];
        let enc = affine(
            Tensor::zeros(IxDyn(&[3, 2])),
            Tensor::zeros(IxDyn(&[1, 2])),
            Tensor::zeros(IxDyn(&[3, 2])),
            Tensor::from_elem(IxDyn(&[1, 2]), (1e-6f64).ln()),
        );
        let dec = linear_dec(Tensor::zeros(IxDyn(&[2, 3])), x.clone().into_dyn());
        let prior = fpe(Tensor::zeros(IxDyn(&[2, 1])));
        let model = ModelRef { encoder: &enc, prior: &prior, decoder: &dec };
        let b = fisher_ae_loss(model, x.view(), &MonteCarloSpec::new(8, 0).unwrap(), &Default::default()).unwrap();
        assert_eq!(b.reconstruction, 0.0);
        assert_eq!(b.total, b.posterior_div + b.reconstruction + b.stability);
    }

    #[test]
    fn posterior_term_matches_hand_expansion_with_zero_decoder_score() {
        // constant decoder ⇒ J_f = 0, so term ① is ½‖ε/σ + s_η(μ + σε)‖²
        let x0 = array![[0.4, -0.7]];
        let enc = affine(
            tensor(&[2, 2], vec![0.5, -0.2, 0.1, 0.3]),
            tensor(&[1, 2], vec![0.2, -0.1]),
            tensor(&[2, 2], vec![0.1, 0.0, -0.2, 0.3]),
            tensor(&[1, 2], vec![-0.3, 0.2]),
        );
        let dec = linear_dec(Tensor::zeros(IxDyn(&[2, 2])), tensor(&[1, 2], vec![1.0, 2.0]));
        let eta = tensor(&[2, 4], vec![0.3, -0.6, 0.1, -0.05, -0.2, -0.4, 0.0, -0.1]);
        let prior = fpe(eta.clone());
        let model = ModelRef { encoder: &enc, prior: &prior, decoder: &dec };
        let eps = tensor(&[3, 2], vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.8]);
        let rows = rows_of(model, &x0.clone().into_dyn(), &eps, &Default::default());

        let xs = [0.4, -0.7];
        let mu: Vec<f64> = (0..2)
            .map(|j| xs[0] * enc.mu.weight.value[[0, j]] + xs[1] * enc.mu.weight.value[[1, j]] + enc.mu.bias.value[[0, j]])
            .collect();
        let sg: Vec<f64> = (0..2)
            .map(|j| {
                (xs[0] * enc.log_sigma.weight.value[[0, j]] + xs[1] * enc.log_sigma.weight.value[[1, j]] + enc.log_sigma.bias.value[[0, j]]).exp()
            })
            .collect();
        for r in 0..3 {
            let mut want = 0.0;
            for j in 0..2 {
                let e = eps[[r, j]];
                let z = mu[j] + sg[j] * e;
                let s = eta[[j, 0]] + 2.0 * eta[[j, 1]] * z + 3.0 * eta[[j, 2]] * z * z + 4.0 * eta[[j, 3]] * z * z * z;
                want += 0.5 * (e / sg[j] + s).powi(2);
            }
            assert!((rows[[r, 0]] - want).abs() < 1e-12 * want.max(1.0), "row {r}");
        }
    }

    #[test]
    fn stability_term_matches_closed_form_for_affine_encoder() {
        // ∇_x log q = W_μ (ε/σ) + W_s ((ε²−1)/σ) · σ for σ = exp(·)
        let x0 = array![[0.25, -0.5, 1.0]];
        let wm = tensor(&[3, 2], vec![0.5, -0.2, 0.1, 0.3, -0.4, 0.7]);
        let ws = tensor(&[3, 2], vec![0.1, 0.0, -0.2, 0.3, 0.05, -0.1]);
        let bs = tensor(&[1, 2], vec![-0.3, 0.2]);
        let enc = affine(wm.clone(), Tensor::zeros(IxDyn(&[1, 2])), ws.clone(), bs.clone());
        let dec = linear_dec(Tensor::zeros(IxDyn(&[2, 3])), Tensor::zeros(IxDyn(&[1, 3])));
        let prior = Prior::std_normal(2);
        let model = ModelRef { encoder: &enc, prior: &prior, decoder: &dec };
        let eps = tensor(&[1, 2], vec![0.7, -1.3]);
        let rows = rows_of(model, &x0.clone().into_dyn(), &eps, &Default::default());
        let mut g = [0.0; 3];
        for j in 0..2 {
            let ls: f64 = (0..3).map(|i| x0[[0, i]] * ws[[i, j]]).sum::<f64>() + bs[[0, j]];
            let sigma = ls.exp();
            let e = eps[[0, j]];
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += wm[[i, j]] * e / sigma + ws[[i, j]] * sigma * (e * e - 1.0) / sigma;
            }
        }
        let want = 0.5 * g.iter().map(|v| v * v).sum::<f64>();
        assert!((rows[[0, 2]] - want).abs() < 1e-12);
    }

    #[test]
    fn posterior_term_is_chi_square_mean_for_flat_scores() {
        // prior score 0 (K=1, η=0), constant decoder, q = N(0, I)
        let d = 3;
        let enc = affine(
            Tensor::zeros(IxDyn(&[2, d])),
            Tensor::zeros(IxDyn(&[1, d])),
            Tensor::zeros(IxDyn(&[2, d])),
            Tensor::zeros(IxDyn(&[1, d])),
        );
        let dec = linear_dec(Tensor::zeros(IxDyn(&[d, 2])), Tensor::zeros(IxDyn(&[1, 2])));
        let prior = fpe(Tensor::zeros(IxDyn(&[d, 1])));
        let model = ModelRef { encoder: &enc, prior: &prior, decoder: &dec };
        let mc = MonteCarloSpec::new(100_000, 5).unwrap();
        let x = array![[0.1, 0.2]].into_dyn();
        let rows = rows_of(model, &x, &mc.draw(1, d), &Default::default());
        let (m, se) = mean_and_se(&rows.column(0).to_owned());
        assert!((m - d as f64 / 2.0).abs() < 3.0 * se, "{m} ± {se}");
    }

    /// `x = Az + w`, with A's columns orthogonal so the exact posterior is
    /// diagonal: `N(ΣAᵀx, Σ)`, `Σ = (I + AᵀA)⁻¹`.
    fn linear_gaussian() -> (Tensor, AffineEncoder, LinearDecoder, Prior) {
        let a = tensor(&[3, 2], vec![1.0, 0.5, 2.0, -1.0, -1.0, -1.5]);
        let (dd, d) = (3, 2);
        let mut post_var = [0.0; 2];
        for (j, pv) in post_var.iter_mut().enumerate() {
            let col: f64 = (0..dd).map(|i| a[[i, j]] * a[[i, j]]).sum();
            *pv = 1.0 / (1.0 + col);
        }
        let mut mu_w = Tensor::zeros(IxDyn(&[dd, d]));
        for i in 0..dd {
            for j in 0..d {
                mu_w[[i, j]] = a[[i, j]] * post_var[j];
            }
        }
        let ls_b = tensor(&[1, d], post_var.iter().map(|v| 0.5 * v.ln()).collect());
        let enc = affine(mu_w, Tensor::zeros(IxDyn(&[1, d])), Tensor::zeros(IxDyn(&[dd, d])), ls_b);
        let dec = linear_dec(a.t().to_owned(), Tensor::zeros(IxDyn(&[1, dd])));
        let prior = Prior::fpe(d, 2).unwrap();
        (a, enc, dec, prior)
    }

    #[test]
    fn exact_posterior_has_zero_posterior_divergence() {
        let (_, enc, dec, prior) = linear_gaussian();
        let model = ModelRef { encoder: &enc, prior: &prior, decoder: &dec };
        let x = array![[0.5, -1.0, 2.0]];
        let b = fisher_ae_loss(model, x.view(), &MonteCarloSpec::new(200, 1).unwrap(), &Default::default()).unwrap();
        assert!(b.posterior_div.abs() < 1e-20, "{}", b.posterior_div);
    }

    #[test]
    fn linear_gaussian_loss_is_hyvarinen_score_of_marginal() {
        let (a, enc, dec, prior) = linear_gaussian();
        let model = ModelRef { encoder: &enc, prior: &prior, decoder: &dec };
        let c = a.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let cov = c.dot(&c.t()) + Array2::<f64>::eye(3);
        let cinv = inv3(&cov);
        let opts = FisherLossOptions {
            include_laplacian: true,
            ..Default::default()
        };
        for (k, xs) in [[0.5, -1.0, 2.0], [0.0, 0.0, 0.0], [-2.0, 1.5, 0.3]].iter().enumerate() {
            let x = Array2::from_shape_vec((1, 3), xs.to_vec()).unwrap();
            let g = cinv.dot(&Array1::from(xs.to_vec()));
            let want = 0.5 * g.dot(&g) - cinv.diag().sum();
            let mc = MonteCarloSpec::new(20_000, k as u64).unwrap();
            let rows = rows_of(model, &x.into_dyn(), &mc.draw(1, 2), &opts);
            let (m, se) = mean_and_se(&rows.sum_axis(Axis(1)));
            assert!((m - want).abs() < 3.0 * se, "x={xs:?}: {m} ± {se} vs {want}");
        }
    }

    fn inv3(m: &Array2<f64>) -> Array2<f64> {
        let c = |i: usize, j: usize| {
            let r: Vec<usize> = (0..3).filter(|&k| k != i).collect();
            let s: Vec<usize> = (0..3).filter(|&k| k != j).collect();
            m[[r[0], s[0]]] * m[[r[1], s[1]]] - m[[r[0], s[1]]] * m[[r[1], s[0]]]
        };
        let det: f64 = (0..3).map(|j| m[[0, j]] * c(0, j) * if j % 2 == 0 { 1.0 } else { -1.0 }).sum();
        Array2::from_shape_fn((3, 3), |(i, j)| c(j, i) * if (i + j) % 2 == 0 { 1.0 } else { -1.0 } / det)
    }

    #[test]
    fn one_and_many_samples_agree_in_expectation() {
        let model = tiny();
        let x = array![[0.2, 0.8, 0.5, 0.1]];
        let outer = 1000;
        let mut m1 = Vec::new();
        let mut m64 = Vec::new();
        for s in 0..outer {
            let l1 = MonteCarloSpec::new(1, s).unwrap();
            let l64 = MonteCarloSpec::new(64, 10_000 + s).unwrap();
            m1.push(posterior_fisher_divergence_estimate(&model, x.view(), &l1).unwrap());
            m64.push(posterior_fisher_divergence_estimate(&model, x.view(), &l64).unwrap());
        }
        let (a, sa) = mean_and_se(&Array1::from(m1));
        let (b, sb) = mean_and_se(&Array1::from(m64));
        assert!((a - b).abs() < 3.0 * (sa * sa + sb * sb).sqrt(), "{a} vs {b}");
    }

    fn tiny() -> AutoEncoder {
        let mut m = AutoEncoder::init(4, 2, &[8], Activation::Softplus, Activation::Identity, Prior::fpe(2, 5).unwrap(), 11);
        if let Prior::Fpe(eta) = &mut m.prior {
            eta.value = tensor(&[2, 5], vec![0.1, -0.4, 0.05, -0.02, -0.01, -0.2, -0.6, 0.0, 0.03, -0.02]);
        }
        m
    }

    #[test]
    fn estimate_equals_breakdown_field() {
        let model = tiny();
        let x = array![[0.2, 0.8, 0.5, 0.1], [0.9, 0.0, 0.3, 0.4]];
        let mc = MonteCarloSpec::new(4, 3).unwrap();
        let b = fisher_ae_loss(&model, x.view(), &mc, &Default::default()).unwrap();
        assert_eq!(posterior_fisher_divergence_estimate(&model, x.view(), &mc).unwrap(), b.posterior_div);
        assert!(b.posterior_div >= 0.0 && b.stability >= 0.0);
        assert_eq!(b.total, b.posterior_div + b.reconstruction + b.stability);
    }

    #[test]
    fn loss_is_bit_deterministic() {
        let model = tiny();
        let x = array![[0.2, 0.8, 0.5, 0.1], [0.9, 0.0, 0.3, 0.4]];
        let mc = MonteCarloSpec::new(2, 17).unwrap();
        let a = fisher_ae_loss(&model, x.view(), &mc, &Default::default()).unwrap();
        let b = fisher_ae_loss(&model, x.view(), &mc, &Default::default()).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a, b);
    }

    #[test]
    fn recon_multiplier_scales_reconstruction() {
        let model = tiny();
        let x = array![[0.2, 0.8, 0.5, 0.1]];
        let mc = MonteCarloSpec::new(2, 0).unwrap();
        let half = fisher_ae_loss(&model, x.view(), &mc, &Default::default()).unwrap();
        let full = fisher_ae_loss(
            &model,
            x.view(),
            &mc,
            &FisherLossOptions {
                recon_multiplier: 2.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((full.reconstruction - 2.0 * half.reconstruction).abs() < 1e-14);
        assert_eq!(full.posterior_div, half.posterior_div);
    }

    fn loss_with_params(model: &AutoEncoder, values: &[Tensor], x: &Tensor, eps: &Tensor, elbo: bool) -> Result<f64> {
        let mut m = model.clone();
        for (p, v) in m.parameters_mut().into_iter().zip(values) {
            p.value = v.clone();
        }
        let tape = Tape::new();
        let bound = ModelRef::from(&m).bind(&tape, false);
        Ok(if elbo {
            vae_elbo_objective(&bound, x, eps)?.1.total
        } else {
            fisher_ae_objective(&bound, x, eps, &Default::default())?.1.total
        })
    }

    fn check_param_gradients(model: &AutoEncoder, elbo: bool, tol: f64) {
        let x = array![[0.2, 0.8, 0.5, 0.1], [0.9, 0.05, 0.3, 0.4], [0.6, 0.6, 0.1, 0.7]].into_dyn();
        let eps = MonteCarloSpec::new(2, 4).unwrap().draw(3, 2);
        let tape = Tape::new();
        let bound = ModelRef::from(model).bind(&tape, true);
        let params = bound.params();
        let (total, _) = if elbo {
            let (t, b) = vae_elbo_objective(&bound, &x, &eps).unwrap();
            (t, b.total)
        } else {
            let (t, b) = fisher_ae_objective(&bound, &x, &eps, &Default::default()).unwrap();
            (t, b.total)
        };
        let analytic = tape.grad_values(total, &params).unwrap();
        let values: Vec<Tensor> = model.parameters().iter().map(|p| p.value.clone()).collect();
        let numeric = numeric_gradient(&|v: &[Tensor]| loss_with_params(model, v, &x, &eps, elbo), &values, 1e-5).unwrap();
        let names: Vec<_> = model.parameters().iter().map(|p| p.name.clone()).collect();
        for ((a, n), name) in analytic.iter().zip(&numeric).zip(&names) {
            let err = rel_err(a, n);
            assert!(err < tol, "{name}: rel err {err:.2e}");
        }
    }

    #[test]
    fn fisher_parameter_gradients_match_finite_differences() {
        check_param_gradients(&tiny(), false, 1e-4);
    }

    #[test]
    fn elbo_parameter_gradients_match_finite_differences() {
        let mut m = tiny();
        m.decoder.net.output = Activation::Sigmoid;
        m.prior = Prior::std_normal(2);
        check_param_gradients(&m, true, 1e-6);
    }

    #[test]
    fn kl_closed_form_cases() {
        let d = 1;
        let mk = |mu: f64| {
            affine(
                Tensor::zeros(IxDyn(&[2, d])),
                Tensor::from_elem(IxDyn(&[1, d]), mu),
                Tensor::zeros(IxDyn(&[2, d])),
                Tensor::zeros(IxDyn(&[1, d])),
            )
        };
        let dec = linear_dec(Tensor::zeros(IxDyn(&[d, 2])), Tensor::zeros(IxDyn(&[1, 2])));
        let prior = Prior::std_normal(d);
        let x = array![[1.0, 0.0]];
        let mc = MonteCarloSpec::new(1, 0).unwrap();
        let e0 = mk(0.0);
        let kl0 = vae_elbo_loss(ModelRef { encoder: &e0, prior: &prior, decoder: &dec }, x.view(), &mc).unwrap();
        assert_eq!(kl0.kl, 0.0);
        let e1 = mk(1.0);
        let kl1 = vae_elbo_loss(ModelRef { encoder: &e1, prior: &prior, decoder: &dec }, x.view(), &mc).unwrap();
        assert!((kl1.kl - 0.5).abs() < 1e-15);
        // decoder outputs sigmoid(0)=... here identity 0, clamped to 1e-7
        assert!((kl1.bce - (-(1e-7f64).ln() - (1.0 - 1e-7f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn non_finite_loss_carries_breakdown() {
        let mut m = tiny();
        m.decoder.net.layers[1].bias.value.fill(1e200);
        let x = array![[0.2, 0.8, 0.5, 0.1]];
        let err = fisher_ae_loss(&m, x.view(), &MonteCarloSpec::new(1, 0).unwrap(), &Default::default()).unwrap_err();
        match err {
            Error::NonFiniteLoss(b) => assert!(!b.reconstruction.is_finite()),
            other => panic!("{other:?}"),
        }
    }
}
