//! MLP encoder/decoder models and the Gaussian posterior.
//!
//! Models are plain containers of named [`Parameter`]s. To run one on a
//! [`Tape`], bind its parameters (`bind`) and pass the resulting `Var`s
//! positionally to `encode`/`decode`.

use ndarray::{Array2, ArrayView2, Ix2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::distributions::{FpePrior, StdNormalPrior};
use crate::error::{Error, Result};

/// Lower bound added to every posterior standard deviation.
pub const SIGMA_MIN: f64 = 1e-6;

/// Slope of the negative half of [`Activation::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// Twice differentiable; default for hidden layers.
    Softplus,
    /// Second derivative is zero almost everywhere, so input-gradient
    /// penalties only see its first-order behaviour.
    LeakyRelu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Softplus => x.softplus(),
            Activation::LeakyRelu => x.leaky_relu(LEAKY_SLOPE),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

/// Anything owning an ordered list of parameters.
pub trait Module {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    /// Places the parameters on `tape` as leaves, in `parameters()` order.
    fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Vec<Var<'t>> {
        self.parameters()
            .into_iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect()
    }

    fn num_scalars(&self) -> usize {
        self.parameters().iter().map(|p| p.value.len()).sum()
    }
}

fn check_finite(v: Var<'_>, layer: &str) -> Result<()> {
    if v.value().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericOverflow {
            layer: layer.to_string(),
        })
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| {
        rng.random_range(-limit..=limit)
    })
}

/// Affine map `x W + b` on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn init(name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), glorot(rng, fan_in, fan_out)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(IxDyn(&[1, fan_out]))),
        }
    }

    pub fn zeros(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), Tensor::zeros(IxDyn(&[fan_in, fan_out]))),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(IxDyn(&[1, fan_out]))),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p[0])?.add(p[1])
    }
}

impl Module for Linear {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Stack of affine layers; `hidden` follows every layer but the last,
/// `output` follows the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub name: String,
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    pub fn init(
        name: &str,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(&format!("{name}.layer{i}"), w[0], w[1], rng))
            .collect();
        Self {
            name: name.to_string(),
            layers,
            hidden,
            output,
        }
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&p[2 * i..2 * i + 2], h)?;
            h = if i == last { self.output } else { self.hidden }.apply(h);
            check_finite(h, &format!("{}.layer{i}", self.name))?;
        }
        Ok(h)
    }
}

impl Module for Mlp {
    fn parameters(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.parameters_mut()).collect()
    }
}

/// Diagonal Gaussian `q(z|x) = N(μ, diag(σ²))`, one row per datum.
#[derive(Clone, Copy, Debug)]
pub struct GaussianPosterior<'t> {
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
}

impl<'t> GaussianPosterior<'t> {
    /// `z = μ + σ ⊙ ε`; differentiable through `μ` and `σ`.
    pub fn reparameterize(&self, eps: Var<'t>) -> Result<Var<'t>> {
        let (ms, es) = (self.mu.shape(), eps.shape());
        if ms != es {
            return Err(Error::shape("reparameterize", &ms, &es));
        }
        self.mu.add(self.sigma.mul(eps)?)
    }
}

/// Maps data rows to a Gaussian posterior over the latents.
pub trait Encoder: Module + Sync {
    fn input_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn encode<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<GaussianPosterior<'t>>;
}

/// Maps latent rows to data space, `f_θ(z)`.
pub trait Decoder: Module + Sync {
    fn latent_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn decode<'t>(&self, params: &[Var<'t>], z: Var<'t>) -> Result<Var<'t>>;
}

/// MLP trunk with a mean head and a log-σ head;
/// `σ = softplus(head) + SIGMA_MIN`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpEncoder {
    pub trunk: Mlp,
    pub mu_head: Linear,
    pub log_sigma_head: Linear,
}

impl MlpEncoder {
    /// `widths = [D, h1, ..., hn]`; heads map `hn → d`.
    pub fn init(widths: &[usize], latent: usize, act: Activation, rng: &mut ChaCha8Rng) -> Self {
        let trunk = Mlp::init("encoder", widths, act, act, rng);
        let last = *widths.last().expect("at least the input width");
        Self {
            trunk,
            mu_head: Linear::init("encoder.mu", last, latent, rng),
            log_sigma_head: Linear::init("encoder.log_sigma", last, latent, rng),
        }
    }
}

impl Module for MlpEncoder {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.trunk.parameters();
        p.extend(self.mu_head.parameters());
        p.extend(self.log_sigma_head.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.trunk.parameters_mut();
        p.extend(self.mu_head.parameters_mut());
        p.extend(self.log_sigma_head.parameters_mut());
        p
    }
}

impl Encoder for MlpEncoder {
    fn input_dim(&self) -> usize {
        self.trunk
            .layers
            .first()
            .map_or(self.mu_head.fan_in(), Linear::fan_in)
    }

    fn latent_dim(&self) -> usize {
        self.mu_head.fan_out()
    }

    fn encode<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<GaussianPosterior<'t>> {
        let n = 2 * self.trunk.layers.len();
        let h = self.trunk.forward(&params[..n], x)?;
        let mu = self.mu_head.forward(&params[n..n + 2], h)?;
        check_finite(mu, "encoder.mu")?;
        let sigma = self
            .log_sigma_head
            .forward(&params[n + 2..n + 4], h)?
            .softplus()
            .add_scalar(SIGMA_MIN);
        check_finite(sigma, "encoder.log_sigma")?;
        Ok(GaussianPosterior { mu, sigma })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpDecoder {
    pub net: Mlp,
}

impl MlpDecoder {
    /// `widths = [d, h1, ..., D]`.
    pub fn init(widths: &[usize], act: Activation, output: Activation, rng: &mut ChaCha8Rng) -> Self {
        Self {
            net: Mlp::init("decoder", widths, act, output, rng),
        }
    }
}

impl Module for MlpDecoder {
    fn parameters(&self) -> Vec<&Parameter> {
        self.net.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.net.parameters_mut()
    }
}

impl Decoder for MlpDecoder {
    fn latent_dim(&self) -> usize {
        self.net.layers[0].fan_in()
    }

    fn output_dim(&self) -> usize {
        self.net.layers.last().expect("non-empty decoder").fan_out()
    }

    fn decode<'t>(&self, params: &[Var<'t>], z: Var<'t>) -> Result<Var<'t>> {
        self.net.forward(params, z)
    }
}

/// `μ = x W_μ + b_μ`, `σ = exp(x W_s + b_s)`. With `W_s = 0` this is the
/// family of exact posteriors of a linear-Gaussian model.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineEncoder {
    pub mu: Linear,
    pub log_sigma: Linear,
}

impl Module for AffineEncoder {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.mu.parameters();
        p.extend(self.log_sigma.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.mu.parameters_mut();
        p.extend(self.log_sigma.parameters_mut());
        p
    }
}

impl Encoder for AffineEncoder {
    fn input_dim(&self) -> usize {
        self.mu.fan_in()
    }

    fn latent_dim(&self) -> usize {
        self.mu.fan_out()
    }

    fn encode<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<GaussianPosterior<'t>> {
        let mu = self.mu.forward(&params[0..2], x)?;
        let sigma = self.log_sigma.forward(&params[2..4], x)?.exp();
        Ok(GaussianPosterior { mu, sigma })
    }
}

/// `f(z) = z W + b` (a linear decoder, identity output).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDecoder {
    pub layer: Linear,
}

impl Module for LinearDecoder {
    fn parameters(&self) -> Vec<&Parameter> {
        self.layer.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layer.parameters_mut()
    }
}

impl Decoder for LinearDecoder {
    fn latent_dim(&self) -> usize {
        self.layer.fan_in()
    }

    fn output_dim(&self) -> usize {
        self.layer.fan_out()
    }

    fn decode<'t>(&self, params: &[Var<'t>], z: Var<'t>) -> Result<Var<'t>> {
        self.layer.forward(params, z)
    }
}

/// The latent prior as trained: fixed `N(0, I)` or a learned FPE family.
#[derive(Clone, Debug, PartialEq)]
pub enum Prior {
    StdNormal(StdNormalPrior),
    /// `eta` is `d × K`.
    Fpe(Parameter),
}

impl Prior {
    pub fn std_normal(dim: usize) -> Self {
        Prior::StdNormal(StdNormalPrior::new(dim))
    }

    /// FPE prior initialised to the standard-normal coefficients.
    pub fn fpe(dim: usize, order: usize) -> Result<Self> {
        let fpe = FpePrior::standard_normal(dim, order)?;
        Ok(Prior::Fpe(Parameter::new("prior.eta", fpe.eta)))
    }

    pub fn dim(&self) -> usize {
        match self {
            Prior::StdNormal(p) => p.dim,
            Prior::Fpe(eta) => eta.value.shape()[0],
        }
    }

    pub fn as_fpe(&self) -> Option<FpePrior> {
        match self {
            Prior::Fpe(eta) => Some(FpePrior {
                eta: eta.value.clone(),
            }),
            Prior::StdNormal(_) => None,
        }
    }

    /// `∇_z log p(z)` on the graph; `params` is this prior's binding.
    pub fn score<'t>(&self, params: &[Var<'t>], z: Var<'t>) -> Result<Var<'t>> {
        match self {
            Prior::StdNormal(p) => Ok(p.score(z)),
            Prior::Fpe(_) => crate::distributions::fpe_score(params[0], z),
        }
    }
}

impl Module for Prior {
    fn parameters(&self) -> Vec<&Parameter> {
        match self {
            Prior::StdNormal(_) => Vec::new(),
            Prior::Fpe(eta) => vec![eta],
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Prior::StdNormal(_) => Vec::new(),
            Prior::Fpe(eta) => vec![eta],
        }
    }
}

/// Encoder, prior and decoder trained together.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoEncoder {
    pub encoder: MlpEncoder,
    pub prior: Prior,
    pub decoder: MlpDecoder,
}

impl AutoEncoder {
    /// Encoder `D → hidden… → (d, d)`, decoder `d → reversed hidden… → D`.
    pub fn init(
        data_dim: usize,
        latent: usize,
        hidden: &[usize],
        act: Activation,
        output: Activation,
        prior: Prior,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc_widths = vec![data_dim];
        enc_widths.extend_from_slice(hidden);
        let encoder = MlpEncoder::init(&enc_widths, latent, act, &mut rng);
        let mut dec_widths = vec![latent];
        dec_widths.extend(hidden.iter().rev());
        dec_widths.push(data_dim);
        let decoder = MlpDecoder::init(&dec_widths, act, output, &mut rng);
        Self {
            encoder,
            prior,
            decoder,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim()
    }

    /// Posterior means for a batch of rows, without building gradients.
    pub fn encode_mean(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let p = self.encoder.bind(&tape, false);
        let xv = tape.constant(x.to_owned().into_dyn());
        let post = self.encoder.encode(&p, xv)?;
        Ok(to2(&post.mu.value()))
    }

    /// Deterministic reconstruction through the posterior mean.
    pub fn reconstruct(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let z = self.encode_mean(x)?;
        self.decode(z.view())
    }

    pub fn decode(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let p = self.decoder.bind(&tape, false);
        let zv = tape.constant(z.to_owned().into_dyn());
        Ok(to2(&self.decoder.decode(&p, zv)?.value()))
    }
}

impl Module for AutoEncoder {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.encoder.parameters();
        p.extend(self.prior.parameters());
        p.extend(self.decoder.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.encoder.parameters_mut();
        p.extend(self.prior.parameters_mut());
        p.extend(self.decoder.parameters_mut());
        p
    }
}

pub(crate) fn to2(t: &Tensor) -> Array2<f64> {
    t.clone().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}
