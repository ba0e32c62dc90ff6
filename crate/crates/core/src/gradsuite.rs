//! Finite-difference suites over every analytic score and loss gradient.
//!
//! Each suite compares reverse-mode (or closed-form) derivatives with
//! central differences of forward evaluations on small models (`D = 4`,
//! `d = 2`) and reports the largest norm-wise relative error.

use std::fmt;

use ndarray::{array, Array1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::gradcheck::{check, max_rel_err, numeric_gradient, rel_err};
use crate::autodiff::{tensor, Tape, Tensor, Var};
use crate::distributions::{
    fpe_score, gaussian_log_density, gaussian_posterior_score_z, FpePrior, GaussianDecoderLikelihood,
};
use crate::error::Result;
use crate::losses::{fisher_ae_objective, vae_elbo_objective, FisherLossOptions, ModelRef, MonteCarloSpec};
use crate::nets::{Activation, AutoEncoder, Decoder, GaussianPosterior, Module, Prior};

/// Threshold for first-order derivatives and closed-form scores.
pub const FIRST_ORDER_TOL: f64 = 1e-6;
/// Threshold for gradients that pass through input-gradient terms.
pub const SECOND_ORDER_TOL: f64 = 1e-4;

const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} max_rel_err={:.3e} threshold={:.0e} {}",
            self.name,
            self.max_rel_err,
            self.threshold,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// The `D = 4`, `d = 2` model used by the loss suites: one hidden layer of
/// width 8 and an FPE prior of order 5 with a negative leading coefficient.
pub fn tiny_model() -> AutoEncoder {
    let mut m = AutoEncoder::init(4, 2, &[8], Activation::Softplus, Activation::Identity, Prior::fpe(2, 5).unwrap(), 11);
    if let Prior::Fpe(eta) = &mut m.prior {
        eta.value = tensor(&[2, 5], vec![0.1, -0.4, 0.05, -0.02, -0.01, -0.2, -0.6, 0.0, 0.03, -0.02]);
    }
    m
}

fn tiny_elbo_model() -> AutoEncoder {
    let mut m = tiny_model();
    m.decoder.net.output = Activation::Sigmoid;
    m.prior = Prior::std_normal(2);
    m
}

fn batch() -> Tensor {
    array![[0.2, 0.8, 0.5, 0.1], [0.9, 0.05, 0.3, 0.4], [0.6, 0.6, 0.1, 0.7]].into_dyn()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_shape_simple_fn(shape, || scale * rng.sample::<f64, _>(StandardNormal))
}

fn report(name: &'static str, err: f64, threshold: f64) -> SuiteReport {
    SuiteReport {
        name,
        max_rel_err: err,
        threshold,
    }
}

/// Elementwise ops, matmul and reductions composed into one scalar.
pub fn ops_first_order() -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4], 1.0);
    let b = random(&mut rng, &[4, 2], 0.5);
    let c = random(&mut rng, &[1, 2], 1.0);
    let checks = check(
        |_, v| {
            let h = v[0].matmul(v[1])?.add(v[2])?;
            let s = h.tanh().mul(h.softplus())?.add(h.sigmoid().square())?;
            let t = h.square().add_scalar(1.0).sqrt().ln().add(h.scale(0.3).exp())?;
            let u = s.div(t.add_scalar(1.0))?.powi(3);
            u.sum_axis(1)?.sq_norm().add(v[0].leaky_relu(0.2).sum())
        },
        &[a, b, c],
        STEP,
    )?;
    Ok(report("ops.first_order", max_rel_err(&checks), FIRST_ORDER_TOL))
}

/// Gradient of `½‖∇_x h(x)‖²`, which differentiates a create-graph
/// gradient a second time.
pub fn ops_second_order() -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[2, 3], 1.0);
    let w = random(&mut rng, &[3, 3], 0.7);
    let checks = check(
        |tape, v| {
            let h = v[0].matmul(v[1])?.softplus().mul(v[0].tanh())?.sum();
            let g = tape.grad(h, &[v[0]], true)?[0];
            Ok(g.sq_norm().scale(0.5))
        },
        &[x, w],
        STEP,
    )?;
    Ok(report("ops.second_order", max_rel_err(&checks), SECOND_ORDER_TOL))
}

/// Closed-form FPE score against differences of the unnormalized
/// log-density.
pub fn fpe_score_values() -> Result<SuiteReport> {
    let prior = match tiny_model().prior {
        Prior::Fpe(eta) => FpePrior::new(eta.value)?,
        Prior::StdNormal(_) => unreachable!("tiny model has an FPE prior"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let z: Array1<f64> = Array1::from_shape_simple_fn(2, || rng.sample(StandardNormal));
        let analytic = prior.score_values(z.view()).into_dyn();
        let f = |v: &[Tensor]| Ok(prior.unnormalized_log_density(v[0].view().into_dimensionality().unwrap()));
        let numeric = numeric_gradient(&f, &[z.into_dyn()], STEP)?;
        worst = worst.max(rel_err(&analytic, &numeric[0]));
    }
    Ok(report("score.fpe", worst, FIRST_ORDER_TOL))
}

/// On-graph FPE score and its gradient with respect to `η`.
pub fn fpe_score_graph() -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eta = random(&mut rng, &[2, 4], 0.3);
    let z = random(&mut rng, &[5, 2], 1.0);
    let weights = random(&mut rng, &[5, 2], 1.0);
    let checks = check(
        move |tape, v| {
            let s = fpe_score(v[0], v[1])?;
            Ok(s.mul(tape.constant(weights.clone()))?.sum())
        },
        &[eta, z],
        STEP,
    )?;
    Ok(report("score.fpe_graph", max_rel_err(&checks), FIRST_ORDER_TOL))
}

/// Gaussian posterior score `−(z − μ)/σ²` against differences of its
/// log-density in `z`.
pub fn gaussian_posterior_score() -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mu = random(&mut rng, &[1, 3], 1.0);
    let sigma = random(&mut rng, &[1, 3], 0.3).mapv(|v| v.exp());
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let z = random(&mut rng, &[1, 3], 1.5);
        let tape = Tape::new();
        let post = GaussianPosterior {
            mu: tape.constant(mu.clone()),
            sigma: tape.constant(sigma.clone()),
        };
        let analytic = gaussian_posterior_score_z(&post, tape.constant(z.clone()))?.value();
        let f = |v: &[Tensor]| {
            let tape = Tape::new();
            let post = GaussianPosterior {
                mu: tape.constant(mu.clone()),
                sigma: tape.constant(sigma.clone()),
            };
            Ok(gaussian_log_density(&post, tape.constant(v[0].clone()))?.item())
        };
        let numeric = numeric_gradient(&f, &[z], STEP)?;
        worst = worst.max(rel_err(&analytic, &numeric[0]));
    }
    Ok(report("score.gaussian_posterior", worst, FIRST_ORDER_TOL))
}

/// Decoder score in `x` and, through the decoder network, in `z`.
pub fn decoder_scores() -> Result<SuiteReport> {
    let model = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = batch();
    let z = random(&mut rng, &[3, 2], 1.0);
    let log_p = |xs: &Tensor, zs: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let bound = ModelRef::from(&model).bind(&tape, false);
        let xhat = model.decoder.decode(&bound.decoder, tape.constant(zs.clone()))?;
        Ok(GaussianDecoderLikelihood { xhat }.log_density(tape.constant(xs.clone()))?.sum().item())
    };

    let tape = Tape::new();
    let bound = ModelRef::from(&model).bind(&tape, false);
    let zv = tape.leaf(z.clone(), true);
    let xv = tape.leaf(x.clone(), true);
    let xhat = model.decoder.decode(&bound.decoder, zv)?;
    let lik = GaussianDecoderLikelihood { xhat };
    let score_x = lik.score_x(xv)?.value();
    let score_z = tape.grad(lik.log_density(xv)?.sum(), &[zv], false)?[0].value();

    let nx = numeric_gradient(&|v: &[Tensor]| log_p(&v[0], &z), &[x.clone()], STEP)?;
    let nz = numeric_gradient(&|v: &[Tensor]| log_p(&x, &v[0]), &[z.clone()], STEP)?;
    let err = rel_err(&score_x, &nx[0]).max(rel_err(&score_z, &nz[0]));
    Ok(report("score.decoder", err, FIRST_ORDER_TOL))
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
        fisher_ae_objective(&bound, x, eps, &FisherLossOptions::default())?.1.total
    })
}

fn param_gradient_error(model: &AutoEncoder, elbo: bool) -> Result<f64> {
    let x = batch();
    let eps = MonteCarloSpec::new(2, 4)?.draw(3, 2);
    let tape = Tape::new();
    let bound = ModelRef::from(model).bind(&tape, true);
    let params: Vec<Var<'_>> = bound.params();
    let total = if elbo {
        vae_elbo_objective(&bound, &x, &eps)?.0
    } else {
        fisher_ae_objective(&bound, &x, &eps, &FisherLossOptions::default())?.0
    };
    let analytic = tape.grad_values(total, &params)?;
    let values: Vec<Tensor> = model.parameters().iter().map(|p| p.value.clone()).collect();
    let numeric = numeric_gradient(&|v: &[Tensor]| loss_with_params(model, v, &x, &eps, elbo), &values, STEP)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(a, n))
        .fold(0.0, f64::max))
}

/// ELBO gradients with respect to every parameter tensor.
pub fn elbo_parameter_gradients() -> Result<SuiteReport> {
    Ok(report("loss.elbo_params", param_gradient_error(&tiny_elbo_model(), true)?, FIRST_ORDER_TOL))
}

/// Fisher AE loss gradients with respect to every parameter tensor; terms
/// ① and ③ are themselves input gradients.
pub fn fisher_parameter_gradients() -> Result<SuiteReport> {
    Ok(report("loss.fisher_params", param_gradient_error(&tiny_model(), false)?, SECOND_ORDER_TOL))
}

/// Runs every suite in a fixed order.
pub fn run_all() -> Result<Vec<SuiteReport>> {
    let suites: [fn() -> Result<SuiteReport>; 8] = [
        ops_first_order,
        ops_second_order,
        fpe_score_values,
        fpe_score_graph,
        gaussian_posterior_score,
        decoder_scores,
        elbo_parameter_gradients,
        fisher_parameter_gradients,
    ];
    suites.iter().map(|s| s()).collect()
}
