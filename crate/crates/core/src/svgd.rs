//! Stein variational gradient descent with an RBF kernel.
//!
//! Each iteration moves particle `i` by `step · φ(z_i)` with
//!
//! ```text
//! φ(z_i) = (1/M) Σ_j [ k(z_j, z_i) s(z_j) + (2/h) (z_i − z_j) k(z_j, z_i) ]
//! k(a, b) = exp(−‖a − b‖² / h),   h = med² / ln M
//! ```
//!
//! where `med` is the median pairwise distance, recomputed every iteration.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Particle norms above this count as divergence.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvgdConfig {
    pub particles: usize,
    pub step_size: f64,
    pub iterations: usize,
}

impl Default for SvgdConfig {
    fn default() -> Self {
        Self {
            particles: 64,
            step_size: 1e-3,
            iterations: 15_000,
        }
    }
}

impl SvgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::InvalidArgument(format!(
                "svgd needs at least 2 particles, got {}",
                self.particles
            )));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "svgd step size must be positive, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// Median-heuristic bandwidth `med² / ln M` from squared pairwise
/// distances; falls back to 1 when all particles coincide.
pub fn median_bandwidth(z: ArrayView2<'_, f64>) -> f64 {
    let (m, d) = z.dim();
    let zs = z.as_standard_layout();
    let flat = zs.as_slice().expect("standard layout");
    let mut d2 = Vec::with_capacity(m * m.saturating_sub(1) / 2);
    for i in 0..m {
        let zi = &flat[i * d..(i + 1) * d];
        for j in i + 1..m {
            let zj = &flat[j * d..(j + 1) * d];
            d2.push(zi.iter().zip(zj).map(|(a, b)| (a - b) * (a - b)).sum());
        }
    }
    if d2.is_empty() {
        return 1.0;
    }
    let mid = d2.len() / 2;
    let med = if d2.len() % 2 == 1 {
        *d2.select_nth_unstable_by(mid, f64::total_cmp).1
    } else {
        let hi = *d2.select_nth_unstable_by(mid, f64::total_cmp).1;
        let lo = d2[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    };
    let h = med / (m as f64).ln();
    if h > 0.0 && h.is_finite() {
        h
    } else {
        1.0
    }
}

/// The SVGD direction `φ` for every particle, given their scores.
pub fn svgd_direction(z: ArrayView2<'_, f64>, scores: ArrayView2<'_, f64>, h: f64) -> Array2<f64> {
    let (m, d) = z.dim();
    let zs = z.as_standard_layout();
    let ss = scores.as_standard_layout();
    let (zf, sf) = (zs.as_slice().expect("standard layout"), ss.as_slice().expect("standard layout"));
    let rows = crate::par::map_range(m, |i| {
        let zi = &zf[i * d..(i + 1) * d];
        let mut acc = vec![0.0; d];
        for j in 0..m {
            let zj = &zf[j * d..(j + 1) * d];
            let sj = &sf[j * d..(j + 1) * d];
            let dist2: f64 = zi.iter().zip(zj).map(|(a, b)| (a - b) * (a - b)).sum();
            let k = (-dist2 / h).exp();
            for c in 0..d {
                acc[c] += k * sj[c] + (2.0 / h) * (zi[c] - zj[c]) * k;
            }
        }
        acc.into_iter().map(|v| v / m as f64).collect::<Vec<f64>>()
    });
    let mut out = Array2::zeros((m, d));
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&Array1::from(r));
    }
    out
}

/// Evolves `init` (`M × d`) for `cfg.iterations` steps. `observe` is called
/// after every iteration with the iteration number (from 1) and the
/// particles.
pub fn svgd_run<S, O>(init: Array2<f64>, score: S, cfg: &SvgdConfig, mut observe: O) -> Result<Array2<f64>>
where
    S: Fn(ArrayView2<'_, f64>) -> Array2<f64>,
    O: FnMut(usize, ArrayView2<'_, f64>),
{
    cfg.validate()?;
    if init.nrows() != cfg.particles {
        return Err(Error::shape("svgd init", init.shape(), &[cfg.particles]));
    }
    let mut z = init;
    for it in 1..=cfg.iterations {
        let s = score(z.view());
        if s.dim() != z.dim() {
            return Err(Error::shape("svgd score", s.shape(), z.shape()));
        }
        let h = median_bandwidth(z.view());
        let phi = svgd_direction(z.view(), s.view(), h);
        z.scaled_add(cfg.step_size, &phi);
        for (index, row) in z.axis_iter(Axis(0)).enumerate() {
            let norm = row.dot(&row).sqrt();
            if !(norm <= DIVERGENCE_NORM) {
                return Err(Error::ParticleDivergence { index, norm });
            }
        }
        observe(it, z.view());
    }
    Ok(z)
}

/// Draws `M` particles from `N(0, I_d)` with `rng` and runs SVGD on
/// `score`.
pub fn svgd_sample<S, R>(score: S, dim: usize, cfg: &SvgdConfig, rng: &mut R) -> Result<Array2<f64>>
where
    S: Fn(ArrayView2<'_, f64>) -> Array2<f64>,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let init = Array2::from_shape_simple_fn((cfg.particles, dim), || rng.sample(StandardNormal));
    svgd_run(init, score, cfg, |_, _| {})
}
