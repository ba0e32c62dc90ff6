//! Robustness curves, k-means, NMI and file writers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{corrupt_rows, Corruption, Dataset};
use crate::distributions::BCE_CLAMP;
use crate::error::{Error, Result};
use crate::nets::AutoEncoder;

/// Rows per forward pass during evaluation.
const EVAL_BATCH: usize = 500;

/// Upper bound on k-means restarts.
pub const KMEANS_MAX_RESTARTS: usize = 50;
const KMEANS_MAX_ITER: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Per-pixel binary cross-entropy against the clean input.
    Bce,
    /// Per-coordinate squared error against the clean input.
    Mse,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Bce => "bce",
            Metric::Mse => "mse",
        }
    }

    /// Mean over coordinates of one reconstruction.
    pub fn per_item(self, x: ArrayView1<'_, f64>, xhat: ArrayView1<'_, f64>) -> f64 {
        let d = x.len() as f64;
        match self {
            Metric::Bce => crate::distributions::bce_values(x, xhat) / d,
            Metric::Mse => x.iter().zip(xhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    Gaussian,
    Mask,
}

impl CorruptionKind {
    pub fn at(self, level: f64) -> Corruption {
        match self {
            CorruptionKind::Gaussian => Corruption::Gaussian { sigma2: level },
            CorruptionKind::Mask => Corruption::Mask { nu: level },
        }
    }
}

/// Anything that maps (possibly corrupted) inputs to reconstructions and
/// latent codes.
pub trait Reconstructor: Sync {
    fn data_dim(&self) -> usize;
    fn reconstruct(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
    fn encode(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

impl Reconstructor for AutoEncoder {
    fn data_dim(&self) -> usize {
        AutoEncoder::data_dim(self)
    }

    fn reconstruct(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        AutoEncoder::reconstruct(self, x)
    }

    fn encode(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.encode_mean(x)
    }
}

fn batched(x: ArrayView2<'_, f64>, f: impl Fn(ArrayView2<'_, f64>) -> Result<Array2<f64>>) -> Result<Array2<f64>> {
    let mut parts = Vec::new();
    for start in (0..x.nrows()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(x.nrows());
        parts.push(f(x.slice(s![start..end, ..]))?);
    }
    if parts.is_empty() {
        return Ok(Array2::zeros((0, 0)));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
}

fn check_dim(model: &dyn Reconstructor, data: &Dataset) -> Result<()> {
    if model.data_dim() != data.dim() {
        return Err(Error::shape(
            "model vs dataset dimension",
            &[model.data_dim()],
            &[data.dim()],
        ));
    }
    Ok(())
}

/// Seed of trial `t` at axis point `p`.
fn trial_seed(seed: u64, p: usize, t: usize) -> u64 {
    seed ^ ((p as u64) << 32) ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub model: String,
    pub metric: Metric,
    pub kind: CorruptionKind,
    pub axis: Vec<f64>,
    /// Mean over trials of the test-split mean.
    pub mean: Vec<f64>,
    /// Standard deviation over trials of the test-split mean.
    pub std: Vec<f64>,
}

impl RobustnessCurve {
    /// Each point is no more than `k` standard deviations below its
    /// predecessor (using the larger of the two stds).
    pub fn is_monotone_within(&self, k: f64) -> bool {
        (1..self.mean.len()).all(|i| {
            let tol = k * self.std[i].max(self.std[i - 1]);
            self.mean[i] >= self.mean[i - 1] - tol
        })
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// For each axis level and trial: corrupt the test inputs, reconstruct
/// through the posterior mean, and score against the clean inputs.
pub fn reconstruction_curve(
    model: &dyn Reconstructor,
    name: &str,
    test: &Dataset,
    kind: CorruptionKind,
    axis: &[f64],
    trials: usize,
    metric: Metric,
    seed: u64,
) -> Result<RobustnessCurve> {
    check_dim(model, test)?;
    if trials == 0 || test.is_empty() {
        return Err(Error::InvalidArgument("need at least one trial and one test item".into()));
    }
    if axis.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("axis must be strictly increasing".into()));
    }
    let mut mean = Vec::with_capacity(axis.len());
    let mut std = Vec::with_capacity(axis.len());
    for (p, &level) in axis.iter().enumerate() {
        let spec = kind.at(level);
        spec.validate()?;
        let per_trial = (0..trials)
            .map(|t| {
                let noisy = corrupt_rows(test.items.view(), &spec, trial_seed(seed, p, t));
                let xhat = batched(noisy.view(), |b| model.reconstruct(b))?;
                let scores = crate::par::map_range(test.len(), |i| metric.per_item(test.items.row(i), xhat.row(i)));
                Ok(scores.iter().sum::<f64>() / test.len() as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        let (m, s) = mean_std(&per_trial);
        mean.push(m);
        std.push(s);
    }
    Ok(RobustnessCurve {
        model: name.to_string(),
        metric,
        kind,
        axis: axis.to_vec(),
        mean,
        std,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Within-cluster sum of squares of the returned clustering.
    pub inertia: f64,
    /// Sum of squares after every assignment step of the best restart.
    pub history: Vec<f64>,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(x: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(pick)));
        }
    }
    centroids
}

fn assign(x: ArrayView2<'_, f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    let pairs = crate::par::map_range(x.nrows(), |i| {
        let mut best = (0, f64::INFINITY);
        for (c, row) in centroids.axis_iter(Axis(0)).enumerate() {
            let d = sq_dist(x.row(i), row);
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    });
    pairs.into_iter().unzip()
}

fn lloyd(x: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let mut centroids = kmeans_pp(x, k, rng);
    let (mut labels, mut d2) = assign(x, &centroids);
    let mut history = vec![d2.iter().sum::<f64>()];
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums.row_mut(l).scaled_add(1.0, &x.row(i));
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // reseed from the point farthest from its centroid
                let far = (0..x.nrows())
                    .max_by(|&a, &b| d2[a].total_cmp(&d2[b]))
                    .expect("non-empty");
                centroids.row_mut(c).assign(&x.row(far));
                d2[far] = 0.0;
            }
        }
        let (new_labels, new_d2) = assign(x, &centroids);
        history.push(new_d2.iter().sum());
        let stable = new_labels == labels;
        labels = new_labels;
        d2 = new_d2;
        if stable {
            break;
        }
    }
    KMeansResult {
        labels,
        centroids,
        inertia: *history.last().expect("at least one assignment"),
        history,
    }
}

/// Lloyd's algorithm from k-means++ seeds, keeping the best of
/// `min(restarts, 50)` runs.
pub fn kmeans(x: ArrayView2<'_, f64>, k: usize, restarts: usize, seed: u64) -> Result<KMeansResult> {
    if k < 2 || x.nrows() < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs 2 <= k <= N, got k={k}, N={}",
            x.nrows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.clamp(1, KMEANS_MAX_RESTARTS) {
        let r = lloyd(x, k, &mut rng);
        if best.as_ref().is_none_or(|b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Normalized mutual information `2 I(Ω; C) / (H(Ω) + H(C))`, natural
/// log. Two constant labelings score 1.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "nmi: {} predicted labels vs {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    if pred.is_empty() {
        return Ok(1.0);
    }
    let relabel = |v: &[usize]| {
        let mut map = std::collections::BTreeMap::new();
        let ids: Vec<usize> = v
            .iter()
            .map(|x| {
                let next = map.len();
                *map.entry(*x).or_insert(next)
            })
            .collect();
        (ids, map.len())
    };
    let (a, ka) = relabel(pred);
    let (b, kb) = relabel(truth);
    let mut table = Array2::<f64>::zeros((ka, kb));
    for (&i, &j) in a.iter().zip(&b) {
        table[[i, j]] += 1.0;
    }
    let pa = table.sum_axis(Axis(1)) / n;
    let pb = table.sum_axis(Axis(0)) / n;
    let entropy = |p: &Array1<f64>| -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    let (ha, hb) = (entropy(&pa), entropy(&pb));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for ((i, j), &c) in table.indexed_iter() {
        if c > 0.0 {
            let p = c / n;
            mi += p * (p / (pa[i] * pb[j])).ln();
        }
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmiReport {
    pub model: String,
    pub axis: Vec<f64>,
    pub nmi: Vec<f64>,
    pub std: Vec<f64>,
    pub clusters: usize,
}

/// Corrupts the test inputs with Gaussian noise at each level, encodes
/// them to posterior means and clusters the codes with k-means
/// (k = number of classes), scoring NMI against the labels.
pub fn latent_cluster_robustness(
    model: &dyn Reconstructor,
    name: &str,
    test: &Dataset,
    axis: &[f64],
    trials: usize,
    restarts: usize,
    seed: u64,
) -> Result<NmiReport> {
    check_dim(model, test)?;
    let labels: Vec<usize> = test
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("nmi needs a labelled test set".into()))?
        .iter()
        .map(|&l| l as usize)
        .collect();
    let k = test.num_classes().unwrap_or(0);
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let mut nmis = Vec::new();
    let mut stds = Vec::new();
    for (p, &level) in axis.iter().enumerate() {
        let spec = CorruptionKind::Gaussian.at(level);
        spec.validate()?;
        let per_trial = (0..trials)
            .map(|t| {
                let s = trial_seed(seed, p, t);
                let noisy = corrupt_rows(test.items.view(), &spec, s);
                let z = batched(noisy.view(), |b| model.encode(b))?;
                let km = kmeans(z.view(), k, restarts, s)?;
                nmi(&km.labels, &labels)
            })
            .collect::<Result<Vec<f64>>>()?;
        let (m, sd) = mean_std(&per_trial);
        nmis.push(m);
        stds.push(sd);
    }
    Ok(NmiReport {
        model: name.to_string(),
        axis: axis.to_vec(),
        nmi: nmis,
        std: stds,
        clusters: k,
    })
}

pub const CURVE_HEADER: &str = "axis,mean,std,metric,model";

/// Renders curves (and NMI reports) as `axis,mean,std,metric,model` rows.
pub fn curves_csv(curves: &[RobustnessCurve], reports: &[NmiReport]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for c in curves {
        for i in 0..c.axis.len() {
            let _ = writeln!(out, "{},{},{},{},{}", c.axis[i], c.mean[i], c.std[i], c.metric.name(), c.model);
        }
    }
    for r in reports {
        for i in 0..r.axis.len() {
            let _ = writeln!(out, "{},{},{},nmi,{}", r.axis[i], r.nmi[i], r.std[i], r.model);
        }
    }
    out
}

pub fn write_curves_csv(path: &Path, curves: &[RobustnessCurve], reports: &[NmiReport]) -> Result<()> {
    fs::write(path, curves_csv(curves, reports)).map_err(|e| Error::io(path, e))
}

/// Binary PGM (P5) of square images tiled row-major, `cols` per row.
/// Each item of `images` is one `side × side` image with values clamped to
/// [0, 1] and scaled to 0–255; unused tiles in the last row are black.
pub fn pgm_grid(images: ArrayView2<'_, f64>, side: usize, cols: usize) -> Result<Vec<u8>> {
    if images.ncols() != side * side || cols == 0 {
        return Err(Error::shape("pgm grid", images.shape(), &[side * side]));
    }
    let n = images.nrows();
    let rows = n.div_ceil(cols).max(1);
    let (w, h) = (cols * side, rows * side);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let mut pixels = vec![0u8; w * h];
    for (k, img) in images.axis_iter(Axis(0)).enumerate() {
        let (r, c) = (k / cols, k % cols);
        for y in 0..side {
            for x in 0..side {
                let v = img[y * side + x].clamp(0.0, 1.0);
                pixels[(r * side + y) * w + c * side + x] = (v * 255.0).round() as u8;
            }
        }
    }
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn write_pgm_grid(path: &Path, images: ArrayView2<'_, f64>, side: usize, cols: usize) -> Result<()> {
    fs::write(path, pgm_grid(images, side, cols)?).map_err(|e| Error::io(path, e))
}

/// Per-pixel BCE of `x` against its own clamped values: the floor any
/// reconstruction can reach.
pub fn self_bce(x: ArrayView2<'_, f64>) -> f64 {
    let d = x.ncols() as f64;
    x.axis_iter(Axis(0))
        .map(|r| crate::distributions::bce_values(r, r.mapv(|v| v.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)).view()) / d)
        .sum::<f64>()
        / x.nrows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::nets::{Activation, Prior};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    struct Identity(usize);

    impl Reconstructor for Identity {
        fn data_dim(&self) -> usize {
            self.0
        }
        fn reconstruct(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
            Ok(x.to_owned())
        }
        fn encode(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
            Ok(x.to_owned())
        }
    }

    fn images(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset {
            items: Array2::from_shape_simple_fn((n, d), || rng.random::<f64>()),
            labels: Some((0..n).map(|i| (i % 3) as u32).collect()),
            split: Split::Test,
            mixing: None,
        }
    }

    #[test]
    fn identity_model_clean_point_is_self_bce() {
        let test = images(40, 16, 0);
        let c = reconstruction_curve(&Identity(16), "id", &test, CorruptionKind::Mask, &[0.0, 0.5], 5, Metric::Bce, 1).unwrap();
        assert!((c.mean[0] - self_bce(test.items.view())).abs() < 1e-12);
        assert_eq!(c.std[0], 0.0);
        assert!(c.mean[1] > c.mean[0]);
        assert!(c.is_monotone_within(2.0));
    }

    #[test]
    fn clean_point_equals_clean_reconstruction_metric() {
        let model = AutoEncoder::init(16, 2, &[8], Activation::Softplus, Activation::Sigmoid, Prior::std_normal(2), 0);
        let test = images(30, 16, 1);
        let c = reconstruction_curve(&model, "m", &test, CorruptionKind::Gaussian, &[0.0, 0.1], 5, Metric::Mse, 2).unwrap();
        let xhat = model.reconstruct(test.items.view()).unwrap();
        let want = (&xhat - &test.items).mapv(|v| v * v).mean().unwrap();
        assert!((c.mean[0] - want).abs() < 1e-12);
        assert!(c.std[1] > 0.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let test = images(5, 16, 0);
        assert!(matches!(
            reconstruction_curve(&Identity(9), "id", &test, CorruptionKind::Mask, &[0.0], 1, Metric::Bce, 0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn bce_at_least_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = Array1::from_shape_simple_fn(10, || rng.random::<f64>());
            let p = Array1::from_shape_simple_fn(10, || rng.random::<f64>());
            let own = Metric::Bce.per_item(x.view(), x.view());
            assert!(Metric::Bce.per_item(x.view(), p.view()) >= own);
        }
    }

    fn two_blobs(n: usize) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, 3), |(i, _)| {
            let c = if truth[i] == 0 { -10.0 } else { 10.0 };
            c + rng.sample::<f64, _>(StandardNormal)
        });
        (x, truth)
    }

    #[test]
    fn separable_blobs_cluster_perfectly() {
        let (x, truth) = two_blobs(200);
        let km = kmeans(x.view(), 2, 10, 0).unwrap();
        assert_eq!(nmi(&km.labels, &truth).unwrap(), 1.0);
    }

    #[test]
    fn identical_points_terminate() {
        let x = Array2::from_elem((20, 2), 1.5);
        let km = kmeans(x.view(), 3, 5, 0).unwrap();
        assert_eq!(km.inertia, 0.0);
        assert_eq!(km.labels.len(), 20);
    }

    #[test]
    fn lloyd_objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_simple_fn((500, 4), || rng.sample::<f64, _>(StandardNormal));
        for seed in 0..5 {
            let km = kmeans(x.view(), 6, 1, seed).unwrap();
            assert!(km.history.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{:?}", km.history);
        }
    }

    #[test]
    fn kmeans_is_deterministic_and_validates() {
        let (x, _) = two_blobs(50);
        assert_eq!(kmeans(x.view(), 3, 4, 9).unwrap(), kmeans(x.view(), 3, 4, 9).unwrap());
        assert!(kmeans(x.view(), 1, 1, 0).is_err());
        assert!(kmeans(x.slice(s![..2, ..]), 3, 1, 0).is_err());
    }

    #[test]
    fn nmi_examples() {
        let c = vec![0, 0, 1, 1, 2, 2];
        assert_eq!(nmi(&c, &c).unwrap(), 1.0);
        let relabeled = vec![5, 5, 3, 3, 9, 9];
        assert!((nmi(&relabeled, &c).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(nmi(&[1, 1, 1], &[4, 4, 4]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert!(nmi(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn independent_labels_have_low_nmi() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..10)).collect();
        let b: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..10)).collect();
        assert!(nmi(&a, &b).unwrap() < 0.05);
    }

    proptest! {
        #[test]
        fn nmi_symmetric_and_bounded(
            a in proptest::collection::vec(0usize..5, 1..80),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<usize> = a.iter().map(|_| rng.random_range(0..4)).collect();
            let ab = nmi(&a, &b).unwrap();
            let ba = nmi(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn latent_nmi_is_repeatable_and_bounded() {
        let model = AutoEncoder::init(16, 2, &[8], Activation::Softplus, Activation::Sigmoid, Prior::std_normal(2), 0);
        let test = images(90, 16, 7);
        let a = latent_cluster_robustness(&model, "m", &test, &[0.0, 0.3], 2, 3, 1).unwrap();
        let b = latent_cluster_robustness(&model, "m", &test, &[0.0, 0.3], 2, 3, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.clusters, 3);
        assert!(a.nmi.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn csv_layout() {
        let c = RobustnessCurve {
            model: "fisher".into(),
            metric: Metric::Bce,
            kind: CorruptionKind::Gaussian,
            axis: vec![0.0, 0.1],
            mean: vec![0.25, 0.5],
            std: vec![0.0, 0.01],
        };
        let text = curves_csv(&[c], &[]);
        assert_eq!(text, "axis,mean,std,metric,model\n0,0.25,0,bce,fisher\n0.1,0.5,0.01,bce,fisher\n");
    }

    #[test]
    fn pgm_grid_layout() {
        let imgs = Array2::from_shape_fn((3, 4), |(i, j)| if j == i { 1.0 } else { 0.0 });
        let bytes = pgm_grid(imgs.view(), 2, 2).unwrap();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = &bytes[header.len()..];
        assert_eq!(px.len(), 16);
        // image 0 top-left pixel, image 1 top-right of its tile, image 2 bottom-left tile
        assert_eq!(px[0], 255);
        assert_eq!(px[3], 255);
        assert_eq!(px[2 * 4 + 2 * 0 + 0], 0);
        assert_eq!(px[(2 + 1) * 4], 255);
        assert!(pgm_grid(imgs.view(), 3, 2).is_err());
    }
}
