//! Datasets, IDX file I/O, the linear-Gaussian generator and input
//! corruption.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, DatasetKind};
use crate::error::{Error, Result};

const IDX_UBYTE: u8 = 0x08;
const IDX_F64: u8 = 0x0E;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N × D`.
    pub items: Array2<f64>,
    pub labels: Option<Vec<u32>>,
    pub split: Split,
    /// Mixing matrix `A` (`D × d`) for synthetic linear-Gaussian data.
    pub mixing: Option<Array2<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.items.ncols()
    }

    /// First `n` items (or all, if fewer).
    pub fn truncate(mut self, n: usize) -> Self {
        let n = n.min(self.len());
        self.items = self.items.slice_move(ndarray::s![..n, ..]);
        if let Some(l) = &mut self.labels {
            l.truncate(n);
        }
        self
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m as usize + 1))
    }
}

/// Parsed IDX payload: dimensions and values (bytes are scaled to [0, 1]).
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
    pub raw_bytes: Option<Vec<u8>>,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn idx_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Parses an IDX container of unsigned bytes or f64 values.
pub fn parse_idx(path: &Path, bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(idx_err(path, bytes.len(), "truncated magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(idx_err(path, 0, format!("bad magic {:02x?}", &bytes[..4])));
    }
    let kind = bytes[2];
    let ndim = bytes[3] as usize;
    if kind != IDX_UBYTE && kind != IDX_F64 {
        return Err(idx_err(path, 2, format!("unsupported element type 0x{kind:02x}")));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(idx_err(path, bytes.len(), "truncated dimension header"));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let width = if kind == IDX_UBYTE { 1 } else { 8 };
    let need = header + count * width;
    if bytes.len() < need {
        return Err(idx_err(
            path,
            bytes.len(),
            format!("truncated payload, expected {need} bytes"),
        ));
    }
    if bytes.len() > need {
        return Err(idx_err(path, need, "trailing bytes after payload"));
    }
    let payload = &bytes[header..];
    Ok(if kind == IDX_UBYTE {
        IdxArray {
            dims,
            data: payload.iter().map(|&b| b as f64 / 255.0).collect(),
            raw_bytes: Some(payload.to_vec()),
        }
    } else {
        IdxArray {
            dims,
            data: payload
                .chunks_exact(8)
                .map(|c| f64::from_be_bytes(c.try_into().unwrap()))
                .collect(),
            raw_bytes: None,
        }
    })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(path, &read_maybe_gz(path)?)
}

fn idx_header(kind: u8, dims: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, kind, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

/// Writes an array as IDX doubles (big-endian), leading dim = rows.
pub fn write_idx_f64(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    let mut out = idx_header(IDX_F64, dims);
    for v in data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_u8(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    let mut out = idx_header(IDX_UBYTE, dims);
    out.extend_from_slice(data);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Images as `N × (rows·cols)` in [0, 1].
pub fn read_idx_images(path: &Path) -> Result<Array2<f64>> {
    let arr = read_idx(path)?;
    if arr.dims.is_empty() {
        return Err(idx_err(path, 3, "zero-dimensional image file"));
    }
    let n = arr.dims[0];
    let d: usize = arr.dims[1..].iter().product();
    Ok(Array2::from_shape_vec((n, d), arr.data).expect("sizes checked"))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u32>> {
    let arr = read_idx(path)?;
    match (arr.dims.len(), arr.raw_bytes) {
        (1, Some(raw)) => Ok(raw.into_iter().map(u32::from).collect()),
        _ => Err(idx_err(path, 2, "labels must be a 1-d unsigned byte array")),
    }
}

/// Loads an image file and optional label file into a dataset.
pub fn load_mnist_idx(images: &Path, labels: Option<&Path>, split: Split) -> Result<Dataset> {
    let items = read_idx_images(images)?;
    let labels = match labels {
        Some(p) => {
            let l = read_idx_labels(p)?;
            if l.len() != items.nrows() {
                return Err(idx_err(
                    p,
                    4,
                    format!("{} labels for {} images", l.len(), items.nrows()),
                ));
            }
            Some(l)
        }
        None => None,
    };
    Ok(Dataset {
        items,
        labels,
        split,
        mixing: None,
    })
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "no such file (also tried .gz)"),
    ))
}

/// Loads the standard MNIST file names from `dir`.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = find_file(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let labels = find_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    load_mnist_idx(&images, Some(&labels), split)
}

/// `x = A z + w` with `z ~ N(0, I_d)`, `w ~ N(0, I_D)`; `a` is `D × d`.
pub fn synthetic_linear_gaussian(a: ArrayView2<'_, f64>, n: usize, seed: u64) -> Dataset {
    let (dd, d) = a.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Array2::zeros((n, dd));
    for mut row in items.axis_iter_mut(Axis(0)) {
        let z: Array1<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let ax = a.dot(&z);
        for (i, v) in row.iter_mut().enumerate() {
            let w: f64 = rng.sample(StandardNormal);
            *v = ax[i] + w;
        }
    }
    Dataset {
        items,
        labels: None,
        split: Split::Train,
        mixing: Some(a.to_owned()),
    }
}

/// Train and test splits described by a data config. Synthetic data draws
/// `A` with standard normal entries from `cfg.seed`.
pub fn load_datasets(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetKind::Mnist => Ok((
            load_mnist_dir(&cfg.dir, Split::Train)?.truncate(cfg.train_size),
            load_mnist_dir(&cfg.dir, Split::Test)?.truncate(cfg.test_size),
        )),
        DatasetKind::Synthetic => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let a = Array2::from_shape_simple_fn((cfg.synthetic_dim, cfg.synthetic_latent), || {
                rng.sample(StandardNormal)
            });
            let train = synthetic_linear_gaussian(a.view(), cfg.train_size, cfg.seed.wrapping_add(1));
            let mut test = synthetic_linear_gaussian(a.view(), cfg.test_size, cfg.seed.wrapping_add(2));
            test.split = Split::Test;
            Ok((train, test))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Corruption {
    /// Additive `N(0, σ² I)`, not clamped.
    Gaussian { sigma2: f64 },
    /// Zeroes exactly `⌊ν·D⌋` uniformly chosen coordinates.
    Mask { nu: f64 },
}

impl Corruption {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Corruption::Gaussian { sigma2 } if !(sigma2 >= 0.0) => Err(Error::InvalidArgument(
                format!("noise variance must be >= 0, got {sigma2}"),
            )),
            Corruption::Mask { nu } if !(0.0..=1.0).contains(&nu) => Err(Error::InvalidArgument(
                format!("mask fraction must be in [0, 1], got {nu}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn level(&self) -> f64 {
        match *self {
            Corruption::Gaussian { sigma2 } => sigma2,
            Corruption::Mask { nu } => nu,
        }
    }
}

/// Number of coordinates a mask of fraction `nu` zeroes in dimension `d`.
pub fn mask_count(nu: f64, d: usize) -> usize {
    ((nu * d as f64).floor() as usize).min(d)
}

pub fn corrupt<R: Rng + ?Sized>(x: ArrayView1<'_, f64>, spec: &Corruption, rng: &mut R) -> Array1<f64> {
    let mut out = x.to_owned();
    match *spec {
        Corruption::Gaussian { sigma2 } => {
            if sigma2 > 0.0 {
                let s = sigma2.sqrt();
                out.mapv_inplace(|v| v + s * rng.sample::<f64, _>(StandardNormal));
            }
        }
        Corruption::Mask { nu } => {
            let k = mask_count(nu, x.len());
            for i in index::sample(rng, x.len(), k) {
                out[i] = 0.0;
            }
        }
    }
    out
}

/// Corrupts every row; row `i` uses its own stream of a generator seeded
/// with `seed`, so the result does not depend on thread scheduling.
pub fn corrupt_rows(x: ArrayView2<'_, f64>, spec: &Corruption, seed: u64) -> Array2<f64> {
    let rows = crate::par::map_range(x.nrows(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        corrupt(x.row(i), spec, &mut rng)
    });
    let mut out = Array2::zeros(x.raw_dim());
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn tmp(name: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(name);
        (dir, p)
    }

    #[test]
    fn header_only_file_is_empty_dataset() {
        let (_d, p) = tmp("img");
        write_idx_u8(&p, &[0, 28, 28], &[]).unwrap();
        let ds = load_mnist_idx(&p, None, Split::Test).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.dim(), 784);
    }

    #[test]
    fn bytes_scale_to_unit_interval() {
        let (_d, p) = tmp("img");
        write_idx_u8(&p, &[1, 1, 3], &[0, 128, 255]).unwrap();
        let x = read_idx_images(&p).unwrap();
        assert_eq!(x, array![[0.0, 128.0 / 255.0, 1.0]]);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let (_d, p) = tmp("img");
        fs::write(&p, [1, 0, 8, 1, 0, 0, 0, 0]).unwrap();
        match read_idx(&p) {
            Err(Error::Idx { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_file_length() {
        let (_d, p) = tmp("img");
        write_idx_u8(&p, &[2, 2, 2], &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        match read_idx(&p) {
            Err(Error::Idx { offset, msg, .. }) => {
                assert_eq!(offset as usize, bytes.len() - 3);
                assert!(msg.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn label_count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx_u8(&ip, &[2, 1, 1], &[0, 1]).unwrap();
        write_idx_u8(&lp, &[3], &[0, 1, 2]).unwrap();
        assert!(matches!(
            load_mnist_idx(&ip, Some(&lp), Split::Train),
            Err(Error::Idx { offset: 4, .. })
        ));
    }

    #[test]
    fn gz_files_are_read_transparently() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let (_d, p) = tmp("l.gz");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&idx_header(IDX_UBYTE, &[3])).unwrap();
        enc.write_all(&[7, 0, 9]).unwrap();
        fs::write(&p, enc.finish().unwrap()).unwrap();
        assert_eq!(read_idx_labels(&p).unwrap(), vec![7, 0, 9]);
    }

    #[test]
    fn f64_idx_round_trip_is_exact() {
        let (_d, p) = tmp("x");
        let ds = synthetic_linear_gaussian(array![[1.0, 0.5], [0.0, 2.0], [-1.0, 0.3]].view(), 17, 3);
        write_idx_f64(&p, &[17, 3], ds.items.as_slice().unwrap()).unwrap();
        assert_eq!(read_idx_images(&p).unwrap(), ds.items);
    }

    #[test]
    fn synthetic_is_reproducible_and_zero_mixing_is_white() {
        let a = Array2::<f64>::zeros((3, 2));
        let d1 = synthetic_linear_gaussian(a.view(), 20_000, 1);
        assert_eq!(d1, synthetic_linear_gaussian(a.view(), 20_000, 1));
        let mean = d1.items.mean_axis(Axis(0)).unwrap();
        assert!(mean.iter().all(|m| m.abs() < 4.0 / (20_000f64).sqrt()));
    }

    #[test]
    fn synthetic_covariance_matches_aat_plus_identity() {
        let a = array![[1.0, 0.5], [0.0, 2.0], [-1.0, 0.3]];
        let n = 100_000;
        let ds = synthetic_linear_gaussian(a.view(), n, 7);
        let want = a.dot(&a.t()) + Array2::<f64>::eye(3);
        let x = &ds.items;
        for i in 0..3 {
            for j in 0..3 {
                let prod: Array1<f64> = &x.column(i) * &x.column(j);
                let m = prod.mean().unwrap();
                let sd = prod.std(1.0);
                let se = sd / (n as f64).sqrt();
                assert!((m - want[[i, j]]).abs() < 3.0 * se, "({i},{j}) {m} vs {}", want[[i, j]]);
            }
        }
    }

    #[test]
    fn corruption_examples() {
        let x = Array1::from_iter((0..784).map(|i| 0.1 + i as f64 / 1000.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(corrupt(x.view(), &Corruption::Gaussian { sigma2: 0.0 }, &mut rng), x);
        let all = corrupt(x.view(), &Corruption::Mask { nu: 1.0 }, &mut rng);
        assert!(all.iter().all(|&v| v == 0.0));
        let m = corrupt(x.view(), &Corruption::Mask { nu: 0.8 }, &mut rng);
        assert_eq!(m.iter().filter(|&&v| v == 0.0).count(), 627);
        assert_eq!(mask_count(0.8, 784), 627);
    }

    #[test]
    fn gaussian_noise_is_unclamped_with_right_variance() {
        let x = Array1::from_elem(100_000, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = corrupt(x.view(), &Corruption::Gaussian { sigma2: 0.3 }, &mut rng);
        assert!(y.iter().any(|&v| v > 1.0) && y.iter().any(|&v| v < 0.0));
        let var = (&y - &x).mapv(|v| v * v).mean().unwrap();
        // var of the sample variance of N(0, s²) is 2s⁴/n
        assert!((var - 0.3).abs() < 3.0 * (2.0 * 0.09 / 100_000f64).sqrt());
    }

    #[test]
    fn corrupt_rows_is_deterministic() {
        let x = Array2::from_shape_fn((50, 10), |(i, j)| (i * 10 + j) as f64 / 500.0);
        let spec = Corruption::Mask { nu: 0.3 };
        assert_eq!(corrupt_rows(x.view(), &spec, 4), corrupt_rows(x.view(), &spec, 4));
        assert_ne!(corrupt_rows(x.view(), &spec, 4), corrupt_rows(x.view(), &spec, 5));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(Corruption::Gaussian { sigma2: -1.0 }.validate().is_err());
        assert!(Corruption::Mask { nu: 1.5 }.validate().is_err());
        assert!(Corruption::Mask { nu: 0.5 }.validate().is_ok());
    }

    proptest! {
        #[test]
        fn mask_leaves_untouched_coordinates_bit_identical(
            vals in proptest::collection::vec(0.01f64..1.0, 1..60),
            nu in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let x = Array1::from(vals);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = corrupt(x.view(), &Corruption::Mask { nu }, &mut rng);
            let zeroed = y.iter().filter(|&&v| v == 0.0).count();
            prop_assert_eq!(zeroed, mask_count(nu, x.len()));
            for (a, b) in x.iter().zip(y.iter()) {
                prop_assert!(*b == 0.0 || a.to_bits() == b.to_bits());
            }
        }

        #[test]
        fn u8_idx_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let (_d, p) = tmp("u");
            write_idx_u8(&p, &[bytes.len()], &bytes).unwrap();
            prop_assert_eq!(read_idx_labels(&p).unwrap(), bytes.iter().map(|&b| b as u32).collect::<Vec<_>>());
        }
    }
}
