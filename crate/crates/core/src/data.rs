//! Datasets: synthetic generators, the IDX reader used for MNIST and
//! Fashion-MNIST, and the train/validation/test split helpers.

use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::Shape {
                op: "Dataset::new",
                left: inputs.shape(),
                right: targets.shape(),
            });
        }
        Ok(Self {
            name: name.into(),
            split,
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSplits {
    pub train: Dataset,
    pub validation: Option<Dataset>,
    pub test: Dataset,
}

/// Gaussian regression data: `X ~ N(0, 1)^{n×d}`, `W ~ N(0, 1)^{d×out}`,
/// `Y = X·W` plus optional `N(0, σ²)` noise. Returns the dataset and `W`.
pub fn gen_linear_regression(n: usize, d: usize, out: usize, noise_sigma: f64, rng: &mut RngStream) -> Result<(Dataset, Matrix)> {
    if n == 0 || d == 0 || out == 0 {
        return Err(Error::config("regression dimensions must be positive"));
    }
    let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.standard_normal()).collect())?;
    let w = Matrix::from_vec(d, out, (0..d * out).map(|_| rng.standard_normal()).collect())?;
    let mut y = x.matmul(&w)?;
    if noise_sigma > 0.0 {
        for v in y.as_mut_slice() {
            *v += noise_sigma * rng.standard_normal();
        }
    }
    Ok((Dataset::new("linear_regression", Split::Train, x, y)?, w))
}

/// Number of binary predictors in the sparse logistic problem.
pub const SPARSE_LOGIT_DIM: usize = 20;

/// `2x₀ + 4x₁ + 4x₂ − 4.8`; only the first three predictors matter.
pub fn sparse_logit_score(x: &[f64]) -> f64 {
    2.0 * x[0] + 4.0 * x[1] + 4.0 * x[2] - 4.8
}

/// `n` points drawn uniformly from `{0,1}^20`, labelled `1` where the
/// score is positive and `0` otherwise.
pub fn sparse_logit_samples(n: usize, split: Split, rng: &mut RngStream) -> Result<Dataset> {
    let mut x = Matrix::zeros(n, SPARSE_LOGIT_DIM);
    let mut y = Matrix::zeros(n, 1);
    for r in 0..n {
        for v in x.row_mut(r) {
            *v = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
        }
        y[(r, 0)] = if sparse_logit_score(x.row(r)) > 0.0 { 1.0 } else { 0.0 };
    }
    Dataset::new("sparse_logit", split, x, y)
}

pub fn gen_sparse_logit(n_train: usize, n_test: usize, rng: &mut RngStream) -> Result<DataSplits> {
    Ok(DataSplits {
        train: sparse_logit_samples(n_train, Split::Train, rng)?,
        validation: None,
        test: sparse_logit_samples(n_test, Split::Test, rng)?,
    })
}

/// Parsed IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    /// Flattens to `dims[0] × prod(dims[1..])` (a column for 1-D arrays).
    pub fn to_matrix(&self) -> Result<Matrix> {
        let rows = self.dims[0];
        let cols = self.dims[1..].iter().product::<usize>().max(1);
        Matrix::from_vec(rows, cols, self.data.iter().map(|&b| f64::from(b)).collect())
    }
}

const IDX_UBYTE: u8 = 0x08;

/// Parses an in-memory IDX file: two zero bytes, the type byte `0x08`, the
/// dimension count, then one big-endian `u32` per dimension and the payload.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let parse_err = |offset: usize, message: String| Error::Parse { offset, message };
    if bytes.len() < 4 {
        return Err(parse_err(bytes.len(), "file shorter than the 4-byte magic".into()));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != IDX_UBYTE || bytes[3] == 0 {
        return Err(parse_err(0, format!("bad magic 0x{magic:08x}, expected 0x000008NN")));
    }
    let ndim = bytes[3] as usize;
    let header_len = 4 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(parse_err(bytes.len(), format!("truncated header: need {header_len} bytes")));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let total = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| parse_err(4, format!("dimension overflow for {dims:?}")))?;
    if dims.contains(&0) {
        return Err(parse_err(4, format!("zero-sized dimension in {dims:?}")));
    }
    let payload = &bytes[header_len..];
    if payload.len() < total {
        return Err(parse_err(
            bytes.len(),
            format!(
                "truncated payload: expected {total} bytes after the header, found {}",
                payload.len()
            ),
        ));
    }
    if payload.len() > total {
        return Err(parse_err(header_len + total, format!("{} trailing bytes", payload.len() - total)));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

/// Reads an IDX file, transparently inflating gzip input.
pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        out
    } else {
        raw
    };
    parse_idx(&bytes)
}

/// IDX file as an `n × features` matrix of raw byte values (`0..=255`).
pub fn load_idx(path: &Path) -> Result<Matrix> {
    read_idx(path)?.to_matrix()
}

/// The four standard MNIST-layout files (also used by Fashion-MNIST).
#[derive(Clone, Debug, PartialEq)]
pub struct MnistRaw {
    pub train_images: Matrix,
    pub train_labels: Vec<u8>,
    pub test_images: Matrix,
    pub test_labels: Vec<u8>,
}

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [stem.to_string(), format!("{stem}.gz"), stem.replacen("-idx", ".idx", 1)] {
        let p = dir.join(&candidate);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Data(format!("missing {stem}[.gz] in {}", dir.display())))
}

pub fn load_mnist_dir(dir: &Path) -> Result<MnistRaw> {
    let read_labels = |stem: &str| -> Result<Vec<u8>> {
        let arr = read_idx(&locate(dir, stem)?)?;
        if arr.dims.len() != 1 {
            return Err(Error::Data(format!("{stem}: expected a 1-D label file, got dims {:?}", arr.dims)));
        }
        Ok(arr.data)
    };
    let train_images = load_idx(&locate(dir, MNIST_FILES[0])?)?;
    let train_labels = read_labels(MNIST_FILES[1])?;
    let test_images = load_idx(&locate(dir, MNIST_FILES[2])?)?;
    let test_labels = read_labels(MNIST_FILES[3])?;
    if train_images.rows() != train_labels.len() || test_images.rows() != test_labels.len() {
        return Err(Error::Data("image and label counts disagree".into()));
    }
    Ok(MnistRaw {
        train_images,
        train_labels,
        test_images,
        test_labels,
    })
}

pub fn one_hot(labels: &[u8], classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len().max(1), classes);
    for (r, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(Error::Data(format!("label {l} at row {r} exceeds {classes} classes")));
        }
        m[(r, l as usize)] = 1.0;
    }
    Ok(m)
}

/// Scales raw pixel bytes to `[0, 1]`.
pub fn normalize_pixels(images: &Matrix) -> Matrix {
    images.scale(1.0 / 255.0)
}

/// Rows held out of the training file for validation.
pub const MNIST_VALIDATION_ROWS: usize = 10_000;

/// Normalizes pixels, one-hot encodes labels and splits the training file
/// into a training pool (the leading rows) and a validation block (the last
/// `validation_rows`). `train_n` rows are drawn from the pool without
/// replacement.
pub fn normalize_and_split(raw: &MnistRaw, train_n: usize, validation_rows: usize, rng: &mut RngStream) -> Result<DataSplits> {
    let total = raw.train_images.rows();
    if validation_rows >= total {
        return Err(Error::config(format!(
            "validation block of {validation_rows} rows leaves no training rows out of {total}"
        )));
    }
    let pool = total - validation_rows;
    if train_n == 0 || train_n > pool {
        return Err(Error::config(format!(
            "training subset of {train_n} rows requested, pool has {pool}"
        )));
    }
    let mut idx: Vec<usize> = (0..pool).collect();
    rng.shuffle(&mut idx);
    idx.truncate(train_n);
    idx.sort_unstable();
    let val_idx: Vec<usize> = (pool..total).collect();

    let images = normalize_pixels(&raw.train_images);
    let labels = one_hot(&raw.train_labels, 10)?;
    let pick_labels = |ix: &[usize]| labels.select_rows(ix);
    Ok(DataSplits {
        train: Dataset::new("mnist", Split::Train, images.select_rows(&idx), pick_labels(&idx))?,
        validation: Some(Dataset::new(
            "mnist",
            Split::Validation,
            images.select_rows(&val_idx),
            pick_labels(&val_idx),
        )?),
        test: Dataset::new(
            "mnist",
            Split::Test,
            normalize_pixels(&raw.test_images),
            one_hot(&raw.test_labels, 10)?,
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two 2×2 images, built byte by byte from the published layout.
    fn image_fixture() -> Vec<u8> {
        let mut b = vec![0x00, 0x00, 0x08, 0x03];
        for d in [2u32, 2, 2] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(&[0, 255, 128, 7, 1, 2, 3, 4]);
        b
    }

    #[test]
    fn parses_image_fixture() {
        let arr = parse_idx(&image_fixture()).unwrap();
        assert_eq!(arr.dims, vec![2, 2, 2]);
        let m = arr.to_matrix().unwrap();
        assert_eq!(m.shape(), (2, 4));
        assert_eq!(m.row(0), &[0.0, 255.0, 128.0, 7.0]);
        assert_eq!(m.row(1), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn parses_label_fixture() {
        let mut b = vec![0x00, 0x00, 0x08, 0x01];
        b.extend_from_slice(&3u32.to_be_bytes());
        b.extend_from_slice(&[7, 0, 9]);
        let arr = parse_idx(&b).unwrap();
        assert_eq!(arr.dims, vec![3]);
        assert_eq!(arr.to_matrix().unwrap().shape(), (3, 1));
    }

    #[test]
    fn truncation_and_bad_magic_are_parse_errors() {
        let mut b = image_fixture();
        b.pop();
        assert!(matches!(parse_idx(&b), Err(Error::Parse { .. })));
        let mut b = image_fixture();
        b[2] = 0x0d;
        assert!(matches!(parse_idx(&b), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(parse_idx(&image_fixture()[..10]), Err(Error::Parse { .. })));
        let mut b = vec![0x00, 0x00, 0x08, 0x02];
        b.extend_from_slice(&u32::MAX.to_be_bytes());
        b.extend_from_slice(&u32::MAX.to_be_bytes());
        if usize::BITS == 32 {
            assert!(matches!(parse_idx(&b), Err(Error::Parse { offset: 4, .. })));
        } else {
            assert!(matches!(parse_idx(&b), Err(Error::Parse { .. })));
        }
    }

    #[test]
    fn reads_gzip_transparently() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("a-idx3-ubyte");
        std::fs::write(&plain, image_fixture()).unwrap();
        let gz = dir.path().join("a-idx3-ubyte.gz");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&image_fixture()).unwrap();
        std::fs::write(&gz, enc.finish().unwrap()).unwrap();
        assert_eq!(load_idx(&plain).unwrap(), load_idx(&gz).unwrap());
    }

    #[test]
    fn sparse_logit_labels() {
        let mut x = vec![0.0; SPARSE_LOGIT_DIM];
        assert!((sparse_logit_score(&x) + 4.8).abs() < 1e-12);
        x[0] = 1.0;
        x[1] = 1.0;
        x[2] = 1.0;
        assert!((sparse_logit_score(&x) - 5.2).abs() < 1e-12);
    }

    #[test]
    fn sparse_logit_score_never_zero() {
        for corner in 0..8u32 {
            let mut x = vec![0.0; SPARSE_LOGIT_DIM];
            for (b, xi) in x.iter_mut().take(3).enumerate() {
                *xi = f64::from((corner >> b) & 1);
            }
            let f = sparse_logit_score(&x);
            assert!(f.abs() >= 0.8 - 1e-12, "corner {corner}: f = {f}");
        }
    }

    #[test]
    fn sparse_logit_shapes_and_determinism() {
        let a = gen_sparse_logit(400, 3000, &mut RngStream::new(3, 1)).unwrap();
        let b = gen_sparse_logit(400, 3000, &mut RngStream::new(3, 1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.inputs.shape(), (400, 20));
        assert_eq!(a.test.inputs.shape(), (3000, 20));
        for r in 0..400 {
            let expected = if sparse_logit_score(a.train.inputs.row(r)) > 0.0 {
                1.0
            } else {
                0.0
            };
            assert_eq!(a.train.targets[(r, 0)], expected);
        }
    }

    #[test]
    fn linear_regression_shapes() {
        let (ds, w) = gen_linear_regression(400, 100, 10, 0.0, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(ds.inputs.shape(), (400, 100));
        assert_eq!(w.shape(), (100, 10));
        assert_eq!(ds.targets.shape(), (400, 10));
        let (again, _) = gen_linear_regression(400, 100, 10, 0.0, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn one_variable_least_squares_recovers_weight() {
        let (ds, w) = gen_linear_regression(50, 1, 1, 0.0, &mut RngStream::new(5, 1)).unwrap();
        let x = ds.inputs.column(0);
        let y = ds.targets.column(0);
        let beta = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / x.iter().map(|a| a * a).sum::<f64>();
        assert!((beta - w[(0, 0)]).abs() < 1e-8);
    }

    fn tiny_raw() -> MnistRaw {
        let n = 30;
        let images = Matrix::from_vec(n, 4, (0..n * 4).map(|i| (i % 256) as f64).collect()).unwrap();
        MnistRaw {
            train_images: images.clone(),
            train_labels: (0..n).map(|i| (i % 10) as u8).collect(),
            test_images: images.select_rows(&[0, 1, 2]),
            test_labels: vec![0, 1, 2],
        }
    }

    #[test]
    fn split_is_disjoint_and_normalized() {
        let raw = tiny_raw();
        let s = normalize_and_split(&raw, 12, 10, &mut RngStream::new(2, 2)).unwrap();
        assert_eq!(s.train.len(), 12);
        assert_eq!(s.validation.as_ref().unwrap().len(), 10);
        assert_eq!(s.test.len(), 3);
        for d in [&s.train, s.validation.as_ref().unwrap(), &s.test] {
            assert!(d.inputs.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
            for r in 0..d.len() {
                assert_eq!(d.targets.row(r).iter().sum::<f64>(), 1.0);
            }
        }
        // pixel values encode the source row, so disjointness is checkable
        let key = |row: &[f64]| (row[0] * 255.0).round() as i64;
        let train_keys: Vec<i64> = (0..12).map(|r| key(s.train.inputs.row(r))).collect();
        let val = s.validation.unwrap();
        for r in 0..val.len() {
            assert!(!train_keys.contains(&key(val.inputs.row(r))));
        }
        assert!(normalize_and_split(&raw, 21, 10, &mut RngStream::new(2, 2)).is_err());
    }

    #[test]
    fn pixel_scaling_endpoints() {
        let m = Matrix::row_vector(&[0.0, 255.0]).unwrap();
        assert_eq!(normalize_pixels(&m).as_slice(), &[0.0, 1.0]);
    }
}
