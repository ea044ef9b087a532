//! Dense row-major `f64` matrices and the elementwise helpers the
//! regularizers are built from.

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Default floor applied to `|w|` before raising it to a negative power.
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// # Panics
    /// If either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config(format!("matrix dimensions must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: (i, r.len()),
                    right: (0, cols),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.ensure_same_shape(other, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(c, r)] = self[(r, c)];
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Per-column sums as a vector of length `cols`.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, x) in out.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        out
    }

    /// Adds `v` to every row.
    pub fn add_row_broadcast(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.cols {
            return Err(Error::Shape {
                op: "add_row_broadcast",
                left: self.shape(),
                right: (1, v.len()),
            });
        }
        for r in 0..self.rows {
            for (x, b) in self.row_mut(r).iter_mut().zip(v) {
                *x += b;
            }
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    fn ensure_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Strided view handed to the gemm kernel.
struct Operand<'a> {
    m: &'a Matrix,
    transposed: bool,
}

impl Operand<'_> {
    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.m.cols, self.m.rows)
        } else {
            (self.m.rows, self.m.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        let (rs, cs) = (self.m.cols as isize, 1);
        if self.transposed {
            (cs, rs)
        } else {
            (rs, cs)
        }
    }
}

fn gemm(a: Operand<'_>, b: Operand<'_>, op: &'static str) -> Result<Matrix> {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    if k != k2 {
        return Err(Error::Shape {
            op,
            left: (m, k),
            right: (k2, n),
        });
    }
    let mut out = Matrix::zeros(m, n);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the strides and dimensions describe exactly the backing
    // buffers of `a`, `b` and `out`, and `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.m.data.as_ptr(),
            rsa,
            csa,
            b.m.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(Operand { m: a, transposed: false }, Operand { m: b, transposed: false }, "matmul")
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(Operand { m: a, transposed: true }, Operand { m: b, transposed: false }, "matmul_tn")
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(Operand { m: a, transposed: false }, Operand { m: b, transposed: true }, "matmul_nt")
}

/// Scalar form of [`signed_power`].
#[inline]
pub fn abs_pow(w: f64, exponent: f64, eps: f64) -> f64 {
    let a = w.abs();
    if exponent < 0.0 {
        a.max(eps).powf(exponent)
    } else if exponent == 1.0 {
        a
    } else {
        a.powf(exponent)
    }
}

/// Elementwise `|w|^e`. For negative exponents `|w|` is first floored at
/// `eps`, which keeps the result finite at `w = 0`.
pub fn signed_power(w: &Matrix, exponent: f64, eps: f64) -> Result<Matrix> {
    if !(eps > 0.0) {
        return Err(Error::config(format!("eps must be positive, got {eps}")));
    }
    Ok(w.map(|x| abs_pow(x, exponent, eps)))
}

/// Sign with `sgn(0) = 0`.
#[inline]
pub fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sign_of(w: &Matrix) -> Matrix {
    w.map(sgn)
}

/// Independent `{0, 1}` draws, each 1 with probability `p`.
pub fn sample_bernoulli(rows: usize, cols: usize, p: f64, rng: &mut RngStream) -> Result<Matrix> {
    check_probability(p)?;
    let data = (0..rows * cols).map(|_| if rng.bernoulli(p) { 1.0 } else { 0.0 }).collect();
    Matrix::from_vec(rows, cols, data)
}

pub(crate) fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("probability must lie in (0, 1], got {p}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn identity_times_vector() {
        let v = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &v).unwrap(), v);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[17.0, 39.0]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = RngStream::new(1, 0);
        let a = random_matrix(7, 5, &mut rng);
        let b = random_matrix(5, 3, &mut rng);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let mut rng = RngStream::new(2, 0);
        let a = random_matrix(6, 4, &mut rng);
        let b = random_matrix(6, 3, &mut rng);
        let c = random_matrix(5, 4, &mut rng);
        let tn = matmul_tn(&a, &b).unwrap();
        let tn_ref = naive_matmul(&a.transpose(), &b);
        let nt = matmul_nt(&a, &c).unwrap();
        let nt_ref = naive_matmul(&a, &c.transpose());
        for (x, y) in tn.as_slice().iter().zip(tn_ref.as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
        for (x, y) in nt.as_slice().iter().zip(nt_ref.as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(
            err,
            Error::Shape {
                left: (2, 3),
                right: (2, 3),
                ..
            }
        ));
    }

    #[test]
    fn signed_power_examples() {
        let w = Matrix::row_vector(&[0.25, -3.0, 0.0]).unwrap();
        let half = signed_power(&w, 0.5, DEFAULT_EPS).unwrap();
        assert_eq!(half[(0, 0)], 0.5);
        let one = signed_power(&w, 1.0, DEFAULT_EPS).unwrap();
        assert_eq!(one[(0, 1)], 3.0);
        let neg = signed_power(&w, -0.5, 1e-8).unwrap();
        assert!((neg[(0, 2)] - 1e4).abs() < 1e-6);
        // no floor for non-negative exponents
        assert_eq!(signed_power(&w, 0.5, 1e-8).unwrap()[(0, 2)], 0.0);
        assert!(signed_power(&w, 0.5, 0.0).is_err());
    }

    #[test]
    fn sign_examples() {
        let w = Matrix::row_vector(&[-2.0, 0.0, 5.0]).unwrap();
        assert_eq!(sign_of(&w).as_slice(), &[-1.0, 0.0, 1.0]);
        let z = Matrix::zeros(3, 4);
        assert_eq!(sign_of(&z), z);
    }

    #[test]
    fn bernoulli_degenerate_and_deterministic() {
        let mut rng = RngStream::new(5, 1);
        let ones = sample_bernoulli(4, 6, 1.0, &mut rng).unwrap();
        assert!(ones.as_slice().iter().all(|&x| x == 1.0));
        let a = sample_bernoulli(10, 10, 0.3, &mut RngStream::new(9, 2)).unwrap();
        let b = sample_bernoulli(10, 10, 0.3, &mut RngStream::new(9, 2)).unwrap();
        assert_eq!(a, b);
        assert!(sample_bernoulli(2, 2, 0.0, &mut rng).is_err());
        assert!(sample_bernoulli(2, 2, 1.5, &mut rng).is_err());
    }

    #[test]
    fn bernoulli_mean_within_binomial_error() {
        let mut rng = RngStream::new(77, 3);
        let m = sample_bernoulli(1000, 1000, 0.5, &mut rng).unwrap();
        let mean = m.sum() / 1e6;
        let tol = 4.0 * (0.25f64 / 1e6).sqrt();
        assert!((mean - 0.5).abs() < tol, "mean = {mean}");
        assert!(m.as_slice().iter().all(|&x| x == 0.0 || x == 1.0));
    }

    proptest! {
        #[test]
        fn sign_times_abs_reconstructs(vals in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
            let w = Matrix::row_vector(&vals).unwrap();
            let abs = signed_power(&w, 1.0, DEFAULT_EPS).unwrap();
            let back = sign_of(&w).hadamard(&abs).unwrap();
            prop_assert_eq!(back, w.clone());
            prop_assert_eq!(abs, w.map(f64::abs));
        }

        #[test]
        fn matmul_is_associative(seed in 0u64..500) {
            let mut rng = RngStream::new(seed, 0);
            let a = random_matrix(4, 5, &mut rng);
            let b = random_matrix(5, 3, &mut rng);
            let c = random_matrix(3, 6, &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.max_abs().max(1.0);
            for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
                prop_assert!((x - y).abs() / scale <= 1e-10);
            }
        }
    }
}
