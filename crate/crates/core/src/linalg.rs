//! Dense row-major matrices over `f64`.
//!
//! Every reduction runs in a fixed left-to-right order so results are bitwise
//! reproducible; nothing in here parallelizes internally.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a matrix with zero columns has no data anyway.
        let step = self.cols.max(1);
        self.data
            .chunks_exact(step)
            .take(if self.cols == 0 { 0 } else { self.rows })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)?;
        f.debug_list().entries(self.iter_rows()).finish()
    }
}

fn shape_str(m: &Matrix) -> String {
    format!("{}x{}", m.rows, m.cols)
}

/// Standard matrix product with a fixed left-to-right accumulation over the
/// inner dimension.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", shape_str(a), shape_str(b)));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data[i * k + p] * b.data[p * n + j];
            }
            out.data[i * n + j] = acc;
        }
    }
    Ok(out)
}

pub fn elementwise(a: &Matrix, b: &Matrix, op: ElementwiseOp) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::shape("elementwise", shape_str(a), shape_str(b)));
    }
    let f: fn(f64, f64) -> f64 = match op {
        ElementwiseOp::Add => |x, y| x + y,
        ElementwiseOp::Sub => |x, y| x - y,
        ElementwiseOp::Mul => |x, y| x * y,
    };
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

/// Column-wise arithmetic mean of a `T x D` matrix.
pub fn reduce_mean_rows(a: &Matrix) -> Result<Vec<f64>> {
    if a.rows == 0 {
        return Err(Error::EmptyInput("reduce_mean_rows"));
    }
    let mut sum = vec![0.0; a.cols];
    for row in a.iter_rows() {
        add_assign(&mut sum, row);
    }
    let n = a.rows as f64;
    sum.iter_mut().for_each(|v| *v /= n);
    Ok(sum)
}

// Slice kernels used by the recurrent code. Callers are responsible for
// length agreement; these only debug-assert it.

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}

/// `out[i] += sum_j w[i, j] * x[j]` for a row-major `w` with `x.len()` columns.
#[inline]
pub fn gemv_acc(out: &mut [f64], w: &[f64], x: &[f64]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols.max(1))) {
        *o += dot(row, x);
    }
}

/// `out[j] += sum_i w[i, j] * y[i]`, i.e. accumulates `w^T y`.
#[inline]
pub fn gemv_t_acc(out: &mut [f64], w: &[f64], y: &[f64]) {
    let cols = out.len();
    debug_assert_eq!(w.len(), y.len() * cols);
    for (&yi, row) in y.iter().zip(w.chunks_exact(cols.max(1))) {
        if yi != 0.0 {
            axpy(out, yi, row);
        }
    }
}

/// `w[i, j] += y[i] * x[j]`.
#[inline]
pub fn outer_acc(w: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), y.len() * cols);
    for (&yi, row) in y.iter().zip(w.chunks_exact_mut(cols.max(1))) {
        if yi != 0.0 {
            axpy(row, yi, x);
        }
    }
}

/// `y += a * x`.
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn add_assign(y: &mut [f64], x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

pub fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(y) {
        let d = a - b;
        acc += d * d;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let col = m(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &col).unwrap(), col);

        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[17.0], &[39.0]]));

        let z = Matrix::zeros(2, 3);
        let any = m(&[&[1.5], &[-2.0], &[7.0]]);
        assert_eq!(matmul(&z, &any).unwrap(), Matrix::zeros(2, 1));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 1)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x1"), "{msg}");
    }

    #[test]
    fn elementwise_examples() {
        let a = m(&[&[1.0, 2.0]]);
        let zero = Matrix::zeros(1, 2);
        assert_eq!(elementwise(&a, &zero, ElementwiseOp::Add).unwrap(), a);
        let x = m(&[&[2.0, 3.0]]);
        let y = m(&[&[4.0, 5.0]]);
        assert_eq!(
            elementwise(&x, &y, ElementwiseOp::Mul).unwrap(),
            m(&[&[8.0, 15.0]])
        );
        assert_eq!(elementwise(&x, &x, ElementwiseOp::Sub).unwrap(), zero);
        assert!(matches!(
            elementwise(&x, &Matrix::zeros(2, 1), ElementwiseOp::Add),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn reduce_mean_rows_examples() {
        assert_eq!(
            reduce_mean_rows(&m(&[&[1.0, 3.0], &[3.0, 1.0]])).unwrap(),
            vec![2.0, 2.0]
        );
        assert_eq!(reduce_mean_rows(&m(&[&[5.0, 7.0]])).unwrap(), vec![5.0, 7.0]);
        assert_eq!(
            reduce_mean_rows(&Matrix::zeros(4, 3)).unwrap(),
            vec![0.0; 3]
        );
        assert_eq!(
            reduce_mean_rows(&Matrix::zeros(0, 3)),
            Err(Error::EmptyInput("reduce_mean_rows"))
        );
    }

    #[test]
    fn slice_kernels_agree_with_matmul() {
        let w = m(&[&[1.0, -2.0, 0.5], &[3.0, 0.0, 1.0]]);
        let x = [0.25, 1.0, -4.0];
        let mut out = vec![0.0; 2];
        gemv_acc(&mut out, w.as_slice(), &x);
        let expect = matmul(&w, &Matrix::column(&x)).unwrap();
        assert_eq!(out, expect.as_slice());

        let y = [2.0, -1.0];
        let mut back = vec![0.0; 3];
        gemv_t_acc(&mut back, w.as_slice(), &y);
        let expect = matmul(&w.transpose(), &Matrix::column(&y)).unwrap();
        assert_eq!(back, expect.as_slice());

        let mut g = vec![0.0; 6];
        outer_acc(&mut g, &y, &x);
        assert_eq!(g, vec![0.5, 2.0, -8.0, -0.25, -1.0, 4.0]);
    }

    fn matrix_strategy() -> impl Strategy<Value = Matrix> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-1e3f64..1e3, r * c)
                .prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn identity_is_exact(a in matrix_strategy()) {
            prop_assert_eq!(&matmul(&a, &Matrix::identity(a.cols())).unwrap(), &a);
            prop_assert_eq!(&matmul(&Matrix::identity(a.rows()), &a).unwrap(), &a);
        }

        #[test]
        fn matmul_is_bitwise_repeatable(a in matrix_strategy()) {
            let t = a.transpose();
            let p1 = matmul(&a, &t).unwrap();
            let p2 = matmul(&a, &t).unwrap();
            let b1: Vec<u64> = p1.as_slice().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = p2.as_slice().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(b1, b2);
        }

        #[test]
        fn mean_of_repeated_row(row in proptest::collection::vec(-1e6f64..1e6, 1..8), t in 1usize..16) {
            let rows = vec![row.clone(); t];
            let mean = reduce_mean_rows(&Matrix::from_rows(&rows).unwrap()).unwrap();
            // Exact only when t * v is representable; small integers-scaled values
            // keep that true here up to rounding, so compare with a tight bound.
            for (a, b) in mean.iter().zip(&row) {
                prop_assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0) * t as f64);
            }
        }

        #[test]
        fn mean_of_repeated_integer_row_is_exact(row in proptest::collection::vec(-1000i32..1000, 1..8), t in 1usize..16) {
            let row: Vec<f64> = row.into_iter().map(f64::from).collect();
            let rows = vec![row.clone(); t];
            prop_assert_eq!(reduce_mean_rows(&Matrix::from_rows(&rows).unwrap()).unwrap(), row);
        }
    }
}
