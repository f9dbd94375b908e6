//! Dense row-major `f64` tensors and the raw kernels shared by traced and
//! untraced evaluation.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Gathers the given rows of a matrix into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (n, d) = self.dims2()?;
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Dimension(format!(
                    "row {r} out of range for {n} rows"
                )));
            }
            data.extend_from_slice(&self.data[r * d..(r + 1) * d]);
        }
        Tensor::new(vec![rows.len(), d], data)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let d = *self.shape.last().unwrap();
        &self.data[r * d..(r + 1) * d]
    }
}

fn check_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// Strided view of a matrix operand for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn of(t: &'a Tensor) -> Result<Self> {
        let (rows, cols) = t.dims2()?;
        Ok(MatRef {
            data: &t.data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        })
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }
}

/// `out = a · b` (overwriting) or `out += a · b` when `accumulate`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.len(), a.rows * b.cols);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: operand extents are checked against the strides above and by
    // the callers; `out` is a contiguous row-major a.rows x b.cols buffer.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Matrix product of `a` [m×k] and `b` [k×n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul: inner dimensions disagree for {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(MatRef::of(a)?, MatRef::of(b)?, &mut out, false);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Element-wise operations with standard calculus gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul)
    }
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies an element-wise operation; `b` is required exactly for binary ops.
pub fn elementwise(op: Elementwise, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match (op.is_binary(), b) {
        (true, Some(b)) => {
            check_same_shape(&format!("{op:?}"), a, b)?;
            let f: fn(f64, f64) -> f64 = match op {
                Elementwise::Add => |x, y| x + y,
                Elementwise::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            Ok(Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            })
        }
        (false, None) => Ok(match op {
            Elementwise::Relu => a.map(relu),
            Elementwise::Sigmoid => a.map(sigmoid),
            _ => a.map(f64::tanh),
        }),
        (true, None) => Err(Error::Contract(format!("{op:?} needs two operands"))),
        (false, Some(_)) => Err(Error::Contract(format!("{op:?} takes one operand"))),
    }
}

/// Adds a bias row vector to every row of a matrix.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    if bias.len() != cols {
        return Err(Error::Dimension(format!(
            "bias of length {} cannot broadcast over shape {:?}",
            bias.len(),
            x.shape
        )));
    }
    let mut out = x.data.clone();
    for r in 0..rows {
        for (o, &b) in out[r * cols..(r + 1) * cols].iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data[i * k + p] * b.data[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let row = Tensor::from_rows(&[&[1.0, 2.0]]);
        let col = Tensor::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for _ in 0..40 {
            let (m, k, n) = (
                rng.random_range(1..=64),
                rng.random_range(1..=64),
                rng.random_range(1..=64),
            );
            let a = random(&mut rng, &[m, k]);
            let b = random(&mut rng, &[k, n]);
            let fast = matmul(&a, &b).unwrap();
            let slow = naive_matmul(&a, &b);
            let worst = fast
                .data()
                .iter()
                .zip(slow.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-12, "{m}x{k}x{n}: {worst}");
        }
    }

    #[test]
    fn matmul_rejects_bad_inner_dims() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_basics() {
        let x = Tensor::vector(&[-1.0, 0.0, 2.0]);
        assert_eq!(
            elementwise(Elementwise::Relu, &x, None).unwrap().data(),
            &[0.0, 0.0, 2.0]
        );
        let zeros = Tensor::zeros(&[3]);
        assert_eq!(elementwise(Elementwise::Add, &x, Some(&zeros)).unwrap(), x);
        let half = elementwise(Elementwise::Sigmoid, &Tensor::scalar(0.0), None).unwrap();
        assert_eq!(half.data(), &[0.5]);
        assert!(matches!(
            elementwise(Elementwise::Mul, &x, Some(&Tensor::zeros(&[2]))),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }
}
