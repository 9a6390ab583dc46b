use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `[rows × cols]` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
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

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Same data under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// Views a vector `[d]` as `[1 × d]`; matrices are returned unchanged.
    pub fn as_matrix(&self) -> Self {
        if self.shape.len() == 1 {
            Self {
                shape: vec![1, self.shape[0]],
                data: self.data.clone(),
            }
        } else {
            self.clone()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Gathers the listed rows into a new `[idx.len() × cols]` matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            shape: vec![idx.len(), c],
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Adds `row` (shape `[1 × c]` or `[c]`) to every row.
    pub fn add_row(&self, row: &Self) -> Self {
        let c = self.cols();
        debug_assert_eq!(row.len(), c);
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(c) {
            for (a, b) in chunk.iter_mut().zip(&row.data) {
                *a += b;
            }
        }
        out
    }

    /// Column sums as a `[1 × c]` matrix.
    pub fn sum_rows(&self) -> Self {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for chunk in self.data.chunks(c) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Self {
            shape: vec![1, c],
            data: out,
        }
    }

    /// Matrix product with optional transposition of either operand.
    /// Both operands must be 2-D; extents are checked by the caller.
    pub fn gemm(a: &Self, trans_a: bool, b: &Self, trans_b: bool) -> Self {
        let (ar, ac) = (a.shape[0], a.shape[1]);
        let (br, bc) = (b.shape[0], b.shape[1]);
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        debug_assert_eq!(k, k2);
        let (rsa, csa) = if trans_a { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
        let mut out = vec![0.0; m * n];
        // SAFETY: strides describe the row-major buffers of `a`, `b` and `out`,
        // whose lengths are `ar*ac`, `br*bc` and `m*n` respectively.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Self {
            shape: vec![m, n],
            data: out,
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if !self.is_matrix() || !other.is_matrix() || self.shape[1] != other.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        Ok(Self::gemm(self, false, other, false))
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data,
        }
    }

    /// Concatenates two matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(a: &Self, b: &Self, axis: usize) -> Result<Self> {
        if !a.is_matrix() || !b.is_matrix() || axis > 1 {
            return Err(Error::dim("concat", &a.shape, &b.shape));
        }
        match axis {
            0 => {
                if a.shape[1] != b.shape[1] {
                    return Err(Error::dim("concat", &a.shape, &b.shape));
                }
                let mut data = a.data.clone();
                data.extend_from_slice(&b.data);
                Ok(Self {
                    shape: vec![a.shape[0] + b.shape[0], a.shape[1]],
                    data,
                })
            }
            _ => {
                if a.shape[0] != b.shape[0] {
                    return Err(Error::dim("concat", &a.shape, &b.shape));
                }
                let (ca, cb) = (a.shape[1], b.shape[1]);
                let mut data = Vec::with_capacity(a.len() + b.len());
                for i in 0..a.shape[0] {
                    data.extend_from_slice(&a.data[i * ca..(i + 1) * ca]);
                    data.extend_from_slice(&b.data[i * cb..(i + 1) * cb]);
                }
                Ok(Self {
                    shape: vec![a.shape[0], ca + cb],
                    data,
                })
            }
        }
    }

    /// Splits columns `[0, at)` and `[at, cols)` of a matrix.
    pub fn split_cols(&self, at: usize) -> (Self, Self) {
        let (r, c) = (self.rows(), self.cols());
        let mut left = Vec::with_capacity(r * at);
        let mut right = Vec::with_capacity(r * (c - at));
        for row in self.data.chunks(c) {
            left.extend_from_slice(&row[..at]);
            right.extend_from_slice(&row[at..]);
        }
        (
            Self {
                shape: vec![r, at],
                data: left,
            },
            Self {
                shape: vec![r, c - at],
                data: right,
            },
        )
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&self) -> Self {
        let c = self.cols();
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_product() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension { .. })
        ));
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn gemm_transposes_agree_with_explicit_transpose() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![0.5, -1., 2., 1., 0., -3.]).unwrap();
        let direct = Tensor::gemm(&a, false, &b, true);
        let explicit = a.matmul(&b.transpose()).unwrap();
        assert_eq!(direct, explicit);
        let direct = Tensor::gemm(&a, true, &b, false);
        let explicit = a.transpose().matmul(&b).unwrap();
        assert_eq!(direct, explicit);
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let a = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![9., 8.]).unwrap();
        let c = Tensor::concat(&a, &b, 1).unwrap();
        assert_eq!(c.data(), &[1., 2., 9., 3., 4., 8.]);
        let (l, r) = c.split_cols(2);
        assert_eq!(l, a);
        assert_eq!(r, b);
        assert!(Tensor::concat(&a, &b, 0).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::new(vec![2, 3], vec![1., 2., 3., -5., 0., 5.]).unwrap();
        let s = t.softmax_rows();
        for i in 0..2 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }
}
