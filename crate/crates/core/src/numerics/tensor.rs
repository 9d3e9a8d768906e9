use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&s| s == 0) || numel != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
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
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Row vector `[1 × n]`.
    pub fn row_vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len().max(1)],
            data: if values.is_empty() {
                vec![0.0]
            } else {
                values.to_vec()
            },
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Rows of a matrix.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a matrix (size of the last axis in general).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
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

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Round every entry through 32-bit precision.
    pub fn round_to_f32(&self) -> Tensor {
        self.map(|v| v as f32 as f64)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if !self.is_matrix() {
            return Err(Error::dim("transpose", &self.shape, &[]));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_matrix() || !other.is_matrix() || self.shape[1] != other.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Row-wise softmax over the last axis with keys hidden where `visible[j]`
    /// is false. Hidden scores are set to negative infinity before
    /// exponentiation, so hidden entries come out as exactly zero.
    pub fn masked_softmax(&self, visible: &[bool]) -> Result<Tensor> {
        let l = self.cols();
        if visible.len() != l {
            return Err(Error::dim("masked_softmax", &self.shape, &[visible.len()]));
        }
        let mut out = self.data.clone();
        for (row_idx, row) in out.chunks_mut(l).enumerate() {
            softmax_row(row, |j| visible[j]).ok_or(Error::InvalidMask { row: row_idx })?;
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Per-row normalisation over the last axis followed by an affine map.
    pub fn layer_norm(&self, gamma: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
        let d = self.cols();
        if gamma.numel() != d || shift.numel() != d {
            return Err(Error::dim("layer_norm", &self.shape, gamma.shape()));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(d) {
            let (mean, inv_std) = row_moments(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * gamma.data[j] + shift.data[j];
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }
}

/// In-place stabilised softmax of one row. Entries where `visible(j)` is false
/// receive `-inf` before exponentiation. Returns `None` when nothing is visible.
pub(crate) fn softmax_row(row: &mut [f64], visible: impl Fn(usize) -> bool) -> Option<()> {
    let mut max = f64::NEG_INFINITY;
    let mut any_visible = false;
    for (j, v) in row.iter_mut().enumerate() {
        if visible(j) {
            any_visible = true;
            max = max.max(*v);
        } else {
            *v = f64::NEG_INFINITY;
        }
    }
    if !any_visible {
        return None;
    }
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
    Some(())
}

/// Mean and `1/sqrt(var + eps)` of a row, using the biased variance.
pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        let z = Tensor::zeros(&[2, 2]).matmul(&Tensor::ones(&[2, 3])).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn masked_softmax_examples() {
        let t = Tensor::row_vector(&[1.0; 4]);
        let p = t.masked_softmax(&[true; 4]).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let t = Tensor::row_vector(&[0.0, 3f64.ln()]);
        let p = t.masked_softmax(&[true, true]).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);

        let t = Tensor::row_vector(&[5.0, 2.0, 9.0]);
        let p = t.masked_softmax(&[true, true, false]).unwrap();
        let e3 = 3f64.exp();
        assert!((p.data()[0] - e3 / (e3 + 1.0)).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / (e3 + 1.0)).abs() < 1e-15);
        assert_eq!(p.data()[2], 0.0);
    }

    #[test]
    fn masked_softmax_all_masked_row_is_rejected() {
        let t = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            t.masked_softmax(&[false; 3]),
            Err(Error::InvalidMask { row: 0 })
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::ones(&[1, 3]);
        let s = Tensor::zeros(&[1, 3]);
        let c = Tensor::full(&[1, 3], 4.2).layer_norm(&g, &s, 1e-5).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));

        let x = Tensor::row_vector(&[1.0, -1.0]);
        let y = x
            .layer_norm(&Tensor::ones(&[1, 2]), &Tensor::zeros(&[1, 2]), 1e-300)
            .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);

        let shift = Tensor::row_vector(&[0.5, -2.0]);
        let y = x
            .layer_norm(&Tensor::zeros(&[1, 2]), &shift, 1e-5)
            .unwrap();
        assert_eq!(y.data(), shift.data());
    }

    #[test]
    fn constructor_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
