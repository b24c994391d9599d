//! Dense n-dimensional arrays of `f64` in row-major order.
//!
//! [`Tensor`] is the universal value carrier of the crate: inputs, activations,
//! parameters, gradients and noise masks are all tensors. The representation
//! is deliberately plain (a shape vector plus a flat data vector) so that
//! checkpoints and golden files are trivial to inspect; matrix products are
//! delegated to `ndarray`'s tuned kernels.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A dense row-major array of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from an explicit shape and row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    /// 1-D tensor wrapping `data`.
    pub fn from_slice(data: &[f64]) -> Self {
        Tensor { shape: vec![data.len()], data: data.to_vec() }
    }

    /// 2-D tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::from_vec(&[rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Reinterpret the flat data under a new shape of equal volume.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean (L2) norm of the flattened data.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Elementwise in-place `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "axpy {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Multiply every element by `scale`.
    pub fn scale(&mut self, scale: f64) {
        for a in &mut self.data {
            *a *= scale;
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.rank() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    fn view2(&self) -> Result<ArrayView2<'_, f64>> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))
    }
}

/// Standard matrix product of two rank-2 tensors.
pub fn tensor_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (av, bv) = (a.view2()?, b.view2()?);
    if av.ncols() != bv.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let c = av.dot(&bv);
    let (rows, cols) = (c.nrows(), c.ncols());
    Tensor::matrix(rows, cols, c.into_raw_vec_and_offset().0)
}

/// `out = a (m x k, row-major) · b (k x n, row-major)`, written into a flat
/// buffer. Low-level variant used by the network hot path.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    let av = ArrayView2::from_shape((m, k), a).expect("gemm: lhs buffer size");
    let bv = ArrayView2::from_shape((k, n), b).expect("gemm: rhs buffer size");
    let mut ov = ndarray::ArrayViewMut2::from_shape((m, n), out).expect("gemm: out buffer size");
    ndarray::linalg::general_mat_mul(1.0, &av, &bv, 0.0, &mut ov);
}

/// `out = aᵀ (k x m) · b (k x n)` where `a` is stored as `k x m` row-major.
pub fn gemm_at_b(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    let av = ArrayView2::from_shape((k, m), a).expect("gemm_at_b: lhs buffer size");
    let bv = ArrayView2::from_shape((k, n), b).expect("gemm_at_b: rhs buffer size");
    let mut ov =
        ndarray::ArrayViewMut2::from_shape((m, n), out).expect("gemm_at_b: out buffer size");
    ndarray::linalg::general_mat_mul(1.0, &av.t(), &bv, 0.0, &mut ov);
}

/// `out = a (m x k) · bᵀ (n x k)` where `b` is stored as `n x k` row-major.
pub fn gemm_a_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    let av = ArrayView2::from_shape((m, k), a).expect("gemm_a_bt: lhs buffer size");
    let bv = ArrayView2::from_shape((n, k), b).expect("gemm_a_bt: rhs buffer size");
    let mut ov =
        ndarray::ArrayViewMut2::from_shape((m, n), out).expect("gemm_a_bt: out buffer size");
    ndarray::linalg::general_mat_mul(1.0, &av, &bv.t(), 0.0, &mut ov);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_is_noop() {
        let id = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let a = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let c = tensor_matmul(&id, &a).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn hand_computed_product() {
        let a = Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::matrix(2, 1, vec![5., 6.]).unwrap();
        let c = tensor_matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17., 39.]);
    }

    #[test]
    fn mismatched_inner_dims_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 5]);
        assert!(matches!(tensor_matmul(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn from_vec_rejects_wrong_volume() {
        assert!(Tensor::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn transpose_gemm_variants_agree_with_plain_product() {
        // a: 3x2, b: 3x4 -> aᵀ·b is 2x4; check against explicit transpose.
        let a: Vec<f64> = (0..6).map(|i| i as f64 + 0.5).collect();
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.25 - 1.0).collect();
        let mut out = vec![0.0; 8];
        gemm_at_b(2, 3, 4, &a, &b, &mut out);
        let at = Tensor::matrix(2, 3, vec![a[0], a[2], a[4], a[1], a[3], a[5]]).unwrap();
        let bt = Tensor::matrix(3, 4, b.clone()).unwrap();
        let want = tensor_matmul(&at, &bt).unwrap();
        for (x, y) in out.iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }

        // a: 2x3, b stored 4x3 -> a·bᵀ is 2x4.
        let a2: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect();
        let mut out2 = vec![0.0; 8];
        gemm_a_bt(2, 3, 4, &a2, &b, &mut out2);
        let bt2 = Tensor::matrix(4, 3, b.clone()).unwrap();
        let btt = {
            let mut d = vec![0.0; 12];
            for r in 0..4 {
                for c in 0..3 {
                    d[c * 4 + r] = bt2.data()[r * 3 + c];
                }
            }
            Tensor::matrix(3, 4, d).unwrap()
        };
        let want2 = tensor_matmul(&Tensor::matrix(2, 3, a2).unwrap(), &btt).unwrap();
        for (x, y) in out2.iter().zip(want2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
