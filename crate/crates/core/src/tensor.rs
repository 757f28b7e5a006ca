//! Dense row-major tensors: f32 storage, f64 accumulation.
//!
//! Tensors are immutable values once returned from an operation; every
//! public operation checks that its result is finite and reports NaN/Inf
//! as a numeric error instead of letting it propagate.

use crate::error::{Error, Result};
use crate::rng::{sample_normal, LabRng};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite()?;
        Ok(t)
    }

    /// Construct without the finite check. For internal kernels that
    /// validate at their own boundary.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn randn(shape: &[usize], std: f32, rng: &mut LabRng) -> Self {
        let data = (0..shape.iter().product())
            .map(|_| (sample_normal(rng) as f32) * std)
            .collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() needs a matrix, got rank {}", self.rank());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() needs a matrix, got rank {}", self.rank());
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at flat index {pos} (shape {:?})",
                self.data[pos], self.shape
            )));
        }
        Ok(())
    }

    // ── elementwise / BLAS-lite (f64 accumulation in reductions) ──────

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::Dimension("matmul expects rank-2 tensors".into()));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {m}x{k} . {k2}x{n}"
            )));
        }
        let mut out = vec![0.0f32; m * n];
        matmul_kernel(&self.data, &other.data, m, k, n, &mut out);
        let t = Tensor::from_raw(vec![m, n], out);
        t.check_finite()?;
        Ok(t)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_raw(vec![n, m], out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        let t = Tensor { shape: self.shape.clone(), data };
        t.check_finite()?;
        Ok(t)
    }

    pub fn scale(&self, c: f32) -> Result<Tensor> {
        let t = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        };
        t.check_finite()?;
        Ok(t)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dimension("dot on mismatched shapes".into()));
        }
        Ok(dot_f64(&self.data, &other.data))
    }

    pub fn norm(&self) -> f64 {
        dot_f64(&self.data, &self.data).sqrt()
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Mean over rows: [n x d] -> [d].
    pub fn mean_rows(&self) -> Tensor {
        let (n, d) = (self.rows(), self.cols());
        let mut acc = vec![0.0f64; d];
        for i in 0..n {
            for (a, &v) in acc.iter_mut().zip(self.row(i)) {
                *a += v as f64;
            }
        }
        let data = acc.iter().map(|&a| (a / n as f64) as f32).collect();
        Tensor::from_raw(vec![d], data)
    }

    pub fn column(&self, j: usize) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let data = (0..m).map(|i| self.data[i * n + j]).collect();
        Tensor::from_raw(vec![m], data)
    }

    /// Stack 1-d tensors of equal length into a matrix, one per row.
    pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
        let d = rows.first().map_or(0, Tensor::numel);
        if rows.iter().any(|r| r.numel() != d) {
            return Err(Error::Dimension("stack_rows on ragged inputs".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            data.extend_from_slice(r.data());
        }
        Ok(Tensor::from_raw(vec![rows.len(), d], data))
    }

    /// Horizontally concatenate matrices with equal row counts.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows() != other.rows() {
            return Err(Error::Dimension("concat_cols row mismatch".into()));
        }
        let (m, n1, n2) = (self.rows(), self.cols(), other.cols());
        let mut data = Vec::with_capacity(m * (n1 + n2));
        for i in 0..m {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Tensor::from_raw(vec![m, n1 + n2], data))
    }
}

/// C[i,j] = sum_k a[i,k] * b[k,j] with f64 accumulation per output element.
pub(crate) fn matmul_kernel(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b[kk * n..(kk + 1) * n];
            for (accv, &bv) in acc.iter_mut().zip(brow) {
                *accv += av * bv as f64;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
}

/// Eight independent f64 lanes so the reduction vectorizes; the lane
/// split is fixed, so results stay deterministic.
pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    const LANES: usize = 8;
    let mut lanes = [0.0f64; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let ao = &a[c * LANES..(c + 1) * LANES];
        let bo = &b[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            lanes[l] += ao[l] as f64 * bo[l] as f64;
        }
    }
    let mut tail = 0.0f64;
    for i in chunks * LANES..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    lanes.iter().sum::<f64>() + tail
}

/// C[i,k] = sum_j a[i,j] * b[k,j] (i.e. A . B^T) without materializing
/// the transpose; used by matmul backward.
pub(crate) fn matmul_nt_kernel(
    a: &[f32],
    b: &[f32],
    m: usize,
    n: usize,
    k: usize,
    out: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            out[i * k + kk] = dot_f64(arow, brow) as f32;
        }
    }
}

/// C[k,j] = sum_i a[i,k] * b[i,j] (i.e. A^T . B) without materializing
/// the transpose; used by matmul backward.
pub(crate) fn matmul_tn_kernel(
    a: &[f32],
    b: &[f32],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if m <= 16 {
        // Few summands per output: accumulate straight into the output
        // row instead of staging a full k x n f64 buffer.
        let mut acc = vec![0.0f64; n];
        for kk in 0..k {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..m {
                let av = a[i * k + kk];
                if av == 0.0 {
                    continue;
                }
                let av = av as f64;
                let brow = &b[i * n..(i + 1) * n];
                for (o, &bv) in acc.iter_mut().zip(brow) {
                    *o += av * bv as f64;
                }
            }
            for (o, &v) in out[kk * n..(kk + 1) * n].iter_mut().zip(&acc) {
                *o = v as f32;
            }
        }
        return;
    }
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let accrow = &mut acc[kk * n..(kk + 1) * n];
            for (o, &bv) in accrow.iter_mut().zip(brow) {
                *o += av * bv as f64;
            }
        }
    }
    for (o, &v) in out.iter_mut().zip(&acc) {
        *o = v as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn identity_matmul_is_identity() {
        let a = Tensor::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.0],
        ])
        .unwrap();
        let i3 = Tensor::eye(3);
        assert_eq!(i3.matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_multiplied_example() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 5]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(Tensor::new(vec![2], vec![1.0, f32::NAN]).is_err());
        let a = Tensor::new(vec![1], vec![3.0e38]).unwrap();
        assert!(matches!(a.scale(1.0e10), Err(Error::Numeric(_))));
    }

    #[test]
    fn transpose_roundtrip() {
        let mut rng = rng_from_seed(3);
        let a = Tensor::randn(&[4, 7], 1.0, &mut rng);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn matmul_is_deterministic() {
        let mut rng = rng_from_seed(9);
        let a = Tensor::randn(&[13, 17], 1.0, &mut rng);
        let b = Tensor::randn(&[17, 11], 1.0, &mut rng);
        let c1 = a.matmul(&b).unwrap();
        let c2 = a.matmul(&b).unwrap();
        assert_eq!(c1, c2);
    }
}

/// Bench-only export of the matmul kernel.
#[doc(hidden)]
pub fn bench_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    matmul_kernel(a, b, m, k, n, out);
}
