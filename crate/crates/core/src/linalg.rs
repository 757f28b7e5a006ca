//! Matrix decompositions: QR orthonormalization, SVD, least squares, PCA.
//!
//! Decompositions run fully in f64 and convert back to f32 at the
//! boundary. The SVD is a one-sided Jacobi: deterministic, dependency-free,
//! and accurate enough for the subspace work this crate does.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Columns whose residual norm after projection falls below this are
/// treated as linearly dependent and dropped.
pub const RANK_DROP_TOL: f64 = 1e-6;

/// Relative singular-value cutoff for pseudoinverse solves.
const PINV_RCOND: f64 = 1e-10;

/// Column-major f64 workspace for decompositions.
#[derive(Clone)]
struct Cols {
    d: usize,
    cols: Vec<Vec<f64>>,
}

impl Cols {
    fn from_tensor(t: &Tensor) -> Self {
        let (d, k) = (t.rows(), t.cols());
        let mut cols = vec![vec![0.0f64; d]; k];
        for i in 0..d {
            for (j, col) in cols.iter_mut().enumerate() {
                col[i] = t.at(i, j) as f64;
            }
        }
        Cols { d, cols }
    }

    fn to_tensor(&self) -> Tensor {
        let k = self.cols.len();
        let mut data = vec![0.0f32; self.d * k];
        for (j, col) in self.cols.iter().enumerate() {
            for i in 0..self.d {
                data[i * k + j] = col[i] as f32;
            }
        }
        Tensor::from_raw(vec![self.d, k], data)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Orthonormalize the columns of `m` by modified Gram-Schmidt with one
/// re-orthogonalization pass. Rank-deficient columns (residual norm below
/// [`RANK_DROP_TOL`]) are dropped, so the result has `rank(m)` columns.
pub fn qr_orthonormalize(m: &Tensor) -> Result<Tensor> {
    if m.rank() != 2 || m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Dimension("qr_orthonormalize expects a non-empty matrix".into()));
    }
    let work = Cols::from_tensor(m);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for col in &work.cols {
        let mut v = col.clone();
        for _pass in 0..2 {
            for q in &basis {
                let c = dot(&v, q);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= c * qi;
                }
            }
        }
        let n = norm(&v);
        if n < RANK_DROP_TOL {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    if basis.is_empty() {
        return Err(Error::Numeric("orthonormalization of an all-zero matrix: empty basis".into()));
    }
    Ok(Cols { d: work.d, cols: basis }.to_tensor())
}

/// Thin SVD `m = U . diag(S) . V^T` with S non-negative and descending.
///
/// One-sided Jacobi on the side with fewer columns; iteration cap
/// `100 * min(a, b)` sweeps.
pub fn svd(m: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    if m.rank() != 2 || m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Dimension("svd expects a non-empty matrix".into()));
    }
    m.check_finite()?;
    let (a, b) = (m.rows(), m.cols());
    if a < b {
        // Work on the transpose and swap factors back.
        let (u, s, v) = svd(&m.transpose())?;
        return Ok((v, s, u));
    }

    let mut work = Cols::from_tensor(m);
    let k = b;
    let scale = work.cols.iter().map(|c| norm(c)).fold(0.0f64, f64::max).max(1.0);
    let tol = 1e-14 * scale * scale;

    // Accumulate right rotations in V (k x k, column-major as rows here).
    let mut v = vec![vec![0.0f64; k]; k];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }

    let max_sweeps = 100 * k.min(a);
    let mut converged = false;
    for _sweep in 0..max_sweeps {
        let mut off = 0.0f64;
        for p in 0..k {
            for q in (p + 1)..k {
                let (cp, cq) = split_two(&mut work.cols, p, q);
                let apq = dot(cp, cq);
                let app = dot(cp, cp);
                let aqq = dot(cq, cq);
                off = off.max(apq.abs());
                if apq.abs() <= tol {
                    continue;
                }
                // Jacobi rotation zeroing the (p,q) inner product.
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (xp, xq) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (op, oq) = (*xp, *xq);
                    *xp = c * op - s * oq;
                    *xq = s * op + c * oq;
                }
                let (vp, vq) = split_two(&mut v, p, q);
                for (xp, xq) in vp.iter_mut().zip(vq.iter_mut()) {
                    let (op, oq) = (*xp, *xq);
                    *xp = c * op - s * oq;
                    *xq = s * op + c * oq;
                }
            }
        }
        if off <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "svd did not converge within {max_sweeps} sweeps"
        )));
    }

    // Singular values = column norms; sort descending.
    let mut order: Vec<usize> = (0..k).collect();
    let norms: Vec<f64> = work.cols.iter().map(|c| norm(c)).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut s_vals: Vec<f32> = Vec::with_capacity(k);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &j in &order {
        let n = norms[j];
        s_vals.push(n as f32);
        v_cols.push(v[j].clone());
        if n > 1e-300 {
            u_cols.push(work.cols[j].iter().map(|x| x / n).collect());
        } else {
            u_cols.push(vec![0.0; a]);
        }
    }
    // Complete U columns for zero singular values so U stays orthonormal.
    complete_orthonormal(&mut u_cols, a);

    let u = Cols { d: a, cols: u_cols }.to_tensor();
    let vt = Cols { d: k, cols: v_cols }.to_tensor();
    let s = Tensor::new(vec![k], s_vals)?;
    Ok((u, s, vt))
}

/// Replace zero columns with vectors orthonormal to the rest.
fn complete_orthonormal(cols: &mut [Vec<f64>], d: usize) {
    for idx in 0..cols.len() {
        if norm(&cols[idx]) > 0.5 {
            continue;
        }
        // Try coordinate axes until one survives projection.
        'axes: for axis in 0..d {
            let mut v = vec![0.0f64; d];
            v[axis] = 1.0;
            for (j, other) in cols.iter().enumerate() {
                if j == idx {
                    continue;
                }
                let c = dot(&v, other);
                for (vi, oi) in v.iter_mut().zip(other) {
                    *vi -= c * oi;
                }
            }
            let n = norm(&v);
            if n > 1e-6 {
                v.iter_mut().for_each(|x| *x /= n);
                cols[idx] = v;
                break 'axes;
            }
        }
    }
}

fn split_two<'a, T>(v: &'a mut [T], p: usize, q: usize) -> (&'a mut T, &'a mut T) {
    debug_assert!(p < q);
    let (lo, hi) = v.split_at_mut(q);
    (&mut lo[p], &mut hi[0])
}

/// Minimum-norm least squares `argmin_w |X w - y|` via SVD pseudoinverse.
pub fn least_squares(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || y.rank() != 1 || x.rows() != y.numel() {
        return Err(Error::Dimension(format!(
            "least_squares on X {:?}, y {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (u, s, v) = svd(x)?;
    let smax = s.data().first().copied().unwrap_or(0.0) as f64;
    let cutoff = smax * PINV_RCOND;
    // w = V . diag(1/s) . U^T y
    let k = s.numel();
    let n = x.rows();
    let d = x.cols();
    let mut uty = vec![0.0f64; k];
    for (j, c) in uty.iter_mut().enumerate() {
        *c = (0..n).map(|i| u.at(i, j) as f64 * y.data()[i] as f64).sum();
    }
    let mut w = vec![0.0f64; d];
    for j in 0..k {
        let sj = s.data()[j] as f64;
        if sj <= cutoff || sj == 0.0 {
            continue;
        }
        let c = uty[j] / sj;
        for (i, wi) in w.iter_mut().enumerate() {
            *wi += c * v.at(i, j) as f64;
        }
    }
    Tensor::new(vec![d], w.iter().map(|&x| x as f32).collect())
}

/// PCA of the rows of `x` after mean-centering.
///
/// Returns (components [d x k] with orthonormal columns, explained
/// variance [k], descending).
pub fn pca(x: &Tensor, k: usize) -> Result<(Tensor, Tensor)> {
    if x.rank() != 2 {
        return Err(Error::Dimension("pca expects a matrix".into()));
    }
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::Dimension("pca needs at least 2 rows".into()));
    }
    if k > n.min(d) || k == 0 {
        return Err(Error::Dimension(format!(
            "pca k={k} out of range for {n}x{d} data"
        )));
    }
    let mean = x.mean_rows();
    let mut centered = x.clone();
    for i in 0..n {
        let row = &mut centered.data_mut()[i * d..(i + 1) * d];
        for (v, m) in row.iter_mut().zip(mean.data()) {
            *v -= m;
        }
    }
    let (_u, s, v) = svd(&centered)?;
    let mut comp = vec![0.0f32; d * k];
    let mut var = vec![0.0f32; k];
    for j in 0..k {
        for i in 0..d {
            comp[i * k + j] = v.at(i, j);
        }
        let sj = s.data()[j] as f64;
        var[j] = (sj * sj / (n as f64 - 1.0)) as f32;
    }
    Ok((Tensor::new(vec![d, k], comp)?, Tensor::new(vec![k], var)?))
}

/// Project `v` onto the span of the orthonormal columns of `basis` and
/// return `|P v| / |v|`. Shared by probe overlap and neuron write scores.
pub fn projection_ratio(v: &Tensor, basis: &Tensor) -> Result<f64> {
    if basis.rank() != 2 || v.numel() != basis.rows() {
        return Err(Error::Dimension(format!(
            "projection_ratio on v {:?} vs basis {:?}",
            v.shape(),
            basis.shape()
        )));
    }
    let vnorm = v.norm();
    if vnorm == 0.0 {
        return Err(Error::Numeric("projection ratio of a zero vector is undefined".into()));
    }
    let k = basis.cols();
    let mut proj_sq = 0.0f64;
    for j in 0..k {
        let c: f64 = (0..basis.rows())
            .map(|i| basis.at(i, j) as f64 * v.data()[i] as f64)
            .sum();
        proj_sq += c * c;
    }
    Ok((proj_sq.sqrt() / vnorm).min(1.0))
}

/// Max absolute deviation of `B^T B` from the identity.
pub fn gram_deviation(basis: &Tensor) -> f64 {
    let k = basis.cols();
    let d = basis.rows();
    let mut worst = 0.0f64;
    for a in 0..k {
        for b in a..k {
            let g: f64 = (0..d).map(|i| basis.at(i, a) as f64 * basis.at(i, b) as f64).sum();
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((g - target).abs());
        }
    }
    worst
}
