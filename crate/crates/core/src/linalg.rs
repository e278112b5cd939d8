//! Small dense real linear algebra.
//!
//! Everything is `f64` and row-major. Sizes in this crate stay in the tens to
//! low hundreds, so the decompositions here are the textbook ones: cyclic
//! Jacobi for symmetric eigenproblems and Householder QR for least squares.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
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
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                axpy(aik, other.row(k), o);
            }
        }
        out
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul shape mismatch");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &aki) in a.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                axpy(aki, b, &mut out.data[i * other.cols..(i + 1) * other.cols]);
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_t shape mismatch");
        Mat::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j)))
    }

    /// Row vector times matrix: `v · self`.
    pub fn vec_mul(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows, "vec_mul shape mismatch");
        let mut out = vec![0.0; self.cols];
        for (k, &vk) in v.iter().enumerate() {
            if vk != 0.0 {
                axpy(vk, self.row(k), &mut out);
            }
        }
        out
    }

    /// Matrix times column vector: `self · v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "mul_vec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Mat {
        Mat {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Mat {
        Mat::from_fn(self.rows, end - start, |i, j| self[(i, start + j)])
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    /// Mixed `(1,∞)` norm: max over columns of the column's ℓ1 norm.
    pub fn norm_1_inf(&self) -> f64 {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self[(r, c)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a·x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `u vᵀ`
pub fn outer(u: &[f64], v: &[f64]) -> Mat {
    Mat::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
}

/// Softmax of a single slice in place, with max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Row-wise softmax. Each row is shifted by its max before exponentiating.
pub fn row_softmax(m: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// the columns of the second matrix.
pub fn sym_eigen(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::Shape(format!("eigensolve needs a square matrix, got {n}x{}", a.cols())));
    }
    let mut m = a.clone();
    // symmetrize away round-off
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    let mut v = Mat::identity(n);
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok((values, vectors))
}

/// Singular values in descending order, via the eigenvalues of the smaller
/// Gram matrix.
pub fn singular_values(m: &Mat) -> Vec<f64> {
    let gram = if m.rows() >= m.cols() { m.t_matmul(m) } else { m.matmul_t(m) };
    let (vals, _) = sym_eigen(&gram).expect("gram matrix is square");
    let mut sv: Vec<f64> = vals.into_iter().map(|l| l.max(0.0).sqrt()).collect();
    sv.reverse();
    sv
}

/// Smallest singular value of a tall (or square) matrix.
pub fn min_singular_value(m: &Mat) -> Result<f64> {
    if m.rows() < m.cols() {
        return Err(Error::Shape(format!(
            "min_singular_value needs rows >= cols, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if m.cols() == 0 {
        return Ok(0.0);
    }
    let (vals, _) = sym_eigen(&m.t_matmul(m))?;
    Ok(vals[0].max(0.0).sqrt())
}

/// Largest singular value.
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.rows() == 0 || m.cols() == 0 {
        return 0.0;
    }
    singular_values(m)[0]
}

/// Least-squares solution of `X w ≈ y` via Householder QR.
///
/// Rejects designs with `σ_min(X) < 1e-10·σ_max(X)`.
pub fn least_squares(x: &Mat, y: &[f64]) -> Result<Vec<f64>> {
    let (t, d) = x.shape();
    if t < d {
        return Err(Error::Shape(format!("least squares needs rows >= cols, got {t}x{d}")));
    }
    if y.len() != t {
        return Err(Error::Shape(format!("response has {} entries, design has {t} rows", y.len())));
    }
    let sv = singular_values(x);
    let (smax, smin) = (sv[0], sv[d - 1]);
    if !(smin >= 1e-10 * smax) || smax == 0.0 {
        return Err(Error::Degenerate(format!(
            "design is numerically rank deficient (sigma_min={smin:e}, sigma_max={smax:e})"
        )));
    }

    let mut r = x.clone();
    let mut qty = y.to_vec();
    for k in 0..d {
        let norm_col: f64 = (k..t).map(|i| r[(i, k)] * r[(i, k)]).sum::<f64>().sqrt();
        if norm_col == 0.0 {
            continue;
        }
        let alpha = if r[(k, k)] > 0.0 { -norm_col } else { norm_col };
        let mut v: Vec<f64> = (k..t).map(|i| r[(i, k)]).collect();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..d {
            let s: f64 = (k..t).map(|i| v[i - k] * r[(i, j)]).sum::<f64>() * 2.0 / vnorm2;
            for i in k..t {
                r[(i, j)] -= s * v[i - k];
            }
        }
        let s: f64 = (k..t).map(|i| v[i - k] * qty[i]).sum::<f64>() * 2.0 / vnorm2;
        for i in k..t {
            qty[i] -= s * v[i - k];
        }
    }
    let mut w = vec![0.0; d];
    for i in (0..d).rev() {
        let mut acc = qty[i];
        for j in (i + 1)..d {
            acc -= r[(i, j)] * w[j];
        }
        w[i] = acc / r[(i, i)];
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Mat::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Power iteration on `MᵀM`, used as an independent route to σ_max.
    fn power_iteration_sigma_max(m: &Mat) -> f64 {
        let g = m.t_matmul(m);
        let mut v = vec![1.0; g.cols()];
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let w = g.mul_vec(&v);
            let n = norm2(&w);
            v = w.iter().map(|x| x / n).collect();
            lambda = dot(&v, &g.mul_vec(&v));
        }
        lambda.sqrt()
    }

    /// Inverse iteration with Gauss-Jordan inverse of the Gram matrix: an
    /// eigensolve route that shares no code with Jacobi.
    fn inverse_iteration_lambda_min(g: &Mat) -> f64 {
        let n = g.rows();
        let mut aug = Mat::zeros(n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = g[(i, j)];
            }
            aug[(i, n + i)] = 1.0;
        }
        for c in 0..n {
            let piv = (c..n).max_by(|&a, &b| aug[(a, c)].abs().total_cmp(&aug[(b, c)].abs())).unwrap();
            for j in 0..2 * n {
                let tmp = aug[(c, j)];
                aug[(c, j)] = aug[(piv, j)];
                aug[(piv, j)] = tmp;
            }
            let p = aug[(c, c)];
            for j in 0..2 * n {
                aug[(c, j)] /= p;
            }
            for r in 0..n {
                if r != c {
                    let f = aug[(r, c)];
                    for j in 0..2 * n {
                        aug[(r, j)] -= f * aug[(c, j)];
                    }
                }
            }
        }
        let inv = aug.slice_cols(n, 2 * n);
        // inv is SPD, so its largest singular value is its largest eigenvalue
        1.0 / power_iteration_sigma_max(&inv)
    }

    #[test]
    fn softmax_zero_row_is_uniform() {
        let s = row_softmax(&Mat::zeros(1, 3));
        for v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ln2_row() {
        let s = row_softmax(&Mat::from_rows(&[vec![2f64.ln(), 0.0]]));
        assert!((s[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[(0, 1)] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant_and_extreme_rows() {
        let m = Mat::from_rows(&[vec![0.3, -1.2, 4.0], vec![700.0, -700.0, 699.0]]);
        let shifted = Mat::from_fn(2, 3, |i, j| m[(i, j)] + 123.25);
        let a = row_softmax(&m);
        let b = row_softmax(&shifted);
        assert!(a.max_abs_diff(&b) < 1e-15);
        for r in 0..2 {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(a.row(r).iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn singular_values_of_simple_matrices() {
        assert!((min_singular_value(&Mat::identity(3)).unwrap() - 1.0).abs() < 1e-14);
        let d = Mat::diag(&[3.0, 2.0]);
        assert!((min_singular_value(&d).unwrap() - 2.0).abs() < 1e-14);
        assert!((spectral_norm(&d) - 3.0).abs() < 1e-14);
        assert!(min_singular_value(&Mat::zeros(2, 3)).is_err());
    }

    #[test]
    fn rank_one_spectral_norm() {
        let u = [1.0, -2.0, 0.5];
        let v = [3.0, 1.0];
        let m = outer(&u, &v);
        assert!((spectral_norm(&m) - norm2(&u) * norm2(&v)).abs() < 1e-12);
    }

    #[test]
    fn min_singular_value_matches_inverse_iteration() {
        for seed in 0..5 {
            let m = lcg_mat(8, 3, seed);
            let g = m.t_matmul(&m);
            let lam = inverse_iteration_lambda_min(&g);
            let want = lam.sqrt();
            let got = min_singular_value(&m).unwrap();
            assert!(((got - want) / want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn spectral_norm_matches_power_iteration() {
        for seed in 10..15 {
            let m = lcg_mat(5, 5, seed);
            let want = power_iteration_sigma_max(&m);
            let got = spectral_norm(&m);
            assert!(((got - want) / want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn least_squares_identity_and_exact() {
        let y = vec![1.5, -2.0, 0.25];
        let w = least_squares(&Mat::identity(3), &y).unwrap();
        for (a, b) in w.iter().zip(&y) {
            assert!((a - b).abs() < 1e-14);
        }
        let x = lcg_mat(12, 4, 7);
        let w_star = vec![0.5, -1.0, 2.0, 0.125];
        let y = x.mul_vec(&w_star);
        let w = least_squares(&x, &y).unwrap();
        for (a, b) in w.iter().zip(&w_star) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn least_squares_matches_normal_equations() {
        let x = lcg_mat(20, 3, 99);
        let y: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let w = least_squares(&x, &y).unwrap();
        // Cramer's rule on the 3x3 normal equations
        let g = x.t_matmul(&x);
        let b = x.transpose().mul_vec(&y);
        let det3 = |m: &Mat| {
            m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
                - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
                + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
        };
        let det = det3(&g);
        for k in 0..3 {
            let mut gk = g.clone();
            for r in 0..3 {
                gk[(r, k)] = b[r];
            }
            let want = det3(&gk) / det;
            assert!((w[k] - want).abs() < 1e-8);
        }
        let resid: Vec<f64> = x.mul_vec(&w).iter().zip(&y).map(|(a, b)| a - b).collect();
        let xtr = x.transpose().mul_vec(&resid);
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(xtr.iter().all(|v| v.abs() < 1e-8 * scale));
    }

    #[test]
    fn least_squares_rejects_degenerate_design() {
        let x = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]);
        assert!(matches!(least_squares(&x, &[1.0, 2.0, 3.0]), Err(Error::Degenerate(_))));
    }
}
