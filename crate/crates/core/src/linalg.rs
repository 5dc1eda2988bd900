//! Dense row-major matrices, cosine similarity with gradients, and a
//! one-sided Jacobi SVD for the small matrices this crate handles.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Contract(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
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

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact(0) panics
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * factor).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot<T: Scalar>(u: &[T], v: &[T]) -> T {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

pub fn norm<T: Scalar>(u: &[T]) -> T {
    dot(u, u).sqrt()
}

/// `v += alpha * u`
pub fn axpy<T: Scalar>(alpha: T, u: &[T], v: &mut [T]) {
    for (y, &x) in v.iter_mut().zip(u) {
        *y += alpha * x;
    }
}

/// Cosine similarity `u.v / (|u| |v|)`.
pub fn cosine<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::Contract(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu <= T::zero() || nv <= T::zero() {
        return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
    }
    Ok(clamp_unit(dot(u, v) / (nu * nv)))
}

/// Cosine similarity together with its gradients with respect to both inputs.
#[derive(Debug, Clone)]
pub struct CosineGrad<T> {
    pub value: T,
    pub d_u: Vec<T>,
    pub d_v: Vec<T>,
}

pub fn cosine_with_grad<T: Scalar>(u: &[T], v: &[T]) -> Result<CosineGrad<T>> {
    let value = cosine(u, v)?;
    let nu = norm(u);
    let nv = norm(v);
    let inv = T::one() / (nu * nv);
    // unclamped value keeps the gradient exact near +-1
    let c = dot(u, v) * inv;
    let d_u = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| b * inv - c * a / (nu * nu))
        .collect();
    let d_v = v
        .iter()
        .zip(u)
        .map(|(&b, &a)| a * inv - c * b / (nv * nv))
        .collect();
    Ok(CosineGrad { value, d_u, d_v })
}

/// Accumulates `upstream * d cos(u, v)` into `grad_u` and `grad_v`.
pub(crate) fn accumulate_cosine_grad<T: Scalar>(
    u: &[T],
    v: &[T],
    upstream: T,
    grad_u: &mut [T],
    grad_v: &mut [T],
) {
    if upstream == T::zero() {
        return;
    }
    let nu = norm(u);
    let nv = norm(v);
    let inv = T::one() / (nu * nv);
    let c = dot(u, v) * inv;
    let su = c / (nu * nu);
    let sv = c / (nv * nv);
    for k in 0..u.len() {
        grad_u[k] += upstream * (v[k] * inv - su * u[k]);
        grad_v[k] += upstream * (u[k] * inv - sv * v[k]);
    }
}

fn clamp_unit<T: Scalar>(c: T) -> T {
    c.max(-T::one()).min(T::one())
}

/// Cosine matrix `C[i][j] = cos(a_i, b_j)`; rows must be nonzero.
pub fn cosine_matrix<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.cols() {
        return Err(Error::Contract(format!(
            "embedding widths differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let na: Vec<T> = a.iter_rows().map(norm).collect();
    let nb: Vec<T> = b.iter_rows().map(norm).collect();
    if na.iter().chain(&nb).any(|&n| n <= T::zero()) {
        return Err(Error::Degenerate("zero-norm embedding row".into()));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out[(i, j)] = clamp_unit(dot(a.row(i), b.row(j)) / (na[i] * nb[j]));
        }
    }
    Ok(out)
}

const MAX_JACOBI_SWEEPS: usize = 80;

/// Singular values of `m` in descending order (length `min(rows, cols)`).
///
/// One-sided Jacobi: columns of a working copy are rotated pairwise until
/// mutually orthogonal; the singular values are then the column norms.
pub fn singular_values<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    if m.is_empty() {
        return Vec::new();
    }
    // Orthogonalize the shorter dimension: work on columns of an m x n
    // matrix with n <= m, stored column-major.
    let (rows, cols, cols_data): (usize, usize, Vec<Vec<T>>) = if m.cols() <= m.rows() {
        (
            m.rows(),
            m.cols(),
            (0..m.cols())
                .map(|j| (0..m.rows()).map(|i| m[(i, j)]).collect())
                .collect(),
        )
    } else {
        (
            m.cols(),
            m.rows(),
            m.iter_rows().map(|r| r.to_vec()).collect(),
        )
    };
    let mut a = cols_data;
    let eps = T::epsilon();
    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let ap = a[p][i];
                    let aq = a[q][i];
                    a[p][i] = c * ap - s * aq;
                    a[q][i] = s * ap + c * aq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<T> = a.iter().map(|c| norm(c)).collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    sv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let u = [0.3f64, -1.2, 0.7];
        let v = [1.1, 0.4, -0.5];
        let g = cosine_with_grad(&u, &v).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut up = u;
            let mut um = u;
            up[k] += h;
            um[k] -= h;
            let fd = (cosine(&up, &v).unwrap() - cosine(&um, &v).unwrap()) / (2.0 * h);
            assert!((fd - g.d_u[k]).abs() < 1e-8);
            let mut vp = v;
            let mut vm = v;
            vp[k] += h;
            vm[k] -= h;
            let fd = (cosine(&u, &vp).unwrap() - cosine(&u, &vm).unwrap()) / (2.0 * h);
            assert!((fd - g.d_v[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn singular_values_of_diagonal_and_rank_one() {
        let d = Matrix::from_rows(&[[10.0f64, 0.0], [0.0, 1.0]]).unwrap();
        let sv = singular_values(&d);
        assert!((sv[0] - 10.0).abs() < 1e-12 && (sv[1] - 1.0).abs() < 1e-12);

        let outer = Matrix::from_rows(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]]).unwrap();
        let sv = singular_values(&outer);
        assert_eq!(sv.len(), 2);
        assert!((sv[0] - (14.0f64 * 5.0).sqrt()).abs() < 1e-12);
        assert!(sv[1].abs() < 1e-12);
    }

    #[test]
    fn singular_values_wide_matches_tall() {
        let m = Matrix::from_rows(&[[1.0f64, 2.0, 0.5, -1.0], [0.3, -0.2, 2.0, 1.0]]).unwrap();
        let a = singular_values(&m);
        let b = singular_values(&m.transpose());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn works_in_single_precision() {
        let c = cosine(&[1.0f32, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }
}
