//! Small dense linear-algebra kernels on row-major slices.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `out[m x n] += a[m x k] * b[k x n]`.
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    T::gemm(m, k, n, a, (k, 1), b, (n, 1), out);
}

/// `out[k x n] += a[m x k]^T * b[m x n]`.
pub fn gemm_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    T::gemm(k, m, n, a, (1, k), b, (n, 1), out);
}

/// `out[m x k] += a[m x n] * b[k x n]^T`.
pub fn gemm_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    T::gemm(m, n, k, a, (n, 1), b, (1, n), out);
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `y = A x` for square `A` (n x n).
#[inline]
pub fn matvec<T: Scalar>(a: &[T], x: &[T], y: &mut [T]) {
    let n = x.len();
    for (i, yi) in y.iter_mut().enumerate() {
        let row = &a[i * n..(i + 1) * n];
        let mut acc = T::zero();
        for (&r, &xv) in row.iter().zip(x) {
            acc += r * xv;
        }
        *yi = acc;
    }
}

/// Zeroes entries below `MIN_POSITIVE / EPSILON` (about 1e-31 in f32), so
/// products with coefficients above epsilon stay normal. Decaying recurrences
/// otherwise drift into subnormals, which are ~100x slower on x86.
#[inline]
pub fn flush_subnormals<T: Scalar>(v: &mut [T]) {
    let tiny = T::min_positive_value() / T::epsilon();
    for x in v {
        if x.abs() < tiny {
            *x = T::zero();
        }
    }
}

/// `y = A^T x` for square `A` (n x n).
#[inline]
pub fn matvec_t<T: Scalar>(a: &[T], x: &[T], y: &mut [T]) {
    let n = x.len();
    y.iter_mut().for_each(|v| *v = T::zero());
    for (i, &xi) in x.iter().enumerate() {
        if xi == T::zero() {
            continue;
        }
        let row = &a[i * n..(i + 1) * n];
        for (yj, &r) in y.iter_mut().zip(row) {
            *yj += r * xi;
        }
    }
}

/// Inverse of an n x n matrix by Gauss-Jordan elimination with partial pivoting.
pub fn invert<T: Scalar>(a: &[T], n: usize) -> Result<Vec<T>> {
    let mut m = a.to_vec();
    let mut inv = vec![T::zero(); n * n];
    for i in 0..n {
        inv[i * n + i] = T::one();
    }
    let scale = a.iter().fold(T::zero(), |acc, x| acc.max(x.abs()));
    let tiny = T::epsilon() * scale.max(T::one()) * T::of(n as f64);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r1, &r2| {
                m[r1 * n + col]
                    .abs()
                    .partial_cmp(&m[r2 * n + col].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap();
        let p = m[pivot * n + col];
        if !(p.abs() > tiny) {
            return Err(Error::Singular("matrix inverse"));
        }
        if pivot != col {
            for j in 0..n {
                m.swap(pivot * n + j, col * n + j);
                inv.swap(pivot * n + j, col * n + j);
            }
        }
        let rp = T::one() / p;
        for j in 0..n {
            m[col * n + j] *= rp;
            inv[col * n + j] *= rp;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == T::zero() {
                continue;
            }
            for j in 0..n {
                let mv = m[col * n + j];
                let iv = inv[col * n + j];
                m[r * n + j] -= f * mv;
                inv[r * n + j] -= f * iv;
            }
        }
    }
    Ok(inv)
}

/// Largest eigenvalue modulus of a square row-major matrix, computed in f64
/// from the real Schur form.
pub fn spectral_radius<T: Scalar>(a: &[T], n: usize) -> Result<f64> {
    if a.len() != n * n || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "spectral_radius: {} entries for n = {n}",
            a.len()
        )));
    }
    let m = DMatrix::from_row_iterator(n, n, a.iter().map(|x| x.as_f64()));
    let eig = m.complex_eigenvalues();
    let r = eig.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if r.is_finite() {
        Ok(r)
    } else {
        Err(Error::NonFinite("spectral_radius".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invert_roundtrip() {
        let a = vec![4.0f64, 7.0, 2.0, 6.0];
        let inv = invert(&a, 2).unwrap();
        let mut prod = vec![0.0; 4];
        gemm_acc(&a, &inv, &mut prod, 2, 2, 2);
        for (i, v) in prod.iter().enumerate() {
            let want = if i % 3 == 0 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn invert_detects_singular() {
        assert!(invert(&[1.0, 2.0, 2.0, 4.0], 2).is_err());
        assert!(invert(&[0.0f64], 1).is_err());
    }

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let mut ab = vec![0.0; 8];
        gemm_acc(&a, &b, &mut ab, 2, 3, 4);
        let at = transpose(&a, 2, 3);
        let mut ab2 = vec![0.0; 8];
        gemm_tn_acc(&at, &b, &mut ab2, 3, 2, 4);
        assert_eq!(ab, ab2);
        let bt = transpose(&b, 3, 4);
        let mut ab3 = vec![0.0; 8];
        gemm_nt_acc(&a, &bt, &mut ab3, 2, 3, 4);
        assert_eq!(ab, ab3);
    }

    #[test]
    fn spectral_radius_of_rotation() {
        let r = spectral_radius(&[0.0, -0.5, 0.5, 0.0], 2).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
    }
}
