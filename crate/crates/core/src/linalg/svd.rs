//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! For an `m × n` input with `m ≥ n` the columns are orthogonalised in place
//! and the accumulated rotations form `V`. Wide inputs are handled through the
//! transpose. Columns whose singular value underflows are replaced by an
//! orthonormal completion so `U` always has orthonormal columns.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 80;

/// `M = U · diag(σ) · Vᵀ` with `σ` descending and `r = min(m, n)` columns in `U`, `V`.
#[derive(Clone)]
pub struct Svd<T> {
    pub u: Matrix<T>,
    pub singular_values: Vec<T>,
    pub v: Matrix<T>,
}

impl<T: Scalar> std::fmt::Debug for Svd<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Svd")
            .field("u", &self.u)
            .field("singular_values", &self.singular_values)
            .field("v", &self.v)
            .finish()
    }
}

impl<T: Scalar> Svd<T> {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `U · diag(σ) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (x, &s) in us.row_mut(i).iter_mut().zip(&self.singular_values) {
                *x *= s;
            }
        }
        us.matmul_nt(&self.v).expect("svd factor shapes agree")
    }

    /// `σ_k · u_k v_kᵀ` for the zero-based index `k`; zero when `k ≥ r`.
    pub fn rank_one_component(&self, k: usize) -> Matrix<T> {
        let (m, n) = (self.u.rows(), self.v.rows());
        if k >= self.rank() {
            return Matrix::zeros(m, n);
        }
        let s = self.singular_values[k];
        Matrix::from_fn(m, n, |i, j| s * self.u.get(i, k) * self.v.get(j, k))
    }
}

/// Computes the thin SVD of `m`.
pub fn svd<T: Scalar>(m: &Matrix<T>) -> Result<Svd<T>> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidInput("svd of an empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::InvalidInput("svd input contains non-finite entries".into()));
    }
    if m.rows() >= m.cols() {
        Ok(jacobi_tall(m))
    } else {
        let t = jacobi_tall(&m.transpose());
        Ok(Svd { u: t.v, singular_values: t.singular_values, v: t.u })
    }
}

/// Singular values only.
pub fn singular_values<T: Scalar>(m: &Matrix<T>) -> Result<Vec<T>> {
    svd(m).map(|s| s.singular_values)
}

fn jacobi_tall<T: Scalar>(a: &Matrix<T>) -> Svd<T> {
    let (m, n) = a.shape();
    // Row j of `cols` is column j of the working matrix.
    let mut cols = a.transpose();
    let mut vt = Matrix::<T>::identity(n);
    let tol = T::epsilon() * T::from_count(m).sqrt();

    let mut norms: Vec<T> = (0..n).map(|j| dot(cols.row(j), cols.row(j))).collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha == T::zero() || beta == T::zero() {
                    continue;
                }
                let gamma = dot(cols.row(p), cols.row(q));
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut cols, p, q, c, s);
                rotate_rows(&mut vt, p, q, c, s);
                norms[p] = alpha - t * gamma;
                norms[q] = beta + t * gamma;
            }
        }
        for (j, nrm) in norms.iter_mut().enumerate() {
            *nrm = dot(cols.row(j), cols.row(j));
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<T> = norms.iter().map(|x| x.sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties in column order, which keeps the output deterministic.
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).expect("finite singular values"));

    let sigma_max = sigma[order[0]];
    let cutoff = sigma_max * T::epsilon() * T::from_count(m.max(n));
    let mut u = Matrix::<T>::zeros(m, n);
    let mut v = Matrix::<T>::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = sigma[j];
        values.push(s);
        for i in 0..n {
            v.set(i, k, vt.get(j, i));
        }
        if s > cutoff && s > T::zero() {
            for i in 0..m {
                u.set(i, k, cols.get(j, i) / s);
            }
        } else {
            missing.push(k);
        }
    }
    complete_orthonormal(&mut u, &missing);
    Svd { u, singular_values: values, v }
}

fn rotate_rows<T: Scalar>(mat: &mut Matrix<T>, p: usize, q: usize, c: T, s: T) {
    let n = mat.cols();
    let data = mat.as_mut_slice();
    let (head, tail) = data.split_at_mut(q * n);
    let rp = &mut head[p * n..(p + 1) * n];
    let rq = &mut tail[..n];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every other column.
fn complete_orthonormal<T: Scalar>(u: &mut Matrix<T>, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let (m, n) = u.shape();
    let mut filled: Vec<bool> = (0..n).map(|k| !missing.contains(&k)).collect();
    let mut candidate = 0;
    for &k in missing {
        while candidate < m {
            let mut w = vec![T::zero(); m];
            w[candidate] = T::one();
            candidate += 1;
            // Two Gram-Schmidt passes against the filled columns.
            for _ in 0..2 {
                for j in (0..n).filter(|&j| filled[j]) {
                    let proj = (0..m).fold(T::zero(), |acc, i| acc + u.get(i, j) * w[i]);
                    for (i, wi) in w.iter_mut().enumerate() {
                        *wi -= proj * u.get(i, j);
                    }
                }
            }
            let norm = w.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt();
            if norm > T::lit(1e-3) {
                for (i, wi) in w.iter().enumerate() {
                    u.set(i, k, *wi / norm);
                }
                filled[k] = true;
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_direction, SeededRng};

    fn orthonormality_error(q: &Matrix<f64>) -> f64 {
        let gram = q.matmul_tn(q).unwrap();
        gram.sub(&Matrix::identity(q.cols())).unwrap().max_abs()
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let s = svd(&Matrix::<f64>::identity(3)).unwrap();
        assert_eq!(s.singular_values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_spectrum_and_vectors() {
        let s = svd(&Matrix::diag(&[3.0_f64, 2.0, 1.0])).unwrap();
        assert_eq!(s.singular_values, vec![3.0, 2.0, 1.0]);
        for k in 0..3 {
            assert_eq!(s.u.get(k, k).abs(), 1.0);
            assert_eq!(s.v.get(k, k).abs(), 1.0);
        }
    }

    #[test]
    fn wide_and_tall_reconstruct() {
        let mut rng = SeededRng::new(1);
        for &(r, c) in &[(8, 5), (5, 8), (1, 7), (7, 1), (16, 16)] {
            let m: Matrix<f64> = gaussian_direction(r, c, &mut rng);
            let s = svd(&m).unwrap();
            assert_eq!(s.rank(), r.min(c));
            let err = s.reconstruct().sub(&m).unwrap().frobenius_norm() / m.frobenius_norm();
            assert!(err < 1e-12, "{r}x{c}: {err}");
            assert!(orthonormality_error(&s.u) < 1e-10);
            assert!(orthonormality_error(&s.v) < 1e-10);
            assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_deficient_input_gets_orthonormal_completion() {
        let mut rng = SeededRng::new(9);
        let a: Matrix<f64> = gaussian_direction(6, 1, &mut rng);
        let b: Matrix<f64> = gaussian_direction(1, 4, &mut rng);
        let m = a.matmul(&b).unwrap();
        let s = svd(&m).unwrap();
        assert!(s.singular_values[1] < 1e-12);
        assert!(orthonormality_error(&s.u) < 1e-10);
        let zero = svd(&Matrix::<f64>::zeros(3, 2)).unwrap();
        assert_eq!(zero.singular_values, vec![0.0, 0.0]);
        assert!(orthonormality_error(&zero.u) < 1e-12);
    }

    #[test]
    fn works_in_single_precision() {
        let mut rng = SeededRng::new(4);
        let m: Matrix<f32> = gaussian_direction(10, 6, &mut rng);
        let s = svd(&m).unwrap();
        let err = s.reconstruct().sub(&m).unwrap().frobenius_norm() / m.frobenius_norm();
        assert!(err < 1e-5);
    }

    #[test]
    fn rejects_non_finite() {
        let mut m = Matrix::<f64>::zeros(2, 2);
        m.as_mut_slice()[0] = f64::INFINITY;
        assert!(matches!(svd(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn is_deterministic() {
        let m: Matrix<f64> = gaussian_direction(12, 9, &mut SeededRng::new(77));
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.v, b.v);
        assert_eq!(a.singular_values, b.singular_values);
    }
}
