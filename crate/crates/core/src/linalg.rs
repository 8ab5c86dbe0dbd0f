//! Small dense linear-algebra helpers shared by the metric, steering and
//! proxy modules. Everything here assumes `d ≤ ~100`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{lit, Scalar};

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order and eigenvectors stored as matching columns.
#[derive(Debug, Clone)]
pub struct SymEigen<T: Scalar> {
    pub values: DVector<T>,
    pub vectors: DMatrix<T>,
}

impl<T: Scalar> SymEigen<T> {
    pub fn new(m: &DMatrix<T>) -> Self {
        let sym = symmetrize(m);
        let eig = SymmetricEigen::new(sym);
        let n = eig.eigenvalues.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        Self { values, vectors }
    }

    /// `Σ f(λ_i) u_i u_iᵀ`.
    pub fn map_spectrum(&self, f: impl Fn(T) -> T) -> DMatrix<T> {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let s = f(self.values[j]);
            for i in 0..n {
                scaled[(i, j)] *= s;
            }
        }
        &scaled * self.vectors.transpose()
    }

    /// `Σ f(λ_i) u_i (u_iᵀ v)` without forming the matrix.
    pub fn apply_spectral(&self, v: &DVector<T>, f: impl Fn(T) -> T) -> DVector<T> {
        let coeffs = self.vectors.transpose() * v;
        let scaled = DVector::from_iterator(
            coeffs.len(),
            coeffs.iter().zip(self.values.iter()).map(|(&c, &l)| c * f(l)),
        );
        &self.vectors * scaled
    }
}

pub fn symmetrize<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * lit::<T>(0.5)
}

/// Largest singular value.
pub fn spectral_norm<T: Scalar>(m: &DMatrix<T>) -> T {
    m.singular_values().iter().copied().fold(T::zero(), |a, b| a.max(b))
}

/// `(σ_max, σ_min)` of a square matrix.
pub fn singular_range<T: Scalar>(m: &DMatrix<T>) -> (T, T) {
    let sv = m.singular_values();
    let hi = sv.iter().copied().fold(T::zero(), |a, b| a.max(b));
    let lo = sv.iter().copied().fold(T::max_value().unwrap_or(hi), |a, b| a.min(b));
    (hi, lo)
}

/// `‖a − b‖_F / ‖b‖_F`, falling back to the absolute norm when `b = 0`.
pub fn rel_frobenius<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    let num = (a - b).norm();
    let den = b.norm();
    if den > T::zero() {
        num / den
    } else {
        num
    }
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median<T: Scalar>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) * lit::<T>(0.5)
    })
}

pub fn cosine<T: Scalar>(a: &DVector<T>, b: &DVector<T>) -> T {
    let den = a.norm() * b.norm();
    if den > T::zero() {
        a.dot(b) / den
    } else {
        T::zero()
    }
}

/// Solve `M x = b` for symmetric positive definite `M`.
pub fn spd_solve<T: Scalar>(m: &DMatrix<T>, b: &DVector<T>) -> Option<DVector<T>> {
    let chol = nalgebra::Cholesky::new(symmetrize(m))?;
    Some(chol.solve(b))
}

pub fn is_finite_vec<T: Scalar>(v: &DVector<T>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn is_finite_mat<T: Scalar>(m: &DMatrix<T>) -> bool {
    m.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_descending_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0]);
        let e = SymEigen::new(&m);
        assert!(e.values[0] >= e.values[1] && e.values[1] >= e.values[2]);
        let back = e.map_spectrum(|l| l);
        assert!(rel_frobenius(&back, &m) < 1e-12);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median::<f64>(&[]), None);
    }

    #[test]
    fn spd_solve_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(spd_solve(&m, &DVector::from_vec(vec![1.0, 0.0])).is_none());
    }
}
