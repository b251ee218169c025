//! Scalar abstraction for the numeric core.
//!
//! All dense kernels are generic over [`Scalar`]. The trait carries optional
//! fast-path hooks (matrix multiply, SPD inverse, symmetric eigendecomposition)
//! that `f32`/`f64` route to `faer`; other float types fall back to the naive
//! reference loops in [`crate::matrix`] and [`crate::linalg`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign, NumCast};

pub trait Scalar:
    Float + NumAssign + Sum + NumCast + Send + Sync + Debug + Display + 'static
{
    fn from_f64(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 conversion")
    }

    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("f64 conversion")
    }

    /// `out = a (m×k) · b (k×n)`, row-major. Returns false when no fast
    /// kernel exists for this scalar type.
    fn fast_gemm(_m: usize, _k: usize, _n: usize, _a: &[Self], _b: &[Self], _out: &mut [Self]) -> bool {
        false
    }

    /// Inverse of a symmetric positive definite matrix via Cholesky.
    /// `None` when no fast kernel exists or the factorization fails
    /// (the caller falls back to the reference path, which reports errors).
    fn fast_spd_inverse(_n: usize, _a: &[Self]) -> Option<Vec<Self>> {
        None
    }

    /// Full symmetric eigendecomposition. Returns eigenvalues in descending
    /// order and eigenvectors as a row-major n×n matrix (column i ↔ value i).
    fn fast_sym_eigen(_n: usize, _a: &[Self]) -> Option<(Vec<Self>, Vec<Self>)> {
        None
    }
}

macro_rules! impl_scalar_faer {
    ($t:ty) => {
        impl Scalar for $t {
            fn fast_gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], out: &mut [Self]) -> bool {
                use faer::linalg::matmul::matmul;
                use faer::mat::{from_row_major_slice, from_row_major_slice_mut};
                let a = from_row_major_slice::<$t>(a, m, k);
                let b = from_row_major_slice::<$t>(b, k, n);
                let dst = from_row_major_slice_mut::<$t>(out, m, n);
                matmul(dst, a, b, None, 1.0, faer::Parallelism::None);
                true
            }

            fn fast_spd_inverse(n: usize, a: &[Self]) -> Option<Vec<Self>> {
                use faer::mat::from_row_major_slice;
                use faer::prelude::SolverCore;
                let a = from_row_major_slice::<$t>(a, n, n);
                let llt = a.cholesky(faer::Side::Lower).ok()?;
                let inv = llt.inverse();
                let mut out = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        out[i * n + j] = inv.read(i, j);
                    }
                }
                Some(out)
            }

            fn fast_sym_eigen(n: usize, a: &[Self]) -> Option<(Vec<Self>, Vec<Self>)> {
                use faer::mat::from_row_major_slice;
                let a = from_row_major_slice::<$t>(a, n, n);
                let evd = a.selfadjoint_eigendecomposition(faer::Side::Lower);
                let s = evd.s();
                let u = evd.u();
                // faer returns ascending eigenvalues; flip to descending.
                let mut values = vec![0.0; n];
                let mut vectors = vec![0.0; n * n];
                for i in 0..n {
                    values[i] = s.column_vector().read(n - 1 - i);
                    for r in 0..n {
                        vectors[r * n + i] = u.read(r, n - 1 - i);
                    }
                }
                Some((values, vectors))
            }
        }
    };
}

impl_scalar_faer!(f32);
impl_scalar_faer!(f64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut out = [0.0f64; 4];
        assert!(f64::fast_gemm(2, 3, 2, &a, &b, &mut out));
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn eigen_descending() {
        // diag(1, 5, 3)
        let a = [1.0f64, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 3.0];
        let (vals, _) = f64::fast_sym_eigen(3, &a).unwrap();
        assert!((vals[0] - 5.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
        assert!((vals[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spd_inverse_diag() {
        let a = [4.0f64, 0.0, 0.0, 9.0];
        let inv = f64::fast_spd_inverse(2, &a).unwrap();
        assert!((inv[0] - 0.25).abs() < 1e-14);
        assert!((inv[3] - 1.0 / 9.0).abs() < 1e-14);
    }
}
