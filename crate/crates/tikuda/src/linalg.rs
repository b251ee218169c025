//! Dense linear-algebra kernels: Cholesky, SPD inverse, power iteration,
//! Jacobi eigendecomposition, and the thresholded Gram pseudo-inverse.
//!
//! Everything here is a pure function of its inputs. The Jacobi solver is the
//! reference oracle; the Cholesky/inverse/eigen routines dispatch to the fast
//! scalar hooks above a size cutoff and to the reference loops below it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Below this dimension the reference (pure) kernels run; at or above it the
/// scalar fast path is tried first.
const FAST_DISPATCH_MIN: usize = 128;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("eigensolver did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {diff}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

/// Symmetric positive definite matrix. Symmetry and finiteness are checked at
/// construction; positive definiteness surfaces through `cholesky_factor`.
#[derive(Debug, Clone)]
pub struct SpdMatrix<T>(Matrix<T>);

impl<T: Scalar> SpdMatrix<T> {
    pub fn new(m: Matrix<T>) -> Result<Self, LinalgError> {
        if m.rows() != m.cols() {
            return Err(LinalgError::NotSquare { rows: m.rows(), cols: m.cols() });
        }
        if !m.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        let tol = T::from_f64(1e-10);
        let scale = m.frobenius_norm().max(T::one());
        for i in 0..m.rows() {
            for j in (i + 1)..m.cols() {
                let diff = (m.get(i, j) - m.get(j, i)).abs();
                if diff > tol * scale {
                    return Err(LinalgError::NotSymmetric { i, j, diff: diff.to_f64() });
                }
            }
        }
        Ok(SpdMatrix(m))
    }

    /// `ZᵀZ + αI`, the ridge-regularized Gram matrix; SPD for any Z and α > 0.
    pub fn tikhonov_gram(z: &Matrix<T>, alpha: T) -> Self {
        let p = z.cols();
        let mut g = z.transpose().matmul(z);
        for i in 0..p {
            let v = g.get(i, i) + alpha;
            g.set(i, i, v);
        }
        // Symmetric by construction up to round-off; symmetrize exactly.
        let half = T::from_f64(0.5);
        let gt = g.transpose();
        SpdMatrix(g.zip_with(&gt, |a, b| (a + b) * half))
    }

    pub fn as_matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }
}

/// Eigenvalues sorted descending, eigenvector column i paired with value i.
#[derive(Debug, Clone)]
pub struct EigenResult<T> {
    pub values: Vec<T>,
    pub vectors: Matrix<T>,
}

fn cholesky_unchecked<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= T::zero() {
                    return Err(LinalgError::NotPositiveDefinite { index: i, pivot: sum.to_f64() });
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Lower-triangular L with L·Lᵀ = a. On a failed pivot, retries once with a
/// jitter of `1e-8·trace/n` on the diagonal before reporting the failure.
pub fn cholesky_factor<T: Scalar>(a: &SpdMatrix<T>) -> Result<Matrix<T>, LinalgError> {
    match cholesky_unchecked(a.as_matrix()) {
        Ok(l) => Ok(l),
        Err(first) => {
            let n = a.dim();
            let jitter = T::from_f64(1e-8) * a.as_matrix().trace() / T::from_f64(n as f64);
            if jitter <= T::zero() {
                return Err(first);
            }
            let mut j = a.as_matrix().clone();
            for i in 0..n {
                let v = j.get(i, i) + jitter;
                j.set(i, i, v);
            }
            cholesky_unchecked(&j).map_err(|_| first)
        }
    }
}

/// Inverse of a lower-triangular matrix by forward substitution.
fn invert_lower<T: Scalar>(l: &Matrix<T>) -> Matrix<T> {
    let n = l.rows();
    let mut inv = Matrix::zeros(n, n);
    for j in 0..n {
        inv.set(j, j, T::one() / l.get(j, j));
        for i in (j + 1)..n {
            let mut sum = T::zero();
            for k in j..i {
                sum += l.get(i, k) * inv.get(k, j);
            }
            inv.set(i, j, -sum / l.get(i, i));
        }
    }
    inv
}

/// SPD inverse via Cholesky: a⁻¹ = L⁻ᵀ·L⁻¹. Output is explicitly symmetrized.
pub fn spd_inverse<T: Scalar>(a: &SpdMatrix<T>) -> Result<Matrix<T>, LinalgError> {
    let n = a.dim();
    if n >= FAST_DISPATCH_MIN {
        if let Some(data) = T::fast_spd_inverse(n, a.as_matrix().data()) {
            let inv = Matrix::from_vec(n, n, data);
            return Ok(symmetrize(&inv));
        }
    }
    let l = cholesky_factor(a)?;
    let linv = invert_lower(&l);
    let inv = linv.transpose().matmul(&linv);
    Ok(symmetrize(&inv))
}

fn symmetrize<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let half = T::from_f64(0.5);
    m.zip_with(&m.transpose(), |a, b| (a + b) * half)
}

/// Dominant eigenvalue by power iteration with a seeded start vector.
/// Returns the Rayleigh quotient after the relative change of the estimate
/// drops below `tol` or `max_iters` is reached.
pub fn power_iteration<T: Scalar>(a: &SpdMatrix<T>, max_iters: usize, tol: T, seed: u64) -> T {
    let (lambda, _) = power_iteration_with_vector(a, max_iters, tol, seed);
    lambda
}

/// Power iteration that also returns the converged unit eigenvector.
pub fn power_iteration_with_vector<T: Scalar>(
    a: &SpdMatrix<T>,
    max_iters: usize,
    tol: T,
    seed: u64,
) -> (T, Vec<T>) {
    assert!(max_iters >= 1, "power iteration needs max_iters >= 1");
    let n = a.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<T> = (0..n).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect();
    normalize(&mut v);
    let m = a.as_matrix();
    let mut lambda = T::zero();
    for _ in 0..max_iters {
        let av = m.matvec(&v);
        let num: T = v.iter().zip(&av).map(|(&x, &y)| x * y).sum();
        let new_lambda = num; // v is unit norm, so vᵀAv / vᵀv = vᵀAv
        let rel = (new_lambda - lambda).abs() / new_lambda.abs().max(T::from_f64(1e-300));
        lambda = new_lambda;
        v = av;
        normalize(&mut v);
        if rel < tol {
            break;
        }
    }
    (lambda, v)
}

fn normalize<T: Scalar>(v: &mut [T]) {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm > T::zero() {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Cyclic Jacobi eigendecomposition for symmetric matrices. Simple and
/// provably convergent; the oracle for every other eigen-adjacent kernel.
pub fn jacobi_eigen<T: Scalar>(a: &Matrix<T>) -> Result<EigenResult<T>, LinalgError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::NotSquare { rows: a.rows(), cols: a.cols() });
    }
    let n = a.rows();
    let max_sweeps = 100;
    let mut m = a.clone();
    let mut v = Matrix::<T>::identity(n);
    let eps = T::from_f64(1e-14);
    let scale = a.frobenius_norm().max(T::from_f64(1e-300));
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut off = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        if off.sqrt() <= eps * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= eps * scale * T::from_f64(1e-3) {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (T::from_f64(2.0) * apq);
                let t = {
                    let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                    sign / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged {
        // One more check after the final sweep.
        let mut off = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.get(i, j) * m.get(i, j);
            }
        }
        if off.sqrt() > eps * scale {
            return Err(LinalgError::NoConvergence { sweeps: max_sweeps });
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).partial_cmp(&m.get(i, i)).unwrap());
    let values: Vec<T> = order.iter().map(|&i| m.get(i, i)).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    Ok(EigenResult { values, vectors })
}

/// Full symmetric eigendecomposition with size-based dispatch: reference
/// Jacobi below the cutoff, the scalar fast path above it.
pub fn sym_eigen<T: Scalar>(a: &Matrix<T>) -> Result<EigenResult<T>, LinalgError> {
    let n = a.rows();
    if n >= FAST_DISPATCH_MIN {
        if let Some((values, vectors)) = T::fast_sym_eigen(n, a.data()) {
            return Ok(EigenResult { values, vectors: Matrix::from_vec(n, n, vectors) });
        }
    }
    jacobi_eigen(a)
}

/// Number of leading (largest-first) eigenvalues whose sum first reaches
/// `threshold · Σλ`. Non-positive eigenvalues are never kept.
pub fn kept_eigen_count<T: Scalar>(values: &[T], energy_threshold: T) -> usize {
    let total: T = values.iter().fold(T::zero(), |acc, &x| acc + x.max(T::zero()));
    if total <= T::zero() {
        return 0;
    }
    let floor = T::from_f64(1e-12) * values.first().copied().unwrap_or(T::zero()).max(T::zero());
    let mut acc = T::zero();
    let mut k = 0;
    for &lam in values {
        if lam <= floor || lam <= T::zero() {
            break;
        }
        acc += lam;
        k += 1;
        if acc >= energy_threshold * total {
            break;
        }
    }
    k
}

/// Thresholded Moore-Penrose pseudo-inverse of a symmetric PSD matrix:
/// keeps the largest eigenvalues until their sum reaches
/// `energy_threshold · trace`, inverts those, zeroes the rest.
pub fn pseudo_inverse_gram<T: Scalar>(g: &Matrix<T>, energy_threshold: T) -> Result<Matrix<T>, LinalgError> {
    let eig = sym_eigen(g)?;
    let n = g.rows();
    let k = kept_eigen_count(&eig.values, energy_threshold);
    let mut out = Matrix::zeros(n, n);
    for idx in 0..k {
        let inv_lam = T::one() / eig.values[idx];
        let col = eig.vectors.col(idx);
        for i in 0..n {
            let ci = col[i] * inv_lam;
            for j in 0..n {
                let v = out.get(i, j) + ci * col[j];
                out.set(i, j, v);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(n: usize, seed: u64) -> SpdMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Matrix::from_fn(n + 2, n, |_, _| rng.gen_range(-1.0..1.0));
        SpdMatrix::tikhonov_gram(&z, 0.5)
    }

    #[test]
    fn cholesky_diagonal() {
        let a = SpdMatrix::new(Matrix::diag(&[4.0f64, 9.0])).unwrap();
        let l = cholesky_factor(&a).unwrap();
        assert_eq!(l, Matrix::diag(&[2.0, 3.0]));
    }

    #[test]
    fn cholesky_identity() {
        let a = SpdMatrix::new(Matrix::<f64>::identity(3)).unwrap();
        assert_eq!(cholesky_factor(&a).unwrap(), Matrix::identity(3));
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let a = random_spd(16, 7);
        let l = cholesky_factor(&a).unwrap();
        let rec = l.matmul(&l.transpose());
        let rel = rec.sub(a.as_matrix()).frobenius_norm() / a.as_matrix().frobenius_norm();
        assert!(rel < 1e-10, "relative reconstruction error {rel}");
        for i in 0..16 {
            assert!(l.get(i, i) > 0.0);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = SpdMatrix::new(Matrix::diag(&[1.0f64, -2.0])).unwrap();
        match cholesky_factor(&a) {
            Err(LinalgError::NotPositiveDefinite { .. }) => {}
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn spd_inverse_diagonal() {
        let a = SpdMatrix::new(Matrix::diag(&[4.0f64, 9.0])).unwrap();
        let inv = spd_inverse(&a).unwrap();
        assert!((inv.get(0, 0) - 0.25).abs() < 1e-14);
        assert!((inv.get(1, 1) - 1.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn spd_inverse_2x2_closed_form() {
        let a = SpdMatrix::new(Matrix::from_rows(&[vec![4.0f64, 2.0], vec![2.0, 3.0]])).unwrap();
        let inv = spd_inverse(&a).unwrap();
        let expect = Matrix::from_rows(&[vec![0.375, -0.25], vec![-0.25, 0.5]]);
        assert!(inv.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn spd_inverse_matches_eigen_oracle() {
        let a = random_spd(32, 11);
        let inv = spd_inverse(&a).unwrap();
        let eig = jacobi_eigen(a.as_matrix()).unwrap();
        // Oracle inverse: V diag(1/λ) Vᵀ
        let n = 32;
        let mut oracle = Matrix::zeros(n, n);
        for idx in 0..n {
            let col = eig.vectors.col(idx);
            let inv_lam = 1.0 / eig.values[idx];
            for i in 0..n {
                for j in 0..n {
                    let v = oracle.get(i, j) + col[i] * col[j] * inv_lam;
                    oracle.set(i, j, v);
                }
            }
        }
        assert!(inv.max_abs_diff(&oracle) < 1e-8);
    }

    #[test]
    fn spd_inverse_fast_path_agrees_with_reference() {
        // Same matrix through both routes, above and below the dispatch cutoff.
        let a = random_spd(160, 3);
        let fast = spd_inverse(&a).unwrap();
        let l = cholesky_factor(&a).unwrap();
        let linv = invert_lower(&l);
        let slow = symmetrize(&linv.transpose().matmul(&linv));
        assert!(fast.max_abs_diff(&slow) < 1e-9);
    }

    #[test]
    fn power_iteration_diagonal() {
        let a = SpdMatrix::new(Matrix::diag(&[3.0f64, 1.0])).unwrap();
        let lam = power_iteration(&a, 50, 1e-7, 1);
        assert!((lam - 3.0).abs() < 1e-6);
    }

    #[test]
    fn power_iteration_2x2() {
        let a = SpdMatrix::new(Matrix::from_rows(&[vec![2.0f64, 1.0], vec![1.0, 2.0]])).unwrap();
        let lam = power_iteration(&a, 100, 1e-10, 1);
        assert!((lam - 3.0).abs() < 1e-6);
    }

    #[test]
    fn power_iteration_matches_jacobi() {
        let a = random_spd(64, 5);
        let lam = power_iteration(&a, 200, 1e-10, 9);
        let eig = jacobi_eigen(a.as_matrix()).unwrap();
        let rel = (lam - eig.values[0]).abs() / eig.values[0];
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn power_iteration_deterministic() {
        let a = random_spd(16, 2);
        let l1 = power_iteration(&a, 50, 1e-7, 42);
        let l2 = power_iteration(&a, 50, 1e-7, 42);
        assert_eq!(l1, l2);
    }

    #[test]
    fn jacobi_diagonal() {
        let eig = jacobi_eigen(&Matrix::diag(&[5.0f64, 2.0, 1.0])).unwrap();
        assert_eq!(eig.values, vec![5.0, 2.0, 1.0]);
        for c in 0..3 {
            let col = eig.vectors.col(c);
            let nonzero: Vec<f64> = col.iter().filter(|x| x.abs() > 0.5).cloned().collect();
            assert_eq!(nonzero.len(), 1);
        }
    }

    #[test]
    fn jacobi_2x2() {
        let eig = jacobi_eigen(&Matrix::from_rows(&[vec![2.0f64, 1.0], vec![1.0, 2.0]])).unwrap();
        assert!((eig.values[0] - 3.0).abs() < 1e-12);
        assert!((eig.values[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobi_residuals_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let raw = Matrix::from_fn(16, 16, |_, _| rng.gen_range(-1.0f64..1.0));
        let sym = raw.add(&raw.transpose()).scale(0.5);
        let eig = jacobi_eigen(&sym).unwrap();
        for idx in 0..16 {
            let v = eig.vectors.col(idx);
            let av = sym.matvec(&v);
            let max_res = av
                .iter()
                .zip(&v)
                .map(|(&a, &b)| (a - eig.values[idx] * b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_res < 1e-8, "residual {max_res} for eigenpair {idx}");
        }
        // Eigenvalue sum equals trace.
        let sum: f64 = eig.values.iter().sum();
        assert!((sum - sym.trace()).abs() <= 1e-8 * sym.trace().abs().max(1.0));
    }

    #[test]
    fn pseudo_inverse_rank_deficient_diag() {
        let p = pseudo_inverse_gram(&Matrix::diag(&[4.0f64, 0.0]), 1.0).unwrap();
        assert!(p.max_abs_diff(&Matrix::diag(&[0.25, 0.0])) < 1e-12);
    }

    #[test]
    fn pseudo_inverse_identity() {
        let p = pseudo_inverse_gram(&Matrix::<f64>::identity(3), 1.0).unwrap();
        assert!(p.max_abs_diff(&Matrix::identity(3)) < 1e-12);
    }

    #[test]
    fn pseudo_inverse_rank2_matches_oracle() {
        // Rank-2 PSD 4x4 from a 2x4 factor.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z = Matrix::from_fn(2, 4, |_, _| rng.gen_range(-1.0f64..1.0));
        let g = z.transpose().matmul(&z);
        let p = pseudo_inverse_gram(&g, 1.0).unwrap();
        // Oracle: eigendecomposition reconstruction over positive eigenvalues.
        let eig = jacobi_eigen(&g).unwrap();
        let mut oracle = Matrix::zeros(4, 4);
        for idx in 0..4 {
            if eig.values[idx] > 1e-10 {
                let col = eig.vectors.col(idx);
                let inv_lam = 1.0 / eig.values[idx];
                for i in 0..4 {
                    for j in 0..4 {
                        let v = oracle.get(i, j) + col[i] * col[j] * inv_lam;
                        oracle.set(i, j, v);
                    }
                }
            }
        }
        assert!(p.max_abs_diff(&oracle) < 1e-8);
        // Moore-Penrose identity g·p·g = g on the full-threshold pinv.
        let gpg = g.matmul(&p).matmul(&g);
        assert!(gpg.max_abs_diff(&g) < 1e-8);
    }

    #[test]
    fn tikhonov_gram_always_spd() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = 2 + (seed as usize % 4);
            let z = Matrix::from_fn(b, 6, |_, _| rng.gen_range(-3.0f64..3.0));
            let spd = SpdMatrix::tikhonov_gram(&z, 0.1);
            assert!(cholesky_factor(&spd).is_ok());
        }
    }

    #[test]
    fn spd_double_inverse_is_identity_map() {
        let a = random_spd(12, 31);
        let inv = spd_inverse(&a).unwrap();
        let back = spd_inverse(&SpdMatrix::new(inv).unwrap()).unwrap();
        let rel = back.sub(a.as_matrix()).frobenius_norm() / a.as_matrix().frobenius_norm();
        assert!(rel < 1e-6);
    }
}
