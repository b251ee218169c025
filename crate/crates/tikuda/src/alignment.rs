//! Alignment losses between source and target feature batches.
//!
//! The main loss aligns the inverse Tikhonov matrices (ZᵀZ + αI)⁻¹ of the two
//! domains: an angle term compares their columns with a haversine (or cosine)
//! similarity, a scale term matches the dominant Gram eigenvalues. The
//! comparison losses — DARE-GRAM-style pseudo-inverse alignment, CORAL, and
//! MMD — live here too so every method is a differentiable function of two
//! [`FeatureBatch`]es on a shared tape.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Value};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("feature dimension mismatch: source {src:?} vs target {tgt:?}")]
    DimensionMismatch { src: (usize, usize), tgt: (usize, usize) },
    #[error("invalid feature batch: {rows}x{cols} (need at least 2 rows, 1 column, finite entries)")]
    InvalidBatch { rows: usize, cols: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<V> = std::result::Result<V, AlignmentError>;

/// Column-similarity switch for the angle term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Haversine,
    Cosine,
}

/// Power-iteration settings for the scale term.
#[derive(Debug, Clone, Copy)]
pub struct PowerConfig<T> {
    pub max_iters: usize,
    pub tol: T,
    pub seed: u64,
}

impl<T: Scalar> Default for PowerConfig<T> {
    fn default() -> Self {
        PowerConfig { max_iters: 100, tol: T::from_f64(1e-9), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AlignmentConfig<T> {
    /// Tikhonov ridge weight; keeps the Gram matrix invertible at any batch
    /// size. Robust over a wide range; 1.0 is the scale-neutral default.
    pub alpha: T,
    pub similarity: Similarity,
    pub power: PowerConfig<T>,
    /// Guard added to column-norm denominators.
    pub epsilon_norm: T,
    /// Eigenvalue energy kept by the DARE-GRAM pseudo-inverse.
    pub dare_gram_energy_threshold: T,
}

impl<T: Scalar> Default for AlignmentConfig<T> {
    fn default() -> Self {
        AlignmentConfig {
            alpha: T::one(),
            similarity: Similarity::Haversine,
            power: PowerConfig::default(),
            epsilon_norm: T::from_f64(1e-12),
            dare_gram_energy_threshold: T::from_f64(0.999),
        }
    }
}

/// A b×p feature matrix on a tape; b is the batch size, p the flattened
/// feature dimension. Source and target batches may have different b.
#[derive(Debug, Clone)]
pub struct FeatureBatch<T> {
    z: Value<T>,
}

impl<T: Scalar> FeatureBatch<T> {
    pub fn new(z: Value<T>) -> Result<Self> {
        let (rows, cols) = z.shape();
        if rows < 2 || cols < 1 || !z.data().is_finite() {
            return Err(AlignmentError::InvalidBatch { rows, cols });
        }
        Ok(FeatureBatch { z })
    }

    pub fn value(&self) -> &Value<T> {
        &self.z
    }

    pub fn batch_size(&self) -> usize {
        self.z.shape().0
    }

    pub fn feature_dim(&self) -> usize {
        self.z.shape().1
    }
}

fn check_same_dim<T: Scalar>(src: &FeatureBatch<T>, tgt: &FeatureBatch<T>) -> Result<()> {
    if src.feature_dim() != tgt.feature_dim() {
        return Err(AlignmentError::DimensionMismatch {
            src: src.value().shape(),
            tgt: tgt.value().shape(),
        });
    }
    Ok(())
}

/// (ZᵀZ + αI)⁻¹, the inverse Tikhonov matrix of a feature batch (p×p,
/// symmetric, differentiable w.r.t. Z).
pub fn tikhonov_inverse<T: Scalar>(z: &FeatureBatch<T>, alpha: T) -> Result<Value<T>> {
    Ok(z.value().tikhonov_inverse(alpha)?)
}

/// Haversine similarity HS = 1 − √((1 − cos φ)/2), elementwise on a value of
/// clamped cosines. Maps [−1, 1] onto [0, 1] with HS = 1 iff cos φ = 1, and
/// falls off with a steep (infinite at φ = 0) slope that keeps pressure on
/// small angles.
pub fn haversine_similarity<T: Scalar>(cos_phi: &Value<T>) -> Value<T> {
    let half = T::from_f64(0.5);
    cos_phi
        .scalar_mul(-T::one())
        .add_scalar(T::one())
        .scalar_mul(half)
        .sqrt()
        .scalar_mul(-T::one())
        .add_scalar(T::one())
}

/// Per-column cosine between two equal-shape matrices, as a 1×p row of values
/// clamped to [−1, 1]. Denominators are guarded from below by `epsilon_norm`.
fn column_cosines<T: Scalar>(a: &Value<T>, b: &Value<T>, epsilon_norm: T) -> Result<Value<T>> {
    let num = a.elem_mul(b)?.sum_cols();
    let den = a
        .l2_norm_cols()
        .elem_mul(&b.l2_norm_cols())?
        .clamp(epsilon_norm, T::infinity());
    Ok(num.elem_div(&den)?.clamp(-T::one(), T::one()))
}

/// Angle term: Σ_i (1 − m_i) over columns, where m_i is the chosen similarity
/// between column i of the two matrices. The similarities never exceed 1, so
/// the L1 norm of (1 − m) reduces to a plain sum.
pub fn angle_loss<T: Scalar>(
    g_s_inv: &Value<T>,
    g_t_inv: &Value<T>,
    similarity: Similarity,
    epsilon_norm: T,
) -> Result<Value<T>> {
    let cos = column_cosines(g_s_inv, g_t_inv, epsilon_norm)?;
    let m = match similarity {
        Similarity::Haversine => haversine_similarity(&cos),
        Similarity::Cosine => cos,
    };
    Ok(m.scalar_mul(-T::one()).add_scalar(T::one()).sum())
}

/// Scale term: squared difference of the dominant eigenvalues of the two
/// Tikhonov Gram matrices, λ_max obtained by power iteration.
pub fn scale_loss<T: Scalar>(
    z_src: &FeatureBatch<T>,
    z_tgt: &FeatureBatch<T>,
    alpha: T,
    power: &PowerConfig<T>,
) -> Result<Value<T>> {
    check_same_dim(z_src, z_tgt)?;
    let lam_s = z_src.value().tikhonov_lambda_max(alpha, power.max_iters, power.tol, power.seed)?;
    let lam_t = z_tgt.value().tikhonov_lambda_max(alpha, power.max_iters, power.tol, power.seed)?;
    let d = lam_s.sub(&lam_t)?;
    Ok(d.elem_mul(&d)?)
}

/// The main alignment loss: angle and scale terms over the inverse Tikhonov
/// matrices of the two batches. Returned separately so the trainer can weight
/// (or freeze) them independently.
pub fn tikuda_loss<T: Scalar>(
    z_src: &FeatureBatch<T>,
    z_tgt: &FeatureBatch<T>,
    cfg: &AlignmentConfig<T>,
) -> Result<(Value<T>, Value<T>)> {
    check_same_dim(z_src, z_tgt)?;
    let g_s_inv = tikhonov_inverse(z_src, cfg.alpha)?;
    let g_t_inv = tikhonov_inverse(z_tgt, cfg.alpha)?;
    let angle = angle_loss(&g_s_inv, &g_t_inv, cfg.similarity, cfg.epsilon_norm)?;
    let scale = scale_loss(z_src, z_tgt, cfg.alpha, &cfg.power)?;
    Ok((angle, scale))
}

/// DARE-GRAM-style comparator: cosine angle alignment on the columns of the
/// thresholded Gram pseudo-inverses, plus a scale term over the kept leading
/// eigenvalues (mean squared difference over the first min(k_s, k_t)).
pub fn dare_gram_loss<T: Scalar>(
    z_src: &FeatureBatch<T>,
    z_tgt: &FeatureBatch<T>,
    cfg: &AlignmentConfig<T>,
) -> Result<(Value<T>, Value<T>)> {
    check_same_dim(z_src, z_tgt)?;
    let threshold = cfg.dare_gram_energy_threshold;
    let (p_s, vals_s) = z_src.value().pinv_gram_with_eigvals(threshold)?;
    let (p_t, vals_t) = z_tgt.value().pinv_gram_with_eigvals(threshold)?;
    let angle = angle_loss(&p_s, &p_t, Similarity::Cosine, cfg.epsilon_norm)?;

    let k = vals_s.shape().0.min(vals_t.shape().0);
    let d = vals_s.slice_rows(0, k)?.sub(&vals_t.slice_rows(0, k)?)?;
    let scale = d.elem_mul(&d)?.mean();
    Ok((angle, scale))
}

/// Column-centered covariance C = Z_cᵀ Z_c / (b − 1).
fn covariance<T: Scalar>(z: &FeatureBatch<T>) -> Result<Value<T>> {
    let b = z.batch_size();
    let mean = z.value().sum_cols().scalar_mul(T::one() / T::from_f64(b as f64));
    let centered = z.value().add_row(&mean.scalar_mul(-T::one()))?;
    Ok(centered
        .transpose()
        .matmul(&centered)?
        .scalar_mul(T::one() / T::from_f64((b - 1) as f64)))
}

/// CORAL: squared Frobenius distance of the two covariances, scaled by 1/(4p²).
pub fn coral_loss<T: Scalar>(z_src: &FeatureBatch<T>, z_tgt: &FeatureBatch<T>) -> Result<Value<T>> {
    check_same_dim(z_src, z_tgt)?;
    let p = z_src.feature_dim();
    let d = covariance(z_src)?.sub(&covariance(z_tgt)?)?;
    let denom = T::from_f64(4.0 * (p * p) as f64);
    Ok(d.elem_mul(&d)?.sum().scalar_mul(T::one() / denom))
}

/// Kernel bandwidth selection for [`mmd_loss`].
#[derive(Debug, Clone, Copy)]
pub enum Bandwidth<T> {
    /// σ = median pairwise Euclidean distance over the joint batch
    /// (treated as a constant, not differentiated through).
    Median,
    /// σ given directly.
    Fixed(T),
}

fn median_bandwidth<T: Scalar>(z_src: &FeatureBatch<T>, z_tgt: &FeatureBatch<T>) -> T {
    let s = z_src.value().data();
    let t = z_tgt.value().data();
    let p = s.cols();
    let mut rows: Vec<&[T]> = (0..s.rows()).map(|i| s.row(i)).collect();
    let mut dists = Vec::new();
    {
        let t_rows: Vec<&[T]> = (0..t.rows()).map(|i| t.row(i)).collect();
        rows.extend(t_rows);
        for i in 0..rows.len() {
            for j in (i + 1)..rows.len() {
                let d2: T = (0..p)
                    .map(|k| {
                        let d = rows[i][k] - rows[j][k];
                        d * d
                    })
                    .sum();
                if d2 > T::zero() {
                    dists.push(d2.sqrt());
                }
            }
        }
    }
    if dists.is_empty() {
        return T::one();
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists[dists.len() / 2]
}

/// MMD with a Gaussian kernel exp(−d²/(2σ²)), biased V-statistic:
/// mean(K_ss) + mean(K_tt) − 2·mean(K_st). Zero for identical batches.
pub fn mmd_loss<T: Scalar>(
    z_src: &FeatureBatch<T>,
    z_tgt: &FeatureBatch<T>,
    bandwidth: Bandwidth<T>,
) -> Result<Value<T>> {
    check_same_dim(z_src, z_tgt)?;
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Median => median_bandwidth(z_src, z_tgt),
    };
    let gamma = -T::one() / (T::from_f64(2.0) * sigma * sigma);
    let kernel_mean = |a: &Value<T>, b: &Value<T>| -> Result<Value<T>> {
        Ok(a.pairwise_sqdist(b)?.scalar_mul(gamma).exp().mean())
    };
    let (s, t) = (z_src.value(), z_tgt.value());
    let k_ss = kernel_mean(s, s)?;
    let k_tt = kernel_mean(t, t)?;
    let k_st = kernel_mean(s, t)?;
    Ok(k_ss.add(&k_tt)?.sub(&k_st.scalar_mul(T::from_f64(2.0)))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::linalg::{self, SpdMatrix};
    use crate::matrix::Matrix;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(tape: &Tape<f64>, m: Matrix<f64>) -> FeatureBatch<f64> {
        FeatureBatch::new(tape.leaf(m)).unwrap()
    }

    fn rand_batch(tape: &Tape<f64>, seed: u64, b: usize, p: usize) -> FeatureBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        batch(tape, Matrix::from_fn(b, p, |_, _| rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn tikhonov_inverse_zero_features() {
        let tape = Tape::new();
        let z = batch(&tape, Matrix::zeros(2, 2));
        let inv = tikhonov_inverse(&z, 0.5).unwrap();
        assert!(inv.data().max_abs_diff(&Matrix::identity(2).scale(2.0)) < 1e-12);
    }

    #[test]
    fn tikhonov_inverse_identity_features() {
        let tape = Tape::new();
        let z = batch(&tape, Matrix::identity(2));
        let inv = tikhonov_inverse(&z, 1.0).unwrap();
        assert!(inv.data().max_abs_diff(&Matrix::identity(2).scale(0.5)) < 1e-12);
    }

    #[test]
    fn tikhonov_inverse_diag_features() {
        let tape = Tape::new();
        let z = batch(&tape, Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]));
        let inv = tikhonov_inverse(&z, 1.0).unwrap();
        assert!(inv.data().max_abs_diff(&Matrix::diag(&[0.2, 1.0])) < 1e-12);
    }

    #[test]
    fn haversine_endpoints() {
        let tape: Tape<f64> = Tape::new();
        let cos = tape.leaf(Matrix::from_vec(1, 3, vec![1.0, -1.0, 0.0]));
        let hs = haversine_similarity(&cos).data();
        assert!((hs.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(hs.get(0, 1).abs() < 1e-12);
        assert!((hs.get(0, 2) - (1.0 - 0.5f64.sqrt())).abs() < 1e-9);
    }

    #[test]
    fn angle_loss_identical_is_zero() {
        let tape: Tape<f64> = Tape::new();
        let g = tape.leaf(Matrix::from_rows(&[vec![0.8, 0.1], vec![0.1, 0.9]]));
        let l = angle_loss(&g, &g, Similarity::Haversine, 1e-12).unwrap();
        assert!(l.scalar().abs() < 1e-6, "got {}", l.scalar());
    }

    #[test]
    fn angle_loss_orthogonal_columns() {
        // identity vs column swap: both column cosines are 0
        let tape = Tape::new();
        let gs = tape.leaf(Matrix::identity(2));
        let gt = tape.leaf(Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        let l = angle_loss(&gs, &gt, Similarity::Haversine, 1e-12).unwrap();
        let expected = 2.0 * (1.0 - (1.0 - 0.5f64.sqrt()));
        assert!((l.scalar() - expected).abs() < 1e-9);
        assert!((l.scalar() - 1.414214).abs() < 1e-5);
    }

    /// Straight-line scalar reimplementation of the angle loss.
    fn angle_loss_oracle(gs: &Matrix<f64>, gt: &Matrix<f64>, haversine: bool) -> f64 {
        let mut total = 0.0;
        for j in 0..gs.cols() {
            let mut num = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for i in 0..gs.rows() {
                num += gs.get(i, j) * gt.get(i, j);
                na += gs.get(i, j) * gs.get(i, j);
                nb += gt.get(i, j) * gt.get(i, j);
            }
            let cos = (num / (na.sqrt() * nb.sqrt()).max(1e-12)).clamp(-1.0, 1.0);
            let m = if haversine { 1.0 - ((1.0 - cos) / 2.0).sqrt() } else { cos };
            total += 1.0 - m;
        }
        total
    }

    #[test]
    fn angle_loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let gs_m = Matrix::from_fn(8, 8, |_, _| rng.gen_range(-1.0..1.0));
        let gt_m = Matrix::from_fn(8, 8, |_, _| rng.gen_range(-1.0..1.0));
        let tape = Tape::new();
        let gs = tape.leaf(gs_m.clone());
        let gt = tape.leaf(gt_m.clone());
        for sim in [Similarity::Haversine, Similarity::Cosine] {
            let l = angle_loss(&gs, &gt, sim, 1e-12).unwrap().scalar();
            let o = angle_loss_oracle(&gs_m, &gt_m, sim == Similarity::Haversine);
            assert!((l - o).abs() < 1e-10, "{sim:?}: {l} vs {o}");
        }
    }

    #[test]
    fn scale_loss_identical_is_zero() {
        let tape = Tape::new();
        let z = rand_batch(&tape, 3, 6, 4);
        let z2 = batch(&tape, z.value().data());
        let l = scale_loss(&z, &z2, 1.0, &PowerConfig::default()).unwrap();
        assert!(l.scalar().abs() < 1e-12);
    }

    #[test]
    fn scale_loss_constructed_spectra() {
        // Gram spectra {3,1} vs {5,1} with α = 1 → (3−5)² = 4
        let tape = Tape::new();
        let zs = batch(&tape, Matrix::diag(&[2.0f64.sqrt(), 0.0]));
        let zt = batch(&tape, Matrix::diag(&[2.0, 0.0]));
        let l = scale_loss(&zs, &zt, 1.0, &PowerConfig::default()).unwrap();
        assert!((l.scalar() - 4.0).abs() < 1e-6, "got {}", l.scalar());
    }

    #[test]
    fn scale_loss_matches_jacobi_oracle() {
        let tape = Tape::new();
        let zs = rand_batch(&tape, 4, 6, 4);
        let zt = rand_batch(&tape, 5, 6, 4);
        let l = scale_loss(&zs, &zt, 1.0, &PowerConfig::default()).unwrap().scalar();
        let oracle_lam = |z: &FeatureBatch<f64>| {
            let spd = SpdMatrix::tikhonov_gram(&z.value().data(), 1.0);
            let eig = linalg::jacobi_eigen(spd.as_matrix()).unwrap();
            eig.values[0]
        };
        let expect = (oracle_lam(&zs) - oracle_lam(&zt)).powi(2);
        assert!((l - expect).abs() / expect.max(1e-12) < 1e-3, "{l} vs {expect}");
    }

    #[test]
    fn tikuda_loss_identical_batches() {
        let tape = Tape::new();
        let z = rand_batch(&tape, 6, 6, 4);
        let z2 = batch(&tape, z.value().data());
        let (angle, scale) = tikuda_loss(&z, &z2, &AlignmentConfig::default()).unwrap();
        assert!(angle.scalar().abs() < 1e-6);
        assert!(scale.scalar().abs() < 1e-12);
    }

    #[test]
    fn tikuda_loss_row_permutation_invariant() {
        let tape = Tape::new();
        let z_src = rand_batch(&tape, 7, 6, 4);
        let z_tgt = rand_batch(&tape, 8, 6, 4);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let t = z_tgt.value().data();
        let permuted = batch(&tape, Matrix::from_fn(6, 4, |i, j| t.get(perm[i], j)));
        let cfg = AlignmentConfig::default();
        let (a1, s1) = tikuda_loss(&z_src, &z_tgt, &cfg).unwrap();
        let (a2, s2) = tikuda_loss(&z_src, &permuted, &cfg).unwrap();
        assert!((a1.scalar() - a2.scalar()).abs() < 1e-10);
        assert!((s1.scalar() - s2.scalar()).abs() < 1e-8);
    }

    #[test]
    fn tikuda_loss_detects_rotation() {
        // Z_tgt = Z_src · R for a plane rotation R: angle term must fire.
        let tape = Tape::new();
        let z_src = rand_batch(&tape, 9, 8, 2);
        let (c, s) = (0.6f64, 0.8f64);
        let r = Matrix::from_rows(&[vec![c, -s], vec![s, c]]);
        let z_tgt = batch(&tape, z_src.value().data().matmul(&r));
        let (angle, _) = tikuda_loss(&z_src, &z_tgt, &AlignmentConfig::default()).unwrap();
        assert!(angle.scalar() > 1e-3, "angle loss {} too small", angle.scalar());
    }

    #[test]
    fn tikuda_loss_rejects_dim_mismatch() {
        let tape = Tape::new();
        let a = rand_batch(&tape, 10, 4, 3);
        let b = rand_batch(&tape, 11, 4, 5);
        match tikuda_loss(&a, &b, &AlignmentConfig::default()) {
            Err(AlignmentError::DimensionMismatch { .. }) => {}
            other => panic!("expected DimensionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn coral_identical_is_zero() {
        let tape = Tape::new();
        let z = rand_batch(&tape, 12, 6, 4);
        let z2 = batch(&tape, z.value().data());
        assert!(coral_loss(&z, &z2).unwrap().scalar().abs() < 1e-14);
    }

    #[test]
    fn coral_scaled_batch_closed_form() {
        // p = 1, target = 2·source: covariances v and 4v → (3v)²/4
        let tape = Tape::new();
        let xs = vec![1.0, 2.0, 4.0, 5.0];
        let zs = batch(&tape, Matrix::from_vec(4, 1, xs.clone()));
        let zt = batch(&tape, Matrix::from_vec(4, 1, xs.iter().map(|x| 2.0 * x).collect()));
        let mean = 3.0;
        let var: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
        let expect = (3.0 * var).powi(2) / 4.0;
        let got = coral_loss(&zs, &zt).unwrap().scalar();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    /// Straight-line scalar CORAL.
    fn coral_oracle(s: &Matrix<f64>, t: &Matrix<f64>) -> f64 {
        let cov = |z: &Matrix<f64>| {
            let (b, p) = z.shape();
            let mut mean = vec![0.0; p];
            for i in 0..b {
                for j in 0..p {
                    mean[j] += z.get(i, j) / b as f64;
                }
            }
            Matrix::from_fn(p, p, |a, c| {
                (0..b)
                    .map(|i| (z.get(i, a) - mean[a]) * (z.get(i, c) - mean[c]))
                    .sum::<f64>()
                    / (b - 1) as f64
            })
        };
        let p = s.cols() as f64;
        let d = cov(s).sub(&cov(t));
        d.data().iter().map(|x| x * x).sum::<f64>() / (4.0 * p * p)
    }

    #[test]
    fn coral_matches_scalar_oracle() {
        let tape = Tape::new();
        let zs = rand_batch(&tape, 13, 6, 4);
        let zt = rand_batch(&tape, 14, 5, 4);
        let got = coral_loss(&zs, &zt).unwrap().scalar();
        let expect = coral_oracle(&zs.value().data(), &zt.value().data());
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn mmd_identical_is_zero() {
        let tape = Tape::new();
        let z = rand_batch(&tape, 15, 6, 4);
        let z2 = batch(&tape, z.value().data());
        let got = mmd_loss(&z, &z2, Bandwidth::Median).unwrap().scalar();
        assert!(got.abs() < 1e-12, "got {got}");
    }

    #[test]
    fn mmd_singletons_closed_form() {
        // FeatureBatch requires b ≥ 2; duplicate each singleton row, which
        // leaves every kernel mean unchanged.
        let tape: Tape<f64> = Tape::new();
        let zs = batch(&tape, Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]));
        let zt = batch(&tape, Matrix::from_rows(&[vec![3.0, 4.0], vec![3.0, 4.0]]));
        let sigma = 2.0f64;
        let d2 = 25.0;
        let expect = 2.0 * (1.0 - (-d2 / (2.0 * sigma * sigma)).exp());
        let got = mmd_loss(&zs, &zt, Bandwidth::Fixed(sigma)).unwrap().scalar();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    /// Straight-line O(b²) scalar MMD with a fixed bandwidth.
    fn mmd_oracle(s: &Matrix<f64>, t: &Matrix<f64>, sigma: f64) -> f64 {
        let k = |a: &Matrix<f64>, b: &Matrix<f64>| {
            let mut acc = 0.0;
            for i in 0..a.rows() {
                for j in 0..b.rows() {
                    let d2: f64 = (0..a.cols()).map(|c| (a.get(i, c) - b.get(j, c)).powi(2)).sum();
                    acc += (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
            acc / (a.rows() * b.rows()) as f64
        };
        k(s, s) + k(t, t) - 2.0 * k(s, t)
    }

    #[test]
    fn mmd_matches_scalar_oracle() {
        let tape = Tape::new();
        let zs = rand_batch(&tape, 16, 6, 4);
        let zt = rand_batch(&tape, 17, 5, 4);
        let got = mmd_loss(&zs, &zt, Bandwidth::Fixed(1.3)).unwrap().scalar();
        let expect = mmd_oracle(&zs.value().data(), &zt.value().data(), 1.3);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn dare_gram_identical_batches() {
        let tape = Tape::new();
        let z = rand_batch(&tape, 18, 6, 4);
        let z2 = batch(&tape, z.value().data());
        let (angle, scale) = dare_gram_loss(&z, &z2, &AlignmentConfig::default()).unwrap();
        assert!(angle.scalar().abs() < 1e-8, "angle {}", angle.scalar());
        assert!(scale.scalar().abs() < 1e-12, "scale {}", scale.scalar());
    }

    #[test]
    fn dare_gram_full_rank_matches_cosine_small_alpha() {
        // With threshold 1 on a full-rank, well-conditioned Gram, the pinv is
        // the exact inverse, so the angle term approaches the cosine-variant
        // loss over (ZᵀZ + αI)⁻¹ as α → 0.
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        // rows ≫ cols with spread columns keeps the Gram well-conditioned
        let gen = |rng: &mut ChaCha8Rng| {
            Matrix::from_fn(16, 3, |_, j| rng.gen_range(-1.0..1.0) * (1.0 + j as f64))
        };
        let zs = batch(&tape, gen(&mut rng));
        let zt = batch(&tape, gen(&mut rng));
        let mut cfg = AlignmentConfig::<f64> {
            dare_gram_energy_threshold: 1.0,
            similarity: Similarity::Cosine,
            ..AlignmentConfig::default()
        };
        cfg.alpha = 1e-6;
        let (dg_angle, _) = dare_gram_loss(&zs, &zt, &cfg).unwrap();
        let (tk_angle, _) = tikuda_loss(&zs, &zt, &cfg).unwrap();
        let diff = (dg_angle.scalar() - tk_angle.scalar()).abs();
        assert!(diff < 1e-3, "angle gap {diff}: {} vs {}", dg_angle.scalar(), tk_angle.scalar());
    }

    #[test]
    fn dare_gram_scale_matches_eigen_oracle() {
        let tape = Tape::new();
        let zs = rand_batch(&tape, 20, 6, 4);
        let zt = rand_batch(&tape, 21, 6, 4);
        let cfg = AlignmentConfig::default();
        let (_, scale) = dare_gram_loss(&zs, &zt, &cfg).unwrap();
        let spectrum = |z: &FeatureBatch<f64>| {
            let m = z.value().data();
            let gram = SpdMatrix::new(m.transpose().matmul(&m)).unwrap();
            linalg::jacobi_eigen(gram.as_matrix()).unwrap().values
        };
        let (vs, vt) = (spectrum(&zs), spectrum(&zt));
        let keep = |v: &[f64]| linalg::kept_eigen_count(v, 0.999);
        let k = keep(&vs).min(keep(&vt));
        let expect: f64 = (0..k).map(|i| (vs[i] - vt[i]).powi(2)).sum::<f64>() / k as f64;
        let got = scale.scalar();
        assert!((got - expect).abs() / expect.max(1e-12) < 1e-6, "{got} vs {expect}");
    }
}
