//! Randomized invariant checks for the data pipeline and numeric core.

use proptest::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tikuda::alignment::{self, AlignmentConfig, FeatureBatch};
use tikuda::autodiff::Tape;
use tikuda::data::{self, Normalizer, RawSeries};
use tikuda::linalg::SpdMatrix;
use tikuda::matrix::Matrix;
use tikuda::trainer;

fn series_from(columns: Vec<Vec<f64>>, target: Vec<f64>) -> RawSeries {
    RawSeries {
        sensor_names: (0..columns.len()).map(|i| format!("s{i}")).collect(),
        sensors: columns,
        target_name: "y".to_string(),
        target,
        dropped_rows: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalizer_maps_fit_domain_to_unit_range(
        raw in prop::collection::vec(-1e3f64..1e3, 8..40),
        tgt in prop::collection::vec(-1e3f64..1e3, 8..40),
    ) {
        let n = raw.len().min(tgt.len());
        let col: Vec<f64> = raw[..n].to_vec();
        let target: Vec<f64> = tgt[..n].to_vec();
        // skip degenerate constant columns — the fitter rejects those
        prop_assume!(col.iter().cloned().fold(f64::INFINITY, f64::min)
            < col.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        prop_assume!(target.iter().cloned().fold(f64::INFINITY, f64::min)
            < target.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        let series = series_from(vec![col], target.clone());
        let norm = Normalizer::fit(&series).unwrap();
        let scaled = norm.apply(&series);
        let lo = scaled.sensors[0].iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scaled.sensors[0].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((lo - 0.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        // label round-trip
        for (orig, y) in target.iter().zip(&scaled.target) {
            let back = norm.denormalize_label(*y);
            prop_assert!((back - orig).abs() < 1e-9 * orig.abs().max(1.0));
        }
    }

    #[test]
    fn window_count_and_provenance(
        len in 1usize..120,
        window in 1usize..20,
        stride in 1usize..5,
        seed in 0u64..1000,
    ) {
        let base = data::generate_latent(2, len, seed);
        let ds = data::make_windows(&base, window, stride);
        let expected = if len >= window { (len - window) / stride + 1 } else { 0 };
        prop_assert_eq!(ds.len(), expected);
        for w in 0..ds.len() {
            let start = ds.start(w);
            prop_assert_eq!(start, w * stride);
            // window contents reconstruct the original series exactly
            for t in 0..window {
                for n in 0..2 {
                    prop_assert_eq!(ds.get(w, t, n), base.sensors[n][start + t]);
                }
            }
            prop_assert_eq!(ds.label(w), base.target[start + window - 1]);
        }
    }

    #[test]
    fn tikhonov_gram_is_always_spd(
        rows in 2usize..8,
        cols in 1usize..8,
        seed in 0u64..1000,
        alpha in 1e-6f64..10.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let z = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-5.0..5.0));
        let spd = SpdMatrix::tikhonov_gram(&z, alpha);
        // SPD check: Cholesky must succeed on the constructed matrix
        prop_assert!(SpdMatrix::new(spd.as_matrix().clone()).is_ok());
    }

    #[test]
    fn angle_and_scale_ignore_batch_order(
        seed in 0u64..500,
        swap_a in 0usize..6,
        swap_b in 0usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let z = Matrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0f64..1.0));
        let zt = Matrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0f64..1.0));
        let mut zp = z.clone();
        for c in 0..4 {
            let (a, b) = (z.get(swap_a, c), z.get(swap_b, c));
            zp.set(swap_a, c, b);
            zp.set(swap_b, c, a);
        }
        let cfg = AlignmentConfig::default();
        let eval = |m: &Matrix<f64>| {
            let tape = Tape::new();
            let s = FeatureBatch::new(tape.leaf(m.clone())).unwrap();
            let t = FeatureBatch::new(tape.leaf(zt.clone())).unwrap();
            let (angle, scale) = alignment::tikuda_loss(&s, &t, &cfg).unwrap();
            (angle.scalar(), scale.scalar())
        };
        let (a0, s0) = eval(&z);
        let (a1, s1) = eval(&zp);
        prop_assert!((a0 - a1).abs() < 1e-9);
        prop_assert!((s0 - s1).abs() < 1e-9);
    }

    #[test]
    fn ramp_schedule_is_bounded_and_monotone(
        lo in 0.0f64..1.0,
        hi in 0.0f64..1.0,
        gain in 0.1f64..30.0,
    ) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let a = trainer::lambda_schedule(lo, gain).unwrap();
        let b = trainer::lambda_schedule(hi, gain).unwrap();
        prop_assert!((0.0..1.0).contains(&a));
        prop_assert!((0.0..1.0).contains(&b));
        prop_assert!(a <= b);
    }

    #[test]
    fn energy_distance_nonnegative_and_symmetric(
        seed in 0u64..500,
        rows_x in 2usize..7,
        rows_y in 2usize..7,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let x = Matrix::from_fn(rows_x, 3, |_, _| rng.gen_range(-2.0f64..2.0));
        let y = Matrix::from_fn(rows_y, 3, |_, _| rng.gen_range(-2.0f64..2.0));
        let dxy = trainer::energy_distance(&x, &y);
        let dyx = trainer::energy_distance(&y, &x);
        prop_assert!(dxy >= -1e-12);
        prop_assert!((dxy - dyx).abs() < 1e-12);
    }
}
