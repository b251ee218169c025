//! Micro-benchmark harness for the alignment losses.
//!
//! Times one full "alignment step" — loss forward plus backward through the
//! feature batches — on seeded random f32 batches. Batch generation happens
//! outside the timed region, and everything runs on the calling thread so
//! medians stay stable.

use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{self, AlignmentConfig, FeatureBatch};
use crate::autodiff::Tape;
use crate::matrix::Matrix;
use crate::trainer::Method;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: &'static str,
    pub p: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, p: usize) -> Matrix<f32> {
    Matrix::from_fn(b, p, |_, _| rng.gen_range(-1.0f32..1.0))
}

fn time_step(method: Method, zs: &Matrix<f32>, zt: &Matrix<f32>) -> f64 {
    let cfg = AlignmentConfig::<f32>::default();
    let start = Instant::now();
    let tape = Tape::new();
    let fs = FeatureBatch::new(tape.leaf(zs.clone())).unwrap();
    let ft = FeatureBatch::new(tape.leaf(zt.clone())).unwrap();
    let loss = match method {
        Method::Tikuda => {
            let (angle, scale) = alignment::tikuda_loss(&fs, &ft, &cfg).unwrap();
            angle.add(&scale).unwrap()
        }
        Method::DareGram => {
            let (angle, scale) = alignment::dare_gram_loss(&fs, &ft, &cfg).unwrap();
            angle.add(&scale).unwrap()
        }
        Method::Coral => alignment::coral_loss(&fs, &ft).unwrap(),
        Method::Mmd => {
            alignment::mmd_loss(&fs, &ft, alignment::Bandwidth::Fixed(1.0)).unwrap()
        }
        _ => panic!("method {method:?} has no alignment step"),
    };
    tape.backward(&loss).unwrap();
    start.elapsed().as_secs_f64() * 1e3
}

/// Run the benchmark grid. `p_list` must be sorted ascending, `iters` ≥ 20.
/// Rows come out grouped by method, then by p.
pub fn bench_alignment(
    p_list: &[usize],
    b: usize,
    iters: usize,
    methods: &[Method],
) -> Vec<BenchRow> {
    assert!(iters >= 20, "need at least 20 iterations for stable percentiles");
    assert!(p_list.windows(2).all(|w| w[0] < w[1]), "p values must be sorted ascending");
    let mut rows = Vec::new();
    for &method in methods {
        for &p in p_list {
            let mut rng = ChaCha8Rng::seed_from_u64(p as u64);
            let zs = random_batch(&mut rng, b, p);
            let zt = random_batch(&mut rng, b, p);
            // no separate warm-up pass: the median (and the p10/p90 band)
            // is already robust to a slow first iteration, and at large p a
            // warm-up would cost as much as an extra timed sample
            let mut samples: Vec<f64> =
                (0..iters).map(|_| time_step(method, &zs, &zt)).collect();
            samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
            rows.push(BenchRow {
                method: method.name(),
                p,
                median_ms: percentile(&samples, 0.5),
                p10_ms: percentile(&samples, 0.1),
                p90_ms: percentile(&samples, 0.9),
            });
        }
    }
    rows
}

/// Render rows as plot-ready CSV (stable float formatting).
pub fn render_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("method,p,median_ms,p10_ms,p90_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method, r.p, r.median_ms, r.p10_ms, r.p90_ms
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sanity_row_present_and_ordered() {
        let rows = bench_alignment(&[2, 8], 6, 20, &[Method::Tikuda, Method::DareGram]);
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().any(|r| r.method == "tikuda" && r.p == 2));
        for r in &rows {
            assert!(r.p10_ms <= r.median_ms && r.median_ms <= r.p90_ms);
            assert!(r.median_ms.is_finite() && r.median_ms >= 0.0);
        }
    }

    #[test]
    fn csv_round_shape() {
        let rows = bench_alignment(&[2], 4, 20, &[Method::Coral]);
        let csv = render_csv(&rows);
        assert!(csv.starts_with("method,p,median_ms"));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    #[should_panic]
    fn unsorted_p_rejected() {
        bench_alignment(&[8, 2], 4, 20, &[Method::Tikuda]);
    }
}
