//! Optimization loop, evaluation metrics, and distribution diagnostics.
//!
//! Each step draws one labeled source batch and one unlabeled target batch,
//! builds the total loss L_src + γ_angle·L_angle + γ_scale·L_scale on a fresh
//! tape, runs backward, and applies a bias-corrected Adam update. The
//! alignment weights ramp with λ(p) = 2/(1 + e^(−k·p)) − 1 over global-step
//! progress p, so early training is dominated by the supervised term.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::alignment::{self, AlignmentConfig, Bandwidth, Similarity};
use crate::autodiff::{AutodiffError, Tape, Value};
use crate::data::{Normalizer, WindowedDataset};
use crate::linalg;
use crate::matrix::Matrix;
use crate::stgnn::{self, GraphSpec, ModelConfig, ModelParams, StgnnError};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("dataset is empty (or too small: {0})")]
    EmptyDataset(&'static str),
    #[error("domain mismatch: source {src:?} vs target {tgt:?} (nodes, window)")]
    DimensionMismatch { src: (usize, usize), tgt: (usize, usize) },
    #[error("schedule progress {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error(transparent)]
    Stgnn(#[from] StgnnError),
    #[error(transparent)]
    Alignment(#[from] alignment::AlignmentError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<V> = std::result::Result<V, TrainerError>;

/// Adaptation method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    SourceOnly,
    Tikuda,
    TikudaCosine,
    DareGram,
    Coral,
    Mmd,
}

impl Method {
    pub fn parse(s: &str) -> Option<Method> {
        Some(match s {
            "source-only" => Method::SourceOnly,
            "tikuda" => Method::Tikuda,
            "tikuda-cosine" => Method::TikudaCosine,
            "dare-gram" => Method::DareGram,
            "coral" => Method::Coral,
            "mmd" => Method::Mmd,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::SourceOnly => "source-only",
            Method::Tikuda => "tikuda",
            Method::TikudaCosine => "tikuda-cosine",
            Method::DareGram => "dare-gram",
            Method::Coral => "coral",
            Method::Mmd => "mmd",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Peak weight of the angle term (single-term baselines reuse this as
    /// their only alignment weight).
    pub gamma_angle_max: f64,
    pub gamma_scale_max: f64,
    /// Gain k in λ(p) = 2/(1 + e^(−k·p)) − 1.
    pub schedule_gain: f64,
    pub method: Method,
    pub alignment: AlignmentConfig<f64>,
    pub seed: u64,
    /// Fraction of the target tail held out for evaluation (0 = evaluate on
    /// the full target set).
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch: 64,
            epochs: 150,
            gamma_angle_max: 1e-2,
            gamma_scale_max: 1e-3,
            schedule_gain: 10.0,
            method: Method::Tikuda,
            alignment: AlignmentConfig::default(),
            seed: 0,
            holdout_fraction: 0.0,
        }
    }
}

/// Per-epoch mean losses, for the trace export.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    pub src_loss: f64,
    pub angle_loss: f64,
    pub scale_loss: f64,
    pub total_loss: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rmse_norm: f64,
    pub rmse_actual: f64,
    pub mae_norm: f64,
    pub mae_actual: f64,
    pub energy_distance: f64,
    pub traces: Vec<EpochTrace>,
}

/// Alignment ramp λ(p) = 2/(1 + e^(−k·p)) − 1 = tanh(k·p/2) on p ∈ [0, 1].
pub fn lambda_schedule(progress: f64, gain: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(TrainerError::OutOfRange(progress));
    }
    Ok(2.0 / (1.0 + (-gain * progress).exp()) - 1.0)
}

/// Bias-corrected Adam over a fixed-order parameter list.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: usize,
    m: Vec<Matrix<f64>>,
    v: Vec<Matrix<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Matrix<f64>>, grads: &[Matrix<f64>]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in
            params.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "adam shape mismatch");
            for i in 0..p.data().len() {
                let gi = g.data()[i];
                m.data_mut()[i] = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                v.data_mut()[i] = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Cycling shuffled index stream over a dataset.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    fn new(len: usize, seed: u64) -> Self {
        let mut s = BatchStream { order: (0..len).collect(), pos: 0, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn mse_loss(pred: &Value<f64>, labels: &Matrix<f64>) -> Result<Value<f64>> {
    let y = pred.tape().leaf(labels.clone());
    let d = pred.sub(&y)?;
    Ok(d.elem_mul(&d)?.mean())
}

/// Train with unsupervised adaptation and evaluate on the target domain.
pub fn train_adapt(
    src: &WindowedDataset,
    tgt: &WindowedDataset,
    graph: &GraphSpec,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f64>, MetricsReport)> {
    if src.len() < cfg.batch.max(2) {
        return Err(TrainerError::EmptyDataset("source smaller than one batch"));
    }
    if tgt.len() < 2 {
        return Err(TrainerError::EmptyDataset("target needs at least 2 windows"));
    }
    if (src.n_nodes, src.window) != (tgt.n_nodes, tgt.window) {
        return Err(TrainerError::DimensionMismatch {
            src: (src.n_nodes, src.window),
            tgt: (tgt.n_nodes, tgt.window),
        });
    }

    // Target training pool vs evaluation tail.
    let tgt_train_len = if cfg.holdout_fraction > 0.0 {
        let keep = ((tgt.len() as f64) * (1.0 - cfg.holdout_fraction)).floor() as usize;
        keep.max(2)
    } else {
        tgt.len()
    };
    let eval_indices: Vec<usize> = if cfg.holdout_fraction > 0.0 {
        (tgt_train_len..tgt.len()).collect()
    } else {
        (0..tgt.len()).collect()
    };
    if eval_indices.len() < 2 {
        return Err(TrainerError::EmptyDataset("target holdout too small"));
    }

    let mut params = ModelParams::<f64>::init(model_cfg, cfg.seed);
    let shapes: Vec<(usize, usize)> = params.named().iter().map(|(_, m)| m.shape()).collect();
    let mut adam = Adam::new(cfg.lr, &shapes);

    // Independent streams so the source trajectory is identical whether or
    // not a method consumes target batches.
    let mut src_stream = BatchStream::new(src.len(), cfg.seed.wrapping_add(1));
    let mut tgt_stream = BatchStream::new(tgt_train_len, cfg.seed.wrapping_add(2));

    let steps_per_epoch = (src.len() / cfg.batch).max(1);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut traces = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64); // src, angle, scale, total
        let mut lambda_last = 0.0;
        for _ in 0..steps_per_epoch {
            let progress = global_step as f64 / total_steps.max(1) as f64;
            let lambda = lambda_schedule(progress, cfg.schedule_gain)?;
            lambda_last = lambda;
            let gamma_angle = cfg.gamma_angle_max * lambda;
            let gamma_scale = cfg.gamma_scale_max * lambda;

            let tape = Tape::new();
            let taped = params.on_tape(&tape);

            let (src_input, src_labels) = src.batch(&src_stream.next_batch(cfg.batch));
            let (feat_s, pred_s) = stgnn::forward(&tape, &src_input, graph, &taped, model_cfg)?;
            let l_src = mse_loss(&pred_s, &src_labels)?;

            let mut angle_val = 0.0;
            let mut scale_val = 0.0;
            let total = if cfg.method == Method::SourceOnly {
                l_src.clone()
            } else {
                let (tgt_input, _) = tgt.batch(&tgt_stream.next_batch(cfg.batch));
                let (feat_t, _) = stgnn::forward(&tape, &tgt_input, graph, &taped, model_cfg)?;
                match cfg.method {
                    Method::Tikuda | Method::TikudaCosine | Method::DareGram => {
                        let mut acfg = cfg.alignment;
                        if cfg.method == Method::TikudaCosine {
                            acfg.similarity = Similarity::Cosine;
                        }
                        let (angle, scale) = if cfg.method == Method::DareGram {
                            alignment::dare_gram_loss(&feat_s, &feat_t, &acfg)?
                        } else {
                            alignment::tikuda_loss(&feat_s, &feat_t, &acfg)?
                        };
                        angle_val = angle.scalar();
                        scale_val = scale.scalar();
                        l_src
                            .add(&angle.scalar_mul(gamma_angle))?
                            .add(&scale.scalar_mul(gamma_scale))?
                    }
                    Method::Coral => {
                        let align = alignment::coral_loss(&feat_s, &feat_t)?;
                        angle_val = align.scalar();
                        l_src.add(&align.scalar_mul(gamma_angle))?
                    }
                    Method::Mmd => {
                        let align = alignment::mmd_loss(&feat_s, &feat_t, Bandwidth::Median)?;
                        angle_val = align.scalar();
                        l_src.add(&align.scalar_mul(gamma_angle))?
                    }
                    Method::SourceOnly => unreachable!(),
                }
            };

            tape.backward(&total)?;
            adam.step(params.matrices_mut(), &taped.grads());

            sums.0 += l_src.scalar();
            sums.1 += angle_val;
            sums.2 += scale_val;
            sums.3 += total.scalar();
            global_step += 1;
        }
        let n = steps_per_epoch as f64;
        traces.push(EpochTrace {
            epoch,
            src_loss: sums.0 / n,
            angle_loss: sums.1 / n,
            scale_loss: sums.2 / n,
            total_loss: sums.3 / n,
            lambda: lambda_last,
        });
    }

    let mut report = evaluate_indices(&params, tgt, &eval_indices, graph, model_cfg, 1.0)?;
    report.energy_distance =
        feature_energy_distance(&params, src, tgt, graph, model_cfg, cfg.seed)?;
    report.traces = traces;
    Ok((params, report))
}

/// Extract flattened features for up to `cap` windows (deterministic evenly
/// spaced subset) with the given parameters.
pub fn extract_features(
    params: &ModelParams<f64>,
    ds: &WindowedDataset,
    graph: &GraphSpec,
    model_cfg: &ModelConfig,
    cap: usize,
) -> Result<Matrix<f64>> {
    let take = ds.len().min(cap).max(2);
    let stride = (ds.len() / take).max(1);
    let indices: Vec<usize> = (0..take).map(|i| (i * stride).min(ds.len() - 1)).collect();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(128) {
        let chunk: Vec<usize> = if chunk.len() == 1 {
            vec![chunk[0], chunk[0]] // forward needs ≥ 2 rows; drop the dup below
        } else {
            chunk.to_vec()
        };
        let dedup = chunk.len() == 2 && chunk[0] == chunk[1];
        let (input, _) = ds.batch(&chunk);
        let tape = Tape::new();
        let taped = params.on_tape(&tape);
        let (feat, _) = stgnn::forward(&tape, &input, graph, &taped, model_cfg)?;
        let m = feat.value().data();
        let keep = if dedup { 1 } else { m.rows() };
        for i in 0..keep {
            rows.push(m.row(i).to_vec());
        }
    }
    Ok(Matrix::from_rows(&rows))
}

fn feature_energy_distance(
    params: &ModelParams<f64>,
    src: &WindowedDataset,
    tgt: &WindowedDataset,
    graph: &GraphSpec,
    model_cfg: &ModelConfig,
    _seed: u64,
) -> Result<f64> {
    let fs = extract_features(params, src, graph, model_cfg, 256)?;
    let ft = extract_features(params, tgt, graph, model_cfg, 256)?;
    Ok(energy_distance(&fs, &ft))
}

/// Evaluate on specific windows of a dataset. `label_span` converts
/// normalized metrics to actual units (pass the normalizer's span, or 1.0).
pub fn evaluate_indices(
    params: &ModelParams<f64>,
    ds: &WindowedDataset,
    indices: &[usize],
    graph: &GraphSpec,
    model_cfg: &ModelConfig,
    label_span: f64,
) -> Result<MetricsReport> {
    if indices.len() < 2 {
        return Err(TrainerError::EmptyDataset("evaluation needs at least 2 windows"));
    }
    let mut se = 0.0f64;
    let mut ae = 0.0f64;
    let mut count = 0usize;
    let mut chunks: Vec<Vec<usize>> = indices.chunks(256).map(|c| c.to_vec()).collect();
    // forward needs ≥ 2 rows per batch; fold a trailing singleton into its
    // predecessor
    if let Some(last) = chunks.last() {
        if last.len() == 1 && chunks.len() > 1 {
            let single = chunks.pop().unwrap();
            chunks.last_mut().unwrap().extend(single);
        }
    }
    for chunk in chunks {
        let (input, labels) = ds.batch(&chunk);
        let tape = Tape::new();
        let taped = params.on_tape(&tape);
        let (_, pred) = stgnn::forward(&tape, &input, graph, &taped, model_cfg)?;
        let p = pred.data();
        for i in 0..chunk.len() {
            let d = p.get(i, 0) - labels.get(i, 0);
            se += d * d;
            ae += d.abs();
            count += 1;
        }
    }
    let rmse = (se / count as f64).sqrt();
    let mae = ae / count as f64;
    Ok(MetricsReport {
        rmse_norm: rmse,
        rmse_actual: rmse * label_span,
        mae_norm: mae,
        mae_actual: mae * label_span,
        energy_distance: 0.0,
        traces: Vec::new(),
    })
}

/// Evaluate over a whole dataset with a normalizer providing the label span.
pub fn evaluate(
    params: &ModelParams<f64>,
    ds: &WindowedDataset,
    graph: &GraphSpec,
    model_cfg: &ModelConfig,
    normalizer: &Normalizer,
) -> Result<MetricsReport> {
    let indices: Vec<usize> = (0..ds.len()).collect();
    evaluate_indices(params, ds, &indices, graph, model_cfg, normalizer.label_span())
}

/// Energy distance 2·E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖ (V-statistic, Euclidean).
pub fn energy_distance(x: &Matrix<f64>, y: &Matrix<f64>) -> f64 {
    let mean_dist = |a: &Matrix<f64>, b: &Matrix<f64>| -> f64 {
        let mut acc = 0.0;
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                let mut d2 = 0.0;
                for k in 0..a.cols() {
                    let d = a.get(i, k) - b.get(j, k);
                    d2 += d * d;
                }
                acc += d2.sqrt();
            }
        }
        acc / (a.rows() * b.rows()) as f64
    };
    2.0 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y)
}

/// Project samples onto the top-k principal components of their covariance.
/// Returns (projected m×k, explained variance ratios). Eigenvectors use a
/// deterministic sign convention: the largest-magnitude entry is positive.
pub fn pca_project(features: &Matrix<f64>, k: usize) -> (Matrix<f64>, Vec<f64>) {
    let (m, p) = features.shape();
    assert!(m >= 2, "pca needs at least 2 samples");
    let k = k.min(p);
    let mean: Vec<f64> =
        (0..p).map(|j| (0..m).map(|i| features.get(i, j)).sum::<f64>() / m as f64).collect();
    let centered = Matrix::from_fn(m, p, |i, j| features.get(i, j) - mean[j]);
    let cov = centered.transpose().matmul(&centered).scale(1.0 / (m - 1) as f64);
    let cov = cov.add(&cov.transpose()).scale(0.5);
    let eig = linalg::sym_eigen(&cov).expect("covariance is symmetric");
    let total: f64 = eig.values.iter().map(|v| v.max(0.0)).sum();
    let explained: Vec<f64> = (0..k)
        .map(|i| if total > 0.0 { eig.values[i].max(0.0) / total } else { 0.0 })
        .collect();
    let mut basis = Matrix::zeros(p, k);
    for c in 0..k {
        let col = eig.vectors.col(c);
        let mut best = 0usize;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = i;
            }
        }
        let sign = if col[best] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..p {
            basis.set(r, c, sign * col[r]);
        }
    }
    (centered.matmul(&basis), explained)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, ShiftSpec};
    use rand::Rng;

    #[test]
    fn lambda_schedule_endpoints() {
        assert_eq!(lambda_schedule(0.0, 10.0).unwrap(), 0.0);
        assert!((lambda_schedule(0.5, 10.0).unwrap() - 2.5f64.tanh()).abs() < 1e-12);
        assert!((lambda_schedule(1.0, 10.0).unwrap() - 5.0f64.tanh()).abs() < 1e-12);
        assert!(matches!(lambda_schedule(1.5, 10.0), Err(TrainerError::OutOfRange(_))));
    }

    #[test]
    fn lambda_schedule_monotone() {
        let mut prev = -1.0;
        for i in 0..=100 {
            let v = lambda_schedule(i as f64 / 100.0, 10.0).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut p = Matrix::from_vec(1, 2, vec![1.0, -1.0]);
        let g = Matrix::from_vec(1, 2, vec![0.3, -7.0]);
        let mut adam = Adam::new(1e-3, &[(1, 2)]);
        let before = p.clone();
        adam.step(vec![&mut p], &[g]);
        for i in 0..2 {
            let delta = (p.data()[i] - before.data()[i]).abs();
            assert!((delta - 1e-3).abs() < 1e-6, "first-step delta {delta}");
        }
    }

    #[test]
    fn adam_zero_grad_no_change() {
        let mut p = Matrix::from_vec(1, 2, vec![1.0, -1.0]);
        let mut adam = Adam::new(1e-3, &[(1, 2)]);
        let before = p.clone();
        adam.step(vec![&mut p], &[Matrix::zeros(1, 2)]);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        // f(x) = ½‖x − c‖²
        let c = [3.0, -2.0];
        let mut x = Matrix::from_vec(1, 2, vec![0.0, 0.0]);
        let mut adam = Adam::new(0.1, &[(1, 2)]);
        let loss = |x: &Matrix<f64>| {
            0.5 * ((x.get(0, 0) - c[0]).powi(2) + (x.get(0, 1) - c[1]).powi(2))
        };
        let start = loss(&x);
        for _ in 0..10 {
            let g = Matrix::from_vec(1, 2, vec![x.get(0, 0) - c[0], x.get(0, 1) - c[1]]);
            adam.step(vec![&mut x], &[g]);
        }
        assert!(loss(&x) < start);
    }

    #[test]
    fn energy_distance_identical_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::from_fn(8, 3, |_, _| rng.gen_range(-1.0..1.0));
        assert!(energy_distance(&x, &x).abs() < 1e-12);
    }

    #[test]
    fn energy_distance_singletons() {
        let x = Matrix::from_vec(1, 2, vec![0.0, 0.0]);
        let y = Matrix::from_vec(1, 2, vec![3.0, 4.0]);
        assert!((energy_distance(&x, &y) - 10.0).abs() < 1e-12); // 2·d, d = 5
    }

    #[test]
    fn energy_distance_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::from_fn(7, 3, |_, _| rng.gen_range(-1.0..1.0));
        let y = Matrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        // independent accumulation over flattened index pairs
        let dist = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
        };
        let rows = |m: &Matrix<f64>| -> Vec<Vec<f64>> {
            (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
        };
        let (xr, yr) = (rows(&x), rows(&y));
        let mut exy = 0.0;
        for a in &xr {
            for b in &yr {
                exy += dist(a, b);
            }
        }
        exy /= (xr.len() * yr.len()) as f64;
        let mut exx = 0.0;
        for a in &xr {
            for b in &xr {
                exx += dist(a, b);
            }
        }
        exx /= (xr.len() * xr.len()) as f64;
        let mut eyy = 0.0;
        for a in &yr {
            for b in &yr {
                eyy += dist(a, b);
            }
        }
        eyy /= (yr.len() * yr.len()) as f64;
        let expect = 2.0 * exy - exx - eyy;
        assert!((energy_distance(&x, &y) - expect).abs() < 1e-10);
    }

    #[test]
    fn pca_line_has_one_component() {
        // points on a line through the origin in 3-D
        let dir = [1.0, 2.0, -1.0];
        let pts = Matrix::from_fn(10, 3, |i, j| (i as f64 - 4.5) * dir[j]);
        let (proj, explained) = pca_project(&pts, 2);
        assert!((explained[0] - 1.0).abs() < 1e-10);
        assert!(explained[1].abs() < 1e-10);
        assert_eq!(proj.shape(), (10, 2));
    }

    #[test]
    fn pca_isotropic_splits_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = Matrix::from_fn(4000, 2, |_, _| rng.gen_range(-1.0..1.0));
        let (_, explained) = pca_project(&pts, 2);
        assert!((explained[0] - 0.5).abs() < 0.05, "explained {explained:?}");
    }

    #[test]
    fn pca_beats_axis_basis_on_anisotropic_data() {
        // rank-1 reconstruction error through PCA must not exceed the best
        // axis-aligned rank-1 error
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = Matrix::from_fn(200, 2, |_, _| rng.gen_range(-1.0..1.0f64));
        let data = Matrix::from_fn(200, 2, |i, j| {
            let x = pts.get(i, 0);
            let n = pts.get(i, 1) * 0.1;
            if j == 0 { x } else { 0.8 * x + n }
        });
        let (_, explained) = pca_project(&data, 2);
        // variance along the correlated direction dominates both axes alone
        assert!(explained[0] > 0.9, "explained {explained:?}");
    }

    fn tiny_setup(
        method: Method,
        epochs: usize,
        seed: u64,
    ) -> (WindowedDataset, WindowedDataset, GraphSpec, ModelConfig, TrainConfig) {
        let base = data::generate_latent(3, 220, 42);
        let spec = ShiftSpec::default_fixture(3, 42);
        let (src_raw, tgt_raw) = data::synthesize_shift(&base, &spec).unwrap();
        let norm = Normalizer::fit(&src_raw).unwrap();
        let src = data::make_windows(&norm.apply(&src_raw), 8, 1);
        let tgt = data::make_windows(&norm.apply(&tgt_raw), 8, 1);
        let graph = GraphSpec::full(3);
        let model_cfg = ModelConfig {
            n_nodes: 3,
            in_features: 1,
            window: 8,
            hidden: 4,
            gru_layers: 1,
            embed_dim: 2,
            leaky_slope: 0.2,
        };
        let cfg = TrainConfig {
            batch: 16,
            epochs,
            method,
            seed,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        (src, tgt, graph, model_cfg, cfg)
    }

    #[test]
    fn train_smoke_finite_losses() {
        for method in [Method::SourceOnly, Method::Tikuda, Method::Coral, Method::Mmd] {
            let (src, tgt, graph, mc, cfg) = tiny_setup(method, 2, 7);
            let (_, report) = train_adapt(&src, &tgt, &graph, &mc, &cfg).unwrap();
            for tr in &report.traces {
                assert!(tr.total_loss.is_finite(), "{method:?} produced non-finite loss");
            }
            assert!(report.rmse_norm.is_finite());
        }
    }

    #[test]
    fn zero_gamma_matches_source_only_bitwise() {
        let (src, tgt, graph, mc, mut cfg) = tiny_setup(Method::Tikuda, 2, 11);
        cfg.gamma_angle_max = 0.0;
        cfg.gamma_scale_max = 0.0;
        let (p1, _) = train_adapt(&src, &tgt, &graph, &mc, &cfg).unwrap();
        cfg.method = Method::SourceOnly;
        let (p2, _) = train_adapt(&src, &tgt, &graph, &mc, &cfg).unwrap();
        for ((n1, m1), (_, m2)) in p1.named().iter().zip(p2.named().iter()) {
            assert_eq!(m1, m2, "parameter {n1} diverged");
        }
    }

    #[test]
    fn identical_domains_alignment_losses_near_zero() {
        let (src, _, graph, mc, cfg) = tiny_setup(Method::Tikuda, 2, 13);
        let tgt = src.clone();
        let (_, report) = train_adapt(&src, &tgt, &graph, &mc, &cfg).unwrap();
        // batches are drawn from the same distribution; the angle/scale terms
        // stay small throughout
        for tr in &report.traces {
            assert!(tr.scale_loss < 0.5, "scale loss {} too large", tr.scale_loss);
        }
    }

    #[test]
    fn train_deterministic_per_seed() {
        let (src, tgt, graph, mc, cfg) = tiny_setup(Method::Tikuda, 2, 17);
        let (p1, r1) = train_adapt(&src, &tgt, &graph, &mc, &cfg).unwrap();
        let (p2, r2) = train_adapt(&src, &tgt, &graph, &mc, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn evaluate_constant_offset_mae() {
        // zero params predict the bias; labels at bias − 0.1 give MAE 0.1
        let (src, _, graph, mc, _) = tiny_setup(Method::SourceOnly, 1, 19);
        let mut params = ModelParams::<f64>::init(&mc, 0);
        for m in params.matrices_mut() {
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        params.reg_b = Matrix::from_vec(1, 1, vec![0.1]);
        // build a dataset whose labels are all zero
        let zeroed = {
            let base = data::generate_latent(3, 60, 1);
            let mut s = base.clone();
            s.target = vec![0.0; s.len()];
            data::make_windows(&s, 8, 1)
        };
        let _ = src;
        let indices: Vec<usize> = (0..zeroed.len()).collect();
        let report = evaluate_indices(&params, &zeroed, &indices, &graph, &mc, 10.0).unwrap();
        assert!((report.mae_norm - 0.1).abs() < 1e-12);
        assert!((report.rmse_norm - 0.1).abs() < 1e-12);
        // actual metrics rescale by the label span
        assert!((report.mae_actual - 1.0).abs() < 1e-12);
    }
}
