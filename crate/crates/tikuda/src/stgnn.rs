//! Time-then-space feature extractor and regression head.
//!
//! Per window the pipeline is: concatenate each sensor's raw features with its
//! learned embedding, project through a linear encoder, run a GRU stack over
//! the time axis per node, mix the final hidden states across sensors with one
//! graph-attention layer, flatten node features into the alignment feature
//! vector Z, and regress a single output from it.
//!
//! Row layout conventions (everything is 2-D on the tape):
//! - sequences are (T·B·N)×d with row index t·B·N + b·N + n, so one time step
//!   is a contiguous row block;
//! - per-node states are (B·N)×d with row index b·N + n, so reshaping to
//!   B×(N·d) concatenates node features in node order.

use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::alignment::FeatureBatch;
use crate::autodiff::{AutodiffError, Tape, Value};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum StgnnError {
    #[error("{what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch { what: &'static str, expected: (usize, usize), got: (usize, usize) },
    #[error("invalid graph: {reason}")]
    InvalidGraph { reason: String },
    #[error("node {node} has no neighbors")]
    IsolatedNode { node: usize },
    #[error("checkpoint parse error at line {line}: {reason}")]
    BadCheckpoint { line: usize, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Alignment(#[from] crate::alignment::AlignmentError),
}

type Result<V> = std::result::Result<V, StgnnError>;

/// Undirected sensor graph with mandatory self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSpec {
    n_nodes: usize,
    adj: Vec<bool>, // row-major n×n
}

impl GraphSpec {
    /// Validate a binary adjacency: square, symmetric, all self-loops present.
    pub fn new(n_nodes: usize, adj: Vec<bool>) -> Result<Self> {
        if adj.len() != n_nodes * n_nodes {
            return Err(StgnnError::InvalidGraph {
                reason: format!("adjacency has {} entries, need {}", adj.len(), n_nodes * n_nodes),
            });
        }
        for u in 0..n_nodes {
            if !adj[u * n_nodes + u] {
                return Err(StgnnError::InvalidGraph { reason: format!("node {u} lacks a self-loop") });
            }
            for v in 0..u {
                if adj[u * n_nodes + v] != adj[v * n_nodes + u] {
                    return Err(StgnnError::InvalidGraph {
                        reason: format!("asymmetric at ({u},{v})"),
                    });
                }
            }
        }
        Ok(GraphSpec { n_nodes, adj })
    }

    /// Fully connected graph (the default when no adjacency is given).
    pub fn full(n_nodes: usize) -> Self {
        GraphSpec { n_nodes, adj: vec![true; n_nodes * n_nodes] }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adj[u * self.n_nodes + v]
    }

    pub fn neighbors(&self, u: usize) -> Vec<usize> {
        (0..self.n_nodes).filter(|&v| self.has_edge(u, v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub n_nodes: usize,
    pub in_features: usize,
    pub window: usize,
    pub hidden: usize,
    pub gru_layers: usize,
    pub embed_dim: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_nodes: 1,
            in_features: 1,
            window: 16,
            hidden: 16,
            gru_layers: 4,
            embed_dim: 16,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.n_nodes * self.hidden
    }
}

/// One GRU layer: update gate z, reset gate r, candidate n.
/// `w_*` are input×hidden, `u_*` hidden×hidden, `b_*` 1×hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct GruLayerParams<T> {
    pub w_z: Matrix<T>,
    pub u_z: Matrix<T>,
    pub b_z: Matrix<T>,
    pub w_r: Matrix<T>,
    pub u_r: Matrix<T>,
    pub b_r: Matrix<T>,
    pub w_n: Matrix<T>,
    pub u_n: Matrix<T>,
    pub b_n: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// Per-sensor embeddings, n_nodes×embed_dim.
    pub embed: Matrix<T>,
    /// Linear encoder over [raw ‖ embedding], (in_features+embed_dim)×hidden.
    pub enc_w: Matrix<T>,
    pub enc_b: Matrix<T>,
    pub gru: Vec<GruLayerParams<T>>,
    /// GAT projection W (hidden×hidden) and attention vector a (2·hidden×1).
    pub gat_w: Matrix<T>,
    pub gat_a: Matrix<T>,
    /// Regressor, (n_nodes·hidden)×1 plus scalar bias.
    pub reg_w: Matrix<T>,
    pub reg_b: Matrix<T>,
}

fn uniform_init<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::from_f64(rng.gen_range(-bound..bound)))
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded uniform(−1/√fan_in, +1/√fan_in) initialization everywhere,
    /// embeddings included.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.hidden;
        let enc_in = cfg.in_features + cfg.embed_dim;
        let gru = (0..cfg.gru_layers)
            .map(|_| GruLayerParams {
                w_z: uniform_init(&mut rng, d, d, d),
                u_z: uniform_init(&mut rng, d, d, d),
                b_z: uniform_init(&mut rng, 1, d, d),
                w_r: uniform_init(&mut rng, d, d, d),
                u_r: uniform_init(&mut rng, d, d, d),
                b_r: uniform_init(&mut rng, 1, d, d),
                w_n: uniform_init(&mut rng, d, d, d),
                u_n: uniform_init(&mut rng, d, d, d),
                b_n: uniform_init(&mut rng, 1, d, d),
            })
            .collect();
        ModelParams {
            embed: uniform_init(&mut rng, cfg.n_nodes, cfg.embed_dim, cfg.embed_dim),
            enc_w: uniform_init(&mut rng, enc_in, d, enc_in),
            enc_b: uniform_init(&mut rng, 1, d, enc_in),
            gru,
            gat_w: uniform_init(&mut rng, d, d, d),
            gat_a: uniform_init(&mut rng, 2 * d, 1, 2 * d),
            reg_w: uniform_init(&mut rng, cfg.n_nodes * d, 1, cfg.n_nodes * d),
            reg_b: Matrix::zeros(1, 1),
        }
    }

    /// Canonical (name, matrix) order shared by the optimizer and checkpoints.
    pub fn named(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out: Vec<(String, &Matrix<T>)> = vec![
            ("embed".into(), &self.embed),
            ("enc_w".into(), &self.enc_w),
            ("enc_b".into(), &self.enc_b),
        ];
        for (i, g) in self.gru.iter().enumerate() {
            out.push((format!("gru{i}_w_z"), &g.w_z));
            out.push((format!("gru{i}_u_z"), &g.u_z));
            out.push((format!("gru{i}_b_z"), &g.b_z));
            out.push((format!("gru{i}_w_r"), &g.w_r));
            out.push((format!("gru{i}_u_r"), &g.u_r));
            out.push((format!("gru{i}_b_r"), &g.b_r));
            out.push((format!("gru{i}_w_n"), &g.w_n));
            out.push((format!("gru{i}_u_n"), &g.u_n));
            out.push((format!("gru{i}_b_n"), &g.b_n));
        }
        out.push(("gat_w".into(), &self.gat_w));
        out.push(("gat_a".into(), &self.gat_a));
        out.push(("reg_w".into(), &self.reg_w));
        out.push(("reg_b".into(), &self.reg_b));
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out: Vec<&mut Matrix<T>> = vec![&mut self.embed, &mut self.enc_w, &mut self.enc_b];
        for g in &mut self.gru {
            out.push(&mut g.w_z);
            out.push(&mut g.u_z);
            out.push(&mut g.b_z);
            out.push(&mut g.w_r);
            out.push(&mut g.u_r);
            out.push(&mut g.b_r);
            out.push(&mut g.w_n);
            out.push(&mut g.u_n);
            out.push(&mut g.b_n);
        }
        out.push(&mut self.gat_w);
        out.push(&mut self.gat_a);
        out.push(&mut self.reg_w);
        out.push(&mut self.reg_b);
        out
    }

    /// Put every parameter on a tape as a leaf (one fresh tape per step).
    pub fn on_tape(&self, tape: &Tape<T>) -> TapedParams<T> {
        TapedParams {
            embed: tape.leaf(self.embed.clone()),
            enc_w: tape.leaf(self.enc_w.clone()),
            enc_b: tape.leaf(self.enc_b.clone()),
            gru: self
                .gru
                .iter()
                .map(|g| TapedGruLayer {
                    w_z: tape.leaf(g.w_z.clone()),
                    u_z: tape.leaf(g.u_z.clone()),
                    b_z: tape.leaf(g.b_z.clone()),
                    w_r: tape.leaf(g.w_r.clone()),
                    u_r: tape.leaf(g.u_r.clone()),
                    b_r: tape.leaf(g.b_r.clone()),
                    w_n: tape.leaf(g.w_n.clone()),
                    u_n: tape.leaf(g.u_n.clone()),
                    b_n: tape.leaf(g.b_n.clone()),
                })
                .collect(),
            gat_w: tape.leaf(self.gat_w.clone()),
            gat_a: tape.leaf(self.gat_a.clone()),
            reg_w: tape.leaf(self.reg_w.clone()),
            reg_b: tape.leaf(self.reg_b.clone()),
        }
    }

    /// Write a structured-text checkpoint. Floats use the shortest
    /// round-tripping decimal form, so load is bit-exact.
    pub fn save(&self, path: &Path, cfg: &ModelConfig) -> Result<()> {
        use std::fmt::Write as _;
        let mut out = String::from("tikuda-checkpoint v1\n");
        let _ = writeln!(
            out,
            "config {} {} {} {} {} {} {}",
            cfg.n_nodes, cfg.in_features, cfg.window, cfg.hidden, cfg.gru_layers, cfg.embed_dim, cfg.leaky_slope
        );
        for (name, m) in self.named() {
            let _ = writeln!(out, "param {name} {} {}", m.rows(), m.cols());
            for i in 0..m.rows() {
                let row: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ModelConfig, ModelParams<T>)> {
        let text = std::fs::read_to_string(path)?;
        let bad = |line: usize, reason: &str| StgnnError::BadCheckpoint {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
        if header != "tikuda-checkpoint v1" {
            return Err(bad(1, "unrecognized header"));
        }
        let (_, cfg_line) = lines.next().ok_or_else(|| bad(2, "missing config line"))?;
        let parts: Vec<&str> = cfg_line.split_whitespace().collect();
        if parts.len() != 8 || parts[0] != "config" {
            return Err(bad(2, "malformed config line"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(2, "bad config number"));
        let cfg = ModelConfig {
            n_nodes: num(parts[1])?,
            in_features: num(parts[2])?,
            window: num(parts[3])?,
            hidden: num(parts[4])?,
            gru_layers: num(parts[5])?,
            embed_dim: num(parts[6])?,
            leaky_slope: parts[7].parse::<f64>().map_err(|_| bad(2, "bad leaky slope"))?,
        };
        let mut named: Vec<(String, Matrix<T>)> = Vec::new();
        let mut iter = lines.peekable();
        while let Some((ln, line)) = iter.next() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "param" {
                return Err(bad(ln + 1, "expected a param header"));
            }
            let name = parts[1].to_string();
            let rows: usize = parts[2].parse().map_err(|_| bad(ln + 1, "bad row count"))?;
            let cols: usize = parts[3].parse().map_err(|_| bad(ln + 1, "bad col count"))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (rln, row) = iter.next().ok_or_else(|| bad(ln + 1, "truncated param"))?;
                for tok in row.split_whitespace() {
                    let v: f64 = tok.parse().map_err(|_| bad(rln + 1, "bad float"))?;
                    data.push(T::from_f64(v));
                }
            }
            if data.len() != rows * cols {
                return Err(bad(ln + 1, "wrong entry count"));
            }
            named.push((name, Matrix::from_vec(rows, cols, data)));
        }
        Self::from_named(&cfg, named, &text)
    }

    fn from_named(cfg: &ModelConfig, named: Vec<(String, Matrix<T>)>, _src: &str) -> Result<(ModelConfig, ModelParams<T>)> {
        let mut params = ModelParams::init(cfg, 0);
        let expected: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
        let got: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        if expected != got {
            return Err(StgnnError::BadCheckpoint {
                line: 0,
                reason: format!("parameter set mismatch: expected {expected:?}, got {got:?}"),
            });
        }
        for (slot, (_, m)) in params.matrices_mut().into_iter().zip(named) {
            if slot.shape() != m.shape() {
                return Err(StgnnError::BadCheckpoint {
                    line: 0,
                    reason: format!("shape mismatch: {:?} vs {:?}", slot.shape(), m.shape()),
                });
            }
            *slot = m;
        }
        Ok((*cfg, params))
    }
}

/// Tape-resident copies of the parameters for one training step.
pub struct TapedGruLayer<T> {
    pub w_z: Value<T>,
    pub u_z: Value<T>,
    pub b_z: Value<T>,
    pub w_r: Value<T>,
    pub u_r: Value<T>,
    pub b_r: Value<T>,
    pub w_n: Value<T>,
    pub u_n: Value<T>,
    pub b_n: Value<T>,
}

pub struct TapedParams<T> {
    pub embed: Value<T>,
    pub enc_w: Value<T>,
    pub enc_b: Value<T>,
    pub gru: Vec<TapedGruLayer<T>>,
    pub gat_w: Value<T>,
    pub gat_a: Value<T>,
    pub reg_w: Value<T>,
    pub reg_b: Value<T>,
}

impl<T: Scalar> TapedParams<T> {
    /// Gradients in the canonical parameter order (call after backward).
    pub fn grads(&self) -> Vec<Matrix<T>> {
        let mut out = vec![self.embed.grad(), self.enc_w.grad(), self.enc_b.grad()];
        for g in &self.gru {
            out.extend([
                g.w_z.grad(),
                g.u_z.grad(),
                g.b_z.grad(),
                g.w_r.grad(),
                g.u_r.grad(),
                g.b_r.grad(),
                g.w_n.grad(),
                g.u_n.grad(),
                g.b_n.grad(),
            ]);
        }
        out.extend([self.gat_w.grad(), self.gat_a.grad(), self.reg_w.grad(), self.reg_b.grad()]);
        out
    }
}

/// One window batch, flattened to 2-D: rows t·B·N + b·N + n, columns = raw
/// features. Time-major so each step is a contiguous slice.
#[derive(Debug, Clone)]
pub struct InputBatch<T> {
    pub data: Matrix<T>,
    pub batch: usize,
    pub n_nodes: usize,
    pub window: usize,
    pub in_features: usize,
}

impl<T: Scalar> InputBatch<T> {
    pub fn new(data: Matrix<T>, batch: usize, n_nodes: usize, window: usize, in_features: usize) -> Result<Self> {
        let expected = (window * batch * n_nodes, in_features);
        if data.shape() != expected {
            return Err(StgnnError::ShapeMismatch { what: "input batch", expected, got: data.shape() });
        }
        Ok(InputBatch { data, batch, n_nodes, window, in_features })
    }

    #[inline]
    pub fn row_of(&self, t: usize, b: usize, n: usize) -> usize {
        t * self.batch * self.n_nodes + b * self.n_nodes + n
    }
}

/// Linear encoder over [raw features ‖ sensor embedding], applied per
/// (time step, window, node) row. Output keeps the input row order.
pub fn encode<T: Scalar>(
    tape: &Tape<T>,
    input: &InputBatch<T>,
    params: &TapedParams<T>,
    cfg: &ModelConfig,
) -> Result<Value<T>> {
    if cfg.in_features != input.in_features || cfg.n_nodes != input.n_nodes {
        return Err(StgnnError::ShapeMismatch {
            what: "encoder config",
            expected: (cfg.n_nodes, cfg.in_features),
            got: (input.n_nodes, input.in_features),
        });
    }
    let x = tape.leaf(input.data.clone());
    let n = input.n_nodes;
    let rows = input.data.rows();
    let node_idx: Rc<Vec<usize>> = Rc::new((0..rows).map(|i| i % n).collect());
    let emb = params.embed.gather_rows(node_idx)?;
    let xe = x.concat_cols(&emb)?;
    Ok(xe.matmul(&params.enc_w)?.add_row(&params.enc_b)?)
}

/// One GRU step: returns the next hidden state.
/// h' = (1 − z)∘candidate + z∘h with z = σ(xW_z + hU_z + b_z),
/// r = σ(xW_r + hU_r + b_r), candidate = tanh(xW_n + (r∘h)U_n + b_n).
pub fn gru_cell<T: Scalar>(x: &Value<T>, h: &Value<T>, p: &TapedGruLayer<T>) -> Result<Value<T>> {
    let z = x.matmul(&p.w_z)?.add(&h.matmul(&p.u_z)?)?.add_row(&p.b_z)?.sigmoid();
    let r = x.matmul(&p.w_r)?.add(&h.matmul(&p.u_r)?)?.add_row(&p.b_r)?.sigmoid();
    let rh = r.elem_mul(h)?;
    let cand = x.matmul(&p.w_n)?.add(&rh.matmul(&p.u_n)?)?.add_row(&p.b_n)?.tanh();
    let one_minus_z = z.scalar_mul(-T::one()).add_scalar(T::one());
    Ok(one_minus_z.elem_mul(&cand)?.add(&z.elem_mul(h)?)?)
}

/// Run the GRU stack over a time-major sequence (T·B·N)×d; initial hidden is
/// zero at every layer. Returns the last layer's final hidden state, (B·N)×d.
pub fn gru_forward<T: Scalar>(
    tape: &Tape<T>,
    seq: &Value<T>,
    params: &TapedParams<T>,
    window: usize,
) -> Result<Value<T>> {
    let (rows, d) = seq.shape();
    let step_rows = rows / window;
    if step_rows * window != rows {
        return Err(StgnnError::ShapeMismatch { what: "gru sequence", expected: (window, 0), got: (rows, d) });
    }
    let mut layer_input = seq.clone();
    let mut final_h = None;
    for layer in &params.gru {
        let mut h = tape.leaf(Matrix::zeros(step_rows, d));
        let mut outputs: Option<Value<T>> = None;
        for t in 0..window {
            let x_t = layer_input.slice_rows(t * step_rows, step_rows)?;
            h = gru_cell(&x_t, &h, layer)?;
            outputs = Some(match outputs {
                None => h.clone(),
                Some(acc) => acc.concat_rows(&h)?,
            });
        }
        layer_input = outputs.expect("window ≥ 1");
        final_h = Some(h);
    }
    Ok(final_h.expect("gru_layers ≥ 1"))
}

/// Edge index lists for a batched graph, built once per (graph, batch size).
struct EdgeIndex {
    src: Rc<Vec<usize>>, // row b·N+u per edge instance
    dst: Rc<Vec<usize>>, // row b·N+v per edge instance
    offsets: Rc<Vec<usize>>, // softmax groups: one group per (b, u)
}

fn edge_index(graph: &GraphSpec, batch: usize) -> Result<EdgeIndex> {
    let n = graph.n_nodes();
    let mut per_node: Vec<Vec<usize>> = Vec::with_capacity(n);
    for u in 0..n {
        let nb = graph.neighbors(u);
        if nb.is_empty() {
            return Err(StgnnError::IsolatedNode { node: u });
        }
        per_node.push(nb);
    }
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut offsets = vec![0usize];
    for b in 0..batch {
        for u in 0..n {
            for &v in &per_node[u] {
                src.push(b * n + u);
                dst.push(b * n + v);
            }
            offsets.push(src.len());
        }
    }
    Ok(EdgeIndex { src: Rc::new(src), dst: Rc::new(dst), offsets: Rc::new(offsets) })
}

/// Single-head graph attention over per-node hidden states h ((B·N)×d):
/// e_{u,v} = LeakyReLU(aᵀ[Wh_u ‖ Wh_v]), α = softmax over v ∈ N(u),
/// out_u = Σ_v α_{u,v}·Wh_v.
pub fn gat_forward<T: Scalar>(
    h: &Value<T>,
    graph: &GraphSpec,
    params: &TapedParams<T>,
    leaky_slope: T,
) -> Result<Value<T>> {
    let (rows, _d) = h.shape();
    let n = graph.n_nodes();
    let batch = rows / n;
    if batch * n != rows {
        return Err(StgnnError::ShapeMismatch { what: "gat input", expected: (n, 0), got: h.shape() });
    }
    let idx = edge_index(graph, batch)?;
    let hw = h.matmul(&params.gat_w)?;
    let hu = hw.gather_rows(idx.src.clone())?;
    let hv = hw.gather_rows(idx.dst.clone())?;
    let e = hu.concat_cols(&hv)?.matmul(&params.gat_a)?.leaky_relu(leaky_slope);
    let alpha = e.softmax_groups(idx.offsets)?;
    let weighted = alpha.mul_col_broadcast(&hv)?;
    Ok(weighted.scatter_add_rows(idx.src, rows)?)
}

/// Full forward pass: features Z (b×(N·d)) for alignment plus the prediction.
pub fn forward<T: Scalar>(
    tape: &Tape<T>,
    input: &InputBatch<T>,
    graph: &GraphSpec,
    params: &TapedParams<T>,
    cfg: &ModelConfig,
) -> Result<(FeatureBatch<T>, Value<T>)> {
    if graph.n_nodes() != cfg.n_nodes {
        return Err(StgnnError::ShapeMismatch {
            what: "graph size",
            expected: (cfg.n_nodes, cfg.n_nodes),
            got: (graph.n_nodes(), graph.n_nodes()),
        });
    }
    let enc = encode(tape, input, params, cfg)?;
    let h = gru_forward(tape, &enc, params, input.window)?;
    let spatial = gat_forward(&h, graph, params, T::from_f64(cfg.leaky_slope))?;
    let features = spatial.reshape(input.batch, cfg.n_nodes * cfg.hidden)?;
    let prediction = features.matmul(&params.reg_w)?.add_row(&params.reg_b)?;
    Ok((FeatureBatch::new(features)?, prediction))
}
