//! Reverse-mode automatic differentiation over matrices.
//!
//! A [`Tape`] records primitive applications in creation order; [`backward`]
//! walks the record once in reverse, accumulating adjoints. The op set is the
//! minimal closure needed by the feature extractor, the regression loss, and
//! the alignment losses, plus fused Gram-matrix ops whose backward passes stay
//! O(b·p²) instead of O(p³) at large feature dimensions.

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

use crate::linalg::{
    self, kept_eigen_count, LinalgError, SpdMatrix,
};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("backward needs a 1x1 loss, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

type Result<V> = std::result::Result<V, AutodiffError>;

/// Saved spectrum for the fused Gram-matrix spectral ops.
#[derive(Debug, Clone)]
struct SavedEigen<T> {
    vectors: Matrix<T>, // p×p, column i ↔ values[i]
    values: Vec<T>,
    kept: usize,
}

/// V_k · Λ_k⁻¹ · V_kᵀ through two thin matmuls, O(p²·k).
fn pinv_from_spectrum<T: Scalar>(saved: &SavedEigen<T>) -> Matrix<T> {
    let p = saved.vectors.rows();
    let k = saved.kept;
    let vk = Matrix::from_fn(p, k, |i, j| saved.vectors.get(i, j));
    let vk_scaled = Matrix::from_fn(p, k, |i, j| saved.vectors.get(i, j) / saved.values[j]);
    vk_scaled.matmul(&vk.transpose())
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    /// Broadcast a 1×c row over every row of the first input.
    AddRow(usize, usize),
    ScalarMul(usize, T),
    AddScalar(usize, T),
    ElemMul(usize, usize),
    ElemDiv(usize, usize),
    ConcatCols(usize, usize),
    ConcatRows(usize, usize),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Transpose(usize),
    Sigmoid(usize),
    Tanh(usize),
    LeakyRelu(usize, T),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Clamp(usize, T, T),
    Sum(usize),
    Mean(usize),
    L1Norm(usize),
    SumCols(usize),
    L2NormCols(usize),
    /// Softmax within contiguous groups of a column vector.
    SoftmaxGroups(usize, Rc<Vec<usize>>),
    GatherRows(usize, Rc<Vec<usize>>),
    ScatterAddRows(usize, Rc<Vec<usize>>),
    /// Scale row i of the second input by entry i of the first (n×1) input.
    MulColBroadcast(usize, usize),
    Reshape(usize),
    /// Squared Euclidean distances between rows of the two inputs.
    PairwiseSqDist(usize, usize),
    /// Inverse of an SPD matrix; adjoint is −A⁻¹·Ḡ·A⁻¹.
    SpdInverse(usize),
    /// Dominant eigenvalue of an SPD matrix; adjoint is ḡ·v·vᵀ.
    LambdaMax(usize, Vec<T>),
    /// Fused (ZᵀZ + αI)⁻¹ from the feature matrix; O(b·p²) backward.
    TikhonovInverse(usize),
    /// Fused λ_max(ZᵀZ + αI) from the feature matrix.
    TikhonovLambdaMax(usize, Vec<T>),
    /// Fused thresholded pseudo-inverse of ZᵀZ from the feature matrix.
    PinvGram(usize, SavedEigen<T>),
    /// Fused leading eigenvalues of ZᵀZ (kept per energy threshold).
    TopkEigvals(usize, SavedEigen<T>),
    StopGradient,
}

#[derive(Debug)]
struct Node<T> {
    data: Matrix<T>,
    grad: Option<Matrix<T>>,
    op: Op<T>,
}

/// Shared record of primitive applications. Cloning is cheap (ref-counted);
/// a tape is single-threaded by construction.
#[derive(Clone)]
pub struct Tape<T> {
    nodes: Rc<RefCell<Vec<Node<T>>>>,
}

/// Handle to one node on a tape.
#[derive(Clone)]
pub struct Value<T> {
    tape: Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Value<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Value").field("id", &self.id).finish()
    }
}


impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Rc::new(RefCell::new(Vec::new())) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, data: Matrix<T>, op: Op<T>) -> Value<T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { data, grad: None, op });
        Value { tape: self.clone(), id }
    }

    /// Record a leaf holding `data`. Leaves accumulate gradients; whether the
    /// caller reads them is its own business (parameters do, inputs may).
    pub fn leaf(&self, data: Matrix<T>) -> Value<T> {
        self.push(data, Op::Leaf)
    }

    /// Run reverse-mode accumulation from a scalar loss. Each node's gradient
    /// is replaced by ∂loss/∂node; nodes not reachable from the loss get zero.
    pub fn backward(&self, loss: &Value<T>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let shape = nodes[loss.id].data.shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NotScalar { rows: shape.0, cols: shape.1 });
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Matrix<T>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(Matrix::from_vec(1, 1, vec![T::one()]));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            accumulate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, grad) in nodes.iter_mut().zip(grads) {
            node.grad = grad;
        }
        Ok(())
    }
}

/// Add `delta` into the gradient slot for `id`, allocating on first touch.
fn bump<T: Scalar>(grads: &mut [Option<Matrix<T>>], id: usize, shape: (usize, usize), delta: &Matrix<T>) {
    match &mut grads[id] {
        Some(g) => g.add_scaled(delta, T::one()),
        slot => {
            debug_assert_eq!(delta.shape(), shape);
            *slot = Some(delta.clone());
        }
    }
}

#[allow(clippy::too_many_lines)]
fn accumulate<T: Scalar>(nodes: &[Node<T>], id: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
    let node = &nodes[id];
    let shape_of = |i: usize| nodes[i].data.shape();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let da = g.matmul(&nodes[*b].data.transpose());
            let db = nodes[*a].data.transpose().matmul(g);
            bump(grads, *a, shape_of(*a), &da);
            bump(grads, *b, shape_of(*b), &db);
        }
        Op::Add(a, b) => {
            bump(grads, *a, shape_of(*a), g);
            bump(grads, *b, shape_of(*b), g);
        }
        Op::Sub(a, b) => {
            bump(grads, *a, shape_of(*a), g);
            bump(grads, *b, shape_of(*b), &g.scale(-T::one()));
        }
        Op::AddRow(a, row) => {
            bump(grads, *a, shape_of(*a), g);
            let cols = g.cols();
            let mut dr = Matrix::zeros(1, cols);
            for i in 0..g.rows() {
                for j in 0..cols {
                    let v = dr.get(0, j) + g.get(i, j);
                    dr.set(0, j, v);
                }
            }
            bump(grads, *row, shape_of(*row), &dr);
        }
        Op::ScalarMul(a, s) => bump(grads, *a, shape_of(*a), &g.scale(*s)),
        Op::AddScalar(a, _) => bump(grads, *a, shape_of(*a), g),
        Op::ElemMul(a, b) => {
            bump(grads, *a, shape_of(*a), &g.zip_with(&nodes[*b].data, |x, y| x * y));
            bump(grads, *b, shape_of(*b), &g.zip_with(&nodes[*a].data, |x, y| x * y));
        }
        Op::ElemDiv(a, b) => {
            let xb = &nodes[*b].data;
            let xa = &nodes[*a].data;
            bump(grads, *a, shape_of(*a), &g.zip_with(xb, |gv, y| gv / y));
            let db = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                let y = xb.get(i, j);
                -g.get(i, j) * xa.get(i, j) / (y * y)
            });
            bump(grads, *b, shape_of(*b), &db);
        }
        Op::ConcatCols(a, b) => {
            let ca = shape_of(*a).1;
            let da = Matrix::from_fn(g.rows(), ca, |i, j| g.get(i, j));
            let db = Matrix::from_fn(g.rows(), g.cols() - ca, |i, j| g.get(i, j + ca));
            bump(grads, *a, shape_of(*a), &da);
            bump(grads, *b, shape_of(*b), &db);
        }
        Op::ConcatRows(a, b) => {
            let ra = shape_of(*a).0;
            let da = Matrix::from_fn(ra, g.cols(), |i, j| g.get(i, j));
            let db = Matrix::from_fn(g.rows() - ra, g.cols(), |i, j| g.get(i + ra, j));
            bump(grads, *a, shape_of(*a), &da);
            bump(grads, *b, shape_of(*b), &db);
        }
        Op::SliceCols(a, start) => {
            let (r, c) = shape_of(*a);
            let mut da = Matrix::zeros(r, c);
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    da.set(i, start + j, g.get(i, j));
                }
            }
            bump(grads, *a, (r, c), &da);
        }
        Op::SliceRows(a, start) => {
            let (r, c) = shape_of(*a);
            let mut da = Matrix::zeros(r, c);
            for i in 0..g.rows() {
                da.row_mut(start + i).copy_from_slice(g.row(i));
            }
            bump(grads, *a, (r, c), &da);
        }
        Op::Transpose(a) => bump(grads, *a, shape_of(*a), &g.transpose()),
        Op::Sigmoid(a) => {
            let out = &node.data;
            bump(grads, *a, shape_of(*a), &g.zip_with(out, |gv, s| gv * s * (T::one() - s)));
        }
        Op::Tanh(a) => {
            let out = &node.data;
            bump(grads, *a, shape_of(*a), &g.zip_with(out, |gv, t| gv * (T::one() - t * t)));
        }
        Op::LeakyRelu(a, slope) => {
            let x = &nodes[*a].data;
            bump(grads, *a, shape_of(*a), &g.zip_with(x, |gv, xv| {
                if xv < T::zero() { gv * *slope } else { gv }
            }));
        }
        Op::Exp(a) => {
            bump(grads, *a, shape_of(*a), &g.zip_with(&node.data, |gv, e| gv * e));
        }
        Op::Log(a) => {
            bump(grads, *a, shape_of(*a), &g.zip_with(&nodes[*a].data, |gv, x| gv / x));
        }
        Op::Sqrt(a) => {
            // Guarded at the origin so alignment terms stay finite when two
            // columns are exactly parallel.
            let floor = T::from_f64(1e-6);
            let two = T::from_f64(2.0);
            bump(grads, *a, shape_of(*a), &g.zip_with(&node.data, |gv, s| gv / (two * s.max(floor))));
        }
        Op::Clamp(a, lo, hi) => {
            let x = &nodes[*a].data;
            bump(grads, *a, shape_of(*a), &g.zip_with(x, |gv, xv| {
                if xv >= *lo && xv <= *hi { gv } else { T::zero() }
            }));
        }
        Op::Sum(a) => {
            let s = g.get(0, 0);
            let (r, c) = shape_of(*a);
            bump(grads, *a, (r, c), &Matrix::from_fn(r, c, |_, _| s));
        }
        Op::Mean(a) => {
            let (r, c) = shape_of(*a);
            let s = g.get(0, 0) / T::from_f64((r * c) as f64);
            bump(grads, *a, (r, c), &Matrix::from_fn(r, c, |_, _| s));
        }
        Op::L1Norm(a) => {
            let s = g.get(0, 0);
            let x = &nodes[*a].data;
            bump(grads, *a, shape_of(*a), &x.map(|v| {
                if v > T::zero() {
                    s
                } else if v < T::zero() {
                    -s
                } else {
                    T::zero()
                }
            }));
        }
        Op::SumCols(a) => {
            let (r, c) = shape_of(*a);
            bump(grads, *a, (r, c), &Matrix::from_fn(r, c, |_, j| g.get(0, j)));
        }
        Op::L2NormCols(a) => {
            let (r, c) = shape_of(*a);
            let x = &nodes[*a].data;
            let norms = &node.data;
            let floor = T::from_f64(1e-30);
            bump(grads, *a, (r, c), &Matrix::from_fn(r, c, |i, j| {
                g.get(0, j) * x.get(i, j) / norms.get(0, j).max(floor)
            }));
        }
        Op::SoftmaxGroups(a, offsets) => {
            let alpha = &node.data;
            let (r, c) = shape_of(*a);
            let mut da = Matrix::zeros(r, c);
            for w in offsets.windows(2) {
                let (lo, hi) = (w[0], w[1]);
                let mut dot = T::zero();
                for i in lo..hi {
                    dot += alpha.get(i, 0) * g.get(i, 0);
                }
                for i in lo..hi {
                    da.set(i, 0, alpha.get(i, 0) * (g.get(i, 0) - dot));
                }
            }
            bump(grads, *a, (r, c), &da);
        }
        Op::GatherRows(a, idx) => {
            let (r, c) = shape_of(*a);
            let mut da = Matrix::zeros(r, c);
            for (out_i, &src) in idx.iter().enumerate() {
                let grow = g.row(out_i);
                let drow = da.row_mut(src);
                for j in 0..c {
                    drow[j] += grow[j];
                }
            }
            bump(grads, *a, (r, c), &da);
        }
        Op::ScatterAddRows(a, idx) => {
            let (r, c) = shape_of(*a);
            let mut da = Matrix::zeros(r, c);
            for (src_i, &dst) in idx.iter().enumerate() {
                da.row_mut(src_i).copy_from_slice(g.row(dst));
            }
            bump(grads, *a, (r, c), &da);
        }
        Op::MulColBroadcast(col, a) => {
            let x = &nodes[*a].data;
            let cvec = &nodes[*col].data;
            let (r, c) = shape_of(*a);
            let mut dcol = Matrix::zeros(r, 1);
            let mut da = Matrix::zeros(r, c);
            for i in 0..r {
                let s = cvec.get(i, 0);
                let mut acc = T::zero();
                for j in 0..c {
                    acc += g.get(i, j) * x.get(i, j);
                    da.set(i, j, g.get(i, j) * s);
                }
                dcol.set(i, 0, acc);
            }
            bump(grads, *col, shape_of(*col), &dcol);
            bump(grads, *a, (r, c), &da);
        }
        Op::Reshape(a) => {
            let (r, c) = shape_of(*a);
            bump(grads, *a, (r, c), &g.reshaped(r, c));
        }
        Op::PairwiseSqDist(xa, ya) => {
            let x = &nodes[*xa].data;
            let y = &nodes[*ya].data;
            let p = x.cols();
            let two = T::from_f64(2.0);
            let mut dx = Matrix::zeros(x.rows(), p);
            let mut dy = Matrix::zeros(y.rows(), p);
            for i in 0..x.rows() {
                for j in 0..y.rows() {
                    let gij = g.get(i, j);
                    if gij == T::zero() {
                        continue;
                    }
                    for k in 0..p {
                        let diff = x.get(i, k) - y.get(j, k);
                        let v = two * gij * diff;
                        dx.set(i, k, dx.get(i, k) + v);
                        dy.set(j, k, dy.get(j, k) - v);
                    }
                }
            }
            bump(grads, *xa, x.shape(), &dx);
            bump(grads, *ya, y.shape(), &dy);
        }
        Op::SpdInverse(a) => {
            // dA = −A⁻¹ · Ḡ · A⁻¹ with A⁻¹ = this node's output.
            let inv = &node.data;
            let da = inv.matmul(g).matmul(inv).scale(-T::one());
            bump(grads, *a, shape_of(*a), &da);
        }
        Op::LambdaMax(a, v) => {
            let s = g.get(0, 0);
            let n = v.len();
            let da = Matrix::from_fn(n, n, |i, j| s * v[i] * v[j]);
            bump(grads, *a, (n, n), &da);
        }
        Op::TikhonovInverse(z) => {
            // W = (ZᵀZ + αI)⁻¹; dZ = −Z·W·(Ḡ + Ḡᵀ)·W, all O(b·p²).
            let w = &node.data;
            let zm = &nodes[*z].data;
            let zw = zm.matmul(w);
            let gsym = g.add(&g.transpose());
            let dz = zw.matmul(&gsym).matmul(w).scale(-T::one());
            bump(grads, *z, zm.shape(), &dz);
        }
        Op::TikhonovLambdaMax(z, v) => {
            // λ = vᵀ(ZᵀZ + αI)v  ⇒  dZ = 2·(Zv)·vᵀ.
            let s = g.get(0, 0);
            let zm = &nodes[*z].data;
            let zv = zm.matvec(v);
            let two = T::from_f64(2.0);
            let dz = Matrix::from_fn(zm.rows(), zm.cols(), |i, j| two * s * zv[i] * v[j]);
            bump(grads, *z, zm.shape(), &dz);
        }
        Op::PinvGram(z, saved) => {
            let dz = pinv_gram_backward(&nodes[*z].data, &node.data, saved, g);
            bump(grads, *z, shape_of(*z), &dz);
        }
        Op::TopkEigvals(z, saved) => {
            // dλ_i = v_iᵀ dA v_i with A = ZᵀZ  ⇒  dZ = 2·Σ ḡ_i (Zv_i) v_iᵀ.
            let zm = &nodes[*z].data;
            let (b, p) = zm.shape();
            let two = T::from_f64(2.0);
            let mut dz = Matrix::zeros(b, p);
            for i in 0..saved.kept {
                let gi = g.get(i, 0);
                if gi == T::zero() {
                    continue;
                }
                let v = saved.vectors.col(i);
                let zv = zm.matvec(&v);
                for r in 0..b {
                    let s = two * gi * zv[r];
                    for c in 0..p {
                        dz.set(r, c, dz.get(r, c) + s * v[c]);
                    }
                }
            }
            bump(grads, *z, (b, p), &dz);
        }
        Op::StopGradient => {}
    }
}

/// Adjoint of the thresholded pseudo-inverse of ZᵀZ w.r.t. Z, through the
/// symmetric eigendecomposition adjoint. Costs O(p²·k) plus one O(b·p²) chain.
fn pinv_gram_backward<T: Scalar>(
    z: &Matrix<T>,
    _pinv: &Matrix<T>,
    saved: &SavedEigen<T>,
    g: &Matrix<T>,
) -> Matrix<T> {
    let p = saved.vectors.rows();
    let k = saved.kept;
    let gsym = g.add(&g.transpose()).scale(T::from_f64(0.5));
    // V̄ = 2·Ḡ_sym · V_k · Λ_k⁻¹ (p×k) and Λ̄_i = −λ_i⁻²·v_iᵀ·Ḡ·v_i.
    let vk = Matrix::from_fn(p, k, |i, j| saved.vectors.get(i, j));
    let gv = gsym.matmul(&vk);
    let mut vbar = Matrix::zeros(p, k);
    let mut lbar = vec![T::zero(); k];
    let two = T::from_f64(2.0);
    for i in 0..k {
        let lam = saved.values[i];
        let inv_lam = T::one() / lam;
        let mut dot = T::zero();
        for r in 0..p {
            vbar.set(r, i, two * gv.get(r, i) * inv_lam);
            dot += saved.vectors.get(r, i) * gv.get(r, i);
        }
        lbar[i] = -inv_lam * inv_lam * dot;
    }
    // Eigen adjoint: Ā = V·(diag(Λ̄) + F ∘ (Vᵀ V̄))·V_kᵀ, F_ji = 1/(λ_i − λ_j).
    let m = saved.vectors.transpose().matmul(&vbar); // p×k
    let lam_scale = saved.values[0].abs().max(T::from_f64(1e-300));
    let degenerate = T::from_f64(1e-12) * lam_scale;
    let mut inner = Matrix::zeros(p, k);
    for j in 0..p {
        for i in 0..k {
            if j == i {
                inner.set(j, i, lbar[i]);
            } else {
                let denom = saved.values[i] - saved.values[j];
                if denom.abs() > degenerate {
                    inner.set(j, i, m.get(j, i) / denom);
                }
            }
        }
    }
    let abar = saved.vectors.matmul(&inner).matmul(&vk.transpose()); // p×p
    let abar_sym = abar.add(&abar.transpose()).scale(T::from_f64(0.5));
    // dZ = Z·(Ā + Āᵀ) = 2·Z·Ā_sym.
    z.matmul(&abar_sym).scale(T::from_f64(2.0))
}

macro_rules! unary_same_shape {
    ($name:ident, $op:ident, $f:expr) => {
        pub fn $name(&self) -> Value<T> {
            let data = self.data_ref(|m| m.map($f));
            self.tape.push(data, Op::$op(self.id))
        }
    };
}

impl<T: Scalar> Value<T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data_ref(|m| m.shape())
    }

    pub fn data(&self) -> Matrix<T> {
        self.data_ref(|m| m.clone())
    }

    /// Gradient after `backward`; zero matrix if the node was unreachable.
    pub fn grad(&self) -> Matrix<T> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        node.grad.clone().unwrap_or_else(|| {
            let (r, c) = node.data.shape();
            Matrix::zeros(r, c)
        })
    }

    pub fn scalar(&self) -> T {
        self.data_ref(|m| {
            assert_eq!(m.shape(), (1, 1), "scalar() on a {}x{} value", m.rows(), m.cols());
            m.get(0, 0)
        })
    }

    fn data_ref<R>(&self, f: impl FnOnce(&Matrix<T>) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].data)
    }

    fn check_same_shape(&self, other: &Value<T>, op: &'static str) -> Result<()> {
        let lhs = self.shape();
        let rhs = other.shape();
        if lhs != rhs {
            return Err(AutodiffError::ShapeMismatch { op, lhs, rhs });
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Value<T>) -> Result<Value<T>> {
        let lhs = self.shape();
        let rhs = other.shape();
        if lhs.1 != rhs.0 {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs, rhs });
        }
        let data = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].data.matmul(&nodes[other.id].data)
        };
        Ok(self.tape.push(data, Op::MatMul(self.id, other.id)))
    }

    pub fn add(&self, other: &Value<T>) -> Result<Value<T>> {
        self.check_same_shape(other, "add")?;
        let data = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].data.add(&nodes[other.id].data)
        };
        Ok(self.tape.push(data, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Value<T>) -> Result<Value<T>> {
        self.check_same_shape(other, "sub")?;
        let data = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].data.sub(&nodes[other.id].data)
        };
        Ok(self.tape.push(data, Op::Sub(self.id, other.id)))
    }

    /// Add a 1×c row vector to every row.
    pub fn add_row(&self, row: &Value<T>) -> Result<Value<T>> {
        let lhs = self.shape();
        let rhs = row.shape();
        if rhs.0 != 1 || rhs.1 != lhs.1 {
            return Err(AutodiffError::ShapeMismatch { op: "add_row", lhs, rhs });
        }
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].data;
            let r = &nodes[row.id].data;
            Matrix::from_fn(lhs.0, lhs.1, |i, j| a.get(i, j) + r.get(0, j))
        };
        Ok(self.tape.push(data, Op::AddRow(self.id, row.id)))
    }

    pub fn scalar_mul(&self, s: T) -> Value<T> {
        let data = self.data_ref(|m| m.scale(s));
        self.tape.push(data, Op::ScalarMul(self.id, s))
    }

    pub fn add_scalar(&self, s: T) -> Value<T> {
        let data = self.data_ref(|m| m.map(|x| x + s));
        self.tape.push(data, Op::AddScalar(self.id, s))
    }

    pub fn elem_mul(&self, other: &Value<T>) -> Result<Value<T>> {
        self.check_same_shape(other, "elem_mul")?;
        let data = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].data.zip_with(&nodes[other.id].data, |a, b| a * b)
        };
        Ok(self.tape.push(data, Op::ElemMul(self.id, other.id)))
    }

    pub fn elem_div(&self, other: &Value<T>) -> Result<Value<T>> {
        self.check_same_shape(other, "elem_div")?;
        let data = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].data.zip_with(&nodes[other.id].data, |a, b| a / b)
        };
        Ok(self.tape.push(data, Op::ElemDiv(self.id, other.id)))
    }

    pub fn concat_cols(&self, other: &Value<T>) -> Result<Value<T>> {
        let lhs = self.shape();
        let rhs = other.shape();
        if lhs.0 != rhs.0 {
            return Err(AutodiffError::ShapeMismatch { op: "concat_cols", lhs, rhs });
        }
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].data;
            let b = &nodes[other.id].data;
            Matrix::from_fn(lhs.0, lhs.1 + rhs.1, |i, j| {
                if j < lhs.1 { a.get(i, j) } else { b.get(i, j - lhs.1) }
            })
        };
        Ok(self.tape.push(data, Op::ConcatCols(self.id, other.id)))
    }

    pub fn concat_rows(&self, other: &Value<T>) -> Result<Value<T>> {
        let lhs = self.shape();
        let rhs = other.shape();
        if lhs.1 != rhs.1 {
            return Err(AutodiffError::ShapeMismatch { op: "concat_rows", lhs, rhs });
        }
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].data;
            let b = &nodes[other.id].data;
            Matrix::from_fn(lhs.0 + rhs.0, lhs.1, |i, j| {
                if i < lhs.0 { a.get(i, j) } else { b.get(i - lhs.0, j) }
            })
        };
        Ok(self.tape.push(data, Op::ConcatRows(self.id, other.id)))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Value<T>> {
        let lhs = self.shape();
        if start + len > lhs.1 {
            return Err(AutodiffError::ShapeMismatch { op: "slice_cols", lhs, rhs: (start, len) });
        }
        let data = self.data_ref(|m| Matrix::from_fn(lhs.0, len, |i, j| m.get(i, start + j)));
        Ok(self.tape.push(data, Op::SliceCols(self.id, start)))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Value<T>> {
        let lhs = self.shape();
        if start + len > lhs.0 {
            return Err(AutodiffError::ShapeMismatch { op: "slice_rows", lhs, rhs: (start, len) });
        }
        let data = self.data_ref(|m| Matrix::from_fn(len, lhs.1, |i, j| m.get(start + i, j)));
        Ok(self.tape.push(data, Op::SliceRows(self.id, start)))
    }

    pub fn transpose(&self) -> Value<T> {
        let data = self.data_ref(|m| m.transpose());
        self.tape.push(data, Op::Transpose(self.id))
    }

    unary_same_shape!(sigmoid, Sigmoid, |x| T::one() / (T::one() + (-x).exp()));
    unary_same_shape!(tanh, Tanh, |x| x.tanh());
    unary_same_shape!(exp, Exp, |x| x.exp());
    unary_same_shape!(log, Log, |x| x.ln());
    unary_same_shape!(sqrt, Sqrt, |x| x.sqrt());

    pub fn leaky_relu(&self, slope: T) -> Value<T> {
        let data = self.data_ref(|m| m.map(|x| if x < T::zero() { x * slope } else { x }));
        self.tape.push(data, Op::LeakyRelu(self.id, slope))
    }

    pub fn clamp(&self, lo: T, hi: T) -> Value<T> {
        let data = self.data_ref(|m| m.map(|x| x.max(lo).min(hi)));
        self.tape.push(data, Op::Clamp(self.id, lo, hi))
    }

    pub fn sum(&self) -> Value<T> {
        let data = self.data_ref(|m| Matrix::from_vec(1, 1, vec![m.data().iter().copied().sum()]));
        self.tape.push(data, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Value<T> {
        let data = self.data_ref(|m| {
            let n = T::from_f64(m.data().len() as f64);
            Matrix::from_vec(1, 1, vec![m.data().iter().copied().sum::<T>() / n])
        });
        self.tape.push(data, Op::Mean(self.id))
    }

    pub fn l1_norm(&self) -> Value<T> {
        let data = self.data_ref(|m| {
            Matrix::from_vec(1, 1, vec![m.data().iter().map(|x| x.abs()).sum()])
        });
        self.tape.push(data, Op::L1Norm(self.id))
    }

    pub fn sum_cols(&self) -> Value<T> {
        let data = self.data_ref(|m| {
            Matrix::from_fn(1, m.cols(), |_, j| (0..m.rows()).map(|i| m.get(i, j)).sum())
        });
        self.tape.push(data, Op::SumCols(self.id))
    }

    /// Euclidean norm of each column, as a 1×c row.
    pub fn l2_norm_cols(&self) -> Value<T> {
        let data = self.data_ref(|m| {
            Matrix::from_fn(1, m.cols(), |_, j| {
                (0..m.rows()).map(|i| m.get(i, j) * m.get(i, j)).sum::<T>().sqrt()
            })
        });
        self.tape.push(data, Op::L2NormCols(self.id))
    }

    /// Softmax within contiguous groups of an n×1 column. `offsets` are the
    /// group boundaries: group g spans rows offsets[g]..offsets[g+1].
    pub fn softmax_groups(&self, offsets: Rc<Vec<usize>>) -> Result<Value<T>> {
        let lhs = self.shape();
        if lhs.1 != 1 || offsets.last().copied() != Some(lhs.0) || offsets.first().copied() != Some(0) {
            return Err(AutodiffError::ShapeMismatch { op: "softmax_groups", lhs, rhs: (offsets.len(), 1) });
        }
        let data = self.data_ref(|m| {
            let mut out = Matrix::zeros(lhs.0, 1);
            for w in offsets.windows(2) {
                let (lo, hi) = (w[0], w[1]);
                let max = (lo..hi).map(|i| m.get(i, 0)).fold(T::neg_infinity(), T::max);
                let mut denom = T::zero();
                for i in lo..hi {
                    let e = (m.get(i, 0) - max).exp();
                    out.set(i, 0, e);
                    denom += e;
                }
                for i in lo..hi {
                    out.set(i, 0, out.get(i, 0) / denom);
                }
            }
            out
        });
        Ok(self.tape.push(data, Op::SoftmaxGroups(self.id, offsets)))
    }

    pub fn gather_rows(&self, idx: Rc<Vec<usize>>) -> Result<Value<T>> {
        let lhs = self.shape();
        if idx.iter().any(|&i| i >= lhs.0) {
            return Err(AutodiffError::ShapeMismatch { op: "gather_rows", lhs, rhs: (idx.len(), 0) });
        }
        let data = self.data_ref(|m| {
            Matrix::from_fn(idx.len(), lhs.1, |i, j| m.get(idx[i], j))
        });
        Ok(self.tape.push(data, Op::GatherRows(self.id, idx)))
    }

    /// Scatter-add each row i into output row idx[i] of an `out_rows`×c zero
    /// matrix.
    pub fn scatter_add_rows(&self, idx: Rc<Vec<usize>>, out_rows: usize) -> Result<Value<T>> {
        let lhs = self.shape();
        if idx.len() != lhs.0 || idx.iter().any(|&i| i >= out_rows) {
            return Err(AutodiffError::ShapeMismatch { op: "scatter_add_rows", lhs, rhs: (idx.len(), out_rows) });
        }
        let data = self.data_ref(|m| {
            let mut out = Matrix::zeros(out_rows, lhs.1);
            for (i, &dst) in idx.iter().enumerate() {
                let src = m.row(i);
                let drow = out.row_mut(dst);
                for j in 0..lhs.1 {
                    drow[j] += src[j];
                }
            }
            out
        });
        Ok(self.tape.push(data, Op::ScatterAddRows(self.id, idx)))
    }

    /// Scale row i of `other` by entry i of this n×1 column.
    pub fn mul_col_broadcast(&self, other: &Value<T>) -> Result<Value<T>> {
        let lhs = self.shape();
        let rhs = other.shape();
        if lhs.1 != 1 || lhs.0 != rhs.0 {
            return Err(AutodiffError::ShapeMismatch { op: "mul_col_broadcast", lhs, rhs });
        }
        let data = {
            let nodes = self.tape.nodes.borrow();
            let col = &nodes[self.id].data;
            let m = &nodes[other.id].data;
            Matrix::from_fn(rhs.0, rhs.1, |i, j| col.get(i, 0) * m.get(i, j))
        };
        Ok(self.tape.push(data, Op::MulColBroadcast(self.id, other.id)))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Value<T>> {
        let lhs = self.shape();
        if rows * cols != lhs.0 * lhs.1 {
            return Err(AutodiffError::ShapeMismatch { op: "reshape", lhs, rhs: (rows, cols) });
        }
        let data = self.data_ref(|m| m.reshaped(rows, cols));
        Ok(self.tape.push(data, Op::Reshape(self.id)))
    }

    /// m×n matrix of squared Euclidean distances between rows.
    pub fn pairwise_sqdist(&self, other: &Value<T>) -> Result<Value<T>> {
        let lhs = self.shape();
        let rhs = other.shape();
        if lhs.1 != rhs.1 {
            return Err(AutodiffError::ShapeMismatch { op: "pairwise_sqdist", lhs, rhs });
        }
        let data = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].data;
            let y = &nodes[other.id].data;
            Matrix::from_fn(lhs.0, rhs.0, |i, j| {
                (0..lhs.1)
                    .map(|k| {
                        let d = x.get(i, k) - y.get(j, k);
                        d * d
                    })
                    .sum()
            })
        };
        Ok(self.tape.push(data, Op::PairwiseSqDist(self.id, other.id)))
    }

    /// Differentiable SPD inverse (Cholesky-backed forward).
    pub fn spd_inverse(&self) -> Result<Value<T>> {
        let data = {
            let nodes = self.tape.nodes.borrow();
            let spd = SpdMatrix::new(nodes[self.id].data.clone())?;
            linalg::spd_inverse(&spd)?
        };
        Ok(self.tape.push(data, Op::SpdInverse(self.id)))
    }

    /// Differentiable dominant eigenvalue of an SPD value, via power
    /// iteration; the adjoint uses the converged eigenvector outer product.
    pub fn lambda_max(&self, max_iters: usize, tol: T, seed: u64) -> Result<Value<T>> {
        let (lam, v) = {
            let nodes = self.tape.nodes.borrow();
            let spd = SpdMatrix::new(nodes[self.id].data.clone())?;
            linalg::power_iteration_with_vector(&spd, max_iters, tol, seed)
        };
        let data = Matrix::from_vec(1, 1, vec![lam]);
        Ok(self.tape.push(data, Op::LambdaMax(self.id, v)))
    }

    /// Fused (ZᵀZ + αI)⁻¹ of a b×p feature value; backward chains straight to
    /// Z in O(b·p²). When b < p the forward uses the Woodbury identity
    /// (ZᵀZ + αI)⁻¹ = (I − Zᵀ(ZZᵀ + αI)⁻¹Z)/α, so only a b×b system is
    /// factorized; otherwise it goes through the Cholesky-backed SPD inverse.
    pub fn tikhonov_inverse(&self, alpha: T) -> Result<Value<T>> {
        let data = {
            let nodes = self.tape.nodes.borrow();
            let z = &nodes[self.id].data;
            let (b, p) = z.shape();
            if b < p {
                let small = SpdMatrix::tikhonov_gram(&z.transpose(), alpha);
                let inv_small = linalg::spd_inverse(&small)?;
                let mid = z.transpose().matmul(&inv_small).matmul(z);
                let inv_alpha = T::one() / alpha;
                Matrix::from_fn(p, p, |i, j| {
                    let id = if i == j { T::one() } else { T::zero() };
                    (id - mid.get(i, j)) * inv_alpha
                })
            } else {
                let spd = SpdMatrix::tikhonov_gram(z, alpha);
                linalg::spd_inverse(&spd)?
            }
        };
        Ok(self.tape.push(data, Op::TikhonovInverse(self.id)))
    }

    /// Fused λ_max(ZᵀZ + αI) of a b×p feature value, via power iteration.
    /// When b < p the iteration runs on the b×b dual ZZᵀ + αI (same nonzero
    /// spectrum); the saved eigenvector is mapped back as v ∝ Zᵀu.
    pub fn tikhonov_lambda_max(&self, alpha: T, max_iters: usize, tol: T, seed: u64) -> Result<Value<T>> {
        let (lam, v) = {
            let nodes = self.tape.nodes.borrow();
            let z = &nodes[self.id].data;
            let (b, p) = z.shape();
            if b < p {
                let small = SpdMatrix::tikhonov_gram(&z.transpose(), alpha);
                let (lam, u) = linalg::power_iteration_with_vector(&small, max_iters, tol, seed);
                let mut v = z.transpose().matvec(&u);
                let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
                if norm > T::zero() {
                    for x in v.iter_mut() {
                        *x /= norm;
                    }
                }
                (lam, v)
            } else {
                let spd = SpdMatrix::tikhonov_gram(z, alpha);
                linalg::power_iteration_with_vector(&spd, max_iters, tol, seed)
            }
        };
        let data = Matrix::from_vec(1, 1, vec![lam]);
        Ok(self.tape.push(data, Op::TikhonovLambdaMax(self.id, v)))
    }

    /// Fused thresholded pseudo-inverse of ZᵀZ from a b×p feature value.
    pub fn pinv_gram(&self, energy_threshold: T) -> Result<Value<T>> {
        let saved = self.gram_spectrum(energy_threshold)?;
        let data = pinv_from_spectrum(&saved);
        Ok(self.tape.push(data, Op::PinvGram(self.id, saved)))
    }

    /// Fused leading eigenvalues (kept per energy threshold) of ZᵀZ, as k×1.
    pub fn topk_eigvals(&self, energy_threshold: T) -> Result<Value<T>> {
        let saved = self.gram_spectrum(energy_threshold)?;
        let data = Matrix::from_fn(saved.kept, 1, |i, _| saved.values[i]);
        Ok(self.tape.push(data, Op::TopkEigvals(self.id, saved)))
    }

    /// Pseudo-inverse and kept eigenvalues from a single eigendecomposition
    /// of ZᵀZ (both are needed together, and the decomposition dominates).
    pub fn pinv_gram_with_eigvals(&self, energy_threshold: T) -> Result<(Value<T>, Value<T>)> {
        let saved = self.gram_spectrum(energy_threshold)?;
        let pinv = pinv_from_spectrum(&saved);
        let vals = Matrix::from_fn(saved.kept, 1, |i, _| saved.values[i]);
        let p = self.tape.push(pinv, Op::PinvGram(self.id, saved.clone()));
        let v = self.tape.push(vals, Op::TopkEigvals(self.id, saved));
        Ok((p, v))
    }

    fn gram_spectrum(&self, energy_threshold: T) -> Result<SavedEigen<T>> {
        let nodes = self.tape.nodes.borrow();
        let z = &nodes[self.id].data;
        let gram = z.transpose().matmul(z);
        let gram = gram.add(&gram.transpose()).scale(T::from_f64(0.5));
        let eig = linalg::sym_eigen(&gram)?;
        let kept = kept_eigen_count(&eig.values, energy_threshold);
        Ok(SavedEigen { vectors: eig.vectors, values: eig.values, kept })
    }

    /// Forward identity, backward zero.
    pub fn stop_gradient(&self) -> Value<T> {
        let data = self.data();
        self.tape.push(data, Op::StopGradient)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type V = Value<f64>;

    fn scalar_leaf(tape: &Tape<f64>, x: f64) -> V {
        tape.leaf(Matrix::from_vec(1, 1, vec![x]))
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = scalar_leaf(&tape, 0.0);
        let y = x.sigmoid();
        assert!((y.scalar() - 0.5).abs() < 1e-15);
        tape.backward(&y).unwrap();
        assert!((x.grad().get(0, 0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn leaky_relu_negative() {
        let tape = Tape::new();
        let x = scalar_leaf(&tape, -1.0);
        let y = x.leaky_relu(0.2);
        assert!((y.scalar() + 0.2).abs() < 1e-15);
        tape.backward(&y).unwrap();
        assert!((x.grad().get(0, 0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let w = tape.leaf(Matrix::from_fn(3, 4, |i, j| (i + j) as f64));
        let loss = w.sum();
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad(), Matrix::from_fn(3, 4, |_, _| 1.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_w() {
        let tape = Tape::new();
        let w = tape.leaf(Matrix::from_fn(2, 3, |i, j| 0.5 + (i * 3 + j) as f64));
        let loss = w.elem_mul(&w).unwrap().sum().scalar_mul(0.5);
        tape.backward(&loss).unwrap();
        assert!(w.grad().max_abs_diff(&w.data()) < 1e-12);
    }

    #[test]
    fn stop_gradient_partial() {
        // f(x) = stop(x)·x at x=2: value 4, grad 2 (only the live factor).
        let tape = Tape::new();
        let x = scalar_leaf(&tape, 2.0);
        let y = x.stop_gradient().elem_mul(&x).unwrap();
        assert!((y.scalar() - 4.0).abs() < 1e-15);
        tape.backward(&y).unwrap();
        assert!((x.grad().get(0, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let w = tape.leaf(Matrix::<f64>::zeros(2, 2));
        match tape.backward(&w) {
            Err(AutodiffError::NotScalar { rows: 2, cols: 2 }) => {}
            other => panic!("expected NotScalar, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Matrix::<f64>::zeros(2, 3));
        let b = tape.leaf(Matrix::<f64>::zeros(4, 5));
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(4, 5)"), "message: {msg}");
    }

    #[test]
    fn matmul_grads() {
        // loss = sum(A·B): dA = 1·Bᵀ, dB = Aᵀ·1
        let tape = Tape::new();
        let a = tape.leaf(Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64 + 1.0));
        let b = tape.leaf(Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64 - 2.0));
        let loss = a.matmul(&b).unwrap().sum();
        tape.backward(&loss).unwrap();
        let ones = Matrix::from_fn(2, 2, |_, _| 1.0);
        assert!(a.grad().max_abs_diff(&ones.matmul(&b.data().transpose())) < 1e-12);
        assert!(b.grad().max_abs_diff(&a.data().transpose().matmul(&ones)) < 1e-12);
    }

    #[test]
    fn softmax_groups_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::from_fn(5, 1, |i, _| i as f64 * 0.3 - 0.5));
        let offsets = Rc::new(vec![0usize, 2, 5]);
        let s = x.softmax_groups(offsets).unwrap();
        let d = s.data();
        assert!((d.get(0, 0) + d.get(1, 0) - 1.0).abs() < 1e-12);
        assert!((d.get(2, 0) + d.get(3, 0) + d.get(4, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_deterministic() {
        let run = || {
            let tape = Tape::new();
            let w = tape.leaf(Matrix::from_fn(4, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0));
            let loss = w.matmul(&w).unwrap().tanh().sum();
            tape.backward(&loss).unwrap();
            w.grad()
        };
        assert_eq!(run(), run());
    }
}
