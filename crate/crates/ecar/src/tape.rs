//! Reverse-mode differentiation on a linear tape.
//!
//! [`Engine`] abstracts over two execution modes that share the kernels in
//! [`crate::kernels`]:
//!   * [`Tape`] records every operation and can replay the records in reverse
//!     to populate gradients (training).
//!   * [`Eval`] executes immediately with no recording (inference).
//!
//! Model forward passes are written once, generically over `Engine`, so the
//! training and inference paths produce identical floats by construction.
//!
//! The tape is append-only: an operation can only reference earlier node ids,
//! which makes the record order a topological order. `backward` walks the
//! records exactly once, in reverse, accumulating adjoints in f32 with the
//! per-op reductions done in f64.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Differentiable input (parameter).
    Leaf,
    /// Non-differentiable input (data); receives no gradient.
    Constant,
    Matmul(Var, Var),
    /// a * b^T where b is stored row-major as (n, k).
    MatmulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    MaskedSoftmax { x: Var, limits: Rc<Vec<usize>> },
    LayerNorm { x: Var, axis: usize, eps: f32 },
    MeanSq(Var, Var),
    Sum(Var),
    GatherRows { table: Var, idx: Rc<Vec<usize>> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    /// f64 value of scalar reductions, for finite-difference oracles.
    scalar_f64: Option<f64>,
    op: Op,
}

/// Common surface of the recording and immediate execution engines.
pub trait Engine {
    type Val: Clone;

    /// Bring in a differentiable input.
    fn leaf(&self, t: &Tensor) -> Self::Val;
    /// Bring in a non-differentiable input.
    fn constant(&self, t: &Tensor) -> Self::Val;
    fn shape_of(&self, v: &Self::Val) -> Vec<usize>;
    /// Materialize the value.
    fn value(&self, v: &Self::Val) -> Vec<f32>;

    fn matmul(&self, a: &Self::Val, b: &Self::Val) -> Self::Val;
    /// a[m,k] * b[n,k]^T -> [m,n].
    fn matmul_bt(&self, a: &Self::Val, b: &Self::Val) -> Self::Val;
    /// a * b^T with row i computed only against the first `limits[i]` rows
    /// of b; the masked tail is exact 0.0. Because the tail of any upstream
    /// gradient is likewise exactly zero (a masked softmax is the only
    /// consumer), the unlimited adjoints remain correct for this forward.
    fn matmul_bt_limited(&self, a: &Self::Val, b: &Self::Val, limits: &[usize]) -> Self::Val;
    /// Elementwise add; same shape, or one side scalar.
    fn add(&self, a: &Self::Val, b: &Self::Val) -> Self::Val;
    /// Elementwise multiply; same shape, or one side scalar.
    fn mul(&self, a: &Self::Val, b: &Self::Val) -> Self::Val;
    fn scale(&self, a: &Self::Val, factor: f32) -> Self::Val;
    fn gelu(&self, a: &Self::Val) -> Self::Val;
    /// Row-wise softmax over the first `limits[i]` columns of row i.
    fn masked_softmax(&self, a: &Self::Val, limits: &[usize]) -> Self::Val;
    /// Softmax over the full last axis of a rank-2 value.
    fn softmax(&self, a: &Self::Val) -> Self::Val {
        let shape = self.shape_of(a);
        assert_eq!(shape.len(), 2, "softmax expects rank-2");
        self.masked_softmax(a, &vec![shape[1]; shape[0]])
    }
    fn layernorm(&self, a: &Self::Val, axis: usize, eps: f32) -> Self::Val;
    /// Mean squared difference, scalar.
    fn mean_sq(&self, a: &Self::Val, b: &Self::Val) -> Self::Val;
    /// Sum of all entries, scalar.
    fn sum(&self, a: &Self::Val) -> Self::Val;
    /// Select rows of a rank-2 table (duplicates allowed).
    fn gather_rows(&self, table: &Self::Val, idx: &[usize]) -> Self::Val;
    /// Stack rank-2 values with equal column counts.
    fn concat_rows(&self, parts: &[Self::Val]) -> Self::Val;
    fn slice_rows(&self, a: &Self::Val, start: usize, rows: usize) -> Self::Val;
    fn reshape(&self, a: &Self::Val, shape: &[usize]) -> Self::Val;
}

// ── shape helpers ────────────────────────────────────────────────────

fn binary_out_shape(op: &str, a: &[usize], alen: usize, b: &[usize], blen: usize) -> Vec<usize> {
    if alen == blen && a == b {
        a.to_vec()
    } else if blen == 1 {
        a.to_vec()
    } else if alen == 1 {
        b.to_vec()
    } else {
        panic!("{op}: shapes {a:?} and {b:?} are neither equal nor scalar-broadcastable");
    }
}

fn matmul_shapes(a: &[usize], b: &[usize]) -> (usize, usize, usize) {
    assert_eq!(a.len(), 2, "matmul lhs must be rank-2, got {a:?}");
    assert_eq!(b.len(), 2, "matmul rhs must be rank-2, got {b:?}");
    assert_eq!(a[1], b[0], "matmul inner extents differ: {a:?} vs {b:?}");
    (a[0], a[1], b[1])
}

// ── recording engine ─────────────────────────────────────────────────

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f32>, op: Op) -> Var {
        self.push_full(shape, data, None, op)
    }

    fn push_full(&self, shape: Vec<usize>, data: Vec<f32>, scalar_f64: Option<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, data, grad: None, scalar_f64, op });
        Var(nodes.len() - 1)
    }

    fn with_data<R>(&self, v: Var, f: impl FnOnce(&[usize], &[f32]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        f(&n.shape, &n.data)
    }

    fn with_data2<R>(&self, a: Var, b: Var, f: impl FnOnce(&[usize], &[f32], &[usize], &[f32]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        f(&na.shape, &na.data, &nb.shape, &nb.data)
    }

    /// f64 value of a scalar reduction node, when one was recorded.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        assert_eq!(n.data.len(), 1, "scalar_f64 on non-scalar node");
        n.scalar_f64.unwrap_or(n.data[0] as f64)
    }

    /// Gradient of a node after `backward`; zeros if the node is unreachable
    /// from the loss.
    pub fn grad(&self, v: Var) -> Vec<f32> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        n.grad.clone().unwrap_or_else(|| vec![0.0; n.data.len()])
    }

    /// Accumulate a node's gradient into `dst` (no-op when unreachable).
    pub fn add_grad_into(&self, v: Var, dst: &mut [f32]) {
        let nodes = self.nodes.borrow();
        if let Some(g) = &nodes[v.0].grad {
            kernels::accumulate(dst, g);
        }
    }

    /// Reverse pass from a scalar loss. Grads are reset first, so repeated
    /// calls on one tape are idempotent rather than accumulating.
    pub fn backward(&self, loss: Var) {
        let mut nodes = self.nodes.borrow_mut();
        assert_eq!(nodes[loss.0].data.len(), 1, "backward requires a scalar loss");
        for n in nodes.iter_mut() {
            n.grad = None;
        }
        nodes[loss.0].grad = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = nodes[id].grad.take() else { continue };
            let op = nodes[id].op.clone();
            match op {
                Op::Leaf | Op::Constant => {
                    nodes[id].grad = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let (m, k, n) = {
                        let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                        (sa[0], sa[1], sb[1])
                    };
                    if wants_grad(&nodes, a) {
                        let mut da = vec![0.0f32; m * k];
                        kernels::matmul_bt(&g, &nodes[b.0].data, &mut da, m, n, k);
                        accum_grad(&mut nodes, a, &da);
                    }
                    if wants_grad(&nodes, b) {
                        let mut db = vec![0.0f32; k * n];
                        kernels::matmul_at_b(&nodes[a.0].data, &g, &mut db, m, k, n);
                        accum_grad(&mut nodes, b, &db);
                    }
                }
                Op::MatmulBt(a, b) => {
                    let (m, k, n) = {
                        let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                        (sa[0], sa[1], sb[0])
                    };
                    if wants_grad(&nodes, a) {
                        let mut da = vec![0.0f32; m * k];
                        kernels::matmul(&g, &nodes[b.0].data, &mut da, m, n, k);
                        accum_grad(&mut nodes, a, &da);
                    }
                    if wants_grad(&nodes, b) {
                        let mut db = vec![0.0f32; n * k];
                        kernels::matmul_at_b(&g, &nodes[a.0].data, &mut db, m, n, k);
                        accum_grad(&mut nodes, b, &db);
                    }
                }
                Op::Add(a, b) => {
                    if wants_grad(&nodes, a) {
                        if nodes[a.0].data.len() == g.len() {
                            accum_grad(&mut nodes, a, &g);
                        } else {
                            let s = kernels::sum(&g) as f32;
                            accum_grad(&mut nodes, a, &[s]);
                        }
                    }
                    if wants_grad(&nodes, b) {
                        if nodes[b.0].data.len() == g.len() {
                            accum_grad(&mut nodes, b, &g);
                        } else {
                            let s = kernels::sum(&g) as f32;
                            accum_grad(&mut nodes, b, &[s]);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (alen, blen) = (nodes[a.0].data.len(), nodes[b.0].data.len());
                    if wants_grad(&nodes, a) {
                        let da = mul_adjoint(&g, &nodes[b.0].data, alen);
                        accum_grad(&mut nodes, a, &da);
                    }
                    if wants_grad(&nodes, b) {
                        let db = mul_adjoint(&g, &nodes[a.0].data, blen);
                        accum_grad(&mut nodes, b, &db);
                    }
                }
                Op::Scale(a, f) => {
                    if wants_grad(&nodes, a) {
                        let da: Vec<f32> = g.iter().map(|&v| v * f).collect();
                        accum_grad(&mut nodes, a, &da);
                    }
                }
                Op::Gelu(a) => {
                    if wants_grad(&nodes, a) {
                        let da: Vec<f32> = nodes[a.0]
                            .data
                            .iter()
                            .zip(&g)
                            .map(|(&x, &gv)| (kernels::gelu_deriv(x as f64) * gv as f64) as f32)
                            .collect();
                        accum_grad(&mut nodes, a, &da);
                    }
                }
                Op::MaskedSoftmax { x, limits } => {
                    if wants_grad(&nodes, x) {
                        let shape = nodes[id].shape.clone();
                        let probs = nodes_data(&nodes, id);
                        let mut dx = vec![0.0f32; probs.len()];
                        kernels::masked_softmax_backward(&probs, &g, &mut dx, shape[0], shape[1], &limits);
                        accum_grad(&mut nodes, x, &dx);
                    }
                }
                Op::LayerNorm { x, axis, eps } => {
                    if wants_grad(&nodes, x) {
                        let shape = nodes[x.0].shape.clone();
                        let xdata = nodes[x.0].data.clone();
                        let mut dx = vec![0.0f32; xdata.len()];
                        kernels::layernorm_backward(&xdata, &g, &mut dx, &shape, axis, eps);
                        accum_grad(&mut nodes, x, &dx);
                    }
                }
                Op::MeanSq(a, b) => {
                    let gs = g[0] as f64;
                    let n = nodes[a.0].data.len() as f64;
                    let coef = 2.0 * gs / n;
                    if wants_grad(&nodes, a) {
                        let da: Vec<f32> = nodes[a.0]
                            .data
                            .iter()
                            .zip(&nodes[b.0].data)
                            .map(|(&x, &y)| (coef * (x as f64 - y as f64)) as f32)
                            .collect();
                        accum_grad(&mut nodes, a, &da);
                    }
                    if wants_grad(&nodes, b) {
                        let db: Vec<f32> = nodes[a.0]
                            .data
                            .iter()
                            .zip(&nodes[b.0].data)
                            .map(|(&x, &y)| (-coef * (x as f64 - y as f64)) as f32)
                            .collect();
                        accum_grad(&mut nodes, b, &db);
                    }
                }
                Op::Sum(a) => {
                    if wants_grad(&nodes, a) {
                        let da = vec![g[0]; nodes[a.0].data.len()];
                        accum_grad(&mut nodes, a, &da);
                    }
                }
                Op::GatherRows { table, idx } => {
                    if wants_grad(&nodes, table) {
                        let cols = nodes[table.0].shape[1];
                        let mut dt = vec![0.0f32; nodes[table.0].data.len()];
                        for (r, &row) in idx.iter().enumerate() {
                            for j in 0..cols {
                                dt[row * cols + j] += g[r * cols + j];
                            }
                        }
                        accum_grad(&mut nodes, table, &dt);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].data.len();
                        if wants_grad(&nodes, p) {
                            let gp = g[offset..offset + len].to_vec();
                            accum_grad(&mut nodes, p, &gp);
                        }
                        offset += len;
                    }
                }
                Op::SliceRows { x, start } => {
                    if wants_grad(&nodes, x) {
                        let cols = nodes[x.0].shape[1];
                        let mut dx = vec![0.0f32; nodes[x.0].data.len()];
                        dx[start * cols..start * cols + g.len()].copy_from_slice(&g);
                        accum_grad(&mut nodes, x, &dx);
                    }
                }
                Op::Reshape(a) => {
                    if wants_grad(&nodes, a) {
                        accum_grad(&mut nodes, a, &g);
                    }
                }
            }
            nodes[id].grad = Some(g);
        }
    }
}

fn nodes_data(nodes: &[Node], id: usize) -> Vec<f32> {
    nodes[id].data.clone()
}

fn wants_grad(nodes: &[Node], v: Var) -> bool {
    !matches!(nodes[v.0].op, Op::Constant)
}

fn accum_grad(nodes: &mut [Node], v: Var, delta: &[f32]) {
    let n = &mut nodes[v.0];
    let g = n.grad.get_or_insert_with(|| vec![0.0; n.data.len()]);
    kernels::accumulate(g, delta);
}

/// Multiply adjoint for one operand: g ⊙ other, reduced if the operand is
/// scalar-broadcast.
fn mul_adjoint(g: &[f32], other: &[f32], operand_len: usize) -> Vec<f32> {
    if operand_len == g.len() {
        if other.len() == 1 {
            g.iter().map(|&v| v * other[0]).collect()
        } else {
            g.iter().zip(other).map(|(&gv, &ov)| gv * ov).collect()
        }
    } else {
        // operand is the scalar side
        let mut s = 0.0f64;
        for (gv, ov) in g.iter().zip(other) {
            s += *gv as f64 * *ov as f64;
        }
        vec![s as f32]
    }
}

impl Engine for Tape {
    type Val = Var;

    fn leaf(&self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    fn constant(&self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Constant)
    }

    fn shape_of(&self, v: &Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    fn value(&self, v: &Var) -> Vec<f32> {
        self.nodes.borrow()[v.0].data.clone()
    }

    fn matmul(&self, a: &Var, b: &Var) -> Var {
        let (shape, data) = self.with_data2(*a, *b, |sa, da, sb, db| {
            let (m, k, n) = matmul_shapes(sa, sb);
            let mut out = vec![0.0f32; m * n];
            kernels::matmul(da, db, &mut out, m, k, n);
            (vec![m, n], out)
        });
        self.push(shape, data, Op::Matmul(*a, *b))
    }

    fn matmul_bt(&self, a: &Var, b: &Var) -> Var {
        let (shape, data) = self.with_data2(*a, *b, |sa, da, sb, db| {
            assert_eq!(sa.len(), 2);
            assert_eq!(sb.len(), 2);
            assert_eq!(sa[1], sb[1], "matmul_bt inner extents differ: {sa:?} vs {sb:?}");
            let (m, k, n) = (sa[0], sa[1], sb[0]);
            let mut out = vec![0.0f32; m * n];
            kernels::matmul_bt(da, db, &mut out, m, k, n);
            (vec![m, n], out)
        });
        self.push(shape, data, Op::MatmulBt(*a, *b))
    }

    fn matmul_bt_limited(&self, a: &Var, b: &Var, limits: &[usize]) -> Var {
        let (shape, data) = self.with_data2(*a, *b, |sa, da, sb, db| {
            assert_eq!(sa.len(), 2);
            assert_eq!(sb.len(), 2);
            assert_eq!(sa[1], sb[1], "matmul_bt inner extents differ: {sa:?} vs {sb:?}");
            let (m, k, n) = (sa[0], sa[1], sb[0]);
            let mut out = vec![0.0f32; m * n];
            kernels::matmul_bt_limited(da, db, &mut out, m, k, n, limits);
            (vec![m, n], out)
        });
        // masked tails of the output (and of any gradient reaching it) are
        // exactly zero, so the plain transposed-product adjoints apply
        self.push(shape, data, Op::MatmulBt(*a, *b))
    }

    fn add(&self, a: &Var, b: &Var) -> Var {
        let (shape, data) = self.with_data2(*a, *b, |sa, da, sb, db| {
            let shape = binary_out_shape("add", sa, da.len(), sb, db.len());
            let out: Vec<f32> = if da.len() == db.len() {
                da.iter().zip(db).map(|(&x, &y)| x + y).collect()
            } else if db.len() == 1 {
                da.iter().map(|&x| x + db[0]).collect()
            } else {
                db.iter().map(|&y| da[0] + y).collect()
            };
            (shape, out)
        });
        self.push(shape, data, Op::Add(*a, *b))
    }

    fn mul(&self, a: &Var, b: &Var) -> Var {
        let (shape, data) = self.with_data2(*a, *b, |sa, da, sb, db| {
            let shape = binary_out_shape("mul", sa, da.len(), sb, db.len());
            let out: Vec<f32> = if da.len() == db.len() {
                da.iter().zip(db).map(|(&x, &y)| x * y).collect()
            } else if db.len() == 1 {
                da.iter().map(|&x| x * db[0]).collect()
            } else {
                db.iter().map(|&y| da[0] * y).collect()
            };
            (shape, out)
        });
        self.push(shape, data, Op::Mul(*a, *b))
    }

    fn scale(&self, a: &Var, factor: f32) -> Var {
        let (shape, data) =
            self.with_data(*a, |s, d| (s.to_vec(), d.iter().map(|&v| v * factor).collect()));
        self.push(shape, data, Op::Scale(*a, factor))
    }

    fn gelu(&self, a: &Var) -> Var {
        let (shape, data) = self.with_data(*a, |s, d| {
            let mut out = vec![0.0f32; d.len()];
            kernels::gelu_forward(d, &mut out);
            (s.to_vec(), out)
        });
        self.push(shape, data, Op::Gelu(*a))
    }

    fn masked_softmax(&self, a: &Var, limits: &[usize]) -> Var {
        let (shape, data) = self.with_data(*a, |s, d| {
            assert_eq!(s.len(), 2, "masked_softmax expects rank-2");
            let mut out = vec![0.0f32; d.len()];
            kernels::masked_softmax_forward(d, &mut out, s[0], s[1], limits);
            (s.to_vec(), out)
        });
        self.push(shape, data, Op::MaskedSoftmax { x: *a, limits: Rc::new(limits.to_vec()) })
    }

    fn layernorm(&self, a: &Var, axis: usize, eps: f32) -> Var {
        let (shape, data) = self.with_data(*a, |s, d| {
            let mut out = vec![0.0f32; d.len()];
            kernels::layernorm_forward(d, &mut out, s, axis, eps);
            (s.to_vec(), out)
        });
        self.push(shape, data, Op::LayerNorm { x: *a, axis, eps })
    }

    fn mean_sq(&self, a: &Var, b: &Var) -> Var {
        let v = self.with_data2(*a, *b, |sa, da, sb, db| {
            assert_eq!(sa, sb, "mean_sq shapes differ: {sa:?} vs {sb:?}");
            kernels::mean_sq(da, db)
        });
        self.push_full(vec![1], vec![v as f32], Some(v), Op::MeanSq(*a, *b))
    }

    fn sum(&self, a: &Var) -> Var {
        let v = self.with_data(*a, |_, d| kernels::sum(d));
        self.push_full(vec![1], vec![v as f32], Some(v), Op::Sum(*a))
    }

    fn gather_rows(&self, table: &Var, idx: &[usize]) -> Var {
        let (shape, data) = self.with_data(*table, |s, d| {
            assert_eq!(s.len(), 2, "gather_rows expects a rank-2 table");
            let cols = s[1];
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &r in idx {
                assert!(r < s[0], "gather_rows index {r} out of range {}", s[0]);
                out.extend_from_slice(&d[r * cols..(r + 1) * cols]);
            }
            (vec![idx.len(), cols], out)
        });
        self.push(shape, data, Op::GatherRows { table: *table, idx: Rc::new(idx.to_vec()) })
    }

    fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let nodes = self.nodes.borrow();
        let cols = nodes[parts[0].0].shape[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let n = &nodes[p.0];
            assert_eq!(n.shape.len(), 2);
            assert_eq!(n.shape[1], cols, "concat_rows column mismatch");
            rows += n.shape[0];
            data.extend_from_slice(&n.data);
        }
        drop(nodes);
        self.push(vec![rows, cols], data, Op::ConcatRows(parts.to_vec()))
    }

    fn slice_rows(&self, a: &Var, start: usize, rows: usize) -> Var {
        let (shape, data) = self.with_data(*a, |s, d| {
            assert_eq!(s.len(), 2, "slice_rows expects rank-2");
            assert!(start + rows <= s[0], "slice_rows [{start}, {}) out of range {}", start + rows, s[0]);
            let cols = s[1];
            (vec![rows, cols], d[start * cols..(start + rows) * cols].to_vec())
        });
        self.push(shape, data, Op::SliceRows { x: *a, start })
    }

    fn reshape(&self, a: &Var, shape: &[usize]) -> Var {
        let (_, data) = self.with_data(*a, |s, d| {
            assert_eq!(
                shape.iter().product::<usize>(),
                d.len(),
                "reshape {shape:?} incompatible with {s:?}"
            );
            (s.to_vec(), d.to_vec())
        });
        self.push(shape.to_vec(), data, Op::Reshape(*a))
    }
}

// ── immediate engine ─────────────────────────────────────────────────

/// Immediate execution: same kernels, no recording, values are plain
/// shared tensors (Arc, so inference work can move across threads).
#[derive(Default, Clone, Copy)]
pub struct Eval;

impl Engine for Eval {
    type Val = Arc<Tensor>;

    fn leaf(&self, t: &Tensor) -> Arc<Tensor> {
        Arc::new(t.clone())
    }

    fn constant(&self, t: &Tensor) -> Arc<Tensor> {
        Arc::new(t.clone())
    }

    fn shape_of(&self, v: &Arc<Tensor>) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn value(&self, v: &Arc<Tensor>) -> Vec<f32> {
        v.data().to_vec()
    }

    fn matmul(&self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Arc<Tensor> {
        let (m, k, n) = matmul_shapes(a.shape(), b.shape());
        let mut out = vec![0.0f32; m * n];
        kernels::matmul(a.data(), b.data(), &mut out, m, k, n);
        Arc::new(Tensor::new(vec![m, n], out))
    }

    fn matmul_bt(&self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Arc<Tensor> {
        assert_eq!(a.shape()[1], b.shape()[1], "matmul_bt inner extents differ");
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
        let mut out = vec![0.0f32; m * n];
        kernels::matmul_bt(a.data(), b.data(), &mut out, m, k, n);
        Arc::new(Tensor::new(vec![m, n], out))
    }

    fn matmul_bt_limited(&self, a: &Arc<Tensor>, b: &Arc<Tensor>, limits: &[usize]) -> Arc<Tensor> {
        assert_eq!(a.shape()[1], b.shape()[1], "matmul_bt inner extents differ");
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
        let mut out = vec![0.0f32; m * n];
        kernels::matmul_bt_limited(a.data(), b.data(), &mut out, m, k, n, limits);
        Arc::new(Tensor::new(vec![m, n], out))
    }

    fn add(&self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Arc<Tensor> {
        let shape = binary_out_shape("add", a.shape(), a.len(), b.shape(), b.len());
        let out: Vec<f32> = if a.len() == b.len() {
            a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect()
        } else if b.len() == 1 {
            a.data().iter().map(|&x| x + b.data()[0]).collect()
        } else {
            b.data().iter().map(|&y| a.data()[0] + y).collect()
        };
        Arc::new(Tensor::new(shape, out))
    }

    fn mul(&self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Arc<Tensor> {
        let shape = binary_out_shape("mul", a.shape(), a.len(), b.shape(), b.len());
        let out: Vec<f32> = if a.len() == b.len() {
            a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect()
        } else if b.len() == 1 {
            a.data().iter().map(|&x| x * b.data()[0]).collect()
        } else {
            b.data().iter().map(|&y| a.data()[0] * y).collect()
        };
        Arc::new(Tensor::new(shape, out))
    }

    fn scale(&self, a: &Arc<Tensor>, factor: f32) -> Arc<Tensor> {
        let out: Vec<f32> = a.data().iter().map(|&v| v * factor).collect();
        Arc::new(Tensor::new(a.shape().to_vec(), out))
    }

    fn gelu(&self, a: &Arc<Tensor>) -> Arc<Tensor> {
        let mut out = vec![0.0f32; a.len()];
        kernels::gelu_forward(a.data(), &mut out);
        Arc::new(Tensor::new(a.shape().to_vec(), out))
    }

    fn masked_softmax(&self, a: &Arc<Tensor>, limits: &[usize]) -> Arc<Tensor> {
        assert_eq!(a.shape().len(), 2, "masked_softmax expects rank-2");
        let mut out = vec![0.0f32; a.len()];
        kernels::masked_softmax_forward(a.data(), &mut out, a.shape()[0], a.shape()[1], limits);
        Arc::new(Tensor::new(a.shape().to_vec(), out))
    }

    fn layernorm(&self, a: &Arc<Tensor>, axis: usize, eps: f32) -> Arc<Tensor> {
        let mut out = vec![0.0f32; a.len()];
        kernels::layernorm_forward(a.data(), &mut out, a.shape(), axis, eps);
        Arc::new(Tensor::new(a.shape().to_vec(), out))
    }

    fn mean_sq(&self, a: &Arc<Tensor>, b: &Arc<Tensor>) -> Arc<Tensor> {
        assert_eq!(a.shape(), b.shape(), "mean_sq shapes differ");
        Arc::new(Tensor::scalar(kernels::mean_sq(a.data(), b.data()) as f32))
    }

    fn sum(&self, a: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(Tensor::scalar(kernels::sum(a.data()) as f32))
    }

    fn gather_rows(&self, table: &Arc<Tensor>, idx: &[usize]) -> Arc<Tensor> {
        assert_eq!(table.shape().len(), 2, "gather_rows expects a rank-2 table");
        let cols = table.shape()[1];
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            assert!(r < table.shape()[0], "gather_rows index out of range");
            out.extend_from_slice(&table.data()[r * cols..(r + 1) * cols]);
        }
        Arc::new(Tensor::new(vec![idx.len(), cols], out))
    }

    fn concat_rows(&self, parts: &[Arc<Tensor>]) -> Arc<Tensor> {
        assert!(!parts.is_empty());
        let cols = parts[0].shape()[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(p.shape()[1], cols, "concat_rows column mismatch");
            rows += p.shape()[0];
            data.extend_from_slice(p.data());
        }
        Arc::new(Tensor::new(vec![rows, cols], data))
    }

    fn slice_rows(&self, a: &Arc<Tensor>, start: usize, rows: usize) -> Arc<Tensor> {
        assert!(start + rows <= a.shape()[0], "slice_rows out of range");
        let cols = a.shape()[1];
        Arc::new(Tensor::new(
            vec![rows, cols],
            a.data()[start * cols..(start + rows) * cols].to_vec(),
        ))
    }

    fn reshape(&self, a: &Arc<Tensor>, shape: &[usize]) -> Arc<Tensor> {
        Arc::new(a.reshaped(shape.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: Vec<f32>) -> Tensor {
        Tensor::new(vec![rows, cols], data)
    }

    #[test]
    fn matmul_backward_accumulates_products() {
        // loss = sum(A*B); dA = 1 * B^T broadcast, dB = A^T * 1
        let tape = Tape::new();
        let a = tape.leaf(&t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t2(2, 1, vec![5.0, 6.0]));
        let c = tape.matmul(&a, &b);
        let loss = tape.sum(&c);
        tape.backward(loss);
        assert_eq!(tape.grad(a), vec![5.0, 6.0, 5.0, 6.0]);
        assert_eq!(tape.grad(b), vec![4.0, 6.0]); // col sums of A
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let tape = Tape::new();
        let w = tape.leaf(&t2(1, 3, vec![1.0, 2.0, 3.0]));
        let c = tape.constant(&Tensor::scalar(7.0));
        tape.backward(c);
        assert_eq!(tape.grad(w), vec![0.0; 3]);
    }

    #[test]
    fn sum_loss_gives_unit_grads() {
        let tape = Tape::new();
        let w = tape.leaf(&t2(2, 2, vec![0.1, -0.4, 2.0, 7.0]));
        let loss = tape.sum(&w);
        tape.backward(loss);
        assert_eq!(tape.grad(w), vec![1.0; 4]);
    }

    #[test]
    fn backward_is_repeatable() {
        let tape = Tape::new();
        let w = tape.leaf(&t2(1, 4, vec![0.5, -1.0, 2.0, 0.0]));
        let g = tape.gelu(&w);
        let target = tape.constant(&t2(1, 4, vec![0.0; 4]));
        let loss = tape.mean_sq(&g, &target);
        tape.backward(loss);
        let g1 = tape.grad(w);
        tape.backward(loss);
        let g2 = tape.grad(w);
        assert_eq!(g1, g2);
    }

    #[test]
    fn scalar_broadcast_add_mul() {
        let tape = Tape::new();
        let x = tape.leaf(&t2(1, 3, vec![1.0, 2.0, 3.0]));
        let s = tape.leaf(&Tensor::scalar(2.0));
        let y = tape.mul(&x, &s);
        assert_eq!(tape.value(&y), vec![2.0, 4.0, 6.0]);
        let z = tape.add(&y, &s);
        assert_eq!(tape.value(&z), vec![4.0, 6.0, 8.0]);
        let loss = tape.sum(&z);
        tape.backward(loss);
        // d/ds [sum(x*s + s)] = sum(x) + 3
        assert_eq!(tape.grad(s), vec![9.0]);
    }

    #[test]
    fn eval_matches_tape_forward() {
        let tape = Tape::new();
        let ev = Eval;
        let xt = t2(3, 4, (0..12).map(|v| (v as f32 - 5.0) * 0.37).collect());
        let wt = t2(4, 2, (0..8).map(|v| (v as f32) * 0.11 - 0.3).collect());

        let a = tape.leaf(&xt);
        let b = tape.leaf(&wt);
        let y_tape = tape.gelu(&tape.matmul(&a, &b));

        let ae = ev.leaf(&xt);
        let be = ev.leaf(&wt);
        let y_eval = ev.gelu(&ev.matmul(&ae, &be));

        assert_eq!(tape.value(&y_tape), y_eval.data());
    }

    #[test]
    fn gather_rows_backward_accumulates_duplicates() {
        let tape = Tape::new();
        let table = tape.leaf(&t2(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let picked = tape.gather_rows(&table, &[1, 1, 2]);
        let loss = tape.sum(&picked);
        tape.backward(loss);
        assert_eq!(tape.grad(table), vec![0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_slice_roundtrip_backward() {
        let tape = Tape::new();
        let a = tape.leaf(&t2(1, 2, vec![1.0, 2.0]));
        let b = tape.leaf(&t2(2, 2, vec![3.0, 4.0, 5.0, 6.0]));
        let cat = tape.concat_rows(&[a, b]);
        let sl = tape.slice_rows(&cat, 1, 2);
        let loss = tape.sum(&sl);
        tape.backward(loss);
        assert_eq!(tape.grad(a), vec![0.0, 0.0]);
        assert_eq!(tape.grad(b), vec![1.0; 4]);
    }

    #[test]
    #[should_panic(expected = "inner extents differ")]
    fn matmul_shape_mismatch_panics() {
        let tape = Tape::new();
        let a = tape.leaf(&t2(2, 3, vec![0.0; 6]));
        let b = tape.leaf(&t2(2, 2, vec![0.0; 4]));
        tape.matmul(&a, &b);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let a = tape.leaf(&t2(2, 2, vec![0.0; 4]));
        tape.backward(a);
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_within_limits() {
        let tape = Tape::new();
        let x = tape.leaf(&t2(2, 4, vec![0.3, -0.5, 1.0, 9.0, 2.0, 2.0, 2.0, 2.0]));
        let p = tape.masked_softmax(&x, &[3, 4]);
        let v = tape.value(&p);
        assert_eq!(v[3], 0.0);
        let s0: f32 = v[0..3].iter().sum();
        let s1: f32 = v[4..8].iter().sum();
        assert!((s0 - 1.0).abs() < 1e-6);
        assert!((s1 - 1.0).abs() < 1e-6);
    }
}
