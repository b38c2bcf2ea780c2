//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are row-major flat buffers behind `Rc`; operations on tensors that
//! (transitively) require gradients record a node holding the parent handles
//! and a backward rule. [`backward`] materializes the recorded subgraph as a
//! [`Graph`] in topological order and runs one reverse sweep: interior
//! gradients live in pass-local buffers, leaf gradients accumulate into the
//! tensor until explicitly zeroed.
//!
//! Everything is 64-bit: the finite-difference oracle [`fd_check`] is part of
//! the test surface and is unreliable at 32-bit precision.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with gradient recording disabled on this thread. Used for
/// evaluation and profiling passes where the graph would only cost memory.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Reset(bool);
    impl Drop for Reset {
        fn drop(&mut self) {
            NO_GRAD.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(NO_GRAD.with(|c| c.replace(true)));
    f()
}

fn grad_enabled() -> bool {
    !NO_GRAD.with(|c| c.get())
}

/// Backward rule: given the node's own inner and the gradient flowing into
/// its output, produce one gradient buffer per parent (None for parents that
/// do not require gradients).
type BackFn = Box<dyn Fn(&TensorInner, &[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackFn,
}

pub struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    /// Persistent gradient, leaves only; allocated on first accumulation.
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    node: Option<Node>,
}

/// Shared handle to a tensor. Cloning is shallow.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

fn check_shape(shape: &[usize], len: usize) {
    assert!(
        shape.iter().all(|&d| d > 0),
        "tensor: zero dimension in shape {shape:?}"
    );
    let numel: usize = shape.iter().product();
    assert_eq!(
        numel, len,
        "tensor: shape {shape:?} does not match data length {len}"
    );
}

impl Tensor {
    // ── Construction ────────────────────────────────────────────────────

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        check_shape(shape, data.len());
        Tensor {
            inner: Rc::new(TensorInner {
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                node: None,
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel])
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value])
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    /// Marks a leaf as a differentiation target. Builder style:
    /// `Tensor::from_vec(..).requires_grad(true)`.
    pub fn requires_grad(self, flag: bool) -> Tensor {
        assert!(
            self.inner.node.is_none(),
            "requires_grad may only be toggled on leaves"
        );
        self.inner.requires_grad.set(flag);
        self
    }

    /// Freezes or unfreezes a leaf in place (LoRA freezes base weights).
    pub fn set_requires_grad(&self, flag: bool) {
        assert!(
            self.inner.node.is_none(),
            "requires_grad may only be toggled on leaves"
        );
        self.inner.requires_grad.set(flag);
    }

    // ── Accessors ───────────────────────────────────────────────────────

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// True when this tensor is itself a grad target or descends from one.
    pub fn needs_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn ptr(&self) -> *const TensorInner {
        Rc::as_ptr(&self.inner)
    }

    // ── Recording ───────────────────────────────────────────────────────

    fn record(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, backward: BackFn) -> Tensor {
        check_shape(&shape, data.len());
        let live = grad_enabled() && parents.iter().any(Tensor::needs_grad);
        let node = live.then_some(Node { parents, backward });
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(live),
                node,
            }),
        }
    }
}

// ── Broadcast helpers ──────────────────────────────────────────────────

/// `b` broadcasts over `a` when its shape equals a tail of `a`'s shape.
/// Returns the number of leading repetitions, or None when incompatible.
fn suffix_reps(a: &[usize], b: &[usize]) -> Option<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return None;
    }
    Some(a[..a.len() - b.len()].iter().product())
}

/// Sums `g` (reps × len) down to a single len-sized buffer.
fn fold_leading(g: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for chunk in g.chunks_exact(len) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

// ── Matmul kernels ─────────────────────────────────────────────────────

/// c[m,q] += a[m,p] · b[p,q]; ikj order so the inner loop runs down
/// contiguous rows of b and c and autovectorizes.
fn mm_accum(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, q: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * q);
    debug_assert_eq!(c.len(), m * q);
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        let c_row = &mut c[i * q..(i + 1) * q];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b[k * q..(k + 1) * q];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

fn transpose_2d(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Splits a shape into (batch, m, p) treating all leading dims as batch.
fn batch_dims(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape.len();
    let batch = shape[..n - 2].iter().product();
    (batch, shape[n - 2], shape[n - 1])
}

// ── Elementwise and structural ops ─────────────────────────────────────

impl Tensor {
    /// Elementwise sum. `other` may have a shape equal to a tail of this
    /// tensor's shape, in which case it is tiled over the leading dims
    /// (bias rows, per-feature gains, shared masks).
    pub fn add(&self, other: &Tensor) -> Tensor {
        let reps = suffix_reps(self.shape(), other.shape()).unwrap_or_else(|| {
            panic!(
                "add: shape {:?} incompatible with {:?}",
                self.shape(),
                other.shape()
            )
        });
        let b_len = other.numel();
        let a = self.data();
        let b = other.data();
        let mut out = a.clone();
        for (chunk, _) in out.chunks_exact_mut(b_len).zip(0..reps) {
            for (o, &bv) in chunk.iter_mut().zip(b.iter()) {
                *o += bv;
            }
        }
        drop((a, b));
        let shape = self.shape().to_vec();
        Tensor::record(
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                vec![Some(g.to_vec()), Some(fold_leading(g, b_len))]
            }),
        )
    }

    /// Elementwise (Hadamard) product with the same tail-broadcast rule as
    /// [`Tensor::add`].
    pub fn multiply(&self, other: &Tensor) -> Tensor {
        let reps = suffix_reps(self.shape(), other.shape()).unwrap_or_else(|| {
            panic!(
                "multiply: shape {:?} incompatible with {:?}",
                self.shape(),
                other.shape()
            )
        });
        let b_len = other.numel();
        let a = self.data();
        let b = other.data();
        let mut out = a.clone();
        for (chunk, _) in out.chunks_exact_mut(b_len).zip(0..reps) {
            for (o, &bv) in chunk.iter_mut().zip(b.iter()) {
                *o *= bv;
            }
        }
        drop((a, b));
        let shape = self.shape().to_vec();
        let lhs = self.clone();
        let rhs = other.clone();
        Tensor::record(
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                let a = lhs.data();
                let b = rhs.data();
                let da: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * b[i % b_len])
                    .collect();
                let mut db = vec![0.0; b_len];
                for (i, &gv) in g.iter().enumerate() {
                    db[i % b_len] += gv * a[i];
                }
                vec![Some(da), Some(db)]
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|&v| v * c).collect();
        Tensor::record(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(g.iter().map(|&v| v * c).collect())]),
        )
    }

    /// Sum of all entries, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let numel = self.numel();
        Tensor::record(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(vec![g[0]; numel])]),
        )
    }

    /// Mean of all entries (composite of sum and scale).
    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Matrix product over the last two axes. Supported layouts: 2D·2D,
    /// ND·2D (the 2D right-hand side is shared across the batch), and
    /// ND·ND with identical leading dims.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        assert!(
            sa.len() >= 2 && sb.len() >= 2,
            "matmul: operands must be at least 2D, got {sa:?} x {sb:?}"
        );
        let (ba, m, p) = batch_dims(&sa);
        let (bb, p2, q) = batch_dims(&sb);
        let shared_rhs = sb.len() == 2;
        assert!(
            p == p2 && (shared_rhs || (ba == bb && sa[..sa.len() - 2] == sb[..sb.len() - 2])),
            "matmul: shape mismatch {sa:?} x {sb:?}"
        );
        let mut out = vec![0.0; ba * m * q];
        {
            let a = self.data();
            let b = other.data();
            for i in 0..ba {
                let bi = if shared_rhs { 0 } else { i };
                mm_accum(
                    &a[i * m * p..(i + 1) * m * p],
                    &b[bi * p * q..(bi + 1) * p * q],
                    &mut out[i * m * q..(i + 1) * m * q],
                    m,
                    p,
                    q,
                );
            }
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(q);
        let lhs = self.clone();
        let rhs = other.clone();
        Tensor::record(
            out_shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                let a = lhs.data();
                let b = rhs.data();
                let need_a = lhs.needs_grad();
                let need_b = rhs.needs_grad();
                // dA = G · Bᵀ, dB = Aᵀ · G (summed over the batch when B is shared)
                let mut da = need_a.then(|| vec![0.0; a.len()]);
                let mut db = need_b.then(|| vec![0.0; b.len()]);
                for i in 0..ba {
                    let bi = if shared_rhs { 0 } else { i };
                    let gi = &g[i * m * q..(i + 1) * m * q];
                    if let Some(da) = da.as_mut() {
                        let bt = transpose_2d(&b[bi * p * q..(bi + 1) * p * q], p, q);
                        mm_accum(gi, &bt, &mut da[i * m * p..(i + 1) * m * p], m, q, p);
                    }
                    if let Some(db) = db.as_mut() {
                        let at = transpose_2d(&a[i * m * p..(i + 1) * m * p], m, p);
                        mm_accum(&at, gi, &mut db[bi * p * q..(bi + 1) * p * q], p, m, q);
                    }
                }
                vec![da, db]
            }),
        )
    }

    /// Swaps the last two axes, materializing the result.
    pub fn transpose_last_two(&self) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(
            shape.len() >= 2,
            "transpose_last_two: need at least 2D, got {shape:?}"
        );
        let (batch, m, n) = batch_dims(&shape);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for i in 0..batch {
            let block = &x[i * m * n..(i + 1) * m * n];
            out[i * m * n..(i + 1) * m * n].copy_from_slice(&transpose_2d(block, m, n));
        }
        drop(x);
        let mut out_shape = shape.clone();
        let l = out_shape.len();
        out_shape.swap(l - 2, l - 1);
        Tensor::record(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut dg = vec![0.0; g.len()];
                for i in 0..batch {
                    let block = &g[i * m * n..(i + 1) * m * n];
                    dg[i * m * n..(i + 1) * m * n].copy_from_slice(&transpose_2d(block, n, m));
                }
                vec![Some(dg)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.numel(),
            "reshape: {:?} has {} elements, target {shape:?} wants {numel}",
            self.shape(),
            self.numel()
        );
        Tensor::record(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(g.to_vec())]),
        )
    }

    /// Concatenates tensors along `axis`; all other dims must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat: no inputs");
        let base = parts[0].shape().to_vec();
        assert!(axis < base.len(), "concat: axis {axis} out of range {base:?}");
        for p in parts {
            let s = p.shape();
            assert!(
                s.len() == base.len()
                    && s.iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b),
                "concat: shape {s:?} incompatible with {base:?} along axis {axis}"
            );
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_dim: usize = dims.iter().sum();
        let mut out = vec![0.0; outer * total_dim * inner];
        for o in 0..outer {
            let mut offset = 0;
            for (p, &d) in parts.iter().zip(&dims) {
                let src = p.data();
                let chunk = d * inner;
                out[(o * total_dim + offset) * inner..(o * total_dim + offset) * inner + chunk]
                    .copy_from_slice(&src[o * chunk..(o + 1) * chunk]);
                offset += d;
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total_dim;
        let dims_b = dims.clone();
        Tensor::record(
            out_shape,
            out,
            parts.iter().map(|p| (*p).clone()).collect(),
            Box::new(move |_, g| {
                let mut grads: Vec<Option<Vec<f64>>> = dims_b
                    .iter()
                    .map(|&d| Some(vec![0.0; outer * d * inner]))
                    .collect();
                for o in 0..outer {
                    let mut offset = 0;
                    for (gi, &d) in grads.iter_mut().zip(&dims_b) {
                        let chunk = d * inner;
                        gi.as_mut().unwrap()[o * chunk..(o + 1) * chunk].copy_from_slice(
                            &g[(o * total_dim + offset) * inner
                                ..(o * total_dim + offset) * inner + chunk],
                        );
                        offset += d;
                    }
                }
                grads
            }),
        )
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(
            axis < shape.len() && start + len <= shape[axis] && len > 0,
            "slice: range {start}..{} out of bounds on axis {axis} of {shape:?}",
            start + len
        );
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let x = self.data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * dim + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&x[src..src + len * inner]);
        }
        drop(x);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let full = self.numel();
        Tensor::record(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut dg = vec![0.0; full];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    dg[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(dg)]
            }),
        )
    }

    /// Gathers rows of `table` ([vocab, d]) by id. Gradients scatter-add
    /// back into the table.
    pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Tensor {
        let shape = table.shape();
        assert_eq!(shape.len(), 2, "embedding_lookup: table must be 2D");
        let (vocab, d) = (shape[0], shape[1]);
        assert!(
            ids.iter().all(|&i| i < vocab),
            "embedding_lookup: id out of range (vocab {vocab})"
        );
        let t = table.data();
        let mut out = vec![0.0; ids.len() * d];
        for (row, &id) in ids.iter().enumerate() {
            out[row * d..(row + 1) * d].copy_from_slice(&t[id * d..(id + 1) * d]);
        }
        drop(t);
        let ids_b = ids.to_vec();
        Tensor::record(
            vec![ids.len(), d],
            out,
            vec![table.clone()],
            Box::new(move |_, g| {
                let mut dt = vec![0.0; vocab * d];
                for (row, &id) in ids_b.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g[row * d + c];
                    }
                }
                vec![Some(dt)]
            }),
        )
    }
}

// ── Nonlinearities ─────────────────────────────────────────────────────

impl Tensor {
    /// Softmax over the last axis, stabilized by max subtraction. Entries
    /// equal to −∞ map to exactly 0.0. A row that is entirely −∞ is a
    /// contract violation (mask construction must prevent it) and panics.
    pub fn softmax_lastdim(&self) -> Tensor {
        let shape = self.shape().to_vec();
        let cols = *shape.last().expect("softmax: scalar input");
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for (r, row) in x.chunks_exact(cols).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(
                max > f64::NEG_INFINITY,
                "softmax_lastdim: fully masked row {r} (all entries are -inf)"
            );
            let orow = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                // exp(-inf - max) = exp(-inf) = +0.0 exactly
                *o = (v - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        drop(x);
        Tensor::record(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |inner, g| {
                // dx = y ⊙ (g − Σ_row g·y)
                let y = inner.data.borrow();
                let mut dx = vec![0.0; g.len()];
                for r in 0..g.len() / cols {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(ys)
                        .zip(gs)
                    {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Mean cross-entropy over the rows flagged active. `logits` is
    /// [t, classes]; inactive rows contribute nothing to value or gradient.
    pub fn cross_entropy(logits: &Tensor, targets: &[usize], active: &[bool]) -> Tensor {
        let shape = logits.shape();
        assert_eq!(shape.len(), 2, "cross_entropy: logits must be [t, classes]");
        let (t, c) = (shape[0], shape[1]);
        assert_eq!(targets.len(), t, "cross_entropy: {t} rows, {} targets", targets.len());
        assert_eq!(active.len(), t, "cross_entropy: {t} rows, {} active flags", active.len());
        assert!(
            targets.iter().all(|&y| y < c),
            "cross_entropy: target out of range (classes {c})"
        );
        let n_active = active.iter().filter(|&&a| a).count();
        assert!(n_active > 0, "cross_entropy: zero active positions");
        let x = logits.data();
        let mut loss = 0.0;
        for (r, row) in x.chunks_exact(c).enumerate() {
            if !active[r] {
                continue;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
        }
        loss /= n_active as f64;
        drop(x);
        let logits_b = logits.clone();
        let targets_b = targets.to_vec();
        let active_b = active.to_vec();
        Tensor::record(
            vec![1],
            vec![loss],
            vec![logits.clone()],
            Box::new(move |_, g| {
                let x = logits_b.data();
                let mut dx = vec![0.0; x.len()];
                let w = g[0] / n_active as f64;
                for (r, row) in x.chunks_exact(c).enumerate() {
                    if !active_b[r] {
                        continue;
                    }
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                    let drow = &mut dx[r * c..(r + 1) * c];
                    for (d, &v) in drow.iter_mut().zip(row) {
                        *d = w * (v - max).exp() / sum;
                    }
                    drow[targets_b[r]] -= w;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// RMS normalization over the last axis: y = x / sqrt(mean(x²) + 1e-6).
    /// Trainable gains are a separate elementwise multiply.
    pub fn rms_normalize_lastdim(&self) -> Tensor {
        const EPS: f64 = 1e-6;
        let shape = self.shape().to_vec();
        let cols = *shape.last().expect("rms_normalize: scalar input");
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        let mut inv_r = Vec::with_capacity(x.len() / cols);
        for (r, row) in x.chunks_exact(cols).enumerate() {
            let ms: f64 = row.iter().map(|&v| v * v).sum::<f64>() / cols as f64;
            let ir = 1.0 / (ms + EPS).sqrt();
            inv_r.push(ir);
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v * ir;
            }
        }
        drop(x);
        let x_b = self.clone();
        Tensor::record(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                // dx_i = ir·g_i − x_i · ir³ · (Σ_j g_j x_j) / cols
                let x = x_b.data();
                let mut dx = vec![0.0; g.len()];
                for r in 0..g.len() / cols {
                    let xs = &x[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let ir = inv_r[r];
                    let dot: f64 = xs.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    let k = ir * ir * ir * dot / cols as f64;
                    for ((d, &xv), &gv) in dx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(xs)
                        .zip(gs)
                    {
                        *d = ir * gv - xv * k;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        let mut tanhs = vec![0.0; x.len()];
        for ((o, th), &v) in out.iter_mut().zip(tanhs.iter_mut()).zip(x.iter()) {
            *th = (C * (v + A * v * v * v)).tanh();
            *o = 0.5 * v * (1.0 + *th);
        }
        drop(x);
        let x_b = self.clone();
        Tensor::record(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                let x = x_b.data();
                let dx = g
                    .iter()
                    .zip(x.iter())
                    .zip(tanhs.iter())
                    .map(|((&gv, &v), &t)| {
                        let du = C * (1.0 + 3.0 * A * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    /// Inverted dropout with a counter-based keyed generator: entry i is
    /// kept with probability 1−p and scaled by 1/(1−p). The caller supplies
    /// `key` (hash of run seed, step, and call counter) so masks are
    /// reproducible without any RNG state. Train-mode only: callers skip
    /// this op entirely in eval mode. p = 0 is the identity.
    pub fn dropout(&self, p: f64, key: u64) -> Tensor {
        assert!((0.0..1.0).contains(&p), "dropout: p must be in [0,1), got {p}");
        if p == 0.0 {
            return self.scale(1.0);
        }
        let inv_keep = 1.0 / (1.0 - p);
        let x = self.data();
        let mut mult = vec![0.0; x.len()];
        for (i, m) in mult.iter_mut().enumerate() {
            let bits = splitmix64(key ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            // 53-bit uniform in [0,1)
            let u = (bits >> 11) as f64 / (1u64 << 53) as f64;
            *m = if u >= p { inv_keep } else { 0.0 };
        }
        let out = x.iter().zip(&mult).map(|(&v, &m)| v * m).collect();
        drop(x);
        Tensor::record(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                vec![Some(g.iter().zip(&mult).map(|(&gv, &m)| gv * m).collect())]
            }),
        )
    }

    /// Rotary position rotation over the last two axes [seq, d_head]:
    /// position s rotates feature pair i by angle s·base^(−2i/d_head).
    /// Adjacent pairing: (x[2i], x[2i+1]). Linear, so the backward rule is
    /// the inverse rotation. Positions index the second-to-last axis from 0
    /// for every leading batch/head slice.
    pub fn rope_rotate(&self, base: f64) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(shape.len() >= 2, "rope_rotate: need [.., seq, d_head]");
        let (chunks, seq, dh) = batch_dims(&shape);
        assert!(dh % 2 == 0, "rope_rotate: d_head must be even, got {dh}");
        let out = rope_kernel(&self.data(), chunks, seq, dh, base, 1.0);
        Tensor::record(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                vec![Some(rope_kernel(g, chunks, seq, dh, base, -1.0))]
            }),
        )
    }
}

fn rope_kernel(x: &[f64], chunks: usize, seq: usize, dh: usize, base: f64, sign: f64) -> Vec<f64> {
    let half = dh / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / dh as f64))
        .collect();
    let mut out = vec![0.0; x.len()];
    for ch in 0..chunks {
        for s in 0..seq {
            let row = (ch * seq + s) * dh;
            for (i, &f) in freqs.iter().enumerate() {
                let theta = sign * s as f64 * f;
                let (sin, cos) = theta.sin_cos();
                let (a, b) = (x[row + 2 * i], x[row + 2 * i + 1]);
                out[row + 2 * i] = a * cos - b * sin;
                out[row + 2 * i + 1] = a * sin + b * cos;
            }
        }
    }
    out
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a dropout key from (seed, step, call counter). Exposed so models
/// and tests agree on the stream.
pub fn dropout_key(seed: u64, step: u64, call: u64) -> u64 {
    splitmix64(splitmix64(seed ^ step.rotate_left(17)) ^ call.rotate_left(41))
}

// ── Backward machinery ─────────────────────────────────────────────────

/// The recorded operations reachable from a root, in topological order
/// (every node's inputs precede it). Constant subtrees (no gradient
/// requirement) are excluded.
pub struct Graph {
    order: Vec<Tensor>,
}

impl Graph {
    /// Materializes the graph under `root` by iterative postorder DFS.
    pub fn trace(root: &Tensor) -> Graph {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.ptr()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for p in &node.parents {
                    if p.needs_grad() && !visited.contains(&p.ptr()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        Graph { order }
    }

    /// Nodes in topological order; the root is last.
    pub fn nodes(&self) -> &[Tensor] {
        &self.order
    }

    /// One reverse sweep from `root` (which must be this graph's root).
    /// Interior gradients are pass-local; leaf gradients accumulate.
    fn run_backward(&self, root: &Tensor) {
        assert_eq!(
            root.numel(),
            1,
            "backward: root must be scalar, got shape {:?}",
            root.shape()
        );
        let mut grads: HashMap<*const TensorInner, Vec<f64>> = HashMap::new();
        grads.insert(root.ptr(), vec![1.0]);
        for t in self.order.iter().rev() {
            let Some(node) = &t.inner.node else { continue };
            let Some(gout) = grads.remove(&t.ptr()) else { continue };
            let contribs = (node.backward)(&t.inner, &gout);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (parent, contrib) in node.parents.iter().zip(contribs) {
                if !parent.needs_grad() {
                    continue;
                }
                let Some(c) = contrib else { continue };
                debug_assert_eq!(c.len(), parent.numel());
                match grads.entry(parent.ptr()) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        for (acc, v) in e.get_mut().iter_mut().zip(&c) {
                            *acc += v;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(c);
                    }
                }
            }
        }
        // Fold pass-local buffers into the persistent leaf gradients.
        for t in &self.order {
            if !t.is_leaf() || !t.needs_grad() {
                continue;
            }
            if let Some(g) = grads.remove(&t.ptr()) {
                let mut slot = t.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => *slot = Some(g),
                }
            }
        }
    }
}

/// Reverse-mode sweep from a scalar root: populates `grad` on every
/// requires_grad leaf reachable from it. Repeated calls accumulate until
/// the leaves are zeroed.
pub fn backward(root: &Tensor) {
    Graph::trace(root).run_backward(root);
}

/// Central finite-difference check of the autodiff gradient of `f` at `x`:
/// returns max_i |auto_i − cd_i| / (|cd_i| + 1e-8) with
/// cd_i = (f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h. `f` must be deterministic.
pub fn fd_check<F: Fn(&Tensor) -> Tensor>(f: F, x: &Tensor, h: f64) -> f64 {
    assert!(h > 0.0, "fd_check: h must be positive");
    let leaf = Tensor::from_vec(x.shape(), x.to_vec()).requires_grad(true);
    let y = f(&leaf);
    assert_eq!(y.numel(), 1, "fd_check: f must return a scalar");
    backward(&y);
    let auto = leaf
        .grad()
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let base = x.to_vec();
    let mut max_rel: f64 = 0.0;
    for i in 0..base.len() {
        let eval = |v: f64| -> f64 {
            let mut d = base.clone();
            d[i] = v;
            f(&Tensor::from_vec(x.shape(), d)).item()
        };
        let cd = (eval(base[i] + h) - eval(base[i] - h)) / (2.0 * h);
        let rel = (auto[i] - cd).abs() / (cd.abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    max_rel
}
