//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every forward operation appends a node holding its value and a backward
//! closure; `backward` replays the closures in reverse order, accumulating
//! vector-Jacobian products. The tape is rebuilt from scratch every training
//! step (explicit graph reset), so node indices never dangle.
//!
//! All math is 64-bit. Single-threaded by design: values are plain `Tensor`s,
//! so batch elements could be taped on parallel workers and their parameter
//! gradients summed afterwards, but nothing here shares mutable state.

use std::collections::HashMap;

use crate::store::{OptimError, ParamGrads, ParameterStore};
use crate::tensor::{Tensor, TensorError};

/// Handle to a node on the tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Clamp bounds for rendered silhouette pixels: values live in (EPS, 1-EPS).
pub const SILHOUETTE_EPS: f64 = 1e-6;

type BackFn = Box<dyn Fn(&[Node], Var, &[f64], &mut Grads)>;

pub(crate) struct Node {
    value: Tensor,
    requires: bool,
    back: Option<BackFn>,
}

/// Per-node gradient buffers produced by one `backward` call. A single tape
/// supports several independent backward passes (e.g. estimator loss and
/// discriminator loss), each returning its own `Grads`.
pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
}

impl Grads {
    fn new(n: usize) -> Self {
        Grads { g: vec![None; n] }
    }

    fn acc(&mut self, v: Var, len: usize) -> &mut [f64] {
        self.g[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
    }

    /// Gradient buffer for a node, if backward reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.g[v.0].as_deref()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    // One tape node per (store, param) pair so reuse accumulates gradients.
    param_cache: HashMap<(u64, usize), Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(1024), param_cache: HashMap::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, requires: bool, back: Option<BackFn>) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node { value, requires, back: if requires { back } else { None } });
        v
    }

    /// Leaf with no gradient (ground truth, observations, fixed geometry).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    /// Leaf that participates in gradients without being a store parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, None)
    }

    /// Mount a store parameter onto the tape. Repeated mounts of the same
    /// parameter return the same node, so gradients from every use site
    /// accumulate in one buffer.
    pub fn param(&mut self, store: &ParameterStore, pid: usize) -> Var {
        if let Some(&v) = self.param_cache.get(&(store.uid(), pid)) {
            return v;
        }
        let v = self.push(store.value(pid).clone(), true, None);
        self.param_cache.insert((store.uid(), pid), v);
        v
    }

    /// Run reverse-mode accumulation from a scalar node. The root's gradient
    /// is seeded with 1. Nodes left unreached report no gradient.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.nodes[root.0].value.numel(),
            1,
            "backward root must be scalar, got shape {:?}",
            self.nodes[root.0].value.shape()
        );
        let mut grads = Grads::new(self.nodes.len());
        grads.g[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if grads.g[i].is_none() {
                continue;
            }
            let Some(back) = &self.nodes[i].back else { continue };
            let g = grads.g[i].take().expect("gradient vanished mid-backward");
            back(&self.nodes, Var(i), &g, &mut grads);
            grads.g[i] = Some(g);
        }
        grads
    }

    /// Collect gradients for every parameter of a store, in registration
    /// order. A registered parameter that was never mounted on this tape, or
    /// never reached by backward, is a missing gradient.
    pub fn param_grads(
        &self,
        grads: &Grads,
        store: &ParameterStore,
    ) -> Result<ParamGrads, OptimError> {
        let mut out = Vec::with_capacity(store.len());
        for pid in 0..store.len() {
            let var = self.param_cache.get(&(store.uid(), pid)).copied();
            let buf = var.and_then(|v| grads.get(v));
            match buf {
                Some(b) => out.push(
                    Tensor::new(store.value(pid).shape().to_vec(), b.to_vec())
                        .expect("gradient buffer shape drifted from parameter"),
                ),
                None => {
                    return Err(OptimError::MissingGradient { name: store.name(pid).to_string() })
                }
            }
        }
        Ok(out)
    }

    // ── Elementwise arithmetic ──────────────────────────────────────────────

    fn binary_elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        back: BackFn,
    ) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "{op}: shape mismatch {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let requires = self.nodes[a.0].requires || self.nodes[b.0].requires;
        self.push(value, requires, Some(back))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(
            "add",
            a,
            b,
            |x, y| x + y,
            Box::new(move |_, _, g, sink| {
                for (d, &gv) in sink.acc(a, g.len()).iter_mut().zip(g) {
                    *d += gv;
                }
                for (d, &gv) in sink.acc(b, g.len()).iter_mut().zip(g) {
                    *d += gv;
                }
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(
            "sub",
            a,
            b,
            |x, y| x - y,
            Box::new(move |_, _, g, sink| {
                for (d, &gv) in sink.acc(a, g.len()).iter_mut().zip(g) {
                    *d += gv;
                }
                for (d, &gv) in sink.acc(b, g.len()).iter_mut().zip(g) {
                    *d -= gv;
                }
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(
            "mul",
            a,
            b,
            |x, y| x * y,
            Box::new(move |nodes, _, g, sink| {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                for ((d, &gv), &y) in sink.acc(a, g.len()).iter_mut().zip(g).zip(bv) {
                    *d += gv * y;
                }
                for ((d, &gv), &x) in sink.acc(b, g.len()).iter_mut().zip(g).zip(av) {
                    *d += gv * x;
                }
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(
            "div",
            a,
            b,
            |x, y| x / y,
            Box::new(move |nodes, _, g, sink| {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                for ((d, &gv), &y) in sink.acc(a, g.len()).iter_mut().zip(g).zip(bv) {
                    *d += gv / y;
                }
                for (i, (d, &gv)) in sink.acc(b, g.len()).iter_mut().zip(g).enumerate() {
                    *d -= gv * av[i] / (bv[i] * bv[i]);
                }
            }),
        )
    }

    /// Elementwise `a*x + b` with constant coefficients.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let tx = &self.nodes[x.0].value;
        let data: Vec<f64> = tx.data().iter().map(|&v| a * v + b).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let requires = self.nodes[x.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |_, _, g, sink| {
                for (d, &gv) in sink.acc(x, g.len()).iter_mut().zip(g) {
                    *d += a * gv;
                }
            })),
        )
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        self.affine(x, a, 0.0)
    }

    // ── Unary maps ──────────────────────────────────────────────────────────

    /// `df` receives (input, output) and returns the local derivative.
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let tx = &self.nodes[x.0].value;
        let data: Vec<f64> = tx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let requires = self.nodes[x.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |nodes, out, g, sink| {
                let xin = nodes[x.0].value.data();
                let yout = nodes[out.0].value.data();
                for (i, (d, &gv)) in sink.acc(x, g.len()).iter_mut().zip(g).enumerate() {
                    *d += gv * df(xin[i], yout[i]);
                }
            })),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            move |v| if v >= 0.0 { v } else { slope * v },
            move |v, _| if v >= 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, |v, _| 1.0 / v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, |v, _| v.cos())
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, |v, _| -v.sin())
    }

    // ── Matrix products ─────────────────────────────────────────────────────

    /// `a [m×k] · b [k×n] -> [m×n]`, or a dimension error naming both shapes.
    pub fn try_matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k) = ta.dims2();
        let n = tb.dims2().1;
        let mut out = vec![0.0; m * n];
        mm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out).unwrap();
        let requires = self.nodes[a.0].requires || self.nodes[b.0].requires;
        Ok(self.push(
            value,
            requires,
            Some(Box::new(move |nodes, _, g, sink| {
                let av = nodes[a.0].value.data().to_vec();
                let bv = nodes[b.0].value.data().to_vec();
                // dA = g · Bᵀ, dB = Aᵀ · g
                mm_nt_acc(g, &bv, sink.acc(a, m * k), m, n, k);
                mm_at_acc(&av, g, sink.acc(b, k * n), m, k, n);
            })),
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.try_matmul(a, b).expect("matmul shape mismatch")
    }

    /// `a [m×k] · bᵀ [k×n] -> [m×n]` where `b` is stored as `[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = ta.dims2();
        let (n, kb) = tb.dims2();
        assert_eq!(k, kb, "matmul_nt: inner dims {k} vs {kb}");
        let mut out = vec![0.0; m * n];
        mm_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out).unwrap();
        let requires = self.nodes[a.0].requires || self.nodes[b.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |nodes, _, g, sink| {
                let av = nodes[a.0].value.data().to_vec();
                let bv = nodes[b.0].value.data().to_vec();
                // dA = g · B, dB = gᵀ · A
                mm_acc(g, &bv, sink.acc(a, m * k), m, n, k);
                mm_at_acc(g, &av, sink.acc(b, n * k), m, n, k);
            })),
        )
    }

    /// `w [m×k] · x [k] -> [m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (tw, tx) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        let (m, k) = tw.dims2();
        assert_eq!(tx.shape(), [k], "matvec: {:?} vs {:?}", tw.shape(), tx.shape());
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = dot_slices(&tw.data()[i * k..(i + 1) * k], tx.data());
        }
        let value = Tensor::vector(out);
        let requires = self.nodes[w.0].requires || self.nodes[x.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |nodes, _, g, sink| {
                let wv = nodes[w.0].value.data().to_vec();
                let xv = nodes[x.0].value.data().to_vec();
                {
                    let dw = sink.acc(w, m * k);
                    for i in 0..m {
                        axpy(g[i], &xv, &mut dw[i * k..(i + 1) * k]);
                    }
                }
                let dx = sink.acc(x, k);
                for i in 0..m {
                    axpy(g[i], &wv[i * k..(i + 1) * k], dx);
                }
            })),
        )
    }

    // ── Broadcast and row operations ────────────────────────────────────────

    /// Add a vector `b [d]` to every row of `x [n×d]`.
    pub fn add_row_broadcast(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let (n, d) = tx.dims2();
        assert_eq!(tb.shape(), [d], "add_row_broadcast: {:?} vs {:?}", tx.shape(), tb.shape());
        let mut data = tx.data().to_vec();
        for r in 0..n {
            axpy(1.0, tb.data(), &mut data[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![n, d], data).unwrap();
        let requires = self.nodes[x.0].requires || self.nodes[b.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |_, _, g, sink| {
                for (dst, &gv) in sink.acc(x, n * d).iter_mut().zip(g) {
                    *dst += gv;
                }
                let db = sink.acc(b, d);
                for r in 0..n {
                    axpy(1.0, &g[r * d..(r + 1) * d], db);
                }
            })),
        )
    }

    /// Scale row `i` of `x [n×d]` by `w[i]`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (n, d) = tx.dims2();
        assert_eq!(tw.shape(), [n], "mul_rows: {:?} vs {:?}", tx.shape(), tw.shape());
        let mut data = tx.data().to_vec();
        for r in 0..n {
            let s = tw.data()[r];
            for v in &mut data[r * d..(r + 1) * d] {
                *v *= s;
            }
        }
        let value = Tensor::new(vec![n, d], data).unwrap();
        let requires = self.nodes[x.0].requires || self.nodes[w.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |nodes, _, g, sink| {
                let xv = nodes[x.0].value.data().to_vec();
                let wv = nodes[w.0].value.data().to_vec();
                {
                    let dx = sink.acc(x, n * d);
                    for r in 0..n {
                        axpy(wv[r], &g[r * d..(r + 1) * d], &mut dx[r * d..(r + 1) * d]);
                    }
                }
                let dw = sink.acc(w, n);
                for r in 0..n {
                    dw[r] += dot_slices(&g[r * d..(r + 1) * d], &xv[r * d..(r + 1) * d]);
                }
            })),
        )
    }

    /// Tile a vector `v [d]` into `n` identical rows.
    pub fn repeat_row(&mut self, v: Var, n: usize) -> Var {
        let tv = &self.nodes[v.0].value;
        assert_eq!(tv.shape().len(), 1, "repeat_row expects a vector");
        let d = tv.numel();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(tv.data());
        }
        let value = Tensor::new(vec![n, d], data).unwrap();
        let requires = self.nodes[v.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |_, _, g, sink| {
                let dv = sink.acc(v, d);
                for r in 0..n {
                    axpy(1.0, &g[r * d..(r + 1) * d], dv);
                }
            })),
        )
    }

    /// Column means of `x [n×d] -> [d]`. Each column is summed in ascending
    /// value order so the result is bitwise invariant to row permutations
    /// (mean pooling must not leak frame order into downstream values).
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let (n, d) = tx.dims2();
        assert!(n > 0, "mean_rows on empty matrix");
        let mut out = vec![0.0; d];
        let mut scratch = vec![0.0; n];
        for c in 0..d {
            for r in 0..n {
                scratch[r] = tx.data()[r * d + c];
            }
            scratch.sort_unstable_by(f64::total_cmp);
            out[c] = scratch.iter().sum::<f64>() / n as f64;
        }
        let value = Tensor::vector(out);
        let requires = self.nodes[x.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |_, _, g, sink| {
                let dx = sink.acc(x, n * d);
                let inv = 1.0 / n as f64;
                for r in 0..n {
                    for c in 0..d {
                        dx[r * d + c] += g[c] * inv;
                    }
                }
            })),
        )
    }

    /// Multiply every element of `x` by a scalar node `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let (tx, ts) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        assert_eq!(ts.numel(), 1, "mul_scalar_var: scalar has shape {:?}", ts.shape());
        let sv = ts.data()[0];
        let data: Vec<f64> = tx.data().iter().map(|&v| v * sv).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let requires = self.nodes[x.0].requires || self.nodes[s.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |nodes, _, g, sink| {
                let sv = nodes[s.0].value.data()[0];
                let xv = nodes[x.0].value.data().to_vec();
                axpy(sv, g, sink.acc(x, g.len()));
                sink.acc(s, 1)[0] += dot_slices(g, &xv);
            })),
        )
    }

    // ── Reductions ──────────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let n = tx.numel();
        let value = Tensor::scalar(tx.data().iter().sum());
        let requires = self.nodes[x.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |_, _, g, sink| {
                for d in sink.acc(x, n).iter_mut() {
                    *d += g[0];
                }
            })),
        )
    }

    /// Inner product of two equally sized tensors (flattened).
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.numel(), tb.numel(), "dot: {:?} vs {:?}", ta.shape(), tb.shape());
        let n = ta.numel();
        let value = Tensor::scalar(dot_slices(ta.data(), tb.data()));
        let requires = self.nodes[a.0].requires || self.nodes[b.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |nodes, _, g, sink| {
                let av = nodes[a.0].value.data().to_vec();
                let bv = nodes[b.0].value.data().to_vec();
                axpy(g[0], &bv, sink.acc(a, n));
                axpy(g[0], &av, sink.acc(b, n));
            })),
        )
    }

    /// Euclidean norm of the flattened tensor. Gradient is defined as zero at
    /// the origin (subgradient choice).
    pub fn norm2(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let n = tx.numel();
        let norm = dot_slices(tx.data(), tx.data()).sqrt();
        let value = Tensor::scalar(norm);
        let requires = self.nodes[x.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |nodes, out, g, sink| {
                let norm = nodes[out.0].value.data()[0];
                if norm <= 0.0 {
                    return;
                }
                let xv = nodes[x.0].value.data().to_vec();
                axpy(g[0] / norm, &xv, sink.acc(x, n));
            })),
        )
    }

    /// Sum of per-row Euclidean norms of `x [n×d]`: Σᵢ ‖xᵢ‖₂.
    pub fn norm_rows_sum(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let (n, d) = tx.dims2();
        let mut total = 0.0;
        for r in 0..n {
            let row = &tx.data()[r * d..(r + 1) * d];
            total += dot_slices(row, row).sqrt();
        }
        let value = Tensor::scalar(total);
        let requires = self.nodes[x.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |nodes, _, g, sink| {
                let xv = nodes[x.0].value.data().to_vec();
                let dx = sink.acc(x, n * d);
                for r in 0..n {
                    let row = &xv[r * d..(r + 1) * d];
                    let norm = dot_slices(row, row).sqrt();
                    if norm > 0.0 {
                        axpy(g[0] / norm, row, &mut dx[r * d..(r + 1) * d]);
                    }
                }
            })),
        )
    }

    /// Row-wise softmax with max subtraction. A vector is treated as one row.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let (n, d) = match tx.shape() {
            [d] => (1usize, *d),
            [n, d] => (*n, *d),
            s => panic!("softmax_rows expects rank 1 or 2, got {s:?}"),
        };
        assert!(d > 0, "softmax over empty row");
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            let row = &tx.data()[r * d..(r + 1) * d];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * d..(r + 1) * d];
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let requires = self.nodes[x.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |nodes, out, g, sink| {
                let y = nodes[out.0].value.data().to_vec();
                let dx = sink.acc(x, n * d);
                for r in 0..n {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let gy = dot_slices(gr, yr);
                    for c in 0..d {
                        dx[r * d + c] += yr[c] * (gr[c] - gy);
                    }
                }
            })),
        )
    }

    // ── Shape plumbing ──────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let tx = &self.nodes[x.0].value;
        let n = tx.numel();
        let value = tx.clone().reshaped(shape).expect("reshape element count mismatch");
        let requires = self.nodes[x.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |_, _, g, sink| {
                axpy(1.0, g, sink.acc(x, n));
            })),
        )
    }

    /// Concatenate rank-1 vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        let mut requires = false;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.shape().len(), 1, "concat expects vectors, got {:?}", t.shape());
            spans.push((p, data.len(), t.numel()));
            data.extend_from_slice(t.data());
            requires |= self.nodes[p.0].requires;
        }
        let value = Tensor::vector(data);
        self.push(
            value,
            requires,
            Some(Box::new(move |_, _, g, sink| {
                for &(p, off, len) in &spans {
                    axpy(1.0, &g[off..off + len], sink.acc(p, len));
                }
            })),
        )
    }

    /// Concatenate two rank-2 tensors along columns: `[n×p] ⊕ [n×q] -> [n×(p+q)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, p) = ta.dims2();
        let (nb, q) = tb.dims2();
        assert_eq!(n, nb, "concat_cols: row counts {n} vs {nb}");
        let mut data = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let value = Tensor::new(vec![n, p + q], data).unwrap();
        let requires = self.nodes[a.0].requires || self.nodes[b.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |_, _, g, sink| {
                let w = p + q;
                {
                    let da = sink.acc(a, n * p);
                    for r in 0..n {
                        axpy(1.0, &g[r * w..r * w + p], &mut da[r * p..(r + 1) * p]);
                    }
                }
                let db = sink.acc(b, n * q);
                for r in 0..n {
                    axpy(1.0, &g[r * w + p..(r + 1) * w], &mut db[r * q..(r + 1) * q]);
                }
            })),
        )
    }

    /// Stack rank-1 vectors of equal length into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows of nothing");
        let d = self.nodes[rows[0].0].value.numel();
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut requires = false;
        for &r in rows {
            let t = &self.nodes[r.0].value;
            assert_eq!(t.shape(), [d], "stack_rows: ragged row {:?}", t.shape());
            data.extend_from_slice(t.data());
            requires |= self.nodes[r.0].requires;
        }
        let n = rows.len();
        let value = Tensor::new(vec![n, d], data).unwrap();
        let owned: Vec<Var> = rows.to_vec();
        self.push(
            value,
            requires,
            Some(Box::new(move |_, _, g, sink| {
                for (i, &r) in owned.iter().enumerate() {
                    axpy(1.0, &g[i * d..(i + 1) * d], sink.acc(r, d));
                }
            })),
        )
    }

    /// Contiguous slice of a rank-1 vector.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Var {
        let tx = &self.nodes[x.0].value;
        assert_eq!(tx.shape().len(), 1, "slice expects a vector");
        let n = tx.numel();
        assert!(start <= end && end <= n, "slice {start}..{end} out of range for {n}");
        let value = Tensor::vector(tx.data()[start..end].to_vec());
        let requires = self.nodes[x.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |_, _, g, sink| {
                axpy(1.0, g, &mut sink.acc(x, n)[start..end]);
            })),
        )
    }

    /// Row `i` of `x [n×d]` as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Var {
        let tx = &self.nodes[x.0].value;
        let (n, d) = tx.dims2();
        assert!(i < n, "row {i} out of range for {n}");
        let value = Tensor::vector(tx.row(i).to_vec());
        let requires = self.nodes[x.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |_, _, g, sink| {
                axpy(1.0, g, &mut sink.acc(x, n * d)[i * d..(i + 1) * d]);
            })),
        )
    }

    /// Rows `r0..r1` of `x [n×d]`.
    pub fn slice_rows(&mut self, x: Var, r0: usize, r1: usize) -> Var {
        let tx = &self.nodes[x.0].value;
        let (n, d) = tx.dims2();
        assert!(r0 <= r1 && r1 <= n, "slice_rows {r0}..{r1} out of range for {n}");
        let value = Tensor::new(vec![r1 - r0, d], tx.data()[r0 * d..r1 * d].to_vec()).unwrap();
        let requires = self.nodes[x.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |_, _, g, sink| {
                axpy(1.0, g, &mut sink.acc(x, n * d)[r0 * d..r1 * d]);
            })),
        )
    }

    /// Reorder rows of `x [n×d]`: output row `i` is input row `perm[i]`.
    pub fn permute_rows(&mut self, x: Var, perm: &[usize]) -> Var {
        let tx = &self.nodes[x.0].value;
        let (n, d) = tx.dims2();
        assert_eq!(perm.len(), n, "permute_rows: perm length {} for {n} rows", perm.len());
        let mut data = Vec::with_capacity(n * d);
        for &src in perm {
            data.extend_from_slice(tx.row(src));
        }
        let value = Tensor::new(vec![n, d], data).unwrap();
        let requires = self.nodes[x.0].requires;
        let perm: Vec<usize> = perm.to_vec();
        self.push(
            value,
            requires,
            Some(Box::new(move |_, _, g, sink| {
                let dx = sink.acc(x, n * d);
                for (i, &src) in perm.iter().enumerate() {
                    axpy(1.0, &g[i * d..(i + 1) * d], &mut dx[src * d..(src + 1) * d]);
                }
            })),
        )
    }

    /// Copy of `x` that blocks gradient flow (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, false, None)
    }

    // ── Gaussian splatting ──────────────────────────────────────────────────

    /// Render 2D points (normalized coordinates in [-1, 1]) onto an `h×w`
    /// grid. Each point contributes an isotropic Gaussian of `sigma_px`
    /// pixels; per-pixel value is `1 - Π(1 - g)` clamped to
    /// `(SILHOUETTE_EPS, 1 - SILHOUETTE_EPS)`. Gradients are zero where the
    /// clamp is active.
    pub fn gaussian_splat(&mut self, points: Var, h: usize, w: usize, sigma_px: f64) -> Var {
        let tp = &self.nodes[points.0].value;
        let (nv, two) = if tp.numel() == 0 { (0, 2) } else { tp.dims2() };
        assert_eq!(two, 2, "gaussian_splat expects [V×2] points");
        assert!(h > 0 && w > 0 && sigma_px > 0.0, "bad splat grid {h}x{w} sigma {sigma_px}");
        let inv2s2 = 1.0 / (2.0 * sigma_px * sigma_px);

        // Separable Gaussian tables: g(pixel) = gx[v][col] * gy[v][row].
        let mut px = vec![0.0; nv];
        let mut py = vec![0.0; nv];
        let mut gx = vec![0.0; nv * w];
        let mut gy = vec![0.0; nv * h];
        for v in 0..nv {
            px[v] = (tp.data()[v * 2] + 1.0) * 0.5 * w as f64 - 0.5;
            py[v] = (tp.data()[v * 2 + 1] + 1.0) * 0.5 * h as f64 - 0.5;
            for j in 0..w {
                let dx = j as f64 - px[v];
                gx[v * w + j] = (-dx * dx * inv2s2).exp();
            }
            for i in 0..h {
                let dy = i as f64 - py[v];
                gy[v * h + i] = (-dy * dy * inv2s2).exp();
            }
        }
        let mut data = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let mut prod = 1.0;
                for v in 0..nv {
                    prod *= 1.0 - gx[v * w + j] * gy[v * h + i];
                }
                data[i * w + j] = (1.0 - prod).clamp(SILHOUETTE_EPS, 1.0 - SILHOUETTE_EPS);
            }
        }
        let value = Tensor::new(vec![h, w], data).unwrap();
        let requires = self.nodes[points.0].requires;
        self.push(
            value,
            requires,
            Some(Box::new(move |nodes, out, g, sink| {
                if nv == 0 {
                    return;
                }
                let outv = nodes[out.0].value.data();
                let dp = sink.acc(points, nv * 2);
                let mut factors = vec![0.0; nv];
                let mut suffix = vec![0.0; nv + 1];
                for i in 0..h {
                    for j in 0..w {
                        let gv = g[i * w + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let o = outv[i * w + j];
                        // Clamped pixels contribute no gradient.
                        if o <= SILHOUETTE_EPS || o >= 1.0 - SILHOUETTE_EPS {
                            continue;
                        }
                        for v in 0..nv {
                            factors[v] = 1.0 - gx[v * w + j] * gy[v * h + i];
                        }
                        suffix[nv] = 1.0;
                        for v in (0..nv).rev() {
                            suffix[v] = suffix[v + 1] * factors[v];
                        }
                        let mut prefix = 1.0;
                        for v in 0..nv {
                            // d(1-Π)/d g_v = Π_{u≠v} (1 - g_u)
                            let partial = prefix * suffix[v + 1];
                            prefix *= factors[v];
                            if partial == 0.0 {
                                continue;
                            }
                            let gauss = gx[v * w + j] * gy[v * h + i];
                            let dg = gv * partial * gauss;
                            // d g / d px = g * (j - px) / σ²; px = (x+1)·w/2 - 1/2
                            dp[v * 2] += dg * (j as f64 - px[v]) * 2.0 * inv2s2 * 0.5 * w as f64;
                            dp[v * 2 + 1] +=
                                dg * (i as f64 - py[v]) * 2.0 * inv2s2 * 0.5 * h as f64;
                        }
                    }
                }
            })),
        )
    }
}

// ── Flat BLAS-ish kernels ───────────────────────────────────────────────────

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out += a [m×k] · b [k×n]`
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            axpy(av, &b[p * n..(p + 1) * n], orow);
        }
    }
}

/// `out += a [m×k] · bᵀ` where `b` is `[n×k]`
fn mm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot_slices(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += aᵀ · b` where `a` is `[m×k]` and `b` is `[m×n]`
fn mm_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            axpy(av, brow, &mut out[p * n..(p + 1) * n]);
        }
    }
}
