//! Temporal aggregation over per-frame features: bidirectional self-attention
//! with a residual connection, a next-step feature forecaster, learned
//! two-way fusion of the two streams, and a recurrent baseline used for
//! ablation comparisons.

use std::cmp::Ordering;

use rand::Rng;

use crate::nn::{init_uniform, vcat, Activation, Dense};
use crate::store::ParameterStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Frame self-attention. Queries and keys each come from a two-layer
/// leaky-ReLU network; scores are raw inner products (no width scaling).
#[derive(Debug)]
pub struct AttentionModule {
    q1: Dense,
    q2: Dense,
    k1: Dense,
    k2: Dense,
    pub dim: usize,
}

impl AttentionModule {
    pub fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, name: &str, d: usize) -> Self {
        AttentionModule {
            q1: Dense::new(store, rng, &format!("{name}.q1"), d, d, Activation::LeakyRelu),
            q2: Dense::new(store, rng, &format!("{name}.q2"), d, d, Activation::LeakyRelu),
            k1: Dense::new(store, rng, &format!("{name}.k1"), d, d, Activation::LeakyRelu),
            k2: Dense::new(store, rng, &format!("{name}.k2"), d, d, Activation::LeakyRelu),
            dim: d,
        }
    }
}

/// Attention matrix over frames: row i is the softmax of qᵢ·kⱼ over j.
pub fn attention_weights(
    tape: &mut Tape,
    store: &ParameterStore,
    att: &AttentionModule,
    features: Var,
) -> Var {
    let q_hidden = att.q1.forward_rows(tape, store, features);
    let q = att.q2.forward_rows(tape, store, q_hidden);
    let k_hidden = att.k1.forward_rows(tape, store, features);
    let k = att.k2.forward_rows(tape, store, k_hidden);
    let scores = tape.matmul_nt(q, k);
    tape.softmax_rows(scores)
}

/// Stable lexicographic-by-value row order. Bitwise-equal rows keep their
/// input order, which is harmless: their attention outputs are identical.
fn canonical_order(f: &Tensor) -> Vec<usize> {
    let (n, d) = f.dims2();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        for c in 0..d {
            match f.at2(a, c).total_cmp(&f.at2(b, c)) {
                Ordering::Equal => continue,
                other => return other,
            }
        }
        Ordering::Equal
    });
    idx
}

/// Residual self-attention: hᵢ = fᵢ + Σⱼ aᵢⱼ·fⱼ.
///
/// Frames are reordered into a canonical (value-sorted) arrangement before
/// the arithmetic and restored afterwards, so permuting the input frames
/// permutes the output bit-for-bit — float summation order never depends on
/// how the caller happened to order the frames.
pub fn self_attention(
    tape: &mut Tape,
    store: &ParameterStore,
    att: &AttentionModule,
    features: Var,
) -> Var {
    let perm = canonical_order(tape.value(features));
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let canon = tape.permute_rows(features, &perm);
    let a = attention_weights(tape, store, att, canon);
    let mixed = tape.matmul(a, canon);
    let h = tape.add(canon, mixed);
    tape.permute_rows(h, &inv)
}

/// Next-step forecaster: two dense layers applied per frame.
#[derive(Debug)]
pub struct ForecastModule {
    l1: Dense,
    l2: Dense,
    pub dim: usize,
}

impl ForecastModule {
    pub fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, name: &str, d: usize) -> Self {
        Self::with_activation(store, rng, name, d, Activation::LeakyRelu)
    }

    /// Constructor with an explicit activation; tests use `Activation::None`
    /// together with identity weights to check the plumbing.
    pub fn with_activation<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        d: usize,
        activation: Activation,
    ) -> Self {
        ForecastModule {
            l1: Dense::new(store, rng, &format!("{name}.l1"), d, d, activation),
            l2: Dense::new(store, rng, &format!("{name}.l2"), d, d, activation),
            dim: d,
        }
    }

    /// Parameter ids of (l1.w, l1.b, l2.w, l2.b), for test configuration.
    pub fn param_ids(&self) -> [usize; 4] {
        [self.l1.w, self.l1.b, self.l2.w, self.l2.b]
    }
}

/// Predict each frame's successor: output row i is the forecast for frame
/// i+1, made from frame i. The last row predicts past the end of the window
/// and is simply never consumed by the losses or the fusion.
pub fn forecast(
    tape: &mut Tape,
    store: &ParameterStore,
    fm: &ForecastModule,
    features: Var,
) -> Var {
    let hidden = fm.l1.forward_rows(tape, store, features);
    fm.l2.forward_rows(tape, store, hidden)
}

/// Σᵢ ‖fᵢ₊₁ − f̂ᵢ₊₁‖₂ over the N−1 frames that have both an observation and
/// a forecast (plain Euclidean norms, not squared). Zero for N < 2.
pub fn feature_loss(tape: &mut Tape, features: Var, predictions: Var) -> Var {
    let (n, _) = tape.value(features).dims2();
    if n < 2 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let actual = tape.slice_rows(features, 1, n);
    let pred = tape.slice_rows(predictions, 0, n - 1);
    let diff = tape.sub(actual, pred);
    tape.norm_rows_sum(diff)
}

/// Two-way fusion of the attention and forecast streams: one shared linear
/// head scores each candidate and a softmax over the pair yields the mix.
#[derive(Debug)]
pub struct FusionModule {
    head: Dense,
    pub dim: usize,
}

impl FusionModule {
    pub fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, name: &str, d: usize) -> Self {
        FusionModule {
            head: Dense::new(store, rng, &format!("{name}.head"), d, 1, Activation::None),
            dim: d,
        }
    }

    /// Parameter ids of (w, b), for test configuration.
    pub fn param_ids(&self) -> [usize; 2] {
        [self.head.w, self.head.b]
    }
}

/// Fᵢ = a_h·hᵢ + a_f·f̂ᵢ with (a_h, a_f) the softmax of the shared head's
/// scores. The first frame has no forecast, so F₁ = h₁ exactly.
pub fn fuse(
    tape: &mut Tape,
    store: &ParameterStore,
    fu: &FusionModule,
    h: Var,
    predictions: Var,
) -> Var {
    let (n, _) = tape.value(h).dims2();
    if n == 1 {
        return h;
    }
    let score_h = fu.head.forward_rows(tape, store, h);
    let score_f = fu.head.forward_rows(tape, store, predictions);
    // Frame i ≥ 2 weighs hᵢ against the forecast made from frame i−1.
    let u = tape.slice_rows(score_h, 1, n);
    let v = tape.slice_rows(score_f, 0, n - 1);
    let scores = tape.concat_cols(u, v);
    let weights = tape.softmax_rows(scores);
    let sel_h = tape.constant(Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap());
    let sel_f = tape.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
    let ah_col = tape.matmul(weights, sel_h);
    let af_col = tape.matmul(weights, sel_f);
    let ah = tape.reshape(ah_col, vec![n - 1]);
    let af = tape.reshape(af_col, vec![n - 1]);
    let tail_h = tape.slice_rows(h, 1, n);
    let tail_f = tape.slice_rows(predictions, 0, n - 1);
    let wh = tape.mul_rows(tail_h, ah);
    let wf = tape.mul_rows(tail_f, af);
    let tail = tape.add(wh, wf);
    let first = tape.slice_rows(h, 0, 1);
    vcat(tape, &[first, tail])
}

// ── Recurrent baseline ───────────────────────────────────────────────────────

/// One GRU layer; gate weights follow the standard update/reset/candidate
/// parameterization.
#[derive(Debug)]
struct GruLayer {
    wz: usize,
    uz: usize,
    bz: usize,
    wr: usize,
    ur: usize,
    br: usize,
    wh: usize,
    uh: usize,
    bh: usize,
}

impl GruLayer {
    fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, name: &str, d: usize) -> Self {
        let mut reg = |suffix: &str, rows: usize, cols: usize, rng: &mut R| {
            store.register(&format!("{name}.{suffix}"), init_uniform(rng, rows, cols))
        };
        let wz = reg("wz", d, d, rng);
        let uz = reg("uz", d, d, rng);
        let wr = reg("wr", d, d, rng);
        let ur = reg("ur", d, d, rng);
        let wh = reg("wh", d, d, rng);
        let uh = reg("uh", d, d, rng);
        let bz = store.register(&format!("{name}.bz"), Tensor::zeros(&[d]));
        let br = store.register(&format!("{name}.br"), Tensor::zeros(&[d]));
        let bh = store.register(&format!("{name}.bh"), Tensor::zeros(&[d]));
        GruLayer { wz, uz, bz, wr, ur, br, wh, uh, bh }
    }

    fn step(&self, tape: &mut Tape, store: &ParameterStore, x: Var, h: Var) -> Var {
        let gate = |tape: &mut Tape, w: usize, u: usize, b: usize, hin: Var| {
            let wv = tape.param(store, w);
            let uv = tape.param(store, u);
            let bv = tape.param(store, b);
            let wx = tape.matvec(wv, x);
            let uh = tape.matvec(uv, hin);
            let s = tape.add(wx, uh);
            tape.add(s, bv)
        };
        let z_pre = gate(tape, self.wz, self.uz, self.bz, h);
        let z = tape.sigmoid(z_pre);
        let r_pre = gate(tape, self.wr, self.ur, self.br, h);
        let r = tape.sigmoid(r_pre);
        let rh = tape.mul(r, h);
        let cand_pre = gate(tape, self.wh, self.uh, self.bh, rh);
        let cand = tape.tanh(cand_pre);
        // h' = (1−z)⊙h + z⊙cand
        let keep = tape.affine(z, -1.0, 1.0);
        let a = tape.mul(keep, h);
        let b = tape.mul(z, cand);
        tape.add(a, b)
    }
}

/// Stacked GRU over the frame axis with the same residual connection as the
/// attention stream, used as the recurrent point of comparison.
#[derive(Debug)]
pub struct GruBaseline {
    layers: Vec<GruLayer>,
    pub dim: usize,
}

impl GruBaseline {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        d: usize,
        num_layers: usize,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| GruLayer::new(store, rng, &format!("{name}.layer{l}"), d))
            .collect();
        GruBaseline { layers, dim: d }
    }
}

pub fn gru_forward(
    tape: &mut Tape,
    store: &ParameterStore,
    gru: &GruBaseline,
    features: Var,
) -> Var {
    let (n, d) = tape.value(features).dims2();
    assert_eq!(d, gru.dim, "gru width {d} vs {}", gru.dim);
    let mut rows: Vec<Var> = (0..n).map(|i| tape.row(features, i)).collect();
    for layer in &gru.layers {
        let mut h = tape.constant(Tensor::zeros(&[d]));
        let mut out = Vec::with_capacity(n);
        for &x in &rows {
            h = layer.step(tape, store, x, h);
            out.push(h);
        }
        rows = out;
    }
    let stacked = tape.stack_rows(&rows);
    tape.add(features, stacked)
}
