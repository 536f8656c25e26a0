//! Dense layers and parameter initialization.

use rand::Rng;

use crate::store::ParameterStore;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Negative-side slope shared by every leaky ReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    LeakyRelu,
    Sigmoid,
}

/// Uniform(-1/√fan_in, 1/√fan_in) init, drawn row-major.
pub fn init_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// `activation(W·x + b)` for a vector `x [in]`, or a dimension error naming
/// both shapes when `x` does not match `W`.
pub fn dense_layer(
    tape: &mut Tape,
    x: Var,
    w: Var,
    b: Var,
    activation: Activation,
) -> Result<Var, TensorError> {
    let (wr, wc) = tape.value(w).dims2();
    let xs = tape.value(x).shape().to_vec();
    if xs != [wc] {
        return Err(TensorError::ShapeMismatch { op: "dense_layer", left: vec![wr, wc], right: xs });
    }
    let y = tape.matvec(w, x);
    let y = tape.add(y, b);
    Ok(apply_activation(tape, y, activation))
}

pub fn apply_activation(tape: &mut Tape, x: Var, activation: Activation) -> Var {
    match activation {
        Activation::None => x,
        Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
        Activation::Sigmoid => tape.sigmoid(x),
    }
}

/// Stack matrices with equal column counts on top of each other. Row-major
/// layout makes this an exact concatenation of the underlying buffers.
pub fn vcat(tape: &mut Tape, parts: &[Var]) -> Var {
    assert!(!parts.is_empty(), "vcat of nothing");
    let d = tape.value(parts[0]).dims2().1;
    let mut rows = 0;
    let flats: Vec<Var> = parts
        .iter()
        .map(|&p| {
            let (n, dp) = tape.value(p).dims2();
            assert_eq!(dp, d, "vcat: column counts {dp} vs {d}");
            rows += n;
            tape.reshape(p, vec![n * d])
        })
        .collect();
    let cat = tape.concat(&flats);
    tape.reshape(cat, vec![rows, d])
}

/// A dense layer whose weights live in a `ParameterStore`. Works on single
/// vectors and row-batched matrices (one input per row).
#[derive(Debug)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), init_uniform(rng, out_dim, in_dim));
        let b = store.register(&format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Dense { w, b, in_dim, out_dim, activation }
    }

    /// Zero-initialized layer; used for regressor output heads so iteration
    /// zero reproduces the mean parameter exactly.
    pub fn new_zeroed(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), Tensor::zeros(&[out_dim, in_dim]));
        let b = store.register(&format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Dense { w, b, in_dim, out_dim, activation }
    }

    pub fn forward_vec(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        dense_layer(tape, x, w, b, self.activation).expect("dense layer input shape")
    }

    /// Apply the layer to every row of `x [n×in] -> [n×out]`.
    pub fn forward_rows(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Var {
        let (_, c) = tape.value(x).dims2();
        assert_eq!(c, self.in_dim, "dense rows: input width {c}, layer expects {}", self.in_dim);
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul_nt(x, w);
        let y = tape.add_row_broadcast(y, b);
        apply_activation(tape, y, self.activation)
    }
}
