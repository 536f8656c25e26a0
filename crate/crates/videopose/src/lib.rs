//! Video-based 3D human pose and shape estimation, end to end and on the CPU:
//! a tape-based autodiff engine, an articulated body model with differentiable
//! weak-perspective rendering, self-attentive temporal aggregation with motion
//! forecasting, adversarially regularized training on a synthetic corpus, and
//! the surrounding tooling (metrics, multi-person box tracking, CLI).

pub mod body;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod disc;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod regress;
pub mod store;
pub mod synth;
pub mod tape;
pub mod temporal;
pub mod tensor;
pub mod track;
pub mod train;

pub use check::{finite_diff_check, finite_diff_check_sampled};
pub use store::{adam_step, ParameterStore};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
