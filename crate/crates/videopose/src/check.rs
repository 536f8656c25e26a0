//! Finite-difference gradient checking.
//!
//! This is the oracle every differentiable operation is tested against:
//! central differences with step 1e-5 on 64-bit values, compared against the
//! tape's analytic gradients as max |analytic - numeric| / max(1, |numeric|).

use rand::Rng;

use crate::store::ParameterStore;
use crate::tape::{Tape, Var};

pub const FD_STEP: f64 = 1e-5;

/// Relative error of an (analytic, numeric) derivative pair.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval<F>(f: &mut F, store: &ParameterStore) -> f64
where
    F: FnMut(&mut Tape, &ParameterStore) -> Var,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store);
    tape.value(out).item()
}

fn analytic_grads<F>(f: &mut F, store: &ParameterStore) -> Vec<Vec<f64>>
where
    F: FnMut(&mut Tape, &ParameterStore) -> Var,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store);
    let grads = tape.backward(out);
    tape.param_grads(&grads, store)
        .expect("finite_diff_check: loss must reach every registered parameter")
        .into_iter()
        .map(|t| t.into_data())
        .collect()
}

fn numeric_at<F>(f: &mut F, store: &mut ParameterStore, pid: usize, idx: usize) -> f64
where
    F: FnMut(&mut Tape, &ParameterStore) -> Var,
{
    let orig = store.value(pid).data()[idx];
    store.value_mut(pid).data_mut()[idx] = orig + FD_STEP;
    let up = eval(f, store);
    store.value_mut(pid).data_mut()[idx] = orig - FD_STEP;
    let down = eval(f, store);
    store.value_mut(pid).data_mut()[idx] = orig;
    (up - down) / (2.0 * FD_STEP)
}

/// Max relative error between tape gradients and central differences over
/// every scalar element of every parameter in the store. `f` must build the
/// scalar loss from scratch on the tape it is handed (graphs are rebuilt per
/// evaluation, so data-dependent control flow is fine).
pub fn finite_diff_check<F>(store: &mut ParameterStore, mut f: F) -> f64
where
    F: FnMut(&mut Tape, &ParameterStore) -> Var,
{
    let analytic = analytic_grads(&mut f, store);
    let mut worst = 0.0f64;
    for pid in 0..store.len() {
        for idx in 0..store.value(pid).numel() {
            let numeric = numeric_at(&mut f, store, pid, idx);
            worst = worst.max(rel_err(analytic[pid][idx], numeric));
        }
    }
    worst
}

/// Like `finite_diff_check` but probing `samples` randomly chosen scalar
/// coordinates instead of all of them. Used for whole-pipeline checks where
/// exhaustive probing would be quadratic in model size.
pub fn finite_diff_check_sampled<F, R: Rng>(
    store: &mut ParameterStore,
    rng: &mut R,
    samples: usize,
    mut f: F,
) -> f64
where
    F: FnMut(&mut Tape, &ParameterStore) -> Var,
{
    let analytic = analytic_grads(&mut f, store);
    let total: usize = (0..store.len()).map(|p| store.value(p).numel()).sum();
    assert!(total > 0, "store has no scalar parameters");
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut flat = rng.gen_range(0..total);
        let mut pid = 0;
        while flat >= store.value(pid).numel() {
            flat -= store.value(pid).numel();
            pid += 1;
        }
        let numeric = numeric_at(&mut f, store, pid, flat);
        worst = worst.max(rel_err(analytic[pid][flat], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // exp has derivative exp(x); a graph claiming d/dx = 1 must fail.
        // Emulate by checking ln against a deliberately shifted input value:
        // the harness itself must report a large error for a broken VJP.
        let mut store = ParameterStore::new();
        let w = store.register("w", Tensor::vector(vec![0.7]));
        let err = finite_diff_check(&mut store, |tape, store| {
            let x = tape.param(store, w);
            // sum(x * detach(x)) has analytic gradient detach(x) = x, but the
            // true derivative of x² is 2x — detach hides half of it.
            let d = tape.detach(x);
            let y = tape.mul(x, d);
            tape.sum_all(y)
        });
        assert!(err > 1e-2, "detached square should disagree with finite differences: {err}");
    }

    #[test]
    fn elementwise_chain_matches_finite_differences() {
        // Chain of five composed ops: affine → sigmoid → mul → exp-ish → norm.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..20 {
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
            let shape = [rng.gen_range(2..5usize), rng.gen_range(2..5usize)];
            let mut store = ParameterStore::new();
            let w = store.register("w", randn_tensor(&mut rng2, &shape));
            let b = store.register("b", randn_tensor(&mut rng2, &shape));
            let err = finite_diff_check(&mut store, |tape, store| {
                let wv = tape.param(store, w);
                let bv = tape.param(store, b);
                let a = tape.affine(wv, 1.3, -0.2);
                let s = tape.sigmoid(a);
                let m = tape.mul(s, bv);
                let t = tape.tanh(m);
                tape.norm2(t)
            });
            assert!(err < 1e-6, "chain gradient error {err} at seed {seed}");
        }
    }

    #[test]
    fn sampled_check_agrees_with_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        let w = store.register("w", randn_tensor(&mut rng, &[4, 3]));
        let full = finite_diff_check(&mut store, |tape, store| {
            let x = tape.param(store, w);
            let s = tape.sigmoid(x);
            tape.sum_all(s)
        });
        let sampled = finite_diff_check_sampled(&mut store, &mut rng, 12, |tape, store| {
            let x = tape.param(store, w);
            let s = tape.sigmoid(x);
            tape.sum_all(s)
        });
        assert!(full < 1e-7 && sampled < 1e-7, "full {full}, sampled {sampled}");
    }
}
