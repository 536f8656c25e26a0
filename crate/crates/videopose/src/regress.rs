//! Iterative-error-feedback regression of pose, shape, and camera from
//! fused frame features. Each head starts from a learned mean estimate and
//! refines it by predicting additive corrections from [feature; estimate].

use rand::Rng;

use crate::nn::{Activation, Dense};
use crate::store::ParameterStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One regression target: two hidden layers plus a zero-initialized linear
/// output, so the first correction is exactly zero and iteration starts at
/// `mean_param`.
#[derive(Debug)]
pub struct RegressorHead {
    l1: Dense,
    l2: Dense,
    out: Dense,
    mean_param: usize,
    pub feature_dim: usize,
    pub target_dim: usize,
}

impl RegressorHead {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        feature_dim: usize,
        hidden: usize,
        target_dim: usize,
    ) -> Self {
        let l1 = Dense::new(
            store,
            rng,
            &format!("{name}.l1"),
            feature_dim + target_dim,
            hidden,
            Activation::LeakyRelu,
        );
        let l2 = Dense::new(store, rng, &format!("{name}.l2"), hidden, hidden, Activation::LeakyRelu);
        let out = Dense::new_zeroed(store, &format!("{name}.out"), hidden, target_dim, Activation::None);
        let mean_param = store.register(&format!("{name}.mean"), Tensor::zeros(&[target_dim]));
        RegressorHead { l1, l2, out, mean_param, feature_dim, target_dim }
    }

    pub fn mean_param_id(&self) -> usize {
        self.mean_param
    }

    /// Parameter id of the output layer weight, for test configuration.
    pub fn out_layer_ids(&self) -> [usize; 2] {
        [self.out.w, self.out.b]
    }

    fn correction_vec(&self, tape: &mut Tape, store: &ParameterStore, inp: Var) -> Var {
        let x = self.l1.forward_vec(tape, store, inp);
        let x = self.l2.forward_vec(tape, store, x);
        self.out.forward_vec(tape, store, x)
    }

    fn correction_rows(&self, tape: &mut Tape, store: &ParameterStore, inp: Var) -> Var {
        let x = self.l1.forward_rows(tape, store, inp);
        let x = self.l2.forward_rows(tape, store, x);
        self.out.forward_rows(tape, store, x)
    }
}

/// Refine the mean estimate `iters` times: pₜ₊₁ = pₜ + head([feature; pₜ]).
pub fn regress_iterative(
    tape: &mut Tape,
    store: &ParameterStore,
    head: &RegressorHead,
    feature: Var,
    iters: usize,
) -> Var {
    assert!(iters >= 1, "iterative regression needs at least one step");
    assert_eq!(tape.value(feature).numel(), head.feature_dim, "feature width mismatch");
    let mut p = tape.param(store, head.mean_param);
    for _ in 0..iters {
        let inp = tape.concat(&[feature, p]);
        let delta = head.correction_vec(tape, store, inp);
        p = tape.add(p, delta);
    }
    p
}

/// Row-batched variant: every row of `features [n×d]` is regressed
/// independently, sharing the head. Identical to running
/// `regress_iterative` per row, just in one pass.
pub fn regress_iterative_rows(
    tape: &mut Tape,
    store: &ParameterStore,
    head: &RegressorHead,
    features: Var,
    iters: usize,
) -> Var {
    assert!(iters >= 1, "iterative regression needs at least one step");
    let (n, d) = tape.value(features).dims2();
    assert_eq!(d, head.feature_dim, "feature width mismatch");
    let mean = tape.param(store, head.mean_param);
    let mut p = tape.repeat_row(mean, n);
    for _ in 0..iters {
        let inp = tape.concat_cols(features, p);
        let delta = head.correction_rows(tape, store, inp);
        p = tape.add(p, delta);
    }
    p
}

/// The three heads of the estimator: per-frame pose, per-sequence shape,
/// per-frame camera.
#[derive(Debug)]
pub struct RegressorSet {
    pub pose: RegressorHead,
    pub shape: RegressorHead,
    pub camera: RegressorHead,
    pub iters: usize,
}

impl RegressorSet {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        feature_dim: usize,
        hidden: usize,
        num_joints: usize,
        num_shapes: usize,
        iters: usize,
    ) -> Self {
        RegressorSet {
            pose: RegressorHead::new(store, rng, &format!("{name}.pose"), feature_dim, hidden, 3 * num_joints),
            shape: RegressorHead::new(store, rng, &format!("{name}.shape"), feature_dim, hidden, num_shapes),
            camera: RegressorHead::new(store, rng, &format!("{name}.cam"), feature_dim, hidden, 6),
            iters,
        }
    }
}

/// Per-sequence estimate. Cameras are kept in raw form (ln s, r, t); the
/// exp reparameterization is applied where a camera is consumed, keeping the
/// scale strictly positive.
pub struct SequenceEstimate {
    /// [N × 3J] axis-angle pose per frame.
    pub theta: Var,
    /// [num_shapes] shape coefficients shared by the whole sequence.
    pub beta: Var,
    /// [N × 6] raw camera per frame.
    pub cam_raw: Var,
}

/// Regress pose and camera per frame and a single shape vector from the
/// order-insensitive mean of the fused features.
pub fn regress_sequence(
    tape: &mut Tape,
    store: &ParameterStore,
    set: &RegressorSet,
    fused: Var,
) -> SequenceEstimate {
    let theta = regress_iterative_rows(tape, store, &set.pose, fused, set.iters);
    let pooled = tape.mean_rows(fused);
    let beta = regress_iterative(tape, store, &set.shape, pooled, set.iters);
    let cam_raw = regress_iterative_rows(tape, store, &set.camera, fused, set.iters);
    SequenceEstimate { theta, beta, cam_raw }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{cam_from_raw, CameraParams};
    use crate::check::finite_diff_check;
    use crate::nn::LEAKY_SLOPE;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn fresh_head_returns_the_mean_estimate() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = RegressorHead::new(&mut store, &mut rng, "h", 6, 16, 4);
        let mean: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        *store.value_mut(head.mean_param_id()) = Tensor::vector(mean.clone());
        for iters in [1, 3, 7] {
            let mut tape = Tape::new();
            let f = tape.leaf(Tensor::vector((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()));
            let p = regress_iterative(&mut tape, &store, &head, f, iters);
            assert_eq!(tape.value(p).data(), &mean[..], "zero output layer must keep the mean");
        }
    }

    #[test]
    fn single_iteration_matches_manual_evaluation() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = RegressorHead::new(&mut store, &mut rng, "h", 5, 8, 3);
        // Give the output layer real weights; new() zero-initializes it.
        *store.value_mut(head.out_layer_ids()[0]) = random_matrix(&mut rng, 3, 8);
        *store.value_mut(head.out_layer_ids()[1]) =
            Tensor::vector((0..3).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let mean: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        *store.value_mut(head.mean_param_id()) = Tensor::vector(mean.clone());
        let feat: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let dense = |w: &Tensor, b: &Tensor, x: &[f64], leaky: bool| -> Vec<f64> {
            let (o, i) = w.dims2();
            (0..o)
                .map(|r| {
                    let mut s = b.data()[r];
                    for c in 0..i {
                        s += w.at2(r, c) * x[c];
                    }
                    if leaky && s < 0.0 {
                        s * LEAKY_SLOPE
                    } else {
                        s
                    }
                })
                .collect()
        };
        let mut inp = feat.clone();
        inp.extend_from_slice(&mean);
        let x = dense(store.value(head.l1.w), store.value(head.l1.b), &inp, true);
        let x = dense(store.value(head.l2.w), store.value(head.l2.b), &x, true);
        let delta = dense(store.value(head.out.w), store.value(head.out.b), &x, false);
        let want: Vec<f64> = mean.iter().zip(&delta).map(|(m, d)| m + d).collect();

        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::vector(feat));
        let p = regress_iterative(&mut tape, &store, &head, f, 1);
        for (g, w) in tape.value(p).data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "single step {g} vs manual {w}");
        }
    }

    #[test]
    fn three_iterations_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        let head = RegressorHead::new(&mut store, &mut rng, "h", 4, 6, 3);
        *store.value_mut(head.out_layer_ids()[0]) = random_matrix(&mut rng, 3, 6);
        let pf = store.register("feature", Tensor::vector(vec![0.3, -0.8, 0.5, 0.1]));
        let probe: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = finite_diff_check(&mut store, |tape, store| {
            let f = tape.param(store, pf);
            let p = regress_iterative(tape, store, &head, f, 3);
            let w = tape.constant(Tensor::vector(probe.clone()));
            tape.dot(p, w)
        });
        assert!(err < 1e-6, "iterative regression gradient error {err}");
    }

    #[test]
    fn row_batched_regression_matches_per_vector_path_bitwise() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = RegressorHead::new(&mut store, &mut rng, "h", 5, 8, 4);
        *store.value_mut(head.out_layer_ids()[0]) = random_matrix(&mut rng, 4, 8);
        let feats = random_matrix(&mut rng, 6, 5);
        let mut tape = Tape::new();
        let fv = tape.leaf(feats.clone());
        let batch = regress_iterative_rows(&mut tape, &store, &head, fv, 3);
        for i in 0..6 {
            let mut t2 = Tape::new();
            let f = t2.leaf(Tensor::vector(feats.row(i).to_vec()));
            let p = regress_iterative(&mut t2, &store, &head, f, 3);
            assert_eq!(tape.value(batch).row(i), t2.value(p).data(), "row {i} differs");
        }
    }

    #[test]
    fn sequence_estimate_has_contract_shapes() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = RegressorSet::new(&mut store, &mut rng, "reg", 7, 8, 12, 10, 3);
        let mut tape = Tape::new();
        let fused = tape.leaf(random_matrix(&mut rng, 4, 7));
        let est = regress_sequence(&mut tape, &store, &set, fused);
        assert_eq!(tape.value(est.theta).shape(), [4, 36]);
        assert_eq!(tape.value(est.beta).shape(), [10]);
        assert_eq!(tape.value(est.cam_raw).shape(), [4, 6]);
    }

    #[test]
    fn identical_fused_rows_give_identical_pose_rows() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let set = RegressorSet::new(&mut store, &mut rng, "reg", 5, 8, 2, 3, 3);
        for ids in [set.pose.out_layer_ids(), set.camera.out_layer_ids()] {
            let shape = store.value(ids[0]).shape().to_vec();
            let n: usize = shape.iter().product();
            *store.value_mut(ids[0]) =
                Tensor::new(shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        }
        let row: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let fused = tape.leaf(Tensor::from_rows(&vec![row; 3]));
        let est = regress_sequence(&mut tape, &store, &set, fused);
        let theta = tape.value(est.theta);
        assert_eq!(theta.row(0), theta.row(1));
        assert_eq!(theta.row(0), theta.row(2));
    }

    #[test]
    fn shape_estimate_is_exactly_frame_permutation_invariant() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let set = RegressorSet::new(&mut store, &mut rng, "reg", 6, 8, 2, 4, 3);
        let ids = set.shape.out_layer_ids();
        *store.value_mut(ids[0]) = random_matrix(&mut rng, 4, 8);
        let feats = random_matrix(&mut rng, 5, 6);
        let mut sigma: Vec<usize> = (0..5).collect();
        for i in (1..5).rev() {
            sigma.swap(i, rng.gen_range(0..=i));
        }
        let permuted =
            Tensor::from_rows(&sigma.iter().map(|&s| feats.row(s).to_vec()).collect::<Vec<_>>());

        let beta_of = |f: Tensor| {
            let mut tape = Tape::new();
            let fv = tape.leaf(f);
            let est = regress_sequence(&mut tape, &store, &set, fv);
            tape.value(est.beta).data().to_vec()
        };
        assert_eq!(beta_of(feats), beta_of(permuted), "shape estimate must ignore frame order");
    }

    #[test]
    fn regressed_camera_scale_is_strictly_positive() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set = RegressorSet::new(&mut store, &mut rng, "reg", 5, 8, 2, 3, 3);
        let ids = set.camera.out_layer_ids();
        // Exaggerated weights to push the raw scale strongly negative too.
        let shape = store.value(ids[0]).shape().to_vec();
        let n: usize = shape.iter().product();
        *store.value_mut(ids[0]) =
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let fused = tape.leaf(random_matrix(&mut rng, 4, 5));
        let est = regress_sequence(&mut tape, &store, &set, fused);
        for i in 0..4 {
            let raw = tape.row(est.cam_raw, i);
            let cam = cam_from_raw(&mut tape, raw);
            let s = tape.value(cam.s).item();
            assert!(s > 0.0, "camera scale {s} must be positive");
            let plain = CameraParams::from_raw(tape.value(est.cam_raw).row(i));
            assert!((plain.s - s).abs() < 1e-15);
        }
    }
}
