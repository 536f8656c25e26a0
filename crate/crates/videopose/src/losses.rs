//! Supervised and self-supervised training losses: parameter regression,
//! 3D/2D joint reprojection, silhouette cross-entropy, cross-segment camera
//! consistency, occlusion-consistency on parameters, and the weighted total.
//! All residual norms are unsquared Euclidean distances.

use thiserror::Error;

use crate::regress::{regress_iterative_rows, RegressorHead, SequenceEstimate};
use crate::store::ParameterStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss term {term} is not finite (value {value})")]
    NonFinite { term: String, value: f64 },
    #[error("{what}")]
    OutOfRange { what: String },
}

/// Weights of the combined objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub theta: f64,
    pub joint3d: f64,
    pub joint2d: f64,
    pub adv: f64,
    pub feature: f64,
    pub mask: f64,
    pub camera: f64,
    pub param_beta: f64,
    pub param_theta: f64,
    pub param_cam: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 0.06,
            theta: 60.0,
            joint3d: 300.0,
            joint2d: 300.0,
            adv: 2.0,
            feature: 1.0,
            mask: 300.0,
            camera: 0.1,
            param_beta: 0.06,
            param_theta: 60.0,
            param_cam: 0.1,
        }
    }
}

/// Σᵢ ‖aᵢ − bᵢ‖₂ over matching rows.
fn row_norm_loss(tape: &mut Tape, a: Var, b: Var) -> Var {
    let diff = tape.sub(a, b);
    tape.norm_rows_sum(diff)
}

/// The two body-parameter residuals (‖β − β̂‖₂, Σᵢ ‖θᵢ − θ̂ᵢ‖₂) kept
/// separate so they can carry different weights.
pub fn smpl_terms(
    tape: &mut Tape,
    gt_theta: Var,
    gt_beta: Var,
    est_theta: Var,
    est_beta: Var,
) -> (Var, Var) {
    let bdiff = tape.sub(gt_beta, est_beta);
    let bloss = tape.norm2(bdiff);
    let tloss = row_norm_loss(tape, gt_theta, est_theta);
    (bloss, tloss)
}

/// ‖β − β̂‖₂ + Σᵢ ‖θᵢ − θ̂ᵢ‖₂ over frames.
pub fn smpl_loss(tape: &mut Tape, gt_theta: Var, gt_beta: Var, est_theta: Var, est_beta: Var) -> Var {
    let (bloss, tloss) = smpl_terms(tape, gt_theta, gt_beta, est_theta, est_beta);
    tape.add(bloss, tloss)
}

/// Σᵢ ‖Xᵢ − X̂ᵢ‖₂ with the norm over each frame's flattened joint block
/// (`[N × 3k]`).
pub fn joint_loss_3d(tape: &mut Tape, gt: Var, est: Var) -> Var {
    row_norm_loss(tape, gt, est)
}

/// 2D keypoint loss `[N × 2k]` with a per-joint visibility mask `[N × k]`:
/// residuals of invisible joints are excluded.
pub fn joint_loss_2d(tape: &mut Tape, gt: Var, est: Var, visibility: &Tensor) -> Var {
    let (n, k) = visibility.dims2();
    let (ng, w) = tape.value(gt).dims2();
    assert_eq!((n, 2 * k), (ng, w), "2D loss: {n}×{k} visibility for {ng}×{w} keypoints");
    let mut expanded = vec![0.0; n * 2 * k];
    for i in 0..n {
        for j in 0..k {
            let v = visibility.at2(i, j);
            expanded[i * 2 * k + 2 * j] = v;
            expanded[i * 2 * k + 2 * j + 1] = v;
        }
    }
    let mask = tape.constant(Tensor::new(vec![n, 2 * k], expanded).unwrap());
    let diff = tape.sub(gt, est);
    let masked = tape.mul(diff, mask);
    tape.norm_rows_sum(masked)
}

/// One-sided silhouette cross-entropy: −Σ m·log(m̂). The pseudo mask is
/// data; the projection must lie strictly inside (0,1), which the soft
/// renderer's clamp guarantees.
pub fn mask_loss(tape: &mut Tape, pseudo: &Tensor, proj: Var) -> Result<Var, LossError> {
    let pv = tape.value(proj);
    assert_eq!(pseudo.shape(), pv.shape(), "mask loss: shape mismatch");
    for &v in pv.data() {
        if !(v > 0.0 && v < 1.0) {
            return Err(LossError::OutOfRange {
                what: format!("projected silhouette value {v} outside (0,1)"),
            });
        }
    }
    let m = tape.constant(pseudo.clone());
    let logp = tape.ln(proj);
    let weighted = tape.mul(m, logp);
    let total = tape.sum_all(weighted);
    Ok(tape.neg(total))
}

/// Cross-segment camera consistency: regress raw cameras from both fused
/// segments and penalize Σ ‖c¹ᵢ − c²ᵢ‖₂ over the overlapping frames
/// (local index ranges into each segment). Raw 6-vectors are compared, i.e.
/// before the exp of scale.
#[allow(clippy::too_many_arguments)]
pub fn camera_consistency_loss(
    tape: &mut Tape,
    store: &ParameterStore,
    cam_head: &RegressorHead,
    fused_s1: Var,
    fused_s2: Var,
    overlap_s1: std::ops::Range<usize>,
    overlap_s2: std::ops::Range<usize>,
    iters: usize,
) -> Var {
    assert_eq!(overlap_s1.len(), overlap_s2.len(), "overlap ranges must have equal length");
    if overlap_s1.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let raw1 = regress_iterative_rows(tape, store, cam_head, fused_s1, iters);
    let raw2 = regress_iterative_rows(tape, store, cam_head, fused_s2, iters);
    let o1 = tape.slice_rows(raw1, overlap_s1.start, overlap_s1.end);
    let o2 = tape.slice_rows(raw2, overlap_s2.start, overlap_s2.end);
    row_norm_loss(tape, o1, o2)
}

/// The three occlusion-consistency components, kept separate so each can
/// carry its own weight in the total objective.
pub struct OcclusionTerms {
    pub beta: Var,
    pub theta: Var,
    pub camera: Var,
}

/// Occlusion consistency on parameters: the clean sequence's estimates
/// supervise the occluded sequence's, so gradients flow only into the
/// occluded branch.
pub fn occlusion_param_terms(
    tape: &mut Tape,
    original: &SequenceEstimate,
    occluded: &SequenceEstimate,
) -> OcclusionTerms {
    let theta_ref = tape.detach(original.theta);
    let beta_ref = tape.detach(original.beta);
    let cam_ref = tape.detach(original.cam_raw);
    let bdiff = tape.sub(beta_ref, occluded.beta);
    OcclusionTerms {
        beta: tape.norm2(bdiff),
        theta: row_norm_loss(tape, theta_ref, occluded.theta),
        camera: row_norm_loss(tape, cam_ref, occluded.cam_raw),
    }
}

/// Unweighted sum of the occlusion-consistency components.
pub fn occlusion_param_loss(
    tape: &mut Tape,
    original: &SequenceEstimate,
    occluded: &SequenceEstimate,
) -> Var {
    let terms = occlusion_param_terms(tape, original, occluded);
    let sum = tape.add(terms.beta, terms.theta);
    tape.add(sum, terms.camera)
}

/// One named component of the total objective.
pub struct LossTerm {
    pub name: &'static str,
    pub value: Var,
    pub weight: f64,
}

/// Weighted sum of the components. Returns the scalar total plus each
/// term's raw value for logging; a non-finite component is an error naming
/// the term.
pub fn total_loss(
    tape: &mut Tape,
    terms: &[LossTerm],
) -> Result<(Var, Vec<(&'static str, f64)>), LossError> {
    let mut report = Vec::with_capacity(terms.len());
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for term in terms {
        let raw = tape.value(term.value).item();
        if !raw.is_finite() {
            return Err(LossError::NonFinite { term: term.name.to_string(), value: raw });
        }
        report.push((term.name, raw));
        let scaled = tape.scale(term.value, term.weight);
        acc = tape.add(acc, scaled);
    }
    let total = tape.value(acc).item();
    if !total.is_finite() {
        return Err(LossError::NonFinite { term: "total".to_string(), value: total });
    }
    Ok((acc, report))
}
