//! Frame encoder and the assembled estimator: encode → aggregate → forecast
//! → fuse → regress, with switches for the reduced variants used in
//! comparisons (plain passthrough, recurrent aggregation, no forecasting).

use rand::Rng;
use thiserror::Error;

use crate::body::{body_forward, cam_from_raw, project, soft_silhouette, BodyVars};
use crate::nn::{Activation, Dense};
use crate::regress::{regress_sequence, RegressorSet, SequenceEstimate};
use crate::store::ParameterStore;
use crate::synth::{MotionSequence, Segment, SynthConfig};
use crate::tape::{Tape, Var};
use crate::temporal::{
    forecast, fuse, gru_forward, self_attention, AttentionModule, ForecastModule, FusionModule,
    GruBaseline,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("silhouette is {got_h}×{got_w}, encoder expects {want_h}×{want_w}")]
    ResolutionMismatch { want_h: usize, want_w: usize, got_h: usize, got_w: usize },
}

/// How per-frame features are aggregated over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalMode {
    /// Attention over all frames with a residual connection.
    SelfAttention,
    /// No aggregation: latents are the frame features unchanged.
    Passthrough,
    /// Two stacked gated recurrent layers (comparison baseline).
    Recurrent,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub sigma_px: f64,
    pub num_keypoints: usize,
    pub num_joints: usize,
    pub num_shapes: usize,
    /// Per-frame feature width d.
    pub feature_dim: usize,
    /// Hidden width of the encoder and regressor MLPs.
    pub hidden_dim: usize,
    /// Iterative-feedback refinement steps in the regressors.
    pub feedback_iters: usize,
    pub temporal: TemporalMode,
    pub use_forecast: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            sigma_px: 1.5,
            num_keypoints: 12,
            num_joints: 12,
            num_shapes: 10,
            feature_dim: 64,
            hidden_dim: 128,
            feedback_iters: 3,
            temporal: TemporalMode::SelfAttention,
            use_forecast: true,
        }
    }
}

/// Observations the estimator sees for one segment: rendered silhouettes
/// plus 2D keypoints with visibility flags. Ground truth never enters here.
#[derive(Debug, Clone)]
pub struct SegmentObs {
    pub silhouettes: Vec<Tensor>,
    /// [N × 2k] normalized keypoints.
    pub keypoints: Tensor,
    /// [N × k] visibility flags.
    pub visibility: Tensor,
}

impl SegmentObs {
    pub fn from_sequence(seq: &MotionSequence, segment: Segment) -> Self {
        let range = segment.frames();
        assert!(range.end <= seq.len(), "segment outside sequence");
        let kp_w = seq.keypoints.dims2().1;
        let vis_w = seq.visibility.dims2().1;
        let mut keypoints = Vec::with_capacity(segment.len * kp_w);
        let mut visibility = Vec::with_capacity(segment.len * vis_w);
        for f in range.clone() {
            keypoints.extend_from_slice(seq.keypoints.row(f));
            visibility.extend_from_slice(seq.visibility.row(f));
        }
        SegmentObs {
            silhouettes: range.map(|f| seq.silhouettes[f].clone()).collect(),
            keypoints: Tensor::new(vec![segment.len, kp_w], keypoints).unwrap(),
            visibility: Tensor::new(vec![segment.len, vis_w], visibility).unwrap(),
        }
    }

    pub fn whole_sequence(seq: &MotionSequence) -> Self {
        SegmentObs::from_sequence(seq, Segment { start: 0, len: seq.len() })
    }

    pub fn len(&self) -> usize {
        self.silhouettes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.silhouettes.is_empty()
    }

    /// A copy with occlusion rectangles applied to the observation:
    /// silhouette pixels zeroed, covered keypoints marked invisible.
    pub fn occluded(&self, spec: &crate::synth::OcclusionSpec, synth: &SynthConfig) -> SegmentObs {
        let n = self.len();
        assert_eq!(spec.rects_per_frame.len(), n, "occlusion spec frame count");
        let k = self.visibility.dims2().1;
        let mut out = self.clone();
        for f in 0..n {
            let keypoints = self.keypoints.row(f).to_vec();
            crate::synth::occlude_frame(
                &mut out.silhouettes[f],
                &keypoints,
                &mut out.visibility.data_mut()[f * k..(f + 1) * k],
                &spec.rects_per_frame[f],
                synth,
            );
        }
        out
    }
}

/// Two dense layers over the flattened silhouette concatenated with the
/// visibility-masked keypoints and the visibility flags themselves.
#[derive(Debug)]
pub struct Encoder {
    pub l1: Dense,
    pub l2: Dense,
    pub height: usize,
    pub width: usize,
    pub num_keypoints: usize,
    pub feature_dim: usize,
}

impl Encoder {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        cfg: &ModelConfig,
    ) -> Self {
        let input_dim = cfg.height * cfg.width + 3 * cfg.num_keypoints + 3;
        Encoder {
            l1: Dense::new(
                store,
                rng,
                &format!("{name}.l1"),
                input_dim,
                cfg.hidden_dim,
                Activation::LeakyRelu,
            ),
            l2: Dense::new(
                store,
                rng,
                &format!("{name}.l2"),
                cfg.hidden_dim,
                cfg.feature_dim,
                Activation::LeakyRelu,
            ),
            height: cfg.height,
            width: cfg.width,
            num_keypoints: cfg.num_keypoints,
            feature_dim: cfg.feature_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.height * self.width + 3 * self.num_keypoints + 3
    }

    /// Encodes all frames of a segment at once into [N × d] features.
    ///
    /// Keypoints enter standardized per frame (centered on the visible mean,
    /// divided by the visible RMS radius) with the removed statistics
    /// appended as three extra channels. Pose inference then reads a
    /// framing-invariant skeleton while the camera head still sees where and
    /// how large the person was. Each block is also scaled by the inverse
    /// square root of its width so no block dominates the first layer purely
    /// by its dimension count.
    pub fn encode_segment(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        obs: &SegmentObs,
    ) -> Result<Var, ModelError> {
        let n = obs.len();
        let k = self.num_keypoints;
        assert_eq!(obs.keypoints.dims2(), (n, 2 * k), "keypoint width mismatch");
        assert_eq!(obs.visibility.dims2(), (n, k), "visibility width mismatch");
        let in_dim = self.input_dim();
        let sil_scale = 1.0 / ((self.height * self.width) as f64).sqrt();
        let kp_scale = 1.0 / ((2 * k) as f64).sqrt();
        let vis_scale = 1.0 / (k as f64).sqrt();
        let mut rows = Vec::with_capacity(n * in_dim);
        for f in 0..n {
            let sil = &obs.silhouettes[f];
            let (gh, gw) = sil.dims2();
            if (gh, gw) != (self.height, self.width) {
                return Err(ModelError::ResolutionMismatch {
                    want_h: self.height,
                    want_w: self.width,
                    got_h: gh,
                    got_w: gw,
                });
            }
            rows.extend(sil.data().iter().map(|p| p * sil_scale));
            let kp = obs.keypoints.row(f);
            let vis = obs.visibility.row(f);
            let visible = vis.iter().sum::<f64>();
            let (mut mx, mut my, mut spread) = (0.0, 0.0, 1.0);
            if visible > 0.0 {
                for j in 0..k {
                    mx += kp[2 * j] * vis[j];
                    my += kp[2 * j + 1] * vis[j];
                }
                mx /= visible;
                my /= visible;
                let mut var = 0.0;
                for j in 0..k {
                    let (dx, dy) = (kp[2 * j] - mx, kp[2 * j + 1] - my);
                    var += (dx * dx + dy * dy) * vis[j];
                }
                spread = (var / visible).sqrt().max(1e-6);
            }
            for j in 0..k {
                rows.push((kp[2 * j] - mx) / spread * vis[j] * kp_scale);
                rows.push((kp[2 * j + 1] - my) / spread * vis[j] * kp_scale);
            }
            rows.extend(vis.iter().map(|v| v * vis_scale));
            rows.push(mx);
            rows.push(my);
            rows.push(spread.ln());
        }
        let input = tape.constant(Tensor::new(vec![n, in_dim], rows).unwrap());
        let hidden = self.l1.forward_rows(tape, store, input);
        Ok(self.l2.forward_rows(tape, store, hidden))
    }
}

/// The full video-to-parameters model.
#[derive(Debug)]
pub struct Estimator {
    pub encoder: Encoder,
    pub attention: Option<AttentionModule>,
    pub recurrent: Option<GruBaseline>,
    pub forecaster: Option<ForecastModule>,
    pub fusion: Option<FusionModule>,
    pub regressors: RegressorSet,
    pub config: ModelConfig,
}

/// Everything one forward pass over a segment produces. `forecasts` row i
/// holds the prediction for frame i+1; it is `None` when forecasting is
/// disabled, in which case `fused` is the latents unchanged.
pub struct SegmentForward {
    pub features: Var,
    pub latents: Var,
    pub forecasts: Option<Var>,
    pub fused: Var,
    pub estimate: SequenceEstimate,
}

impl Estimator {
    pub fn new<R: Rng>(store: &mut ParameterStore, rng: &mut R, config: ModelConfig) -> Self {
        let d = config.feature_dim;
        let encoder = Encoder::new(store, rng, "enc", &config);
        let (attention, recurrent) = match config.temporal {
            TemporalMode::SelfAttention => {
                (Some(AttentionModule::new(store, rng, "att", d)), None)
            }
            TemporalMode::Passthrough => (None, None),
            TemporalMode::Recurrent => (None, Some(GruBaseline::new(store, rng, "gru", d, 2))),
        };
        let (forecaster, fusion) = if config.use_forecast {
            (
                Some(ForecastModule::new(store, rng, "fore", d)),
                Some(FusionModule::new(store, rng, "fusion", d)),
            )
        } else {
            (None, None)
        };
        let regressors = RegressorSet::new(
            store,
            rng,
            "reg",
            d,
            config.hidden_dim,
            config.num_joints,
            config.num_shapes,
            config.feedback_iters,
        );
        Estimator { encoder, attention, recurrent, forecaster, fusion, regressors, config }
    }

    pub fn forward_segment(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        obs: &SegmentObs,
    ) -> Result<SegmentForward, ModelError> {
        let features = self.encoder.encode_segment(tape, store, obs)?;
        let latents = match self.config.temporal {
            TemporalMode::SelfAttention => {
                self_attention(tape, store, self.attention.as_ref().unwrap(), features)
            }
            TemporalMode::Passthrough => features,
            TemporalMode::Recurrent => {
                gru_forward(tape, store, self.recurrent.as_ref().unwrap(), features)
            }
        };
        let forecasts = self
            .forecaster
            .as_ref()
            .map(|fm| forecast(tape, store, fm, features));
        let fused = match forecasts {
            Some(preds) => fuse(tape, store, self.fusion.as_ref().unwrap(), latents, preds),
            None => latents,
        };
        let estimate = regress_sequence(tape, store, &self.regressors, fused);
        Ok(SegmentForward { features, latents, forecasts, fused, estimate })
    }
}

/// Body quantities decoded from a sequence estimate, stacked per frame.
pub struct DecodedSequence {
    /// [N × 3k] regressed joints.
    pub joints3d: Var,
    /// [N × 2k] projected keypoints.
    pub keypoints: Var,
    /// Per-frame meshes [V × 3].
    pub meshes: Vec<Var>,
    /// Per-frame rendered silhouettes [H × W]; empty unless requested.
    pub silhouettes: Vec<Var>,
}

/// Runs the body model on every frame of an estimate. Silhouette rendering
/// is by far the most expensive part of a training step, so it is optional.
pub fn decode_estimate(
    tape: &mut Tape,
    body: &BodyVars,
    estimate: &SequenceEstimate,
    cfg: &ModelConfig,
    render_silhouettes: bool,
) -> DecodedSequence {
    let (n, _) = tape.value(estimate.theta).dims2();
    let mut joint_rows = Vec::with_capacity(n);
    let mut kp_rows = Vec::with_capacity(n);
    let mut meshes = Vec::with_capacity(n);
    let mut silhouettes = Vec::new();
    for f in 0..n {
        let theta = tape.row(estimate.theta, f);
        let (mesh, joints) = body_forward(tape, body, theta, estimate.beta);
        let raw = tape.row(estimate.cam_raw, f);
        let cam = cam_from_raw(tape, raw);
        let kp = project(tape, joints, &cam);
        let k = tape.value(joints).dims2().0;
        joint_rows.push(tape.reshape(joints, vec![3 * k]));
        kp_rows.push(tape.reshape(kp, vec![2 * k]));
        if render_silhouettes {
            silhouettes.push(soft_silhouette(
                tape,
                mesh,
                &cam,
                cfg.height,
                cfg.width,
                cfg.sigma_px,
            ));
        }
        meshes.push(mesh);
    }
    DecodedSequence {
        joints3d: tape.stack_rows(&joint_rows),
        keypoints: tape.stack_rows(&kp_rows),
        meshes,
        silhouettes,
    }
}
