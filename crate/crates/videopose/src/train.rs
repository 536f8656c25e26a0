//! Training orchestration: segment-pair batches, the full forward pipeline,
//! loss assembly, alternating adversarial updates, evaluation, sliding-window
//! inference, and the comparison grid over reduced variants.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::body::{body_forward, make_default_body, BodyConfig, BodyModel};
use crate::checkpoint::Checkpoint;
use crate::config::{ConfigError, TrainConfig};
use crate::disc::{adversarial_losses, DiscriminatorNet};
use crate::losses::{
    camera_consistency_loss, joint_loss_2d, joint_loss_3d, mask_loss, occlusion_param_terms,
    smpl_terms, total_loss, LossError, LossTerm,
};
use crate::metrics::{
    acceleration_error, mpjpe, pa_mpjpe, pck, pve, EvalReport, MetricsError, SeqMetrics,
    DEFAULT_FPS, DEFAULT_PCK_THRESHOLD_MM,
};
use crate::model::{decode_estimate, Estimator, ModelError, SegmentObs};
use crate::store::{adam_step, OptimError, ParameterStore, RecordError};
use crate::synth::{
    occlude, sample_occlusion_spec, sample_overlapping_pair, Dataset, MotionSequence,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint config hash {found:#x} does not match current config {expected:#x}")]
    ConfigHashMismatch { expected: u64, found: u64 },
    #[error("observation sequence is empty")]
    EmptySequence,
}

/// Per-step loss breakdown: unweighted term values in assembly order plus
/// the weighted total, and the discriminator side when it trains.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    pub terms: Vec<(&'static str, f64)>,
    pub total: f64,
    pub d_loss: Option<f64>,
}

/// Accumulates one Var per term name across the batch.
struct TermAcc {
    terms: Vec<(&'static str, Var, f64)>,
}

impl TermAcc {
    fn new() -> Self {
        TermAcc { terms: Vec::new() }
    }

    fn add(&mut self, tape: &mut Tape, name: &'static str, value: Var, weight: f64) {
        if let Some(entry) = self.terms.iter_mut().find(|(n, _, _)| *n == name) {
            entry.1 = tape.add(entry.1, value);
        } else {
            self.terms.push((name, value, weight));
        }
    }

    fn into_loss_terms(self) -> Vec<LossTerm> {
        self.terms
            .into_iter()
            .map(|(name, value, weight)| LossTerm { name, value, weight })
            .collect()
    }
}

/// Seed for one step: decorrelates steps while keeping each one a pure
/// function of (master seed, step index), which is what makes checkpoint
/// resume bit-exact.
fn step_seed(master: u64, step: u64) -> u64 {
    let mut z = master ^ step.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

const HELD_OUT_SEED_SALT: u64 = 0x48454C44;
const DISC_INIT_SALT: u64 = 0xD15C;
const OCCLUDED_EVAL_SALT: u64 = 0x0CC1;

pub struct Trainer {
    pub config: TrainConfig,
    pub body: BodyModel,
    pub estimator: Estimator,
    pub discriminator: Option<DiscriminatorNet>,
    pub est_store: ParameterStore,
    pub disc_store: ParameterStore,
    pub corpus: Dataset,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let body = make_default_body(
            config.body_seed,
            &BodyConfig {
                num_verts: config.body_verts,
                num_shapes: config.num_shapes,
                ..BodyConfig::default()
            },
        );
        let corpus = Dataset::generate(
            &body,
            config.data_seed,
            config.corpus_sequences,
            config.corpus_frames,
            &config.synth_config(),
        );
        Trainer::with_corpus(config, corpus)
    }

    /// Builds a trainer around a pre-generated corpus. Sweeps that never
    /// vary the generator settings can hoist one `Dataset::generate` call
    /// and share its output across every trainer; the result is bit-equal
    /// to [`Trainer::new`].
    pub fn with_corpus(config: TrainConfig, corpus: Dataset) -> Result<Self, TrainError> {
        config.validate()?;
        if corpus.sequences.len() != config.corpus_sequences
            || corpus.sequences.iter().any(|s| s.len() != config.corpus_frames)
        {
            return Err(TrainError::Config(ConfigError::Invalid(format!(
                "corpus shape does not match config ({} sequences expected)",
                config.corpus_sequences
            ))));
        }
        let body = make_default_body(
            config.body_seed,
            &BodyConfig {
                num_verts: config.body_verts,
                num_shapes: config.num_shapes,
                ..BodyConfig::default()
            },
        );
        let model_cfg = config.model_config(body.num_regressed(), body.num_joints());
        let mut est_store = ParameterStore::new();
        let mut est_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let estimator = Estimator::new(&mut est_store, &mut est_rng, model_cfg);
        let mut disc_store = ParameterStore::new();
        let discriminator = (!config.no_adv).then(|| {
            let mut disc_rng = ChaCha8Rng::seed_from_u64(config.seed ^ DISC_INIT_SALT);
            DiscriminatorNet::new(
                &mut disc_store,
                &mut disc_rng,
                "disc",
                body.num_joints(),
                config.num_shapes,
            )
        });
        Ok(Trainer {
            config,
            body,
            estimator,
            discriminator,
            est_store,
            disc_store,
            corpus,
            step: 0,
        })
    }

    /// Evaluation sequences drawn from the same generator family but a
    /// disjoint seed range.
    pub fn held_out(&self) -> Dataset {
        Dataset::generate(
            &self.body,
            self.config.data_seed.wrapping_add(HELD_OUT_SEED_SALT),
            self.config.eval_sequences,
            self.config.corpus_frames,
            &self.config.synth_config(),
        )
    }

    fn gt_rows(tape: &mut Tape, source: &Tensor, start: usize, len: usize) -> Var {
        let width = source.dims2().1;
        let mut data = Vec::with_capacity(len * width);
        for f in start..start + len {
            data.extend_from_slice(source.row(f));
        }
        tape.constant(Tensor::new(vec![len, width], data).unwrap())
    }

    /// One optimization step over `batch` segment pairs. Returns the
    /// per-term breakdown; a non-finite loss aborts with the term named.
    pub fn train_step(&mut self) -> Result<StepReport, TrainError> {
        let cfg = self.config.clone();
        let w = &cfg.weights;
        let model_cfg = cfg.model_config(self.body.num_regressed(), self.body.num_joints());
        let synth_cfg = cfg.synth_config();
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, self.step));

        let mut tape = Tape::new();
        let mounted = self.body.mount(&mut tape);
        let mut acc = TermAcc::new();
        let mut d_loss_sum: Option<Var> = None;

        for _ in 0..cfg.batch {
            let seq = &self.corpus.sequences[rng.gen_range(0..self.corpus.sequences.len())];
            let n = rng.gen_range(0..=seq.len() - cfg.seq_len - 1);
            let (s1, s2) = sample_overlapping_pair(seq, n, cfg.seq_len);
            let obs1 = SegmentObs::from_sequence(seq, s1);

            let f1 = self.estimator.forward_segment(&mut tape, &self.est_store, &obs1)?;
            let decoded =
                decode_estimate(&mut tape, &mounted, &f1.estimate, &model_cfg, !cfg.no_mask);

            // Supervised terms on S1.
            let gt_theta = Self::gt_rows(&mut tape, &seq.theta, s1.start, s1.len);
            let gt_beta = tape.constant(seq.beta.clone());
            let (l_beta, l_theta) =
                smpl_terms(&mut tape, gt_theta, gt_beta, f1.estimate.theta, f1.estimate.beta);
            acc.add(&mut tape, "beta", l_beta, w.beta);
            acc.add(&mut tape, "theta", l_theta, w.theta);

            let gt_j3d = Self::gt_rows(&mut tape, &seq.joints3d, s1.start, s1.len);
            let l_3d = joint_loss_3d(&mut tape, gt_j3d, decoded.joints3d);
            acc.add(&mut tape, "joint3d", l_3d, w.joint3d);

            let gt_kp = Self::gt_rows(&mut tape, &seq.keypoints, s1.start, s1.len);
            let l_2d = joint_loss_2d(&mut tape, gt_kp, decoded.keypoints, &obs1.visibility);
            acc.add(&mut tape, "joint2d", l_2d, w.joint2d);

            if let Some(preds) = f1.forecasts {
                let l_feat = crate::temporal::feature_loss(&mut tape, f1.features, preds);
                acc.add(&mut tape, "feature", l_feat, w.feature);
            }

            if !cfg.no_mask {
                let mut sum: Option<Var> = None;
                for (f, proj) in decoded.silhouettes.iter().enumerate() {
                    let lm = mask_loss(&mut tape, &obs1.silhouettes[f], *proj)?;
                    sum = Some(match sum {
                        Some(s) => tape.add(s, lm),
                        None => lm,
                    });
                }
                acc.add(&mut tape, "mask", sum.expect("segment has frames"), w.mask);
            }

            if !cfg.no_camera {
                let obs2 = SegmentObs::from_sequence(seq, s2);
                let f2 = self.estimator.forward_segment(&mut tape, &self.est_store, &obs2)?;
                let l_cam = camera_consistency_loss(
                    &mut tape,
                    &self.est_store,
                    &self.estimator.regressors.camera,
                    f1.fused,
                    f2.fused,
                    1..cfg.seq_len,
                    0..cfg.seq_len - 1,
                    self.estimator.regressors.iters,
                );
                acc.add(&mut tape, "camera", l_cam, w.camera);
            }

            if !cfg.no_param {
                let spec = sample_occlusion_spec(&mut rng, cfg.seq_len, self.body.num_regressed());
                let obs1_occ = obs1.occluded(&spec, &synth_cfg);
                let f1_occ =
                    self.estimator.forward_segment(&mut tape, &self.est_store, &obs1_occ)?;
                let terms = occlusion_param_terms(&mut tape, &f1.estimate, &f1_occ.estimate);
                acc.add(&mut tape, "param_beta", terms.beta, w.param_beta);
                acc.add(&mut tape, "param_theta", terms.theta, w.param_theta);
                acc.add(&mut tape, "param_cam", terms.camera, w.param_cam);
            }

            if let Some(disc) = &self.discriminator {
                // Fresh real sample: pose/shape ground truth from a random
                // corpus window.
                let rseq =
                    &self.corpus.sequences[rng.gen_range(0..self.corpus.sequences.len())];
                let rn = rng.gen_range(0..=rseq.len() - cfg.seq_len);
                let real_theta = Self::gt_rows(&mut tape, &rseq.theta, rn, cfg.seq_len);
                let real_beta = tape.constant(rseq.beta.clone());
                let adv = adversarial_losses(
                    &mut tape,
                    &self.disc_store,
                    disc,
                    real_theta,
                    real_beta,
                    f1.estimate.theta,
                    f1.estimate.beta,
                );
                acc.add(&mut tape, "adv", adv.g_loss, w.adv);
                d_loss_sum = Some(match d_loss_sum {
                    Some(s) => tape.add(s, adv.d_loss),
                    None => adv.d_loss,
                });
            }
        }

        let (total, term_report) = total_loss(&mut tape, &acc.into_loss_terms())?;
        let total_value = tape.value(total).item();

        let grads = tape.backward(total);
        let est_grads = tape.param_grads(&grads, &self.est_store)?;
        adam_step(&mut self.est_store, &est_grads, cfg.lr_est)?;

        let mut d_loss_value = None;
        if let Some(d_total) = d_loss_sum {
            let d_grads_all = tape.backward(d_total);
            let d_grads = tape.param_grads(&d_grads_all, &self.disc_store)?;
            adam_step(&mut self.disc_store, &d_grads, cfg.lr_disc)?;
            d_loss_value = Some(tape.value(d_total).item());
        }

        self.step += 1;
        Ok(StepReport { step: self.step, terms: term_report, total: total_value, d_loss: d_loss_value })
    }

    /// Runs `steps` optimization steps, optionally appending per-term rows
    /// (step, term, value) to a CSV log.
    pub fn train<W: Write>(
        &mut self,
        steps: usize,
        mut log: Option<&mut W>,
    ) -> Result<(), TrainError> {
        for _ in 0..steps {
            let report = self.train_step()?;
            if let Some(out) = log.as_deref_mut() {
                for (name, value) in &report.terms {
                    writeln!(out, "{},{},{}", report.step, name, value)?;
                }
                writeln!(out, "{},total,{}", report.step, report.total)?;
                if let Some(d) = report.d_loss {
                    writeln!(out, "{},d_loss,{}", report.step, d)?;
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self.config.hash(), self.step, &self.est_store, &self.disc_store)
    }

    /// Restores parameters, optimizer state, and the step counter. The
    /// checkpoint must come from an identical config.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        let expected = self.config.hash();
        if ckpt.config_hash != expected {
            return Err(TrainError::ConfigHashMismatch { expected, found: ckpt.config_hash });
        }
        ckpt.restore(&mut self.est_store, &mut self.disc_store)?;
        self.step = ckpt.step;
        Ok(())
    }

    // ── Inference ───────────────────────────────────────────────────────────

    /// Sliding-window estimates for a whole observed sequence: windows of
    /// length N with stride N, the tail window right-aligned, each frame
    /// owned by the first window covering it. Sequences shorter than N run
    /// as a single reflection-padded window and are flagged.
    pub fn infer(&self, obs: &SegmentObs) -> Result<InferenceResult, TrainError> {
        let n = self.config.seq_len;
        let t = obs.len();
        if t == 0 {
            return Err(TrainError::EmptySequence);
        }
        let model_cfg = self.config.model_config(self.body.num_regressed(), self.body.num_joints());
        let k = self.body.num_regressed();
        let j3 = 3 * self.body.num_joints();
        let b = self.config.num_shapes;
        let v = self.body.num_verts();

        let (windows, padded) = if t < n {
            (vec![(0usize, reflect_indices(t, n))], true)
        } else {
            let mut starts: Vec<usize> = (0..t / n).map(|wi| wi * n).collect();
            if t % n != 0 {
                starts.push(t - n);
            }
            (
                starts
                    .into_iter()
                    .map(|s| (s, (s..s + n).collect::<Vec<usize>>()))
                    .collect(),
                false,
            )
        };

        let mut theta = vec![f64::NAN; t * j3];
        let mut beta = vec![f64::NAN; t * b];
        let mut cam_raw = vec![f64::NAN; t * 6];
        let mut joints3d = vec![f64::NAN; t * 3 * k];
        let mut keypoints = vec![f64::NAN; t * 2 * k];
        let mut meshes: Vec<Tensor> = vec![Tensor::zeros(&[0, 0]); t];
        let mut filled = vec![false; t];

        for (_, frame_ids) in &windows {
            let window_obs = gather_obs(obs, frame_ids);
            let mut tape = Tape::new();
            let mounted = self.body.mount(&mut tape);
            let fwd = self.estimator.forward_segment(&mut tape, &self.est_store, &window_obs)?;
            let decoded = decode_estimate(&mut tape, &mounted, &fwd.estimate, &model_cfg, false);
            let theta_v = tape.value(fwd.estimate.theta);
            let beta_v = tape.value(fwd.estimate.beta);
            let cam_v = tape.value(fwd.estimate.cam_raw);
            let j_v = tape.value(decoded.joints3d);
            let kp_v = tape.value(decoded.keypoints);
            for (local, &frame) in frame_ids.iter().enumerate() {
                if frame >= t || filled[frame] {
                    continue;
                }
                filled[frame] = true;
                theta[frame * j3..(frame + 1) * j3].copy_from_slice(theta_v.row(local));
                beta[frame * b..(frame + 1) * b].copy_from_slice(beta_v.data());
                cam_raw[frame * 6..(frame + 1) * 6].copy_from_slice(cam_v.row(local));
                joints3d[frame * 3 * k..(frame + 1) * 3 * k].copy_from_slice(j_v.row(local));
                keypoints[frame * 2 * k..(frame + 1) * 2 * k].copy_from_slice(kp_v.row(local));
                meshes[frame] = tape.value(decoded.meshes[local]).clone();
            }
        }
        debug_assert!(filled.iter().all(|&f| f), "every frame must receive an estimate");
        let _ = v;

        Ok(InferenceResult {
            theta: Tensor::new(vec![t, j3], theta).unwrap(),
            beta: Tensor::new(vec![t, b], beta).unwrap(),
            cam_raw: Tensor::new(vec![t, 6], cam_raw).unwrap(),
            joints3d: Tensor::new(vec![t, 3 * k], joints3d).unwrap(),
            keypoints: Tensor::new(vec![t, 2 * k], keypoints).unwrap(),
            meshes,
            padded,
        })
    }

    // ── Evaluation ──────────────────────────────────────────────────────────

    fn sequence_metrics(
        &self,
        seq: &MotionSequence,
        result: &InferenceResult,
    ) -> Result<SeqMetrics, TrainError> {
        let t = seq.len();
        let k = self.body.num_regressed();
        let mut tape = Tape::new();
        let mounted = self.body.mount(&mut tape);
        let gt_beta = tape.constant(seq.beta.clone());
        let mut m_sum = 0.0;
        let mut pa_sum = 0.0;
        let mut pve_sum = 0.0;
        let mut pck_sum = 0.0;
        for f in 0..t {
            let pred = Tensor::new(vec![k, 3], result.joints3d.row(f).to_vec()).unwrap();
            let gt = Tensor::new(vec![k, 3], seq.joints3d.row(f).to_vec()).unwrap();
            m_sum += mpjpe(&pred, &gt);
            pa_sum += pa_mpjpe(&pred, &gt)?;
            pck_sum += pck(&pred, &gt, DEFAULT_PCK_THRESHOLD_MM);

            let gt_theta = tape.constant(Tensor::vector(seq.theta.row(f).to_vec()));
            let (gt_mesh, _) = body_forward(&mut tape, &mounted, gt_theta, gt_beta);
            pve_sum += pve(&result.meshes[f], tape.value(gt_mesh));
        }
        let accel = acceleration_error(&result.joints3d, &seq.joints3d, DEFAULT_FPS)?;
        let tf = t as f64;
        Ok(SeqMetrics {
            mpjpe_mm: m_sum / tf,
            pa_mpjpe_mm: pa_sum / tf,
            pve_mm: pve_sum / tf,
            pck: pck_sum / tf,
            accel_err_mm_s2: accel,
        })
    }

    /// Evaluates on clean observations.
    pub fn evaluate(&self, data: &Dataset) -> Result<EvalReport, TrainError> {
        let mut rows = Vec::with_capacity(data.sequences.len());
        for seq in &data.sequences {
            let result = self.infer(&SegmentObs::whole_sequence(seq))?;
            rows.push(self.sequence_metrics(seq, &result)?);
        }
        Ok(EvalReport::new(rows))
    }

    /// Evaluates with occlusion rectangles applied to every observation
    /// while metrics still compare against the clean ground truth.
    pub fn evaluate_occluded(&self, data: &Dataset, seed: u64) -> Result<EvalReport, TrainError> {
        let synth_cfg = self.config.synth_config();
        let mut rows = Vec::with_capacity(data.sequences.len());
        for (i, seq) in data.sequences.iter().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(step_seed(seed ^ OCCLUDED_EVAL_SALT, i as u64));
            let spec = sample_occlusion_spec(&mut rng, seq.len(), seq.num_keypoints());
            let occluded = occlude(seq, &spec, &synth_cfg);
            let result = self.infer(&SegmentObs::whole_sequence(&occluded))?;
            rows.push(self.sequence_metrics(seq, &result)?);
        }
        Ok(EvalReport::new(rows))
    }
}

/// Per-frame estimates for a whole sequence.
pub struct InferenceResult {
    pub theta: Tensor,
    pub beta: Tensor,
    pub cam_raw: Tensor,
    pub joints3d: Tensor,
    pub keypoints: Tensor,
    pub meshes: Vec<Tensor>,
    /// True when the sequence was shorter than a window and reflection
    /// padding filled the remainder.
    pub padded: bool,
}

/// Frame indices 0..t extended to `n` by bouncing off the ends without
/// repeating them (t=5 → 0 1 2 3 4 3 2 1 0 1 …). A single frame repeats.
fn reflect_indices(t: usize, n: usize) -> Vec<usize> {
    assert!(t >= 1 && n >= t);
    if t == 1 {
        return vec![0; n];
    }
    let period = 2 * (t - 1);
    (0..n)
        .map(|i| {
            let phase = i % period;
            if phase < t {
                phase
            } else {
                period - phase
            }
        })
        .collect()
}

fn gather_obs(obs: &SegmentObs, frame_ids: &[usize]) -> SegmentObs {
    let kp_w = obs.keypoints.dims2().1;
    let vis_w = obs.visibility.dims2().1;
    let mut keypoints = Vec::with_capacity(frame_ids.len() * kp_w);
    let mut visibility = Vec::with_capacity(frame_ids.len() * vis_w);
    let mut silhouettes = Vec::with_capacity(frame_ids.len());
    for &f in frame_ids {
        keypoints.extend_from_slice(obs.keypoints.row(f));
        visibility.extend_from_slice(obs.visibility.row(f));
        silhouettes.push(obs.silhouettes[f].clone());
    }
    SegmentObs {
        silhouettes,
        keypoints: Tensor::new(vec![frame_ids.len(), kp_w], keypoints).unwrap(),
        visibility: Tensor::new(vec![frame_ids.len(), vis_w], visibility).unwrap(),
    }
}

// ── Comparison grid ──────────────────────────────────────────────────────────

/// Outcome of one training run evaluated on held-out data.
#[derive(Debug, Clone, Copy)]
pub struct RunOutcome {
    pub untrained_pa_mpjpe: f64,
    pub pa_mpjpe: f64,
    pub occluded_pa_mpjpe: f64,
}

/// Trains one configuration to completion and evaluates it held-out, both
/// clean and occluded.
pub fn train_and_eval(config: &TrainConfig) -> Result<RunOutcome, TrainError> {
    let mut trainer = Trainer::new(config.clone())?;
    let held = trainer.held_out();
    let untrained = trainer.evaluate(&held)?;
    trainer.train::<std::io::Sink>(config.steps, None)?;
    let clean = trainer.evaluate(&held)?;
    let occluded = trainer.evaluate_occluded(&held, config.seed)?;
    Ok(RunOutcome {
        untrained_pa_mpjpe: untrained.mean.pa_mpjpe_mm,
        pa_mpjpe: clean.mean.pa_mpjpe_mm,
        occluded_pa_mpjpe: occluded.mean.pa_mpjpe_mm,
    })
}

/// One named cell of the comparison grid.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub name: &'static str,
    pub config: TrainConfig,
}

/// The grid: the full model, each single-ingredient removal, the recurrent
/// baseline, and shorter input windows.
pub fn ablation_cells(base: &TrainConfig) -> Vec<AblationCell> {
    let mut cells = vec![AblationCell { name: "full", config: base.clone() }];
    let flags: [(&'static str, fn(&mut TrainConfig)); 7] = [
        ("no_camera", |c| c.no_camera = true),
        ("no_mask", |c| c.no_mask = true),
        ("no_param", |c| c.no_param = true),
        ("no_adv", |c| c.no_adv = true),
        ("no_forecast", |c| c.no_forecast = true),
        ("no_attention", |c| c.no_attention = true),
        ("recurrent_baseline", |c| c.recurrent_baseline = true),
    ];
    for (name, apply) in flags {
        let mut cfg = base.clone();
        apply(&mut cfg);
        cells.push(AblationCell { name, config: cfg });
    }
    let windows: [(usize, &'static str); 3] =
        [(8, "seq_len_8"), (16, "seq_len_16"), (32, "seq_len_32")];
    for (len, name) in windows {
        if len == base.seq_len {
            continue; // already covered by the "full" cell
        }
        let mut cfg = base.clone();
        cfg.seq_len = len;
        cells.push(AblationCell { name, config: cfg });
    }
    cells
}

/// Mean and spread (max − min) over seeds for one cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub name: &'static str,
    pub per_seed: Vec<RunOutcome>,
    pub mean_pa_mpjpe: f64,
    pub spread_pa_mpjpe: f64,
    pub mean_occluded_pa_mpjpe: f64,
}

pub fn run_cell(cell: &AblationCell, seeds: &[u64]) -> Result<CellResult, TrainError> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = cell.config.clone();
        cfg.seed = seed;
        per_seed.push(train_and_eval(&cfg)?);
    }
    let pa: Vec<f64> = per_seed.iter().map(|o| o.pa_mpjpe).collect();
    let occ: Vec<f64> = per_seed.iter().map(|o| o.occluded_pa_mpjpe).collect();
    let mean = pa.iter().sum::<f64>() / pa.len() as f64;
    let spread = pa.iter().cloned().fold(f64::MIN, f64::max)
        - pa.iter().cloned().fold(f64::MAX, f64::min);
    Ok(CellResult {
        name: cell.name,
        per_seed,
        mean_pa_mpjpe: mean,
        spread_pa_mpjpe: spread,
        mean_occluded_pa_mpjpe: occ.iter().sum::<f64>() / occ.len() as f64,
    })
}

/// Runs every cell over the shared seed set and renders a comparison table.
pub fn run_ablation(base: &TrainConfig, seeds: &[u64]) -> Result<Vec<CellResult>, TrainError> {
    ablation_cells(base).iter().map(|cell| run_cell(cell, seeds)).collect()
}

pub fn ablation_table(results: &[CellResult]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20}  {:>14}  {:>10}  {:>18}\n",
        "cell", "pa_mpjpe_mm", "spread", "occluded_pa_mm"
    ));
    for r in results {
        out.push_str(&format!(
            "{:<20}  {:>14.3}  {:>10.3}  {:>18.3}\n",
            r.name, r.mean_pa_mpjpe, r.spread_pa_mpjpe, r.mean_occluded_pa_mpjpe
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small enough to keep every test under a second or two.
    fn tiny_config() -> TrainConfig {
        TrainConfig {
            seq_len: 4,
            batch: 1,
            steps: 2,
            corpus_sequences: 2,
            corpus_frames: 12,
            eval_sequences: 1,
            height: 8,
            width: 8,
            feature_dim: 8,
            hidden_dim: 10,
            feedback_iters: 2,
            body_verts: 96,
            num_shapes: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let a = Trainer::new(tiny_config()).unwrap();
        let b = Trainer::new(tiny_config()).unwrap();
        assert_eq!(a.est_store.flat_values(), b.est_store.flat_values());
        assert_eq!(a.disc_store.flat_values(), b.disc_store.flat_values());
    }

    #[test]
    fn a_step_reports_every_active_term() {
        let mut trainer = Trainer::new(tiny_config()).unwrap();
        let report = trainer.train_step().unwrap();
        let names: Vec<&str> = report.terms.iter().map(|(n, _)| *n).collect();
        assert_eq!(
            names,
            vec![
                "beta",
                "theta",
                "joint3d",
                "joint2d",
                "feature",
                "mask",
                "camera",
                "param_beta",
                "param_theta",
                "param_cam",
                "adv"
            ]
        );
        assert!(report.total.is_finite());
        assert!(report.d_loss.unwrap().is_finite());
        assert_eq!(trainer.step, 1);
        assert!(report.terms.iter().all(|(_, v)| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn ablation_flags_remove_their_terms() {
        let mut cfg = tiny_config();
        cfg.no_mask = true;
        cfg.no_camera = true;
        cfg.no_param = true;
        cfg.no_adv = true;
        cfg.no_forecast = true;
        let mut trainer = Trainer::new(cfg).unwrap();
        assert!(trainer.discriminator.is_none());
        assert_eq!(trainer.disc_store.len(), 0, "no adversary, no parameters");
        let report = trainer.train_step().unwrap();
        let names: Vec<&str> = report.terms.iter().map(|(n, _)| *n).collect();
        assert_eq!(names, vec!["beta", "theta", "joint3d", "joint2d"]);
        assert!(report.d_loss.is_none());
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let run = || {
            let mut t = Trainer::new(tiny_config()).unwrap();
            t.train::<std::io::Sink>(3, None).unwrap();
            (t.est_store.flat_values(), t.disc_store.flat_values())
        };
        let (ea, da) = run();
        let (eb, db) = run();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
        assert_eq!(bits(&ea), bits(&eb), "estimator diverged across identical runs");
        assert_eq!(bits(&da), bits(&db), "discriminator diverged across identical runs");
    }

    #[test]
    fn checkpoint_resume_preserves_the_trajectory() {
        let mut straight = Trainer::new(tiny_config()).unwrap();
        straight.train::<std::io::Sink>(2, None).unwrap();
        let ckpt = straight.checkpoint();
        straight.train::<std::io::Sink>(2, None).unwrap();

        let mut resumed = Trainer::new(tiny_config()).unwrap();
        resumed.restore(&ckpt).unwrap();
        assert_eq!(resumed.step, 2);
        resumed.train::<std::io::Sink>(2, None).unwrap();

        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
        assert_eq!(
            bits(&straight.est_store.flat_values()),
            bits(&resumed.est_store.flat_values()),
            "resumed run diverged from the uninterrupted one"
        );
        assert_eq!(
            bits(&straight.disc_store.flat_values()),
            bits(&resumed.disc_store.flat_values())
        );
    }

    #[test]
    fn restore_rejects_a_different_config() {
        let trainer = Trainer::new(tiny_config()).unwrap();
        let ckpt = trainer.checkpoint();
        let mut other_cfg = tiny_config();
        other_cfg.weights.mask = 1.0;
        let mut other = Trainer::new(other_cfg).unwrap();
        assert!(matches!(
            other.restore(&ckpt),
            Err(TrainError::ConfigHashMismatch { .. })
        ));
    }

    #[test]
    fn inference_covers_every_frame_exactly_once() {
        let trainer = Trainer::new(tiny_config()).unwrap();
        let n = trainer.config.seq_len;

        // T = N: one window.
        let seq = &trainer.corpus.sequences[0];
        let obs = SegmentObs::from_sequence(seq, crate::synth::Segment { start: 0, len: n });
        let r = trainer.infer(&obs).unwrap();
        assert_eq!(r.theta.dims2().0, n);
        assert!(!r.padded);

        // T = 2N and a ragged tail.
        for t in [2 * n, 2 * n + 3] {
            let obs =
                SegmentObs::from_sequence(seq, crate::synth::Segment { start: 0, len: t });
            let r = trainer.infer(&obs).unwrap();
            assert_eq!(r.theta.dims2().0, t);
            assert!(r.theta.data().iter().all(|v| v.is_finite()));
            assert!(!r.padded);
        }

        // T < N: reflection-padded single window, flagged.
        let obs = SegmentObs::from_sequence(seq, crate::synth::Segment { start: 0, len: 2 });
        let r = trainer.infer(&obs).unwrap();
        assert!(r.padded);
        assert_eq!(r.theta.dims2().0, 2);
        // Untrained regressors put every frame at the mean, scale exp(0)=1.
        assert!(r.cam_raw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reflection_indices_bounce_without_repeating_edges() {
        assert_eq!(reflect_indices(5, 8), vec![0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_indices(2, 5), vec![0, 1, 0, 1, 0]);
        assert_eq!(reflect_indices(1, 3), vec![0, 0, 0]);
        assert_eq!(reflect_indices(3, 3), vec![0, 1, 2]);
    }

    #[test]
    fn evaluation_produces_consistent_metrics() {
        let trainer = Trainer::new(tiny_config()).unwrap();
        let held = trainer.held_out();
        let report = trainer.evaluate(&held).unwrap();
        assert_eq!(report.per_sequence.len(), 1);
        let m = &report.mean;
        assert!(m.mpjpe_mm.is_finite() && m.mpjpe_mm > 0.0);
        assert!(m.pa_mpjpe_mm <= m.mpjpe_mm + 1e-9);
        assert!((0.0..=1.0).contains(&m.pck));
        assert!(m.accel_err_mm_s2.is_finite());

        let occ = trainer.evaluate_occluded(&held, 0).unwrap();
        assert!(occ.mean.pa_mpjpe_mm.is_finite());
    }

    #[test]
    fn the_grid_lists_every_variant_once() {
        let cells = ablation_cells(&tiny_config());
        let names: Vec<&str> = cells.iter().map(|c| c.name).collect();
        assert_eq!(
            names,
            vec![
                "full",
                "no_camera",
                "no_mask",
                "no_param",
                "no_adv",
                "no_forecast",
                "no_attention",
                "recurrent_baseline",
                "seq_len_8",
                "seq_len_16",
                "seq_len_32"
            ]
        );
        // Flag cells stay valid configs.
        for cell in &cells {
            let mut cfg = cell.config.clone();
            cfg.corpus_frames = cfg.corpus_frames.max(cfg.seq_len + 1);
            cfg.validate().unwrap();
        }

        // A base already at one of the grid lengths is not duplicated.
        let mut base = tiny_config();
        base.seq_len = 8;
        let names: Vec<&str> =
            ablation_cells(&base).iter().map(|c| c.name).collect();
        assert!(!names.contains(&"seq_len_8"));
        assert!(names.contains(&"seq_len_16") && names.contains(&"seq_len_32"));
    }
}
