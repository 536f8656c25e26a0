//! Flat key=value training configuration. Every field has a default; a
//! config file only lists overrides. The canonical text form doubles as the
//! input to the config hash stored in checkpoints.

use std::fmt::Write as _;

use thiserror::Error;

use crate::losses::LossWeights;
use crate::model::{ModelConfig, TemporalMode};
use crate::synth::SynthConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {value:?}")]
    BadValue { line: usize, key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Segment length N.
    pub seq_len: usize,
    /// Segment pairs per optimization step.
    pub batch: usize,
    pub lr_est: f64,
    pub lr_disc: f64,
    pub steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    // Ablation switches: each removes one ingredient.
    pub no_camera: bool,
    pub no_mask: bool,
    pub no_param: bool,
    pub no_adv: bool,
    pub no_forecast: bool,
    pub no_attention: bool,
    pub recurrent_baseline: bool,
    // Model dimensions.
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub feedback_iters: usize,
    // Synthetic corpus.
    pub corpus_sequences: usize,
    pub corpus_frames: usize,
    pub eval_sequences: usize,
    pub height: usize,
    pub width: usize,
    pub sigma_px: f64,
    pub body_verts: usize,
    pub num_shapes: usize,
    pub body_seed: u64,
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seq_len: 32,
            batch: 16,
            lr_est: 5e-5,
            lr_disc: 1e-4,
            steps: 5000,
            seed: 0,
            weights: LossWeights::default(),
            no_camera: false,
            no_mask: false,
            no_param: false,
            no_adv: false,
            no_forecast: false,
            no_attention: false,
            recurrent_baseline: false,
            feature_dim: 64,
            hidden_dim: 128,
            feedback_iters: 3,
            corpus_sequences: 64,
            corpus_frames: 256,
            eval_sequences: 8,
            height: 64,
            width: 64,
            sigma_px: 1.5,
            body_verts: 200,
            num_shapes: 10,
            body_seed: 7,
            data_seed: 1,
        }
    }
}

macro_rules! config_fields {
    ($m:ident) => {
        $m!(seq_len, usize);
        $m!(batch, usize);
        $m!(lr_est, f64);
        $m!(lr_disc, f64);
        $m!(steps, usize);
        $m!(seed, u64);
        $m!(weights.beta as lambda_beta, f64);
        $m!(weights.theta as lambda_theta, f64);
        $m!(weights.joint3d as lambda_joint3d, f64);
        $m!(weights.joint2d as lambda_joint2d, f64);
        $m!(weights.adv as lambda_adv, f64);
        $m!(weights.feature as lambda_feature, f64);
        $m!(weights.mask as lambda_mask, f64);
        $m!(weights.camera as lambda_camera, f64);
        $m!(weights.param_beta as lambda_param_beta, f64);
        $m!(weights.param_theta as lambda_param_theta, f64);
        $m!(weights.param_cam as lambda_param_cam, f64);
        $m!(no_camera, bool);
        $m!(no_mask, bool);
        $m!(no_param, bool);
        $m!(no_adv, bool);
        $m!(no_forecast, bool);
        $m!(no_attention, bool);
        $m!(recurrent_baseline, bool);
        $m!(feature_dim, usize);
        $m!(hidden_dim, usize);
        $m!(feedback_iters, usize);
        $m!(corpus_sequences, usize);
        $m!(corpus_frames, usize);
        $m!(eval_sequences, usize);
        $m!(height, usize);
        $m!(width, usize);
        $m!(sigma_px, f64);
        $m!(body_verts, usize);
        $m!(num_shapes, usize);
        $m!(body_seed, u64);
        $m!(data_seed, u64);
    };
}

impl TrainConfig {
    /// Canonical text form: every field, one `key = value` per line, fixed
    /// order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($($field:ident).+ as $key:ident, $ty:ty) => {
                writeln!(out, "{} = {}", stringify!($key), self.$($field).+).unwrap();
            };
            ($field:ident, $ty:ty) => {
                writeln!(out, "{} = {}", stringify!($field), self.$field).unwrap();
            };
        }
        config_fields!(emit);
        out
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<TrainConfig, ConfigError> {
        let mut cfg = TrainConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed { line, text: raw.to_string() })?;
            let key = key.trim();
            let value = value.trim();
            let mut matched = false;
            macro_rules! apply {
                ($($field:ident).+ as $key:ident, $ty:ty) => {
                    if key == stringify!($key) {
                        cfg.$($field).+ = value.parse::<$ty>().map_err(|_| {
                            ConfigError::BadValue {
                                line,
                                key: key.to_string(),
                                value: value.to_string(),
                            }
                        })?;
                        matched = true;
                    }
                };
                ($field:ident, $ty:ty) => {
                    apply!($field as $field, $ty);
                };
            }
            config_fields!(apply);
            if !matched {
                return Err(ConfigError::UnknownKey { line, key: key.to_string() });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("seq_len", self.seq_len),
            ("batch", self.batch),
            ("steps", self.steps),
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("feedback_iters", self.feedback_iters),
            ("corpus_sequences", self.corpus_sequences),
            ("corpus_frames", self.corpus_frames),
            ("eval_sequences", self.eval_sequences),
            ("height", self.height),
            ("width", self.width),
            ("body_verts", self.body_verts),
            ("num_shapes", self.num_shapes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.seq_len < 2 {
            return Err(ConfigError::Invalid("seq_len must be at least 2".into()));
        }
        if !(self.lr_est > 0.0 && self.lr_disc > 0.0 && self.sigma_px > 0.0) {
            return Err(ConfigError::Invalid("rates and sigma_px must be positive".into()));
        }
        if self.no_attention && self.recurrent_baseline {
            return Err(ConfigError::Invalid(
                "no_attention and recurrent_baseline are mutually exclusive".into(),
            ));
        }
        // The sampler needs n + N + 1 ≤ T to shift a segment by one frame.
        if self.corpus_frames < self.seq_len + 1 {
            return Err(ConfigError::Invalid(format!(
                "corpus_frames {} too short for overlapping segments of length {}",
                self.corpus_frames, self.seq_len
            )));
        }
        Ok(())
    }

    /// FNV-1a over the canonical text; stored in checkpoints so a resumed
    /// run can detect a drifted config.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn temporal_mode(&self) -> TemporalMode {
        if self.recurrent_baseline {
            TemporalMode::Recurrent
        } else if self.no_attention {
            TemporalMode::Passthrough
        } else {
            TemporalMode::SelfAttention
        }
    }

    pub fn model_config(&self, num_keypoints: usize, num_joints: usize) -> ModelConfig {
        ModelConfig {
            height: self.height,
            width: self.width,
            sigma_px: self.sigma_px,
            num_keypoints,
            num_joints,
            num_shapes: self.num_shapes,
            feature_dim: self.feature_dim,
            hidden_dim: self.hidden_dim,
            feedback_iters: self.feedback_iters,
            temporal: self.temporal_mode(),
            use_forecast: !self.no_forecast,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { height: self.height, width: self.width, sigma_px: self.sigma_px }
    }
}
