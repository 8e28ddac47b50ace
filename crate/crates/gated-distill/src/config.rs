//! Run configuration: one flat key=value text file covering every knob.
//!
//! The same parser serves config files and `--override key=value` pairs,
//! so a variant's delta is literally a list of override strings. Unknown
//! keys are rejected rather than ignored; a config snapshot can be
//! re-parsed into an identical config, which is what makes run manifests
//! replayable.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{ConfidenceFormula, GatingStrategy};
use crate::losses::{AttentionLossForm, SoftLossForm};
use crate::tasks::TaskKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key '{key}'")]
    UnknownKey { key: String },
    #[error("bad value '{value}' for key '{key}': {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("malformed config line {line}: '{text}' (expected key = value)")]
    BadLine { line: usize, text: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Every knob of a distillation run. Field names double as config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    // Task and data.
    pub task: TaskKind,
    /// Load datasets from this directory instead of generating them.
    pub data_dir: Option<PathBuf>,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub data_seed: u64,
    pub num_words: usize,
    pub num_agents: usize,
    pub num_swaps: usize,

    // Model shapes.
    pub teacher_layers: usize,
    pub teacher_dim: usize,
    pub teacher_heads: usize,
    pub student_layers: usize,
    pub student_dim: usize,
    pub student_heads: usize,
    pub max_seq_len: usize,
    pub precision: Precision,

    // Teacher pretraining.
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub teacher_seed: u64,

    // Distillation objective.
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub gating_strategy: GatingStrategy,
    pub confidence_formula: ConfidenceFormula,
    pub soft_form: SoftLossForm,
    pub attention_form: AttentionLossForm,
    pub threshold_tau: f64,
    pub sigmoid_slope: f64,
    pub gate_ties_open: bool,
    pub projection_identity: bool,
    pub attention_head_subsample: bool,

    // Ablation switches.
    pub force_confidence_one: bool,
    pub force_hidden_gate_open: bool,
    pub force_attention_gate_open: bool,

    // Optimizer and schedule.
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,

    // Noisy teacher channel.
    pub noise_enabled: bool,
    pub noise_error_rate: f64,
    pub noise_calibration: f64,
    pub noise_peak_prob: f64,
    pub noise_seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            task: TaskKind::LastLetter,
            data_dir: None,
            train_size: 800,
            val_size: 100,
            test_size: 200,
            data_seed: 1234,
            num_words: 4,
            num_agents: 3,
            num_swaps: 4,
            teacher_layers: 4,
            teacher_dim: 64,
            teacher_heads: 4,
            student_layers: 2,
            student_dim: 32,
            student_heads: 2,
            max_seq_len: 48,
            precision: Precision::F32,
            teacher_epochs: 8,
            teacher_lr: 1e-3,
            teacher_seed: 7777,
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.1,
            gating_strategy: GatingStrategy::BatchRelative,
            confidence_formula: ConfidenceFormula::NormalizedEntropy,
            soft_form: SoftLossForm::Kl,
            attention_form: AttentionLossForm::Mse,
            threshold_tau: 0.5,
            sigmoid_slope: 10.0,
            gate_ties_open: false,
            projection_identity: false,
            attention_head_subsample: true,
            force_confidence_one: false,
            force_hidden_gate_open: false,
            force_attention_gate_open: false,
            learning_rate: 3e-4,
            weight_decay: 1e-2,
            warmup_fraction: 0.05,
            batch_size: 128,
            grad_accum_steps: 4,
            max_epochs: 5,
            patience: 2,
            seeds: vec![1, 2, 3, 4, 5],
            noise_enabled: false,
            noise_error_rate: 0.3,
            noise_calibration: 1.0,
            noise_peak_prob: 0.95,
            noise_seed: 999,
        }
    }
}

fn bad(key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: reason.to_string(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| bad(key, value, e))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

impl DistillConfig {
    /// Applies one `key = value` assignment. Shared by file parsing and
    /// command-line overrides, so both reject unknown keys identically.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "task" => self.task = TaskKind::parse(v).map_err(|e| bad(key, v, e))?,
            "data_dir" => {
                self.data_dir = if v == "none" || v.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            "train_size" => self.train_size = parse_num(key, v)?,
            "val_size" => self.val_size = parse_num(key, v)?,
            "test_size" => self.test_size = parse_num(key, v)?,
            "data_seed" => self.data_seed = parse_num(key, v)?,
            "num_words" => self.num_words = parse_num(key, v)?,
            "num_agents" => self.num_agents = parse_num(key, v)?,
            "num_swaps" => self.num_swaps = parse_num(key, v)?,
            "teacher_layers" => self.teacher_layers = parse_num(key, v)?,
            "teacher_dim" => self.teacher_dim = parse_num(key, v)?,
            "teacher_heads" => self.teacher_heads = parse_num(key, v)?,
            "student_layers" => self.student_layers = parse_num(key, v)?,
            "student_dim" => self.student_dim = parse_num(key, v)?,
            "student_heads" => self.student_heads = parse_num(key, v)?,
            "max_seq_len" => self.max_seq_len = parse_num(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad(key, v, "expected f32 or f64")),
                }
            }
            "teacher_epochs" => self.teacher_epochs = parse_num(key, v)?,
            "teacher_lr" => self.teacher_lr = parse_num(key, v)?,
            "teacher_seed" => self.teacher_seed = parse_num(key, v)?,
            "lambda1" => self.lambda1 = parse_num(key, v)?,
            "lambda2" => self.lambda2 = parse_num(key, v)?,
            "lambda3" => self.lambda3 = parse_num(key, v)?,
            "gating_strategy" => {
                self.gating_strategy = GatingStrategy::parse(v).map_err(|e| bad(key, v, e))?
            }
            "confidence_formula" => {
                self.confidence_formula =
                    ConfidenceFormula::parse(v).map_err(|e| bad(key, v, e))?
            }
            "soft_form" => self.soft_form = SoftLossForm::parse(v).map_err(|e| bad(key, v, e))?,
            "attention_form" => {
                self.attention_form = AttentionLossForm::parse(v).map_err(|e| bad(key, v, e))?
            }
            "threshold_tau" => self.threshold_tau = parse_num(key, v)?,
            "sigmoid_slope" => self.sigmoid_slope = parse_num(key, v)?,
            "gate_ties_open" => self.gate_ties_open = parse_bool(key, v)?,
            "projection_identity" => self.projection_identity = parse_bool(key, v)?,
            "attention_head_subsample" => self.attention_head_subsample = parse_bool(key, v)?,
            "force_confidence_one" => self.force_confidence_one = parse_bool(key, v)?,
            "force_hidden_gate_open" => self.force_hidden_gate_open = parse_bool(key, v)?,
            "force_attention_gate_open" => {
                self.force_attention_gate_open = parse_bool(key, v)?
            }
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "warmup_fraction" => self.warmup_fraction = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "grad_accum_steps" => self.grad_accum_steps = parse_num(key, v)?,
            "max_epochs" => self.max_epochs = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "seeds" => {
                let parsed: Result<Vec<u64>, _> = v
                    .split(',')
                    .map(|s| s.trim().parse::<u64>())
                    .collect();
                self.seeds = parsed.map_err(|e| bad(key, v, e))?;
            }
            "noise_enabled" => self.noise_enabled = parse_bool(key, v)?,
            "noise_error_rate" => self.noise_error_rate = parse_num(key, v)?,
            "noise_calibration" => self.noise_calibration = parse_num(key, v)?,
            "noise_peak_prob" => self.noise_peak_prob = parse_num(key, v)?,
            "noise_seed" => self.noise_seed = parse_num(key, v)?,
            _ => return Err(ConfigError::UnknownKey { key: key.into() }),
        }
        Ok(())
    }

    /// Parses a flat config text: `key = value` lines, `#` comments,
    /// blank lines ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = DistillConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine {
                    line: i + 1,
                    text: raw.into(),
                });
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Applies `key=value` override strings, after any file config.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let o = o.as_ref();
            let Some((key, value)) = o.split_once('=') else {
                return Err(ConfigError::BadLine {
                    line: 0,
                    text: o.into(),
                });
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// All keys with their current values, in declaration order. The single
    /// source for snapshots and snapshot diffs.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let seeds = self
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("task", self.task.name().into()),
            (
                "data_dir",
                self.data_dir
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "none".into()),
            ),
            ("train_size", self.train_size.to_string()),
            ("val_size", self.val_size.to_string()),
            ("test_size", self.test_size.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("num_words", self.num_words.to_string()),
            ("num_agents", self.num_agents.to_string()),
            ("num_swaps", self.num_swaps.to_string()),
            ("teacher_layers", self.teacher_layers.to_string()),
            ("teacher_dim", self.teacher_dim.to_string()),
            ("teacher_heads", self.teacher_heads.to_string()),
            ("student_layers", self.student_layers.to_string()),
            ("student_dim", self.student_dim.to_string()),
            ("student_heads", self.student_heads.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("precision", self.precision.name().into()),
            ("teacher_epochs", self.teacher_epochs.to_string()),
            ("teacher_lr", self.teacher_lr.to_string()),
            ("teacher_seed", self.teacher_seed.to_string()),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("lambda3", self.lambda3.to_string()),
            ("gating_strategy", self.gating_strategy.name().into()),
            ("confidence_formula", self.confidence_formula.name().into()),
            ("soft_form", self.soft_form.name().into()),
            ("attention_form", self.attention_form.name().into()),
            ("threshold_tau", self.threshold_tau.to_string()),
            ("sigmoid_slope", self.sigmoid_slope.to_string()),
            ("gate_ties_open", self.gate_ties_open.to_string()),
            ("projection_identity", self.projection_identity.to_string()),
            (
                "attention_head_subsample",
                self.attention_head_subsample.to_string(),
            ),
            ("force_confidence_one", self.force_confidence_one.to_string()),
            (
                "force_hidden_gate_open",
                self.force_hidden_gate_open.to_string(),
            ),
            (
                "force_attention_gate_open",
                self.force_attention_gate_open.to_string(),
            ),
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_fraction", self.warmup_fraction.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("grad_accum_steps", self.grad_accum_steps.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("seeds", seeds),
            ("noise_enabled", self.noise_enabled.to_string()),
            ("noise_error_rate", self.noise_error_rate.to_string()),
            ("noise_calibration", self.noise_calibration.to_string()),
            ("noise_peak_prob", self.noise_peak_prob.to_string()),
            ("noise_seed", self.noise_seed.to_string()),
        ]
    }

    /// Canonical text form; `parse(snapshot())` reproduces the config.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Keys on which the two configs differ.
    pub fn diff_keys(&self, other: &DistillConfig) -> Vec<&'static str> {
        self.pairs()
            .into_iter()
            .zip(other.pairs())
            .filter(|((_, a), (_, b))| a != b)
            .map(|((k, _), _)| k)
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return fail("all split sizes must be positive".into());
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return fail("batch_size and grad_accum_steps must be positive".into());
        }
        if !self.batch_size.is_multiple_of(self.grad_accum_steps) {
            return fail(format!(
                "batch_size {} not divisible by grad_accum_steps {}",
                self.batch_size, self.grad_accum_steps
            ));
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be positive".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must be non-empty".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail(format!(
                "warmup_fraction must be in [0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if self.learning_rate <= 0.0 || self.teacher_lr <= 0.0 {
            return fail("learning rates must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative".into());
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return fail("lambda weights must be non-negative".into());
        }
        if !self.teacher_dim.is_multiple_of(self.teacher_heads)
            || !self.student_dim.is_multiple_of(self.student_heads)
        {
            return fail("hidden dims must be divisible by head counts".into());
        }
        if self.student_layers > self.teacher_layers {
            return fail(format!(
                "student_layers {} exceeds teacher_layers {}",
                self.student_layers, self.teacher_layers
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_error_rate)
            || !(0.0..=1.0).contains(&self.noise_calibration)
        {
            return fail("noise_error_rate and noise_calibration must be in [0, 1]".into());
        }
        if !(self.noise_peak_prob > 0.0 && self.noise_peak_prob < 1.0) {
            return fail(format!(
                "noise_peak_prob must be in (0, 1), got {}",
                self.noise_peak_prob
            ));
        }
        if self.max_seq_len < 8 {
            return fail("max_seq_len too small to hold any task instance".into());
        }
        Ok(())
    }
}
