//! The distillation pipeline: teacher pretraining, the per-example teacher
//! signal channel, gated training steps, and run records.
//!
//! The teacher is trained once, frozen, and traced once per training
//! example into a [`TeacherChannel`]; every seed and every variant then
//! trains against the same recorded signals, so run-to-run differences
//! come only from the knobs under study.
//!
//! A logical batch is processed one example at a time on its own tape;
//! gradients are summed and applied in a single optimizer update. The
//! batch is also the gating pool: batch-relative gates compare each
//! example's confidence against the mean over exactly these examples.
//! Per-example supervision may ride a second decoder pass when the noisy
//! teacher emitted a target different from gold: the task loss always
//! follows the gold trajectory, while distillation losses follow the
//! teacher's emitted trajectory.

use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{
    make_gates_with_ties, ConfidenceError, ConfidenceProfile, GatingStrategy,
    ProbabilityDistribution,
};
use crate::config::{ConfigError, DistillConfig, Precision};
use crate::losses::{
    attention_loss_node, combined_loss, hidden_loss_node, soft_loss_node, subsample_heads,
    LayerMap, LossBreakdown, LossError,
};
use crate::model::{
    decoder_prefix, shifted_targets, FrozenModel, Model, ModelConfig, ModelError, ModelRole,
};
use crate::optim::{lr_at, AdamW};
use crate::real::Real;
use crate::tape::{softmax_rows, NodeId, Tape};
use crate::tasks::{
    gen_dataset, noisy_teacher_emit, read_splits, DataGenSpec, DatasetSplits, NoisyTeacherSpec,
    ReasoningExample, TaskError, TaskKind,
};
use crate::tokenizer::{self, TokenizerError, VOCAB_SIZE};

const SHUFFLE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
const PROJ_SALT: u64 = 0xA5A5_5A5A_1234_8765;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("non-finite loss at optimizer step {step}; offending example seed_ids {example_ids:?}")]
    NonFinite { step: usize, example_ids: Vec<u64> },
    #[error("prediction/target length mismatch: {predictions} vs {targets}")]
    EvalLengthMismatch { predictions: usize, targets: usize },
    #[error("dataset/config mismatch: {0}")]
    DataMismatch(String),
    #[error("run artifacts malformed: {0}")]
    BadRunArtifact(String),
}

// ---------------------------------------------------------------------------
// Prepared data
// ---------------------------------------------------------------------------

/// A tokenized example ready for the models.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub input_tokens: Vec<usize>,
    pub gold_tokens: Vec<usize>,
    pub example: ReasoningExample,
}

pub fn prepare_examples(
    examples: &[ReasoningExample],
    max_seq_len: usize,
) -> Result<Vec<PreparedExample>, TrainerError> {
    examples
        .iter()
        .map(|ex| {
            let input_tokens = tokenizer::encode(&ex.input_text)?;
            let gold_tokens = tokenizer::encode(&ex.target_text)?;
            if input_tokens.len() > max_seq_len || gold_tokens.len() + 1 > max_seq_len {
                return Err(TrainerError::DataMismatch(format!(
                    "example seed_id {} exceeds max_seq_len {max_seq_len}",
                    ex.seed_id
                )));
            }
            Ok(PreparedExample {
                input_tokens,
                gold_tokens,
                example: ex.clone(),
            })
        })
        .collect()
}

/// Teacher and student shapes implied by a config.
pub fn model_configs(cfg: &DistillConfig) -> (ModelConfig, ModelConfig) {
    let teacher = ModelConfig {
        vocab_size: VOCAB_SIZE,
        hidden_dim: cfg.teacher_dim,
        num_layers: cfg.teacher_layers,
        num_heads: cfg.teacher_heads,
        max_seq_len: cfg.max_seq_len,
        role: ModelRole::Teacher,
    };
    let student = ModelConfig {
        vocab_size: VOCAB_SIZE,
        hidden_dim: cfg.student_dim,
        num_layers: cfg.student_layers,
        num_heads: cfg.student_heads,
        max_seq_len: cfg.max_seq_len,
        role: ModelRole::Student,
    };
    (teacher, student)
}

// ---------------------------------------------------------------------------
// Teacher channel
// ---------------------------------------------------------------------------

/// Everything the teacher contributes for one training example, recorded
/// once: the supervision trajectory (gold, or the noisy emission), the
/// reported per-step distributions, the traced hidden states and
/// decoder self-attention under that trajectory, and the sequence
/// confidence derived from the reported distributions.
pub struct TeacherSignals<R: Real> {
    pub supervision_tokens: Vec<usize>,
    pub step_targets: Vec<usize>,
    pub distributions: Array2<R>,
    pub hiddens: Vec<Array2<R>>,
    pub attention: Vec<Vec<Array2<R>>>,
    pub confidence: f64,
    pub corrupted: bool,
    pub matches_gold: bool,
}

pub struct TeacherChannel<R: Real> {
    pub per_example: Vec<TeacherSignals<R>>,
    pub teacher_checksum: String,
}

impl<R: Real> TeacherChannel<R> {
    /// Traces the frozen teacher over the whole training split. With the
    /// noisy channel enabled, each example's emission is drawn from a
    /// dedicated stream seeded by `noise_seed + index`, so the channel is
    /// identical across student seeds and variants.
    pub fn build(
        teacher: &FrozenModel<R>,
        train: &[PreparedExample],
        cfg: &DistillConfig,
    ) -> Result<Self, TrainerError> {
        let spec = NoisyTeacherSpec {
            error_rate: cfg.noise_error_rate,
            calibration: cfg.noise_calibration,
            peak_prob: cfg.noise_peak_prob,
        };
        let mut per_example = Vec::with_capacity(train.len());
        for (idx, prep) in train.iter().enumerate() {
            let (supervision_tokens, corrupted, reported) = if cfg.noise_enabled {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed.wrapping_add(idx as u64));
                let em = noisy_teacher_emit(&prep.example, &spec, &mut rng)?;
                (
                    tokenizer::encode(&em.supervision_text)?,
                    em.corrupted,
                    Some(em.distributions),
                )
            } else {
                (prep.gold_tokens.clone(), false, None)
            };
            let prefix = decoder_prefix(&supervision_tokens);
            let trace = teacher.forward(&prep.input_tokens, &prefix)?;
            let rows: Vec<Vec<f64>> = match reported {
                Some(rows) => rows,
                None => softmax_rows(&trace.logits)
                    .rows()
                    .into_iter()
                    .map(|r| r.iter().map(|v| v.f64()).collect())
                    .collect(),
            };
            let dists: Vec<ProbabilityDistribution<f64>> = rows
                .iter()
                .map(|r| ProbabilityDistribution::new(r.clone()))
                .collect::<Result<_, _>>()?;
            let pad_mask = vec![false; dists.len()];
            let profile =
                ConfidenceProfile::from_distributions(&dists, &pad_mask, cfg.confidence_formula)?;
            let steps = rows.len();
            let distributions =
                Array2::from_shape_fn((steps, VOCAB_SIZE), |(r, c)| R::of(rows[r][c]));
            let step_targets = shifted_targets(&supervision_tokens);
            debug_assert_eq!(step_targets.len(), steps);
            per_example.push(TeacherSignals {
                matches_gold: supervision_tokens == prep.gold_tokens,
                supervision_tokens,
                step_targets,
                distributions,
                hiddens: trace.hidden_states,
                attention: trace.attention_maps,
                confidence: profile.seq_conf,
                corrupted,
            });
        }
        Ok(TeacherChannel {
            per_example,
            teacher_checksum: teacher.checksum(),
        })
    }
}

// ---------------------------------------------------------------------------
// Student state and gradient plumbing
// ---------------------------------------------------------------------------

/// Copies of (student tensors, projection matrices) for checkpointing.
type ParamSnapshot<R> = (Vec<Array2<R>>, Vec<Array2<R>>);

/// The trainable side: the student model plus one projection matrix per
/// aligned layer pair (unless the identity shortcut applies).
pub struct StudentState<R: Real> {
    pub model: Model<R>,
    proj_weights: Vec<Array2<R>>,
    proj_slot: Vec<Option<usize>>,
}

impl<R: Real> StudentState<R> {
    fn new(cfg: &DistillConfig, seed: u64, map: &LayerMap) -> Result<Self, TrainerError> {
        let (_, student_cfg) = model_configs(cfg);
        let model = Model::new(student_cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROJ_SALT);
        let mut proj_weights = Vec::new();
        let mut proj_slot = Vec::with_capacity(map.student_layers);
        let identity_ok = cfg.projection_identity && cfg.teacher_dim == cfg.student_dim;
        for _ in 0..map.student_layers {
            if identity_ok {
                proj_slot.push(None);
            } else {
                let (rows, cols) = (cfg.teacher_dim, cfg.student_dim);
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                use rand::Rng as _;
                let w = Array2::from_shape_fn((rows, cols), |_| {
                    R::of(rng.random_range(-limit..limit))
                });
                proj_slot.push(Some(proj_weights.len()));
                proj_weights.push(w);
            }
        }
        Ok(StudentState {
            model,
            proj_weights,
            proj_slot,
        })
    }

    pub fn projection_weights(&self) -> &[Array2<R>] {
        &self.proj_weights
    }

    pub fn projection_weight_mut(&mut self, i: usize) -> &mut Array2<R> {
        &mut self.proj_weights[i]
    }

    fn snapshot(&self) -> ParamSnapshot<R> {
        (
            self.model.params().tensors().to_vec(),
            self.proj_weights.clone(),
        )
    }

    fn restore(&mut self, snap: &ParamSnapshot<R>) {
        for (t, s) in self
            .model
            .params_mut()
            .tensors_mut()
            .iter_mut()
            .zip(&snap.0)
        {
            t.clone_from(s);
        }
        for (t, s) in self.proj_weights.iter_mut().zip(&snap.1) {
            t.clone_from(s);
        }
    }
}

/// Gradient sums aligned with a parameter list; `None` means the tensor
/// received no contribution at all.
pub type GradVec<R> = Vec<Option<Array2<R>>>;

/// Summed (not yet averaged) gradients for one or more micro-batches.
pub struct StudentGrads<R: Real> {
    student: GradVec<R>,
    proj: GradVec<R>,
    count: usize,
}

impl<R: Real> StudentGrads<R> {
    fn empty(student_tensors: usize, proj_tensors: usize) -> Self {
        StudentGrads {
            student: (0..student_tensors).map(|_| None).collect(),
            proj: (0..proj_tensors).map(|_| None).collect(),
            count: 0,
        }
    }

    /// Combines accumulations from two disjoint micro-batches of the same
    /// logical batch.
    pub fn merge(mut self, other: StudentGrads<R>) -> StudentGrads<R> {
        merge_into(&mut self.student, other.student);
        merge_into(&mut self.proj, other.proj);
        self.count += other.count;
        self
    }

    pub fn example_count(&self) -> usize {
        self.count
    }

    /// Decomposes into (student gradients, projection gradients), both as
    /// sums over the accumulated examples.
    pub fn into_parts(self) -> (GradVec<R>, GradVec<R>) {
        (self.student, self.proj)
    }
}

fn merge_into<R: Real>(acc: &mut [Option<Array2<R>>], add: GradVec<R>) {
    for (slot, g) in acc.iter_mut().zip(add) {
        match (slot.as_mut(), g) {
            (Some(a), Some(b)) => *a += &b,
            (None, Some(b)) => *slot = Some(b),
            _ => {}
        }
    }
}

fn scale_grads<R: Real>(grads: &mut [Option<Array2<R>>], factor: R) {
    for g in grads.iter_mut().flatten() {
        g.mapv_inplace(|v| v * factor);
    }
}

/// Per-example weights produced by the gating step for one logical batch.
pub struct GatePool {
    pub indices: Vec<usize>,
    pub confidence: Vec<f64>,
    pub soft_weight: Vec<f64>,
    pub hidden_gate: Vec<f64>,
    pub attention_gate: Vec<f64>,
    pub open: Vec<bool>,
}

impl GatePool {
    pub fn open_fraction(&self) -> f64 {
        if self.open.is_empty() {
            return 0.0;
        }
        self.open.iter().filter(|&&o| o).count() as f64 / self.open.len() as f64
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.confidence.is_empty() {
            return 0.0;
        }
        self.confidence.iter().sum::<f64>() / self.confidence.len() as f64
    }
}

/// Per-example numbers logged during an epoch.
pub struct ExampleGateLog {
    pub corrupted: bool,
    pub open: bool,
    pub confidence: f64,
}

struct ExampleLossVals {
    task: f64,
    soft: f64,
    hidden: f64,
    attention: f64,
    total: f64,
}

/// One seed's live training state: student, projections, optimizer state,
/// and the schedule position.
pub struct TrainState<'a, R: Real> {
    cfg: &'a DistillConfig,
    train: &'a [PreparedExample],
    channel: &'a TeacherChannel<R>,
    pub student: StudentState<R>,
    opt_student: AdamW<R>,
    opt_proj: AdamW<R>,
    map: LayerMap,
    head_map: Vec<usize>,
    total_steps: usize,
    step: usize,
}

impl<'a, R: Real> TrainState<'a, R> {
    pub fn new(
        cfg: &'a DistillConfig,
        train: &'a [PreparedExample],
        channel: &'a TeacherChannel<R>,
        seed: u64,
        total_steps: usize,
    ) -> Result<Self, TrainerError> {
        if train.is_empty() {
            return Err(TrainerError::EmptySplit("train"));
        }
        if channel.per_example.len() != train.len() {
            return Err(TrainerError::DataMismatch(format!(
                "channel covers {} examples, train split has {}",
                channel.per_example.len(),
                train.len()
            )));
        }
        let map = LayerMap::uniform(cfg.student_layers, cfg.teacher_layers)?;
        let head_map = if cfg.student_heads == cfg.teacher_heads {
            (0..cfg.student_heads).collect()
        } else if cfg.attention_head_subsample {
            subsample_heads(cfg.student_heads, cfg.teacher_heads)?
        } else {
            return Err(TrainerError::DataMismatch(format!(
                "head counts differ ({} vs {}) and subsampling is disabled",
                cfg.student_heads, cfg.teacher_heads
            )));
        };
        let student = StudentState::new(cfg, seed, &map)?;
        let opt_student = AdamW::new(student.model.params().tensors(), cfg.weight_decay);
        let opt_proj = AdamW::new(&student.proj_weights, cfg.weight_decay);
        Ok(TrainState {
            cfg,
            train,
            channel,
            student,
            opt_student,
            opt_proj,
            map,
            head_map,
            total_steps,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Confidence collection and gate construction over one logical batch.
    ///
    /// The structural gate comes straight from the strategy. The soft
    /// weight mirrors it, except under batch_relative where an open gate
    /// passes the continuous confidence itself, so unreliable-but-open
    /// examples are still down-weighted and closed ones contribute an
    /// exact zero.
    pub fn gate_pool(&self, batch: &[usize]) -> Result<GatePool, TrainerError> {
        let confidence: Vec<f64> = batch
            .iter()
            .map(|&i| {
                if self.cfg.force_confidence_one {
                    1.0
                } else {
                    self.channel.per_example[i].confidence
                }
            })
            .collect();
        let gates = make_gates_with_ties(
            &confidence,
            self.cfg.gating_strategy,
            self.cfg.threshold_tau,
            self.cfg.sigmoid_slope,
            self.cfg.gate_ties_open,
        )?;
        let mut soft_weight = Vec::with_capacity(batch.len());
        let mut hidden_gate = Vec::with_capacity(batch.len());
        let mut attention_gate = Vec::with_capacity(batch.len());
        let mut open = Vec::with_capacity(batch.len());
        for (pos, &c) in confidence.iter().enumerate() {
            let g = gates.weights[pos];
            let w = match self.cfg.gating_strategy {
                GatingStrategy::None => 1.0,
                GatingStrategy::FixedThreshold | GatingStrategy::Sigmoid => g,
                GatingStrategy::BatchRelative => c * g,
            };
            soft_weight.push(w);
            hidden_gate.push(if self.cfg.force_hidden_gate_open { 1.0 } else { g });
            attention_gate.push(if self.cfg.force_attention_gate_open {
                1.0
            } else {
                g
            });
            open.push(g > 0.0);
        }
        Ok(GatePool {
            indices: batch.to_vec(),
            confidence,
            soft_weight,
            hidden_gate,
            attention_gate,
            open,
        })
    }

    /// Forward/backward for one example under the given weights. Returns
    /// summable gradients and the loss components as optimized.
    fn example_grads(
        &self,
        idx: usize,
        soft_weight: f64,
        hidden_gate: f64,
        attention_gate: f64,
    ) -> Result<(GradVec<R>, GradVec<R>, ExampleLossVals), TrainerError>
    {
        let prep = &self.train[idx];
        let sig = &self.channel.per_example[idx];
        let cfg = self.cfg;
        let model = &self.student.model;

        let mut tape: Tape<'_, R> = Tape::new();
        let reg = model.register(&mut tape);
        let proj_nodes: Vec<Option<NodeId>> = self
            .student
            .proj_slot
            .iter()
            .map(|slot| slot.map(|s| tape.shared(&self.student.proj_weights[s])))
            .collect();

        let memory = model.encode_nodes(&mut tape, &reg, &prep.input_tokens)?;

        // Task supervision always follows the gold trajectory.
        let gold_prefix = decoder_prefix(&prep.gold_tokens);
        let gold_out = model.decode_nodes(&mut tape, &reg, memory, &gold_prefix)?;
        let gold_targets = shifted_targets(&prep.gold_tokens);
        let steps = gold_targets.len();
        let lsm = tape.log_softmax_rows(gold_out.logits);
        let task_node = tape.hard_ce_rows(lsm, gold_targets, vec![R::of(1.0 / steps as f64); steps]);

        let distill_wanted = cfg.lambda1 > 0.0 || cfg.lambda2 > 0.0 || cfg.lambda3 > 0.0;
        // Teacher emissions that differ from gold need a second decoder
        // pass: distillation follows the teacher-forced trajectory of the
        // emitted tokens, while the task loss above stays on gold.
        let second_pass = if distill_wanted && !sig.matches_gold {
            let sup_prefix = decoder_prefix(&sig.supervision_tokens);
            Some(model.decode_nodes(&mut tape, &reg, memory, &sup_prefix)?)
        } else {
            None
        };
        let distill_out = if distill_wanted {
            Some(second_pass.as_ref().unwrap_or(&gold_out))
        } else {
            None
        };

        let mut total = task_node;
        let mut soft_val = 0.0;
        let mut hidden_val = 0.0;
        let mut attention_val = 0.0;
        if let Some(out) = distill_out {
            if cfg.lambda1 > 0.0 {
                if let Some(node) = soft_loss_node(
                    &mut tape,
                    out.logits,
                    &sig.distributions,
                    R::of(soft_weight),
                    cfg.soft_form,
                )? {
                    soft_val = tape.scalar_value(node).f64();
                    let scaled = tape.scale(node, R::of(cfg.lambda1));
                    total = tape.add(total, scaled);
                }
            }
            if cfg.lambda2 > 0.0 && hidden_gate > 0.0 {
                if let Some(node) = hidden_loss_node(
                    &mut tape,
                    &out.hiddens,
                    &sig.hiddens,
                    &proj_nodes,
                    &vec![R::of(hidden_gate); self.map.student_layers],
                    &self.map,
                )? {
                    hidden_val = tape.scalar_value(node).f64();
                    let scaled = tape.scale(node, R::of(cfg.lambda2));
                    total = tape.add(total, scaled);
                }
            }
            if cfg.lambda3 > 0.0 && attention_gate > 0.0 {
                let teacher_sel: Vec<Vec<Array2<R>>> = sig
                    .attention
                    .iter()
                    .map(|heads| self.head_map.iter().map(|&h| heads[h].clone()).collect())
                    .collect();
                if let Some(node) = attention_loss_node(
                    &mut tape,
                    &out.attn_probs,
                    &out.attn_scores,
                    &teacher_sel,
                    &vec![R::of(attention_gate); self.map.student_layers],
                    &self.map,
                    cfg.attention_form,
                )? {
                    attention_val = tape.scalar_value(node).f64();
                    let scaled = tape.scale(node, R::of(cfg.lambda3));
                    total = tape.add(total, scaled);
                }
            }
        }

        let task_val = tape.scalar_value(task_node).f64();
        let total_val = tape.scalar_value(total).f64();
        let mut grads = tape.backward(total);
        let student: GradVec<R> = reg.iter().map(|&id| grads.take(id)).collect();
        let mut proj: GradVec<R> = vec![None; self.student.proj_weights.len()];
        for (slot, node) in self.student.proj_slot.iter().zip(&proj_nodes) {
            if let (Some(s), Some(n)) = (slot, node) {
                proj[*s] = grads.take(*n);
            }
        }
        Ok((
            student,
            proj,
            ExampleLossVals {
                task: task_val,
                soft: soft_val,
                hidden: hidden_val,
                attention: attention_val,
                total: total_val,
            },
        ))
    }

    /// Sums gradients over `chunk` using the supplied gate pool, without
    /// touching parameters. `chunk` must be a subset of the pool.
    pub fn accumulate_with_gates(
        &self,
        chunk: &[usize],
        pool: &GatePool,
    ) -> Result<(StudentGrads<R>, Vec<ExampleContribution>), TrainerError> {
        let mut grads = StudentGrads::empty(
            self.student.model.params().tensors().len(),
            self.student.proj_weights.len(),
        );
        let mut vals = Vec::with_capacity(chunk.len());
        for &idx in chunk {
            let pos = pool
                .indices
                .iter()
                .position(|&i| i == idx)
                .ok_or_else(|| {
                    TrainerError::DataMismatch(format!("example {idx} not in gate pool"))
                })?;
            let (sg, pg, v) = self.example_grads(
                idx,
                pool.soft_weight[pos],
                pool.hidden_gate[pos],
                pool.attention_gate[pos],
            )?;
            merge_into(&mut grads.student, sg);
            merge_into(&mut grads.proj, pg);
            grads.count += 1;
            vals.push(ExampleContribution {
                idx,
                task: v.task,
                soft: v.soft,
                hidden: v.hidden,
                attention: v.attention,
                total: v.total,
            });
        }
        Ok((grads, vals))
    }

    /// Gate pool plus summed gradients for a full logical batch.
    pub fn accumulate(
        &self,
        batch: &[usize],
    ) -> Result<(StudentGrads<R>, GatePool, Vec<ExampleContribution>), TrainerError> {
        let pool = self.gate_pool(batch)?;
        let micro = (self.cfg.batch_size / self.cfg.grad_accum_steps).max(1);
        let mut grads = StudentGrads::empty(
            self.student.model.params().tensors().len(),
            self.student.proj_weights.len(),
        );
        let mut vals = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(micro) {
            let (g, mut v) = self.accumulate_with_gates(chunk, &pool)?;
            grads = grads.merge(g);
            vals.append(&mut v);
        }
        Ok((grads, pool, vals))
    }

    /// Averages the summed gradients and takes one scheduled optimizer
    /// step. Returns the learning rate used.
    pub fn apply(&mut self, mut grads: StudentGrads<R>) -> f64 {
        self.step += 1;
        let lr = lr_at(
            self.step.min(self.total_steps),
            self.total_steps,
            self.cfg.learning_rate,
            self.cfg.warmup_fraction,
        );
        let inv = R::of(1.0 / grads.count.max(1) as f64);
        scale_grads(&mut grads.student, inv);
        scale_grads(&mut grads.proj, inv);
        self.opt_student.step(
            self.student.model.params_mut().tensors_mut(),
            &grads.student,
            lr,
        );
        self.opt_proj
            .step(&mut self.student.proj_weights, &grads.proj, lr);
        lr
    }

    /// One full gated training step on a logical batch.
    pub fn distill_step(&mut self, batch: &[usize]) -> Result<LossBreakdown<f64>, TrainerError> {
        let (bd, _) = self.step_logged(batch)?;
        Ok(bd)
    }

    /// As [`TrainState::distill_step`], also returning per-example gate
    /// observations for epoch statistics.
    pub fn step_logged(
        &mut self,
        batch: &[usize],
    ) -> Result<(LossBreakdown<f64>, Vec<ExampleGateLog>), TrainerError> {
        let (grads, pool, vals) = self.accumulate(batch)?;
        let bad: Vec<u64> = vals
            .iter()
            .filter(|v| !v.total.is_finite())
            .map(|v| self.train[v.idx].example.seed_id)
            .collect();
        if !bad.is_empty() {
            return Err(TrainerError::NonFinite {
                step: self.step + 1,
                example_ids: bad,
            });
        }
        let n = vals.len().max(1) as f64;
        let mean = |f: fn(&ExampleContribution) -> f64| vals.iter().map(f).sum::<f64>() / n;
        let breakdown = combined_loss(
            mean(|v| v.task),
            mean(|v| v.soft),
            mean(|v| v.hidden),
            mean(|v| v.attention),
            (self.cfg.lambda1, self.cfg.lambda2, self.cfg.lambda3),
            pool.open_fraction(),
            pool.mean_confidence(),
        )?;
        self.apply(grads);
        let logs = pool
            .indices
            .iter()
            .zip(&pool.open)
            .zip(&pool.confidence)
            .map(|((&idx, &open), &confidence)| ExampleGateLog {
                corrupted: self.channel.per_example[idx].corrupted,
                open,
                confidence,
            })
            .collect();
        Ok((breakdown, logs))
    }
}

/// Loss components of one example within a batch, tagged by its index.
#[derive(Debug, Clone)]
pub struct ExampleContribution {
    pub idx: usize,
    pub task: f64,
    pub soft: f64,
    pub hidden: f64,
    pub attention: f64,
    pub total: f64,
}

// ---------------------------------------------------------------------------
// Plain supervised fine-tuning (teacher pretraining and baselines)
// ---------------------------------------------------------------------------

fn task_only_grads<R: Real>(
    model: &Model<R>,
    prep: &PreparedExample,
) -> Result<(GradVec<R>, f64), TrainerError> {
    let mut tape: Tape<'_, R> = Tape::new();
    let reg = model.register(&mut tape);
    let memory = model.encode_nodes(&mut tape, &reg, &prep.input_tokens)?;
    let prefix = decoder_prefix(&prep.gold_tokens);
    let out = model.decode_nodes(&mut tape, &reg, memory, &prefix)?;
    let targets = shifted_targets(&prep.gold_tokens);
    let steps = targets.len();
    let lsm = tape.log_softmax_rows(out.logits);
    let ce = tape.hard_ce_rows(lsm, targets, vec![R::of(1.0 / steps as f64); steps]);
    let loss = tape.scalar_value(ce).f64();
    let mut grads = tape.backward(ce);
    Ok((reg.iter().map(|&id| grads.take(id)).collect(), loss))
}

/// One supervised step on a batch: gold-target cross-entropy only.
pub fn sft_step<R: Real>(
    model: &mut Model<R>,
    opt: &mut AdamW<R>,
    batch: &[&PreparedExample],
    lr: f64,
) -> Result<f64, TrainerError> {
    let mut acc: GradVec<R> = vec![None; model.params().tensors().len()];
    let mut loss_sum = 0.0;
    for prep in batch {
        let (g, loss) = task_only_grads(model, prep)?;
        merge_into(&mut acc, g);
        loss_sum += loss;
    }
    let inv = R::of(1.0 / batch.len().max(1) as f64);
    scale_grads(&mut acc, inv);
    opt.step(model.params_mut().tensors_mut(), &acc, lr);
    Ok(loss_sum / batch.len().max(1) as f64)
}

/// Trains the teacher with plain supervision, keeping the epoch checkpoint
/// with the best validation accuracy.
pub fn pretrain_teacher<R: Real>(
    cfg: &DistillConfig,
    train: &[PreparedExample],
    val: &[PreparedExample],
) -> Result<Model<R>, TrainerError> {
    if train.is_empty() {
        return Err(TrainerError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainerError::EmptySplit("val"));
    }
    let (teacher_cfg, _) = model_configs(cfg);
    let mut model = Model::new(teacher_cfg, cfg.teacher_seed)?;
    let mut opt = AdamW::new(model.params().tensors(), cfg.weight_decay);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = (cfg.teacher_epochs * steps_per_epoch).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.teacher_seed ^ SHUFFLE_SALT);
    let mut best: Option<(f64, Vec<Array2<R>>)> = None;
    let mut step = 0usize;
    for _epoch in 1..=cfg.teacher_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let lr = lr_at(step.min(total), total, cfg.teacher_lr, cfg.warmup_fraction);
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &train[i]).collect();
            sft_step(&mut model, &mut opt, &batch, lr)?;
        }
        let acc = evaluate(&model, val)?;
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, model.params().tensors().to_vec()));
        }
    }
    if let Some((_, tensors)) = best {
        for (t, s) in model.params_mut().tensors_mut().iter_mut().zip(&tensors) {
            t.clone_from(s);
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Fraction of string-equal pairs after whitespace trimming.
pub fn exact_match(predictions: &[String], targets: &[String]) -> Result<f64, TrainerError> {
    if predictions.len() != targets.len() {
        return Err(TrainerError::EvalLengthMismatch {
            predictions: predictions.len(),
            targets: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(TrainerError::EmptySplit("evaluation"));
    }
    let hits = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| p.trim() == t.trim())
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Greedy-decodes every example and scores exact match against the gold
/// target text.
pub fn evaluate<R: Real>(
    model: &Model<R>,
    set: &[PreparedExample],
) -> Result<f64, TrainerError> {
    if set.is_empty() {
        return Err(TrainerError::EmptySplit("evaluation"));
    }
    let max_len = set.iter().map(|p| p.gold_tokens.len()).max().unwrap_or(1) + 2;
    let mut preds = Vec::with_capacity(set.len());
    let mut golds = Vec::with_capacity(set.len());
    for prep in set {
        let tokens = model.greedy_decode(&prep.input_tokens, max_len)?;
        preds.push(tokenizer::decode(&tokens)?);
        golds.push(prep.example.target_text.clone());
    }
    exact_match(&preds, &golds)
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub task_loss: f64,
    pub soft_loss: f64,
    pub hidden_loss: f64,
    pub attention_loss: f64,
    pub total: f64,
    pub gate_open_fraction: f64,
    pub mean_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub clean_gate_open_rate: f64,
    pub corrupted_gate_open_rate: Option<f64>,
    pub clean_mean_confidence: f64,
    pub corrupted_mean_confidence: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub task: TaskKind,
    pub dtype: String,
    pub teacher_checksum: String,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub final_test_accuracy: f64,
    pub epochs: Vec<EpochRow>,
    #[serde(skip)]
    pub steps: Vec<StepRow>,
    pub config_snapshot: String,
}

pub const METRICS_HEADER: &str =
    "step,task_loss,soft_loss,hidden_loss,attention_loss,total,gate_open_fraction,mean_confidence";

/// Writes `metrics.csv` and `run.json` into `dir`.
pub fn write_run(dir: &Path, record: &RunRecord) -> Result<(), TrainerError> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("metrics.csv"))?);
    writeln!(w, "{METRICS_HEADER}")?;
    for s in &record.steps {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            s.step,
            s.task_loss,
            s.soft_loss,
            s.hidden_loss,
            s.attention_loss,
            s.total,
            s.gate_open_fraction,
            s.mean_confidence
        )?;
    }
    w.flush()?;
    fs::write(
        dir.join("run.json"),
        serde_json::to_vec_pretty(record)?,
    )?;
    Ok(())
}

/// Reads a run directory back, including the step rows from metrics.csv.
pub fn read_run(dir: &Path) -> Result<RunRecord, TrainerError> {
    let metrics_path = dir.join("metrics.csv");
    if !metrics_path.exists() {
        return Err(TrainerError::BadRunArtifact(format!(
            "missing metrics file {}",
            metrics_path.display()
        )));
    }
    let mut record: RunRecord = serde_json::from_slice(&fs::read(dir.join("run.json"))?)?;
    let text = fs::read_to_string(&metrics_path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(TrainerError::BadRunArtifact(format!(
                "unexpected metrics header {other:?}"
            )))
        }
    }
    let mut steps = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(TrainerError::BadRunArtifact(format!(
                "metrics line {} has {} fields",
                i + 2,
                f.len()
            )));
        }
        let num = |j: usize| -> Result<f64, TrainerError> {
            f[j].parse().map_err(|_| {
                TrainerError::BadRunArtifact(format!("bad number '{}' on line {}", f[j], i + 2))
            })
        };
        steps.push(StepRow {
            step: f[0].parse().map_err(|_| {
                TrainerError::BadRunArtifact(format!("bad step '{}' on line {}", f[0], i + 2))
            })?,
            task_loss: num(1)?,
            soft_loss: num(2)?,
            hidden_loss: num(3)?,
            attention_loss: num(4)?,
            total: num(5)?,
            gate_open_fraction: num(6)?,
            mean_confidence: num(7)?,
        });
    }
    record.steps = steps;
    Ok(record)
}

// ---------------------------------------------------------------------------
// The assembled pipeline
// ---------------------------------------------------------------------------

/// Keys that determine whether a cached teacher checkpoint is reusable.
fn teacher_fingerprint(cfg: &DistillConfig) -> String {
    let keys = [
        "task",
        "data_dir",
        "train_size",
        "val_size",
        "test_size",
        "data_seed",
        "num_words",
        "num_agents",
        "num_swaps",
        "teacher_layers",
        "teacher_dim",
        "teacher_heads",
        "max_seq_len",
        "precision",
        "teacher_epochs",
        "teacher_lr",
        "teacher_seed",
        "batch_size",
        "warmup_fraction",
        "weight_decay",
    ];
    cfg.pairs()
        .into_iter()
        .filter(|(k, _)| keys.contains(k))
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Data, frozen teacher, and teacher channel shared by every seed of a
/// config (and, via the cache directory, across variants).
pub struct Pipeline<R: Real> {
    pub cfg: DistillConfig,
    pub train: Vec<PreparedExample>,
    pub val: Vec<PreparedExample>,
    pub test: Vec<PreparedExample>,
    pub teacher: FrozenModel<R>,
    pub channel: TeacherChannel<R>,
}

impl<R: Real> Pipeline<R> {
    /// Generates (or loads) datasets per the config, obtains the frozen
    /// teacher (from `teacher_cache` when a matching checkpoint exists,
    /// training and caching it otherwise), and records the channel.
    pub fn prepare(
        cfg: &DistillConfig,
        teacher_cache: Option<&Path>,
    ) -> Result<Self, TrainerError> {
        cfg.validate()?;
        let splits = match &cfg.data_dir {
            Some(dir) => {
                let s = read_splits(dir)?;
                for ex in s.train.iter().chain(&s.val).chain(&s.test) {
                    if ex.task != cfg.task {
                        return Err(TrainerError::DataMismatch(format!(
                            "dataset in {} is for task {}, config says {}",
                            dir.display(),
                            ex.task.name(),
                            cfg.task.name()
                        )));
                    }
                }
                s
            }
            None => gen_dataset(&data_spec(cfg))?,
        };
        Self::from_splits(cfg, &splits, teacher_cache)
    }

    /// As [`Pipeline::prepare`] with datasets supplied by the caller.
    pub fn from_splits(
        cfg: &DistillConfig,
        splits: &DatasetSplits,
        teacher_cache: Option<&Path>,
    ) -> Result<Self, TrainerError> {
        cfg.validate()?;
        if splits.train.is_empty() {
            return Err(TrainerError::EmptySplit("train"));
        }
        if splits.val.is_empty() {
            return Err(TrainerError::EmptySplit("val"));
        }
        if splits.test.is_empty() {
            return Err(TrainerError::EmptySplit("test"));
        }
        let train = prepare_examples(&splits.train, cfg.max_seq_len)?;
        let val = prepare_examples(&splits.val, cfg.max_seq_len)?;
        let test = prepare_examples(&splits.test, cfg.max_seq_len)?;
        let teacher = obtain_teacher(cfg, &train, &val, teacher_cache)?;
        let channel = TeacherChannel::build(&teacher, &train, cfg)?;
        Ok(Pipeline {
            cfg: cfg.clone(),
            train,
            val,
            test,
            teacher,
            channel,
        })
    }

    /// Trains one seed. With `out_dir` set, the config snapshot is written
    /// before the first step, and metrics.csv/run.json afterwards.
    pub fn train_seed(&self, seed: u64, out_dir: Option<&Path>) -> Result<RunRecord, TrainerError> {
        let cfg = &self.cfg;
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.snapshot"), cfg.snapshot())?;
        }
        let steps_per_epoch = self.train.len().div_ceil(cfg.batch_size);
        let total_steps = (cfg.max_epochs * steps_per_epoch).max(1);
        let mut state = TrainState::new(cfg, &self.train, &self.channel, seed, total_steps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
        let mut steps: Vec<StepRow> = Vec::new();
        let mut epochs: Vec<EpochRow> = Vec::new();
        let mut best: Option<(f64, usize, ParamSnapshot<R>)> = None;
        let mut no_improve = 0usize;
        for epoch in 1..=cfg.max_epochs {
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            order.shuffle(&mut rng);
            let mut bucket = GateBuckets::default();
            for batch in order.chunks(cfg.batch_size) {
                let (bd, logs) = state.step_logged(batch)?;
                steps.push(StepRow {
                    step: state.steps_taken(),
                    task_loss: bd.task_loss,
                    soft_loss: bd.soft_loss,
                    hidden_loss: bd.hidden_loss,
                    attention_loss: bd.attention_loss,
                    total: bd.total,
                    gate_open_fraction: bd.gate_open_fraction,
                    mean_confidence: bd.mean_confidence,
                });
                for l in logs {
                    bucket.add(l);
                }
            }
            let val_accuracy = evaluate(&state.student.model, &self.val)?;
            epochs.push(bucket.into_row(epoch, val_accuracy));
            let improved = best.as_ref().is_none_or(|(b, _, _)| val_accuracy > *b);
            if improved {
                best = Some((val_accuracy, epoch, state.student.snapshot()));
                no_improve = 0;
            } else {
                no_improve += 1;
            }
            if no_improve >= cfg.patience {
                break;
            }
        }
        let (best_val_accuracy, best_epoch, snap) =
            best.expect("at least one epoch always runs");
        state.student.restore(&snap);
        let final_test_accuracy = evaluate(&state.student.model, &self.test)?;
        let record = RunRecord {
            seed,
            task: cfg.task,
            dtype: R::dtype().into(),
            teacher_checksum: self.teacher.checksum(),
            best_epoch,
            best_val_accuracy,
            final_test_accuracy,
            epochs,
            steps,
            config_snapshot: cfg.snapshot(),
        };
        debug_assert_eq!(record.teacher_checksum, self.channel.teacher_checksum);
        if let Some(dir) = out_dir {
            write_run(dir, &record)?;
        }
        Ok(record)
    }

    /// Trains every seed in the config; run directories are
    /// `<out_root>/seed<k>/`.
    pub fn train_all(&self, out_root: Option<&Path>) -> Result<Vec<RunRecord>, TrainerError> {
        self.cfg
            .seeds
            .iter()
            .map(|&seed| {
                let dir = out_root.map(|r| r.join(format!("seed{seed}")));
                self.train_seed(seed, dir.as_deref())
            })
            .collect()
    }
}

fn data_spec(cfg: &DistillConfig) -> DataGenSpec {
    DataGenSpec {
        task: cfg.task,
        train: cfg.train_size,
        val: cfg.val_size,
        test: cfg.test_size,
        base_seed: cfg.data_seed,
        num_words: cfg.num_words,
        num_agents: cfg.num_agents,
        num_swaps: cfg.num_swaps,
    }
}

fn obtain_teacher<R: Real>(
    cfg: &DistillConfig,
    train: &[PreparedExample],
    val: &[PreparedExample],
    cache: Option<&Path>,
) -> Result<FrozenModel<R>, TrainerError> {
    let fingerprint = teacher_fingerprint(cfg);
    if let Some(dir) = cache {
        let fp_path = dir.join("teacher.fingerprint");
        if fp_path.exists()
            && fs::read_to_string(&fp_path).map(|s| s == fingerprint).unwrap_or(false)
        {
            if let Ok(loaded) = FrozenModel::<R>::load(dir) {
                return Ok(loaded);
            }
        }
    }
    let model = pretrain_teacher::<R>(cfg, train, val)?;
    if let Some(dir) = cache {
        model.save(dir)?;
        fs::write(dir.join("teacher.fingerprint"), &fingerprint)?;
    }
    Ok(model.freeze())
}

/// Full multi-seed training against caller-supplied datasets: builds the
/// teacher and channel, then one run per configured seed.
pub fn train(
    cfg: &DistillConfig,
    datasets: &DatasetSplits,
    out_root: Option<&Path>,
) -> Result<Vec<RunRecord>, TrainerError> {
    match cfg.precision {
        Precision::F32 => Pipeline::<f32>::from_splits(cfg, datasets, None)?.train_all(out_root),
        Precision::F64 => Pipeline::<f64>::from_splits(cfg, datasets, None)?.train_all(out_root),
    }
}

#[derive(Default)]
struct GateBuckets {
    clean_open: usize,
    clean_total: usize,
    clean_conf_sum: f64,
    corrupted_open: usize,
    corrupted_total: usize,
    corrupted_conf_sum: f64,
}

impl GateBuckets {
    fn add(&mut self, l: ExampleGateLog) {
        if l.corrupted {
            self.corrupted_total += 1;
            self.corrupted_open += l.open as usize;
            self.corrupted_conf_sum += l.confidence;
        } else {
            self.clean_total += 1;
            self.clean_open += l.open as usize;
            self.clean_conf_sum += l.confidence;
        }
    }

    fn into_row(self, epoch: usize, val_accuracy: f64) -> EpochRow {
        let clean_n = self.clean_total.max(1) as f64;
        EpochRow {
            epoch,
            val_accuracy,
            clean_gate_open_rate: self.clean_open as f64 / clean_n,
            corrupted_gate_open_rate: (self.corrupted_total > 0)
                .then(|| self.corrupted_open as f64 / self.corrupted_total as f64),
            clean_mean_confidence: self.clean_conf_sum / clean_n,
            corrupted_mean_confidence: (self.corrupted_total > 0)
                .then(|| self.corrupted_conf_sum / self.corrupted_total as f64),
        }
    }
}

/// Resolves the dataset directory a config refers to, generating data on
/// the fly when none is set. Used by commands that need splits without a
/// full pipeline.
pub fn load_or_generate(cfg: &DistillConfig) -> Result<DatasetSplits, TrainerError> {
    match &cfg.data_dir {
        Some(dir) => Ok(read_splits(dir)?),
        None => Ok(gen_dataset(&data_spec(cfg))?),
    }
}

pub fn data_spec_for(cfg: &DistillConfig) -> DataGenSpec {
    data_spec(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> DistillConfig {
        let mut cfg = DistillConfig::default();
        cfg.apply_overrides(&[
            "train_size=12",
            "val_size=4",
            "test_size=4",
            "num_words=2",
            "teacher_layers=2",
            "teacher_dim=16",
            "teacher_heads=2",
            "student_layers=1",
            "student_dim=8",
            "student_heads=1",
            "teacher_epochs=1",
            "max_epochs=1",
            "batch_size=4",
            "grad_accum_steps=2",
            "seeds=1",
            "max_seq_len=24",
        ])
        .unwrap();
        cfg
    }

    #[test]
    fn exact_match_contract() {
        let a = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(exact_match(&a(&["xyay", "ab"]), &a(&["xyay", "ab"])).unwrap(), 1.0);
        assert_eq!(exact_match(&a(&["aa", "bb"]), &a(&["cc", "dd"])).unwrap(), 0.0);
        assert_eq!(exact_match(&a(&["xyay", "ab"]), &a(&["xyay", "ba"])).unwrap(), 0.5);
        assert_eq!(exact_match(&a(&[" x "]), &a(&["x"])).unwrap(), 1.0);
        assert!(matches!(
            exact_match(&a(&["x"]), &a(&["x", "y"])),
            Err(TrainerError::EvalLengthMismatch { .. })
        ));
    }

    #[test]
    fn channel_reports_shapes_and_flags() {
        let mut cfg = tiny_config();
        cfg.apply_overrides(&["noise_enabled=true", "noise_error_rate=0.5"])
            .unwrap();
        let splits = gen_dataset(&data_spec(&cfg)).unwrap();
        let train = prepare_examples(&splits.train, cfg.max_seq_len).unwrap();
        let val = prepare_examples(&splits.val, cfg.max_seq_len).unwrap();
        let teacher = pretrain_teacher::<f32>(&cfg, &train, &val).unwrap().freeze();
        let channel = TeacherChannel::build(&teacher, &train, &cfg).unwrap();
        assert_eq!(channel.per_example.len(), train.len());
        let mut corrupted = 0;
        for (sig, prep) in channel.per_example.iter().zip(&train) {
            let steps = sig.supervision_tokens.len() + 1;
            assert_eq!(sig.distributions.nrows(), steps);
            assert_eq!(sig.distributions.ncols(), VOCAB_SIZE);
            assert_eq!(sig.hiddens.len(), cfg.teacher_layers);
            assert_eq!(sig.hiddens[0].dim(), (steps, cfg.teacher_dim));
            assert_eq!(sig.attention.len(), cfg.teacher_layers);
            assert_eq!(sig.attention[0].len(), cfg.teacher_heads);
            assert!((0.0..=1.0).contains(&sig.confidence));
            assert_eq!(sig.matches_gold, sig.supervision_tokens == prep.gold_tokens);
            if sig.corrupted {
                corrupted += 1;
                assert!(!sig.matches_gold);
            } else {
                assert!(sig.matches_gold);
            }
        }
        assert!(corrupted > 0, "rho=0.5 over 12 draws should corrupt some");
        assert_eq!(channel.teacher_checksum, teacher.checksum());
    }

    #[test]
    fn clean_channel_uses_true_teacher_rows() {
        let cfg = tiny_config();
        let splits = gen_dataset(&data_spec(&cfg)).unwrap();
        let train = prepare_examples(&splits.train, cfg.max_seq_len).unwrap();
        let val = prepare_examples(&splits.val, cfg.max_seq_len).unwrap();
        let teacher = pretrain_teacher::<f64>(&cfg, &train, &val).unwrap().freeze();
        let channel = TeacherChannel::build(&teacher, &train, &cfg).unwrap();
        let prep = &train[0];
        let sig = &channel.per_example[0];
        let trace = teacher
            .forward(&prep.input_tokens, &decoder_prefix(&prep.gold_tokens))
            .unwrap();
        let sm = softmax_rows(&trace.logits);
        let diff = (&sm - &sig.distributions).mapv(f64::abs);
        assert!(diff.iter().cloned().fold(0.0, f64::max) < 1e-12);
    }

    #[test]
    fn grad_accumulation_split_is_equivalent() {
        let mut cfg = tiny_config();
        cfg.apply_overrides(&["precision=f64"]).unwrap();
        let pipeline = Pipeline::<f64>::prepare(&cfg, None).unwrap();
        let state = TrainState::new(&cfg, &pipeline.train, &pipeline.channel, 5, 10).unwrap();
        let batch: Vec<usize> = (0..8).collect();
        let pool = state.gate_pool(&batch).unwrap();
        let (whole, _) = state.accumulate_with_gates(&batch, &pool).unwrap();
        let (a, _) = state.accumulate_with_gates(&batch[..3], &pool).unwrap();
        let (b, _) = state.accumulate_with_gates(&batch[3..], &pool).unwrap();
        let merged = a.merge(b);
        assert_eq!(merged.example_count(), whole.example_count());
        for (x, y) in whole.student.iter().zip(&merged.student) {
            match (x, y) {
                (Some(x), Some(y)) => {
                    let d = (x - y).mapv(f64::abs);
                    assert!(d.iter().cloned().fold(0.0, f64::max) < 1e-6);
                }
                (None, None) => {}
                _ => panic!("gradient presence mismatch"),
            }
        }
    }

    #[test]
    fn smoke_run_is_deterministic_and_well_formed() {
        let cfg = tiny_config();
        let pipeline = Pipeline::<f32>::prepare(&cfg, None).unwrap();
        let r1 = pipeline.train_seed(1, None).unwrap();
        let r2 = pipeline.train_seed(1, None).unwrap();
        assert_eq!(r1.steps, r2.steps, "replay must be bit-identical");
        assert_eq!(r1.epochs, r2.epochs);
        assert_eq!(r1.final_test_accuracy, r2.final_test_accuracy);
        assert_eq!(r1.teacher_checksum, pipeline.teacher.checksum());
        assert_eq!(r1.epochs.len(), 1);
        assert_eq!(r1.steps.len(), 3, "12 examples / batch 4 = 3 steps");
        for s in &r1.steps {
            assert!(s.total.is_finite());
            let recomposed = s.task_loss
                + cfg.lambda1 * s.soft_loss
                + cfg.lambda2 * s.hidden_loss
                + cfg.lambda3 * s.attention_loss;
            assert!((s.total - recomposed).abs() < 1e-6);
        }
    }

    #[test]
    fn run_artifacts_roundtrip() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let pipeline = Pipeline::<f32>::prepare(&cfg, None).unwrap();
        let record = pipeline.train_seed(1, Some(dir.path())).unwrap();
        assert!(dir.path().join("config.snapshot").exists());
        let back = read_run(dir.path()).unwrap();
        assert_eq!(back.steps, record.steps);
        assert_eq!(back.epochs, record.epochs);
        assert_eq!(back.teacher_checksum, record.teacher_checksum);
        assert_eq!(back.config_snapshot, record.config_snapshot);
        let reparsed = DistillConfig::parse(&back.config_snapshot).unwrap();
        assert_eq!(reparsed, cfg);
    }

    #[test]
    fn teacher_cache_is_reused() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let p1 = Pipeline::<f32>::prepare(&cfg, Some(dir.path())).unwrap();
        let p2 = Pipeline::<f32>::prepare(&cfg, Some(dir.path())).unwrap();
        assert_eq!(p1.teacher.checksum(), p2.teacher.checksum());

        // A config change that touches the fingerprint retrains.
        let mut cfg2 = cfg.clone();
        cfg2.apply_overrides(&["teacher_seed=1111"]).unwrap();
        let p3 = Pipeline::<f32>::prepare(&cfg2, Some(dir.path())).unwrap();
        assert_ne!(p3.teacher.checksum(), p1.teacher.checksum());
    }

    #[test]
    fn patience_zero_stops_after_first_validation() {
        let mut cfg = tiny_config();
        cfg.apply_overrides(&["patience=0", "max_epochs=4"]).unwrap();
        let pipeline = Pipeline::<f32>::prepare(&cfg, None).unwrap();
        let record = pipeline.train_seed(1, None).unwrap();
        assert_eq!(record.epochs.len(), 1);
        assert_eq!(record.best_epoch, 1);
    }
}
