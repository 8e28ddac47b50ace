//! Micro encoder-decoder transformer used for both teacher and student.
//!
//! The architecture is a standard pre-norm transformer at desk scale:
//! sinusoidal positions, multi-head attention, ReLU feed-forward blocks.
//! Every forward pass exposes the three signals distillation needs --
//! output logits, the decoder's per-layer hidden states, and per-head
//! decoder self-attention maps -- collected in a [`ForwardTrace`].
//!
//! Forward passes run on a [`Tape`], so the same code serves gradient-free
//! teacher tracing (build, read values, drop the tape) and student training
//! (build, then differentiate).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::real::Real;
use crate::tape::{NodeId, Tape};
use crate::tokenizer::{BOS, EOS};

const CHECKPOINT_FORMAT: &str = "gated-distill-checkpoint-v1";
const MASK_NEG: f64 = -1e9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("token {token} out of range for vocabulary {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint dtype is {actual}, expected {expected}")]
    DtypeMismatch { expected: String, actual: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Whether a config describes the larger frozen model or the compact one
/// being trained. Metadata only; both roles share the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub role: ModelRole,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::BadConfig(msg));
        if self.vocab_size == 0
            || self.hidden_dim == 0
            || self.num_layers == 0
            || self.num_heads == 0
            || self.max_seq_len == 0
        {
            return bad("all dimensions must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        Ok(())
    }
}

/// Everything one forward pass exposes for distillation.
#[derive(Debug, Clone)]
pub struct ForwardTrace<R: Real> {
    /// (decoder steps x vocab), pre-softmax.
    pub logits: Array2<R>,
    /// Residual-stream state after each decoder layer, (steps x hidden_dim).
    pub hidden_states: Vec<Array2<R>>,
    /// Decoder self-attention probabilities, indexed `[layer][head]`,
    /// each (steps x steps) and row-stochastic.
    pub attention_maps: Vec<Vec<Array2<R>>>,
}

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct LnIdx {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Copy)]
struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy)]
struct EncLayerIdx {
    ln1: LnIdx,
    attn: AttnIdx,
    ln2: LnIdx,
    ffn: FfnIdx,
}

#[derive(Clone, Copy)]
struct DecLayerIdx {
    ln1: LnIdx,
    self_attn: AttnIdx,
    ln2: LnIdx,
    cross_attn: AttnIdx,
    ln3: LnIdx,
    ffn: FfnIdx,
}

struct ParamIndex {
    enc_embed: usize,
    dec_embed: usize,
    enc: Vec<EncLayerIdx>,
    dec: Vec<DecLayerIdx>,
    enc_ln: LnIdx,
    dec_ln: LnIdx,
    out_w: usize,
    out_b: usize,
}

/// Tensor name and (rows, cols) shape, in registration order.
type LayoutEntry = (String, (usize, usize));

struct LayoutBuilder {
    entries: Vec<LayoutEntry>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: (usize, usize)) -> usize {
        self.entries.push((name, shape));
        self.entries.len() - 1
    }

    fn ln(&mut self, prefix: &str, dim: usize) -> LnIdx {
        LnIdx {
            gain: self.push(format!("{prefix}.gain"), (1, dim)),
            bias: self.push(format!("{prefix}.bias"), (1, dim)),
        }
    }

    fn attn(&mut self, prefix: &str, dim: usize) -> AttnIdx {
        AttnIdx {
            wq: self.push(format!("{prefix}.wq"), (dim, dim)),
            bq: self.push(format!("{prefix}.bq"), (1, dim)),
            wk: self.push(format!("{prefix}.wk"), (dim, dim)),
            bk: self.push(format!("{prefix}.bk"), (1, dim)),
            wv: self.push(format!("{prefix}.wv"), (dim, dim)),
            bv: self.push(format!("{prefix}.bv"), (1, dim)),
            wo: self.push(format!("{prefix}.wo"), (dim, dim)),
            bo: self.push(format!("{prefix}.bo"), (1, dim)),
        }
    }

    fn ffn(&mut self, prefix: &str, dim: usize) -> FfnIdx {
        let inner = 4 * dim;
        FfnIdx {
            w1: self.push(format!("{prefix}.w1"), (dim, inner)),
            b1: self.push(format!("{prefix}.b1"), (1, inner)),
            w2: self.push(format!("{prefix}.w2"), (inner, dim)),
            b2: self.push(format!("{prefix}.b2"), (1, dim)),
        }
    }
}

fn layout(cfg: &ModelConfig) -> (Vec<LayoutEntry>, ParamIndex) {
    let d = cfg.hidden_dim;
    let mut b = LayoutBuilder { entries: Vec::new() };
    let enc_embed = b.push("enc.embed".into(), (cfg.vocab_size, d));
    let dec_embed = b.push("dec.embed".into(), (cfg.vocab_size, d));
    let enc = (0..cfg.num_layers)
        .map(|l| EncLayerIdx {
            ln1: b.ln(&format!("enc.l{l}.ln1"), d),
            attn: b.attn(&format!("enc.l{l}.attn"), d),
            ln2: b.ln(&format!("enc.l{l}.ln2"), d),
            ffn: b.ffn(&format!("enc.l{l}.ffn"), d),
        })
        .collect();
    let dec = (0..cfg.num_layers)
        .map(|l| DecLayerIdx {
            ln1: b.ln(&format!("dec.l{l}.ln1"), d),
            self_attn: b.attn(&format!("dec.l{l}.self"), d),
            ln2: b.ln(&format!("dec.l{l}.ln2"), d),
            cross_attn: b.attn(&format!("dec.l{l}.cross"), d),
            ln3: b.ln(&format!("dec.l{l}.ln3"), d),
            ffn: b.ffn(&format!("dec.l{l}.ffn"), d),
        })
        .collect();
    let enc_ln = b.ln("enc.final_ln", d);
    let dec_ln = b.ln("dec.final_ln", d);
    let out_w = b.push("out.w".into(), (d, cfg.vocab_size));
    let out_b = b.push("out.b".into(), (1, cfg.vocab_size));
    (
        b.entries,
        ParamIndex {
            enc_embed,
            dec_embed,
            enc,
            dec,
            enc_ln,
            dec_ln,
            out_w,
            out_b,
        },
    )
}

/// Flat named tensor store; order is fixed by the layout so optimizer state,
/// gradient buffers, and checkpoints all align by index.
pub struct TransformerParams<R: Real> {
    tensors: Vec<Array2<R>>,
    names: Vec<String>,
}

impl<R: Real> TransformerParams<R> {
    fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let (entries, _) = layout(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(entries.len());
        let mut names = Vec::with_capacity(entries.len());
        for (name, (rows, cols)) in entries {
            let t = if name.ends_with(".gain") {
                Array2::from_elem((rows, cols), R::one())
            } else if is_bias(&name) {
                Array2::zeros((rows, cols))
            } else {
                // Uniform Xavier fan-in/fan-out init for weight matrices.
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                Array2::from_shape_fn((rows, cols), |_| {
                    R::of(rng.random_range(-limit..limit))
                })
            };
            tensors.push(t);
            names.push(name);
        }
        TransformerParams { tensors, names }
    }

    pub fn tensors(&self) -> &[Array2<R>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<R>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Little-endian concatenation of all tensors in layout order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_scalars() * R::byte_width());
        for t in &self.tensors {
            for v in t.iter() {
                v.write_le(&mut out);
            }
        }
        out
    }
}

fn is_bias(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or("");
    matches!(last, "bq" | "bk" | "bv" | "bo" | "b1" | "b2") || last == "b" || last == "bias"
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    hex
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

/// Decoder input for teacher forcing: beginning-of-sequence, then the target.
pub fn decoder_prefix(target: &[usize]) -> Vec<usize> {
    let mut p = Vec::with_capacity(target.len() + 1);
    p.push(BOS);
    p.extend_from_slice(target);
    p
}

/// Per-step prediction targets: the target tokens, then end-of-sequence.
pub fn shifted_targets(target: &[usize]) -> Vec<usize> {
    let mut t = Vec::with_capacity(target.len() + 1);
    t.extend_from_slice(target);
    t.push(EOS);
    t
}

pub struct Model<R: Real> {
    cfg: ModelConfig,
    params: TransformerParams<R>,
    index: ParamIndex,
    pe: Array2<R>,
}

/// Node ids produced by one traced decoder pass.
pub(crate) struct TracedOutput {
    pub logits: NodeId,
    pub hiddens: Vec<NodeId>,
    pub attn_probs: Vec<Vec<NodeId>>,
    pub attn_scores: Vec<Vec<NodeId>>,
}

impl<R: Real> Model<R> {
    /// Builds a model with the given config, parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let params = TransformerParams::init(&cfg, seed);
        let (_, index) = layout(&cfg);
        let pe = sinusoidal_positions(cfg.max_seq_len, cfg.hidden_dim);
        Ok(Model {
            cfg,
            params,
            index,
            pe,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &TransformerParams<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut TransformerParams<R> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.total_scalars()
    }

    /// SHA-256 over dtype and all parameter bytes; changes iff any
    /// parameter changes.
    pub fn checksum(&self) -> String {
        let mut bytes = R::dtype().as_bytes().to_vec();
        bytes.extend(self.params.to_bytes());
        sha256_hex(&bytes)
    }

    /// Consumes the model into a handle without mutable parameter access.
    pub fn freeze(self) -> FrozenModel<R> {
        FrozenModel { inner: self }
    }

    /// Registers every parameter tensor as a borrowed tape leaf, in layout
    /// order, and returns the node ids (same order as `params().tensors()`).
    pub(crate) fn register<'p>(&'p self, tape: &mut Tape<'p, R>) -> Vec<NodeId> {
        self.params.tensors.iter().map(|t| tape.shared(t)).collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.cfg.max_seq_len,
            });
        }
        for &t in tokens {
            if t >= self.cfg.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    token: t,
                    vocab: self.cfg.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn positions(&self, tape: &mut Tape<'_, R>, len: usize) -> NodeId {
        tape.owned(self.pe.slice(s![0..len, ..]).to_owned())
    }

    fn ln_node(
        &self,
        tape: &mut Tape<'_, R>,
        reg: &[NodeId],
        idx: LnIdx,
        x: NodeId,
    ) -> NodeId {
        tape.layer_norm_rows(x, reg[idx.gain], reg[idx.bias])
    }

    /// One attention block: projections, per-head scaled dot-product,
    /// concatenation, output projection. Optionally records per-head
    /// probabilities and masked scores (for decoder self-attention).
    #[allow(clippy::too_many_arguments)]
    fn attn_node(
        &self,
        tape: &mut Tape<'_, R>,
        reg: &[NodeId],
        idx: AttnIdx,
        q_src: NodeId,
        kv_src: NodeId,
        causal: bool,
        mut record: Option<(&mut Vec<NodeId>, &mut Vec<NodeId>)>,
    ) -> NodeId {
        let heads = self.cfg.num_heads;
        let dh = self.cfg.hidden_dim / heads;
        let q_all = tape.matmul(q_src, reg[idx.wq]);
        let q_all = tape.add_row(q_all, reg[idx.bq]);
        let k_all = tape.matmul(kv_src, reg[idx.wk]);
        let k_all = tape.add_row(k_all, reg[idx.bk]);
        let v_all = tape.matmul(kv_src, reg[idx.wv]);
        let v_all = tape.add_row(v_all, reg[idx.bv]);

        let q_len = tape.value(q_all).nrows();
        let k_len = tape.value(k_all).nrows();
        let scale = R::of(1.0 / (dh as f64).sqrt());
        let mut contexts = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.slice_cols(q_all, h * dh, dh);
            let k = tape.slice_cols(k_all, h * dh, dh);
            let v = tape.slice_cols(v_all, h * dh, dh);
            let scores = tape.matmul_nt(q, k);
            let mut scores = tape.scale(scores, scale);
            if causal {
                let mask = Array2::from_shape_fn((q_len, k_len), |(r, c)| {
                    if c > r {
                        R::of(MASK_NEG)
                    } else {
                        R::zero()
                    }
                });
                let m = tape.owned(mask);
                scores = tape.add(scores, m);
            }
            let probs = tape.softmax_rows(scores);
            if let Some((prob_slot, score_slot)) = record.as_mut() {
                prob_slot.push(probs);
                score_slot.push(scores);
            }
            contexts.push(tape.matmul(probs, v));
        }
        let ctx = tape.concat_cols(&contexts);
        let out = tape.matmul(ctx, reg[idx.wo]);
        tape.add_row(out, reg[idx.bo])
    }

    fn ffn_node(
        &self,
        tape: &mut Tape<'_, R>,
        reg: &[NodeId],
        idx: FfnIdx,
        x: NodeId,
    ) -> NodeId {
        let h = tape.matmul(x, reg[idx.w1]);
        let h = tape.add_row(h, reg[idx.b1]);
        let h = tape.relu(h);
        let o = tape.matmul(h, reg[idx.w2]);
        tape.add_row(o, reg[idx.b2])
    }

    /// Runs the encoder stack over `input`, returning the memory node.
    pub(crate) fn encode_nodes(
        &self,
        tape: &mut Tape<'_, R>,
        reg: &[NodeId],
        input: &[usize],
    ) -> Result<NodeId, ModelError> {
        self.check_tokens(input)?;
        let emb = tape.gather_rows(reg[self.index.enc_embed], input);
        let pos = self.positions(tape, input.len());
        let mut x = tape.add(emb, pos);
        for l in 0..self.cfg.num_layers {
            let idx = self.index.enc[l];
            let normed = self.ln_node(tape, reg, idx.ln1, x);
            let attn = self.attn_node(tape, reg, idx.attn, normed, normed, false, None);
            x = tape.add(x, attn);
            let normed = self.ln_node(tape, reg, idx.ln2, x);
            let ffn = self.ffn_node(tape, reg, idx.ffn, normed);
            x = tape.add(x, ffn);
        }
        Ok(self.ln_node(tape, reg, self.index.enc_ln, x))
    }

    /// Runs the decoder stack teacher-forced on `prefix` against an encoded
    /// memory, recording hidden states and self-attention per layer.
    pub(crate) fn decode_nodes(
        &self,
        tape: &mut Tape<'_, R>,
        reg: &[NodeId],
        memory: NodeId,
        prefix: &[usize],
    ) -> Result<TracedOutput, ModelError> {
        self.check_tokens(prefix)?;
        let emb = tape.gather_rows(reg[self.index.dec_embed], prefix);
        let pos = self.positions(tape, prefix.len());
        let mut x = tape.add(emb, pos);
        let mut hiddens = Vec::with_capacity(self.cfg.num_layers);
        let mut attn_probs = Vec::with_capacity(self.cfg.num_layers);
        let mut attn_scores = Vec::with_capacity(self.cfg.num_layers);
        for l in 0..self.cfg.num_layers {
            let idx = self.index.dec[l];
            let mut probs = Vec::with_capacity(self.cfg.num_heads);
            let mut scores = Vec::with_capacity(self.cfg.num_heads);
            let normed = self.ln_node(tape, reg, idx.ln1, x);
            let self_attn = self.attn_node(
                tape,
                reg,
                idx.self_attn,
                normed,
                normed,
                true,
                Some((&mut probs, &mut scores)),
            );
            x = tape.add(x, self_attn);
            let normed = self.ln_node(tape, reg, idx.ln2, x);
            let cross = self.attn_node(tape, reg, idx.cross_attn, normed, memory, false, None);
            x = tape.add(x, cross);
            let normed = self.ln_node(tape, reg, idx.ln3, x);
            let ffn = self.ffn_node(tape, reg, idx.ffn, normed);
            x = tape.add(x, ffn);
            hiddens.push(x);
            attn_probs.push(probs);
            attn_scores.push(scores);
        }
        let normed = self.ln_node(tape, reg, self.index.dec_ln, x);
        let logits = tape.matmul(normed, reg[self.index.out_w]);
        let logits = tape.add_row(logits, reg[self.index.out_b]);
        Ok(TracedOutput {
            logits,
            hiddens,
            attn_probs,
            attn_scores,
        })
    }

    /// Full teacher-forced pass: encode `input_tokens`, decode
    /// `target_prefix` (which must start with the BOS token), and extract
    /// all traced signals as plain arrays. Deterministic given parameters
    /// and inputs.
    pub fn forward(
        &self,
        input_tokens: &[usize],
        target_prefix: &[usize],
    ) -> Result<ForwardTrace<R>, ModelError> {
        let mut tape = Tape::new();
        let reg = self.register(&mut tape);
        let memory = self.encode_nodes(&mut tape, &reg, input_tokens)?;
        let out = self.decode_nodes(&mut tape, &reg, memory, target_prefix)?;
        Ok(ForwardTrace {
            logits: tape.value(out.logits).clone(),
            hidden_states: out.hiddens.iter().map(|&h| tape.value(h).clone()).collect(),
            attention_maps: out
                .attn_probs
                .iter()
                .map(|heads| heads.iter().map(|&a| tape.value(a).clone()).collect())
                .collect(),
        })
    }

    /// Argmax decoding until EOS or `max_len` emitted tokens. The encoder
    /// runs once; each step re-runs the decoder on the grown prefix.
    pub fn greedy_decode(
        &self,
        input_tokens: &[usize],
        max_len: usize,
    ) -> Result<Vec<usize>, ModelError> {
        let memory = {
            let mut tape = Tape::new();
            let reg = self.register(&mut tape);
            let node = self.encode_nodes(&mut tape, &reg, input_tokens)?;
            tape.value(node).clone()
        };
        let mut prefix = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len {
            if prefix.len() > self.cfg.max_seq_len {
                break;
            }
            let mut tape = Tape::new();
            let reg = self.register(&mut tape);
            let mem = tape.owned(memory.clone());
            let traced = self.decode_nodes(&mut tape, &reg, mem, &prefix)?;
            let logits = tape.value(traced.logits);
            let last = logits.row(logits.nrows() - 1);
            let mut best = 0usize;
            let mut best_v = last[0];
            for (i, &v) in last.iter().enumerate().skip(1) {
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            if best == EOS {
                break;
            }
            out.push(best);
            prefix.push(best);
        }
        Ok(out)
    }

    // -- checkpointing ------------------------------------------------------

    /// Writes `manifest.json` (config, dtype, tensor table, checksum) and
    /// `params.bin` (little-endian tensors in layout order) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        fs::create_dir_all(dir)?;
        let bytes = self.params.to_bytes();
        let mut offset = 0usize;
        let tensors: Vec<ManifestTensor> = self
            .params
            .names
            .iter()
            .zip(&self.params.tensors)
            .map(|(name, t)| {
                let m = ManifestTensor {
                    name: name.clone(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                    offset,
                };
                offset += t.len() * R::byte_width();
                m
            })
            .collect();
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            dtype: R::dtype().into(),
            config: self.cfg.clone(),
            tensors,
            checksum: sha256_hex(&bytes),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(dir.join("params.bin"), bytes)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`Model::save`], verifying format,
    /// dtype, tensor shapes, and the archive checksum.
    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let manifest: Manifest =
            serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Corrupt(format!(
                "unknown format '{}'",
                manifest.format
            )));
        }
        if manifest.dtype != R::dtype() {
            return Err(ModelError::DtypeMismatch {
                expected: R::dtype().into(),
                actual: manifest.dtype,
            });
        }
        let bytes = fs::read(dir.join("params.bin"))?;
        if sha256_hex(&bytes) != manifest.checksum {
            return Err(ModelError::Corrupt("checksum mismatch".into()));
        }
        let mut model = Model::new(manifest.config.clone(), 0)?;
        let (entries, _) = layout(&manifest.config);
        if entries.len() != manifest.tensors.len() {
            return Err(ModelError::Corrupt(format!(
                "expected {} tensors, manifest lists {}",
                entries.len(),
                manifest.tensors.len()
            )));
        }
        let width = R::byte_width();
        for (i, ((name, shape), m)) in entries.iter().zip(&manifest.tensors).enumerate() {
            if *name != m.name || *shape != (m.rows, m.cols) {
                return Err(ModelError::Corrupt(format!(
                    "tensor {i} mismatch: layout {name} {shape:?} vs manifest {} ({}, {})",
                    m.name, m.rows, m.cols
                )));
            }
            let n = m.rows * m.cols;
            let end = m.offset + n * width;
            if end > bytes.len() {
                return Err(ModelError::Corrupt(format!(
                    "tensor {} extends past archive end",
                    m.name
                )));
            }
            let data: Vec<R> = (0..n)
                .map(|j| {
                    let at = m.offset + j * width;
                    R::read_le(&bytes[at..at + width])
                })
                .collect();
            model.params.tensors[i] = Array2::from_shape_vec((m.rows, m.cols), data)
                .map_err(|e| ModelError::Corrupt(e.to_string()))?;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    config: ModelConfig,
    tensors: Vec<ManifestTensor>,
    checksum: String,
}

/// A model handle without mutable parameter access: the teacher contract.
/// Forward passes remain available; nothing can change the weights.
pub struct FrozenModel<R: Real> {
    inner: Model<R>,
}

impl<R: Real> FrozenModel<R> {
    pub fn config(&self) -> &ModelConfig {
        self.inner.config()
    }

    pub fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    pub fn checksum(&self) -> String {
        self.inner.checksum()
    }

    pub fn forward(
        &self,
        input_tokens: &[usize],
        target_prefix: &[usize],
    ) -> Result<ForwardTrace<R>, ModelError> {
        self.inner.forward(input_tokens, target_prefix)
    }

    pub fn greedy_decode(
        &self,
        input_tokens: &[usize],
        max_len: usize,
    ) -> Result<Vec<usize>, ModelError> {
        self.inner.greedy_decode(input_tokens, max_len)
    }

    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        self.inner.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        Ok(FrozenModel {
            inner: Model::load(dir)?,
        })
    }
}

/// Fixed sinusoidal position table, (max_len x dim).
fn sinusoidal_positions<R: Real>(max_len: usize, dim: usize) -> Array2<R> {
    Array2::from_shape_fn((max_len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let rate = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
        let angle = pos as f64 * rate;
        R::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::VOCAB_SIZE;

    fn tiny_cfg(role: ModelRole) -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 16,
            role,
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg(ModelRole::Student);
        cfg.hidden_dim = 9;
        assert!(matches!(cfg.validate(), Err(ModelError::BadConfig(_))));
        cfg.hidden_dim = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_trace_shapes_and_stochastic_attention() {
        let m: Model<f64> = Model::new(tiny_cfg(ModelRole::Student), 3).unwrap();
        let trace = m.forward(&[1, 2, 3, 4], &[1, 5, 6]).unwrap();
        assert_eq!(trace.logits.dim(), (3, 13));
        assert_eq!(trace.hidden_states.len(), 2);
        assert_eq!(trace.hidden_states[0].dim(), (3, 8));
        assert_eq!(trace.attention_maps.len(), 2);
        assert_eq!(trace.attention_maps[0].len(), 2);
        for heads in &trace.attention_maps {
            for map in heads {
                assert_eq!(map.dim(), (3, 3));
                for (r, row) in map.rows().into_iter().enumerate() {
                    let sum: f64 = row.sum();
                    assert!((sum - 1.0).abs() < 1e-5);
                    // Causal: no attention to future positions.
                    for c in r + 1..3 {
                        assert!(row[c].abs() < 1e-12);
                    }
                }
            }
        }
        // Logits rows form valid distributions after softmax.
        let sm = crate::tape::softmax_rows(&trace.logits);
        for row in sm.rows() {
            assert!((row.sum() - 1.0f64).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let m: Model<f32> = Model::new(tiny_cfg(ModelRole::Student), 7).unwrap();
        let a = m.forward(&[2, 3], &[1, 4]).unwrap();
        let b = m.forward(&[2, 3], &[1, 4]).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.hidden_states, b.hidden_states);
        assert_eq!(a.attention_maps, b.attention_maps);
    }

    #[test]
    fn forward_input_validation() {
        let m: Model<f64> = Model::new(tiny_cfg(ModelRole::Student), 3).unwrap();
        assert!(matches!(
            m.forward(&[99], &[1]),
            Err(ModelError::TokenOutOfRange { token: 99, .. })
        ));
        assert!(matches!(
            m.forward(&[1; 17], &[1]),
            Err(ModelError::SequenceTooLong { .. })
        ));
        assert!(matches!(m.forward(&[], &[1]), Err(ModelError::EmptySequence)));
    }

    #[test]
    fn capacity_gap_between_default_roles() {
        let teacher: Model<f32> = Model::new(
            ModelConfig {
                vocab_size: VOCAB_SIZE,
                hidden_dim: 128,
                num_layers: 4,
                num_heads: 4,
                max_seq_len: 64,
                role: ModelRole::Teacher,
            },
            0,
        )
        .unwrap();
        let student: Model<f32> = Model::new(
            ModelConfig {
                vocab_size: VOCAB_SIZE,
                hidden_dim: 64,
                num_layers: 2,
                num_heads: 2,
                max_seq_len: 64,
                role: ModelRole::Student,
            },
            0,
        )
        .unwrap();
        assert!(student.param_count() < teacher.param_count());
    }

    #[test]
    fn greedy_decode_deterministic_and_bounded() {
        let m: Model<f64> = Model::new(tiny_cfg(ModelRole::Student), 11).unwrap();
        let a = m.greedy_decode(&[3, 4, 5], 6).unwrap();
        let b = m.greedy_decode(&[3, 4, 5], 6).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
        assert!(!a.contains(&EOS));
    }

    #[test]
    fn prefix_helpers() {
        assert_eq!(decoder_prefix(&[5, 6]), vec![BOS, 5, 6]);
        assert_eq!(shifted_targets(&[5, 6]), vec![5, 6, EOS]);
    }

    #[test]
    fn checksum_tracks_parameters() {
        let mut m: Model<f64> = Model::new(tiny_cfg(ModelRole::Student), 5).unwrap();
        let before = m.checksum();
        assert_eq!(before, m.checksum());
        m.params_mut().tensors_mut()[0][(0, 0)] += 1e-3;
        assert_ne!(before, m.checksum());
    }

    #[test]
    fn end_to_end_gradient_check_small_model() {
        // Cross-entropy of a tiny two-layer model against finite differences
        // on a sample of parameter entries.
        let cfg = ModelConfig {
            vocab_size: 11,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 8,
            role: ModelRole::Student,
        };
        let mut m: Model<f64> = Model::new(cfg, 17).unwrap();
        let input = vec![3, 4, 5];
        let prefix = vec![1, 6, 7];
        let targets = vec![6, 7, 2];

        let loss_of = |m: &Model<f64>| -> f64 {
            let mut tape = Tape::new();
            let reg = m.register(&mut tape);
            let mem = m.encode_nodes(&mut tape, &reg, &input).unwrap();
            let out = m.decode_nodes(&mut tape, &reg, mem, &prefix).unwrap();
            let lsm = tape.log_softmax_rows(out.logits);
            let w = vec![1.0 / 3.0; 3];
            let ce = tape.hard_ce_rows(lsm, targets.clone(), w);
            tape.scalar_value(ce)
        };

        let grads = {
            let mut tape = Tape::new();
            let reg = m.register(&mut tape);
            let mem = m.encode_nodes(&mut tape, &reg, &input).unwrap();
            let out = m.decode_nodes(&mut tape, &reg, mem, &prefix).unwrap();
            let lsm = tape.log_softmax_rows(out.logits);
            let w = vec![1.0 / 3.0; 3];
            let ce = tape.hard_ce_rows(lsm, targets.clone(), w);
            let mut g = tape.backward(ce);
            let n = m.params().len();
            (0..n)
                .map(|i| g.take(reg[i]))
                .collect::<Vec<Option<Array2<f64>>>>()
        };

        // Sample a few entries from a spread of tensors.
        let h = 1e-5;
        let picks: Vec<(usize, usize, usize)> = (0..m.params().len())
            .step_by(7)
            .map(|i| {
                let t = &m.params().tensors()[i];
                (i, (i * 3) % t.nrows(), (i * 5) % t.ncols())
            })
            .collect();
        for (i, r, c) in picks {
            let analytic = grads[i]
                .as_ref()
                .map(|g| g[(r, c)])
                .unwrap_or(0.0);
            let orig = m.params().tensors()[i][(r, c)];
            m.params_mut().tensors_mut()[i][(r, c)] = orig + h;
            let fp = loss_of(&m);
            m.params_mut().tensors_mut()[i][(r, c)] = orig - h;
            let fm = loss_of(&m);
            m.params_mut().tensors_mut()[i][(r, c)] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (analytic - numeric).abs() / denom < 1e-5,
                "tensor {i} ({r},{c}): analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let dir = std::env::temp_dir().join(format!("gd-ckpt-{}", std::process::id()));
        let m: Model<f32> = Model::new(tiny_cfg(ModelRole::Teacher), 23).unwrap();
        m.save(&dir).unwrap();
        let loaded: Model<f32> = Model::load(&dir).unwrap();
        assert_eq!(m.checksum(), loaded.checksum());
        assert_eq!(m.config(), loaded.config());
        // Wrong precision is rejected.
        assert!(matches!(
            Model::<f64>::load(&dir),
            Err(ModelError::DtypeMismatch { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn frozen_model_keeps_checksum_through_forwards() {
        let m: Model<f64> = Model::new(tiny_cfg(ModelRole::Teacher), 29).unwrap();
        let frozen = m.freeze();
        let before = frozen.checksum();
        for _ in 0..3 {
            frozen.forward(&[3, 4], &[1, 5]).unwrap();
            frozen.greedy_decode(&[3, 4], 4).unwrap();
        }
        assert_eq!(frozen.checksum(), before);
    }
}
