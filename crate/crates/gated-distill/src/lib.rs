//! Confidence-gated knowledge distillation for small sequence-to-sequence
//! transformers.
//!
//! A compact student is trained against a frozen teacher through three
//! signal pathways: soft labels, hidden states, and decoder self-attention
//! maps. Each pathway is gated by the teacher's own confidence, estimated
//! from the entropy of its next-token distributions, so unreliable
//! supervision is suppressed instead of imitated.
//!
//! The crate is organized bottom-up:
//!
//! - [`real`]: scalar abstraction (f32 for experiments, f64 for verification)
//! - [`tape`]: reverse-mode autodiff over dense matrices
//! - [`confidence`]: entropy, confidence formulas, gate construction
//! - [`losses`]: the three gated losses and the combined objective
//! - [`tokenizer`]: fixed character-level vocabulary
//! - [`model`]: micro encoder-decoder transformer with traced forward passes
//! - [`tasks`]: synthetic reasoning task generators and the noisy-teacher channel
//! - [`trainer`]: distillation loop, optimizer, schedules, run records
//! - [`evalkit`]: ablation and gating-comparison experiment harnesses
//! - [`verify`]: the self-checking invariant battery behind `verify`
//!
//! The `examples/` directory demonstrates each capability end to end; the
//! `gated-distill` binary wraps the same library behind subcommands.

pub mod cli;
pub mod confidence;
pub mod config;
pub mod evalkit;
pub mod losses;
pub mod model;
pub mod optim;
pub mod real;
pub mod tape;
pub mod tasks;
pub mod tokenizer;
pub mod trainer;
pub mod verify;
