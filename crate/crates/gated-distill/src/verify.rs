//! Self-checking invariant battery.
//!
//! Every check recomputes its expectation through an independent route
//! (hand-computed constants, closed forms, finite differences, or a
//! from-scratch simulation) and compares the library against it. The
//! battery backs the `verify` subcommand and the acceptance tests.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::confidence::{
    confidence_of, make_gates, make_gates_with_ties, ConfidenceFormula, GatingStrategy,
    ProbabilityDistribution,
};
use crate::config::DistillConfig;
use crate::losses::{
    attention_loss_node, hidden_loss_node, soft_loss_node, subsample_heads, AttentionLossForm,
    LayerMap, SoftLossForm,
};
use crate::model::{Model, ModelConfig, ModelRole};
use crate::optim::{lr_at, AdamW};
use crate::tape::{NodeId, Tape};
use crate::tasks::{
    gen_last_letter, gen_shuffled_objects, last_letter_answer, noisy_teacher_emit,
    NoisyTeacherSpec,
};
use crate::trainer::{evaluate, model_configs, sft_step, Pipeline, TrainState};

/// Result of one named check.
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

pub fn all_pass(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.passed)
}

fn run_check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> CheckOutcome {
    let t0 = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let millis = t0.elapsed().as_millis();
    match result {
        Ok(Ok(detail)) => CheckOutcome {
            name,
            passed: true,
            detail,
            millis,
        },
        Ok(Err(detail)) => CheckOutcome {
            name,
            passed: false,
            detail,
            millis,
        },
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic with non-string payload".into());
            CheckOutcome {
                name,
                passed: false,
                detail: format!("panicked: {msg}"),
                millis,
            }
        }
    }
}

/// Runs the whole battery in a fixed order.
pub fn run_all_checks() -> Vec<CheckOutcome> {
    vec![
        run_check("confidence-oracle", confidence_oracle),
        run_check("gating-identities", gating_identities),
        run_check("layer-and-head-maps", layer_and_head_maps),
        run_check("soft-loss-gradient", soft_loss_gradient),
        run_check("hidden-loss-gradient", hidden_loss_gradient),
        run_check("attention-loss-gradient", attention_loss_gradient),
        run_check("training-step-gradient", training_step_gradient),
        run_check("sft-equivalence", sft_equivalence),
        run_check("ungated-equivalence", ungated_equivalence),
        run_check("generator-oracles", generator_oracles),
        run_check("noise-channel-statistics", noise_channel_statistics),
        run_check("optimizer-trace", optimizer_trace),
        run_check("lr-schedule", lr_schedule),
        run_check("grad-accum-equivalence", grad_accum_equivalence),
        run_check("checkpoint-roundtrip", checkpoint_roundtrip),
        run_check("determinism-replay", determinism_replay),
        run_check("self-distillation-sanity", self_distillation_sanity),
    ]
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn tiny_cfg(extra: &[&str]) -> DistillConfig {
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
    .map_err(|e| e.to_string())
    .unwrap();
    cfg.apply_overrides(extra).map_err(|e| e.to_string()).unwrap();
    cfg
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(1e-4..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / sum).collect()
}

fn max_tensor_diff(a: &[Array2<f64>], b: &[Array2<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .fold(0.0, f64::max)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

// ---------------------------------------------------------------------------
// Checks
// ---------------------------------------------------------------------------

/// Both confidence formulas against hand-computed constants and a direct
/// recomputation over 1000 random distributions.
fn confidence_oracle() -> Result<String, String> {
    let p = ProbabilityDistribution::new(vec![0.7f64, 0.2, 0.1]).map_err(|e| e.to_string())?;
    let hand = [
        (
            confidence_of(&p, ConfidenceFormula::ExpNegEntropy).map_err(|e| e.to_string())?,
            0.4485125783319456,
        ),
        (
            confidence_of(&p, ConfidenceFormula::NormalizedEntropy).map_err(|e| e.to_string())?,
            0.2701533008379025,
        ),
    ];
    for (got, want) in hand {
        if (got - want).abs() > 1e-12 {
            return Err(format!("hand-computed constant: got {got}, want {want}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_001);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=64usize);
        let probs = random_simplex(&mut rng, n);
        // Entropy recomputed directly, summing in reverse order.
        let mut h = 0.0f64;
        for &q in probs.iter().rev() {
            h -= q * q.max(1e-12).ln();
        }
        let p = ProbabilityDistribution::new(probs).map_err(|e| e.to_string())?;
        let exp_got = confidence_of(&p, ConfidenceFormula::ExpNegEntropy).map_err(|e| e.to_string())?;
        let norm_got =
            confidence_of(&p, ConfidenceFormula::NormalizedEntropy).map_err(|e| e.to_string())?;
        let exp_want = (-h).exp();
        let norm_want = (1.0 - h / (n as f64).ln()).clamp(0.0, 1.0);
        worst = worst.max((exp_got - exp_want).abs()).max((norm_got - norm_want).abs());
    }
    if worst > 1e-10 {
        return Err(format!("max deviation {worst:.3e} exceeds 1e-10"));
    }
    let delta = ProbabilityDistribution::new(vec![1.0f64, 0.0, 0.0]).map_err(|e| e.to_string())?;
    let c = confidence_of(&delta, ConfidenceFormula::ExpNegEntropy).map_err(|e| e.to_string())?;
    if (c - 1.0).abs() > 1e-9 {
        return Err(format!("delta distribution confidence {c}, want 1"));
    }
    Ok(format!("1000 random distributions, max deviation {worst:.3e}"))
}

/// Gate construction identities for every strategy.
fn gating_identities() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_002);
    for trial in 0..200 {
        let n = rng.random_range(1..=16usize);
        let conf: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let tau = 0.5;

        let none = make_gates(&conf, GatingStrategy::None, tau, 10.0).map_err(|e| e.to_string())?;
        if none.weights.iter().any(|&w| w != 1.0) {
            return Err(format!("trial {trial}: ungated weights must all be 1"));
        }

        let hard =
            make_gates(&conf, GatingStrategy::FixedThreshold, tau, 10.0).map_err(|e| e.to_string())?;
        for (i, (&c, &g)) in conf.iter().zip(&hard.weights).enumerate() {
            let want = if c > tau { 1.0 } else { 0.0 };
            if g != want {
                return Err(format!("trial {trial} index {i}: threshold gate {g}, want {want}"));
            }
        }

        let sig = make_gates(&conf, GatingStrategy::Sigmoid, tau, 10.0).map_err(|e| e.to_string())?;
        for (i, (&c, &g)) in conf.iter().zip(&sig.weights).enumerate() {
            let want = 1.0 / (1.0 + (-10.0 * (c - tau)).exp());
            if (g - want).abs() > 1e-12 || !(0.0..=1.0).contains(&g) {
                return Err(format!("trial {trial} index {i}: sigmoid gate {g}, want {want}"));
            }
        }

        let mean = conf.iter().sum::<f64>() / n as f64;
        let rel =
            make_gates(&conf, GatingStrategy::BatchRelative, tau, 10.0).map_err(|e| e.to_string())?;
        for (i, (&c, &g)) in conf.iter().zip(&rel.weights).enumerate() {
            let want = if c > mean { 1.0 } else { 0.0 };
            if g != want {
                return Err(format!(
                    "trial {trial} index {i}: batch-relative gate {g}, want {want} (c {c}, mean {mean})"
                ));
            }
        }
    }

    // Ties: an all-equal batch closes every gate by default and opens all
    // of them with the tie rule flipped; a single example closes its own.
    let equal = [0.6, 0.6, 0.6];
    let closed = make_gates(&equal, GatingStrategy::BatchRelative, 0.5, 10.0)
        .map_err(|e| e.to_string())?;
    if closed.weights.iter().any(|&w| w != 0.0) {
        return Err("all-equal batch must close every batch-relative gate".into());
    }
    let open = make_gates_with_ties(&equal, GatingStrategy::BatchRelative, 0.5, 10.0, true)
        .map_err(|e| e.to_string())?;
    if open.weights.iter().any(|&w| w != 1.0) {
        return Err("ties_open must open gates at exactly the mean".into());
    }
    let single = make_gates(&[0.9], GatingStrategy::BatchRelative, 0.5, 10.0)
        .map_err(|e| e.to_string())?;
    if single.weights[0] != 0.0 {
        return Err("a single-example batch is its own mean and must close".into());
    }
    Ok("200 random batches, all four strategies, tie rules included".into())
}

/// Layer alignment and head subsampling against the closed forms.
fn layer_and_head_maps() -> Result<String, String> {
    let mut pairs = 0;
    for ls in 1..=8usize {
        for lt in ls..=12usize {
            let map = LayerMap::uniform(ls, lt).map_err(|e| e.to_string())?;
            let mut prev = 0usize;
            for k0 in 0..ls {
                let got = map.teacher_index(k0);
                let want = (k0 + 1) * lt / ls - 1;
                if got != want {
                    return Err(format!("layer map ({ls},{lt}) at {k0}: {got}, want {want}"));
                }
                if got >= lt || (k0 > 0 && got < prev) {
                    return Err(format!("layer map ({ls},{lt}) not monotone in range"));
                }
                prev = got;
            }
            if map.teacher_index(ls - 1) != lt - 1 {
                return Err(format!("layer map ({ls},{lt}) must end at the last teacher layer"));
            }
            if ls == lt {
                for k0 in 0..ls {
                    if map.teacher_index(k0) != k0 {
                        return Err(format!("equal-depth map ({ls}) must be identity"));
                    }
                }
            }
            pairs += 1;
        }
    }
    let mut head_pairs = 0;
    for hs in 1..=8usize {
        for ht in hs..=8usize {
            let sel = subsample_heads(hs, ht).map_err(|e| e.to_string())?;
            for (j0, &h) in sel.iter().enumerate() {
                let want = (j0 + 1) * ht / hs - 1;
                if h != want || h >= ht {
                    return Err(format!("head map ({hs},{ht}) at {j0}: {h}, want {want}"));
                }
            }
            if *sel.last().unwrap() != ht - 1 {
                return Err(format!("head map ({hs},{ht}) must end at the last teacher head"));
            }
            if hs == ht && sel.iter().enumerate().any(|(j, &h)| j != h) {
                return Err(format!("equal head counts ({hs}) must be identity"));
            }
            head_pairs += 1;
        }
    }
    Ok(format!("{pairs} layer pairs and {head_pairs} head pairs match closed forms"))
}

/// Soft-label loss gradient against central differences, both forms.
fn soft_loss_gradient() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_003);
    let (rows, cols) = (3usize, 7usize);
    let logits = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5));
    let teacher = {
        let mut t = Array2::zeros((rows, cols));
        for r in 0..rows {
            let s = random_simplex(&mut rng, cols);
            for c in 0..cols {
                t[[r, c]] = s[c];
            }
        }
        t
    };
    let weight = 0.7;
    let mut worst = 0.0f64;
    for form in [SoftLossForm::Kl, SoftLossForm::CrossEntropy] {
        let eval = |x: &Array2<f64>| -> f64 {
            let mut tape: Tape<'_, f64> = Tape::new();
            let node = tape.owned(x.clone());
            let loss = soft_loss_node(&mut tape, node, &teacher, weight, form)
                .unwrap()
                .unwrap();
            tape.scalar_value(loss)
        };
        let grad = {
            let mut tape: Tape<'_, f64> = Tape::new();
            let node = tape.owned(logits.clone());
            let loss = soft_loss_node(&mut tape, node, &teacher, weight, form)
                .unwrap()
                .unwrap();
            let mut g = tape.backward(loss);
            g.take(node).unwrap()
        };
        let h = 1e-6;
        for r in 0..rows {
            for c in 0..cols {
                let mut plus = logits.clone();
                plus[[r, c]] += h;
                let mut minus = logits.clone();
                minus[[r, c]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                worst = worst.max(rel_err(grad[[r, c]], numeric));
            }
        }
    }
    if worst > 1e-4 {
        return Err(format!("max relative gradient error {worst:.3e} exceeds 1e-4"));
    }
    Ok(format!("kl and cross_entropy forms, max relative error {worst:.3e}"))
}

/// Hidden-state loss gradient (including projections) against central
/// differences.
fn hidden_loss_gradient() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_004);
    let map = LayerMap::uniform(2, 4).map_err(|e| e.to_string())?;
    let steps = 3usize;
    let (ds, dt) = (4usize, 8usize);
    let students: Vec<Array2<f64>> = (0..2)
        .map(|_| Array2::from_shape_fn((steps, ds), |_| rng.random_range(-1.0..1.0)))
        .collect();
    let teachers: Vec<Array2<f64>> = (0..4)
        .map(|_| Array2::from_shape_fn((steps, dt), |_| rng.random_range(-1.0..1.0)))
        .collect();
    let projections: Vec<Array2<f64>> = (0..2)
        .map(|_| Array2::from_shape_fn((dt, ds), |_| rng.random_range(-0.5..0.5)))
        .collect();
    let gates = [1.0, 0.6];

    let eval = |st: &[Array2<f64>], pr: &[Array2<f64>]| -> f64 {
        let mut tape: Tape<'_, f64> = Tape::new();
        let s_nodes: Vec<NodeId> = st.iter().map(|a| tape.owned(a.clone())).collect();
        let p_nodes: Vec<Option<NodeId>> =
            pr.iter().map(|a| Some(tape.owned(a.clone()))).collect();
        let loss = hidden_loss_node(&mut tape, &s_nodes, &teachers, &p_nodes, &gates, &map)
            .unwrap()
            .unwrap();
        tape.scalar_value(loss)
    };

    let (s_grads, p_grads) = {
        let mut tape: Tape<'_, f64> = Tape::new();
        let s_nodes: Vec<NodeId> = students.iter().map(|a| tape.owned(a.clone())).collect();
        let p_nodes: Vec<Option<NodeId>> = projections
            .iter()
            .map(|a| Some(tape.owned(a.clone())))
            .collect();
        let loss = hidden_loss_node(&mut tape, &s_nodes, &teachers, &p_nodes, &gates, &map)
            .unwrap()
            .unwrap();
        let mut g = tape.backward(loss);
        let sg: Vec<Array2<f64>> = s_nodes.iter().map(|&n| g.take(n).unwrap()).collect();
        let pg: Vec<Array2<f64>> = p_nodes
            .iter()
            .map(|n| g.take(n.unwrap()).unwrap())
            .collect();
        (sg, pg)
    };

    let h = 1e-6;
    let mut worst = 0.0f64;
    for (layer, grad) in s_grads.iter().enumerate() {
        for r in 0..steps {
            for c in 0..ds {
                let mut plus = students.clone();
                plus[layer][[r, c]] += h;
                let mut minus = students.clone();
                minus[layer][[r, c]] -= h;
                let numeric = (eval(&plus, &projections) - eval(&minus, &projections)) / (2.0 * h);
                worst = worst.max(rel_err(grad[[r, c]], numeric));
            }
        }
    }
    for (layer, grad) in p_grads.iter().enumerate() {
        for r in 0..dt {
            for c in 0..ds {
                let mut plus = projections.clone();
                plus[layer][[r, c]] += h;
                let mut minus = projections.clone();
                minus[layer][[r, c]] -= h;
                let numeric = (eval(&students, &plus) - eval(&students, &minus)) / (2.0 * h);
                worst = worst.max(rel_err(grad[[r, c]], numeric));
            }
        }
    }
    if worst > 1e-4 {
        return Err(format!("max relative gradient error {worst:.3e} exceeds 1e-4"));
    }
    Ok(format!("student and projection gradients, max relative error {worst:.3e}"))
}

/// Attention loss gradient through the row softmax, both forms.
fn attention_loss_gradient() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_005);
    let map = LayerMap::uniform(2, 2).map_err(|e| e.to_string())?;
    let (layers, heads, n) = (2usize, 2usize, 4usize);
    let scores: Vec<Vec<Array2<f64>>> = (0..layers)
        .map(|_| {
            (0..heads)
                .map(|_| Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0)))
                .collect()
        })
        .collect();
    let teacher: Vec<Vec<Array2<f64>>> = (0..layers)
        .map(|_| {
            (0..heads)
                .map(|_| {
                    let mut m = Array2::zeros((n, n));
                    for r in 0..n {
                        let s = random_simplex(&mut rng, n);
                        for c in 0..n {
                            m[[r, c]] = s[c];
                        }
                    }
                    m
                })
                .collect()
        })
        .collect();
    let gates = [0.8, 1.0];

    let mut worst = 0.0f64;
    for form in [AttentionLossForm::Mse, AttentionLossForm::Kl] {
        let eval = |sc: &[Vec<Array2<f64>>]| -> f64 {
            let mut tape: Tape<'_, f64> = Tape::new();
            let mut probs = Vec::new();
            let mut raw = Vec::new();
            for layer in sc {
                let mut p_row = Vec::new();
                let mut s_row = Vec::new();
                for head in layer {
                    let s = tape.owned(head.clone());
                    s_row.push(s);
                    p_row.push(tape.softmax_rows(s));
                }
                probs.push(p_row);
                raw.push(s_row);
            }
            let loss = attention_loss_node(&mut tape, &probs, &raw, &teacher, &gates, &map, form)
                .unwrap()
                .unwrap();
            tape.scalar_value(loss)
        };
        let grads: Vec<Vec<Array2<f64>>> = {
            let mut tape: Tape<'_, f64> = Tape::new();
            let mut probs = Vec::new();
            let mut raw = Vec::new();
            for layer in &scores {
                let mut p_row = Vec::new();
                let mut s_row = Vec::new();
                for head in layer {
                    let s = tape.owned(head.clone());
                    s_row.push(s);
                    p_row.push(tape.softmax_rows(s));
                }
                probs.push(p_row);
                raw.push(s_row);
            }
            let loss = attention_loss_node(&mut tape, &probs, &raw, &teacher, &gates, &map, form)
                .unwrap()
                .unwrap();
            let mut g = tape.backward(loss);
            raw.iter()
                .map(|row| row.iter().map(|&id| g.take(id).unwrap()).collect())
                .collect()
        };
        let h = 1e-6;
        for layer in 0..layers {
            for head in 0..heads {
                for r in 0..n {
                    for c in 0..n {
                        let mut plus = scores.clone();
                        plus[layer][head][[r, c]] += h;
                        let mut minus = scores.clone();
                        minus[layer][head][[r, c]] -= h;
                        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                        worst = worst.max(rel_err(grads[layer][head][[r, c]], numeric));
                    }
                }
            }
        }
    }
    if worst > 1e-4 {
        return Err(format!("max relative gradient error {worst:.3e} exceeds 1e-4"));
    }
    Ok(format!("mse and kl forms through row softmax, max relative error {worst:.3e}"))
}

/// Whole-step gradient of the combined gated objective on a real pipeline,
/// sampled parameter entries against central differences.
fn training_step_gradient() -> Result<String, String> {
    let cfg = tiny_cfg(&["precision=f64", "noise_enabled=true", "noise_error_rate=0.5"]);
    let pipeline = Pipeline::<f64>::prepare(&cfg, None).map_err(|e| e.to_string())?;
    let mut state =
        TrainState::new(&cfg, &pipeline.train, &pipeline.channel, 3, 10).map_err(|e| e.to_string())?;
    let batch: Vec<usize> = (0..6).collect();
    let pool = state.gate_pool(&batch).map_err(|e| e.to_string())?;
    let (grads, vals) = state
        .accumulate_with_gates(&batch, &pool)
        .map_err(|e| e.to_string())?;
    let base_total: f64 = vals.iter().map(|v| v.total).sum();
    if !base_total.is_finite() {
        return Err("combined loss is not finite".into());
    }
    let (student_sums, proj_sums) = grads.into_parts();

    let mut rng = ChaCha8Rng::seed_from_u64(20_240_006);
    let n_tensors = state.student.model.params().tensors().len();
    let mut samples: Vec<(bool, usize)> = (0..8).map(|_| (true, rng.random_range(0..n_tensors))).collect();
    if !state.student.projection_weights().is_empty() {
        samples.push((false, 0));
        samples.push((false, state.student.projection_weights().len() - 1));
    }

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut checked = 0usize;
    for (is_student, t) in samples {
        let (rows, cols) = if is_student {
            state.student.model.params().tensors()[t].dim()
        } else {
            state.student.projection_weights()[t].dim()
        };
        let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
        let analytic = if is_student {
            student_sums[t].as_ref().map_or(0.0, |g| g[[r, c]])
        } else {
            proj_sums[t].as_ref().map_or(0.0, |g| g[[r, c]])
        };
        let name = if is_student {
            state.student.model.params().names()[t].clone()
        } else {
            format!("projection[{t}]")
        };
        let mut total_at = |delta: f64| -> Result<f64, String> {
            if is_student {
                state.student.model.params_mut().tensors_mut()[t][[r, c]] += delta;
            } else {
                state.student.projection_weight_mut(t)[[r, c]] += delta;
            }
            let (_, vals) = state
                .accumulate_with_gates(&batch, &pool)
                .map_err(|e| e.to_string())?;
            if is_student {
                state.student.model.params_mut().tensors_mut()[t][[r, c]] -= delta;
            } else {
                state.student.projection_weight_mut(t)[[r, c]] -= delta;
            }
            Ok(vals.iter().map(|v| v.total).sum())
        };
        let numeric = (total_at(h)? - total_at(-h)?) / (2.0 * h);
        // Entries whose true gradient is zero (e.g. key biases, which
        // cancel in the row softmax) read as central-difference noise;
        // both sides below the noise floor counts as agreement.
        if analytic.abs() < 1e-7 && numeric.abs() < 1e-7 {
            checked += 1;
            continue;
        }
        let err = rel_err(analytic, numeric);
        if err > worst {
            worst = err;
            worst_at = format!("{name}[{r},{c}] analytic {analytic:.6e} numeric {numeric:.6e}");
        }
        checked += 1;
    }
    if worst > 1e-3 {
        return Err(format!(
            "max relative gradient error {worst:.3e} exceeds 1e-3 at {worst_at}"
        ));
    }
    Ok(format!("{checked} sampled parameter entries, max relative error {worst:.3e}"))
}

/// With all three distillation weights at zero, the gated trainer and a
/// plain supervised loop must produce identical parameter trajectories.
fn sft_equivalence() -> Result<String, String> {
    let cfg = tiny_cfg(&["precision=f64", "lambda1=0", "lambda2=0", "lambda3=0"]);
    let pipeline = Pipeline::<f64>::prepare(&cfg, None).map_err(|e| e.to_string())?;
    let total_steps = 6usize;
    let mut state = TrainState::new(&cfg, &pipeline.train, &pipeline.channel, 11, total_steps)
        .map_err(|e| e.to_string())?;

    let (_, student_cfg) = model_configs(&cfg);
    let mut plain = Model::<f64>::new(student_cfg, 11).map_err(|e| e.to_string())?;
    let mut opt = AdamW::new(plain.params().tensors(), cfg.weight_decay);

    let batches: Vec<Vec<usize>> = vec![
        (0..4).collect(),
        (4..8).collect(),
        (8..12).collect(),
        (2..6).collect(),
    ];
    for (i, batch) in batches.iter().enumerate() {
        state.distill_step(batch).map_err(|e| e.to_string())?;
        let lr = lr_at(i + 1, total_steps, cfg.learning_rate, cfg.warmup_fraction);
        let refs: Vec<&crate::trainer::PreparedExample> =
            batch.iter().map(|&j| &pipeline.train[j]).collect();
        sft_step(&mut plain, &mut opt, &refs, lr).map_err(|e| e.to_string())?;
    }
    let diff = max_tensor_diff(state.student.model.params().tensors(), plain.params().tensors());
    if diff > 1e-7 {
        return Err(format!("parameter trajectories diverged by {diff:.3e} (limit 1e-7)"));
    }
    Ok(format!("4 steps, max parameter difference {diff:.3e}"))
}

/// Forced confidence 1 under the ungated strategy must match a thresholded
/// run whose gates are trivially all open.
fn ungated_equivalence() -> Result<String, String> {
    let base = &[
        "precision=f64",
        "noise_enabled=true",
        "noise_error_rate=0.4",
        "force_confidence_one=true",
    ];
    let cfg_a = {
        let mut c = tiny_cfg(base);
        c.apply_overrides(&["gating_strategy=none"]).map_err(|e| e.to_string())?;
        c
    };
    let cfg_b = {
        let mut c = tiny_cfg(base);
        c.apply_overrides(&["gating_strategy=fixed_threshold", "threshold_tau=0.25"])
            .map_err(|e| e.to_string())?;
        c
    };
    let pa = Pipeline::<f64>::prepare(&cfg_a, None).map_err(|e| e.to_string())?;
    let pb = Pipeline::<f64>::prepare(&cfg_b, None).map_err(|e| e.to_string())?;
    if pa.teacher.checksum() != pb.teacher.checksum() {
        return Err("teachers must be identical across the two configs".into());
    }
    let mut sa = TrainState::new(&cfg_a, &pa.train, &pa.channel, 21, 4).map_err(|e| e.to_string())?;
    let mut sb = TrainState::new(&cfg_b, &pb.train, &pb.channel, 21, 4).map_err(|e| e.to_string())?;
    for batch in [(0..4).collect::<Vec<_>>(), (4..8).collect(), (8..12).collect()] {
        sa.distill_step(&batch).map_err(|e| e.to_string())?;
        sb.distill_step(&batch).map_err(|e| e.to_string())?;
    }
    let diff = max_tensor_diff(sa.student.model.params().tensors(), sb.student.model.params().tensors());
    let pdiff = max_tensor_diff(sa.student.projection_weights(), sb.student.projection_weights());
    let worst = diff.max(pdiff);
    if worst > 1e-7 {
        return Err(format!("trajectories diverged by {worst:.3e} (limit 1e-7)"));
    }
    Ok(format!("3 steps under two all-open configs, max difference {worst:.3e}"))
}

/// Task generators against from-scratch recomputation, 10k examples each.
fn generator_oracles() -> Result<String, String> {
    let probe = last_letter_answer(&["Max", "Mikey", "Cynthia", "Holly"]);
    if probe != "xyay" {
        return Err(format!("worked four-name example gave '{probe}', want 'xyay'"));
    }
    let mut mismatches = 0usize;
    for i in 0..10_000u64 {
        let ex = gen_last_letter(3, 50_000 + i).map_err(|e| e.to_string())?;
        let words: Vec<&str> = ex.input_text.split_whitespace().collect();
        let expected: String = words
            .iter()
            .map(|w| w.chars().last().unwrap().to_ascii_lowercase())
            .collect();
        if ex.target_text != expected {
            mismatches += 1;
        }
    }
    for i in 0..10_000u64 {
        let ex = gen_shuffled_objects(3, 4, 90_000 + i).map_err(|e| e.to_string())?;
        if simulate_shuffle(&ex.input_text).as_deref() != Some(ex.target_text.as_str()) {
            mismatches += 1;
        }
    }
    if mismatches > 0 {
        return Err(format!("{mismatches} generator mismatches out of 20000"));
    }
    Ok("10000 examples per task, 0 mismatches".into())
}

/// Independent simulation of a shuffle prompt: parse the initial
/// assignment, replay the swaps, answer the query.
fn simulate_shuffle(input: &str) -> Option<String> {
    let mut sections = input.split('|').map(str::trim);
    let initial = sections.next()?;
    let mut holding: std::collections::HashMap<&str, &str> = std::collections::HashMap::new();
    for pair in initial.split_whitespace() {
        let (agent, item) = pair.split_once(':')?;
        holding.insert(agent, item);
    }
    let mut query = None;
    for section in sections {
        if let Some(rest) = section.strip_prefix("? ") {
            query = Some(rest.trim());
        } else {
            let (a, b) = section.split_once('-')?;
            let (a, b) = (a.trim(), b.trim());
            let va = *holding.get(a)?;
            let vb = *holding.get(b)?;
            holding.insert(a, vb);
            holding.insert(b, va);
        }
    }
    holding.get(query?).map(|s| s.to_string())
}

/// Corruption frequency, row shapes, and calibration limits of the noisy
/// teacher channel.
fn noise_channel_statistics() -> Result<String, String> {
    let ex = gen_last_letter(3, 424_242).map_err(|e| e.to_string())?;
    let spec = NoisyTeacherSpec {
        error_rate: 0.3,
        calibration: 1.0,
        peak_prob: 0.95,
    };
    let draws = 2000usize;
    let mut corrupted = 0usize;
    for i in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(7_000_000 + i as u64);
        let em = noisy_teacher_emit(&ex, &spec, &mut rng).map_err(|e| e.to_string())?;
        let vocab = em.distributions[0].len() as f64;
        if em.corrupted {
            corrupted += 1;
            if em.supervision_text == ex.target_text {
                return Err("corrupted emission must differ from the gold target".into());
            }
            if em.supervision_text.len() != ex.target_text.len() {
                return Err("corruption must preserve target length".into());
            }
            // Fully miscalibrated corrupted rows are exactly uniform.
            for row in &em.distributions {
                for &p in row {
                    if (p - 1.0 / vocab).abs() > 1e-12 {
                        return Err(format!("uniform row violated: {p} vs {}", 1.0 / vocab));
                    }
                }
            }
        } else {
            if em.supervision_text != ex.target_text {
                return Err("clean emission must equal the gold target".into());
            }
            for row in &em.distributions {
                let peak = row.iter().cloned().fold(0.0f64, f64::max);
                if (peak - 0.95).abs() > 1e-12 {
                    return Err(format!("clean row peak {peak}, want 0.95"));
                }
            }
        }
    }
    // 4-sigma band around the binomial expectation.
    let expect = draws as f64 * 0.3;
    let sigma = (draws as f64 * 0.3 * 0.7).sqrt();
    let dev = (corrupted as f64 - expect).abs();
    if dev > 4.0 * sigma {
        return Err(format!(
            "corrupted count {corrupted} outside {expect} +/- {:.1}",
            4.0 * sigma
        ));
    }
    Ok(format!(
        "{corrupted}/{draws} corrupted (expected {expect:.0} +/- {:.0})",
        4.0 * sigma
    ))
}

/// Two optimizer steps against hand-computed values.
fn optimizer_trace() -> Result<String, String> {
    let mut p = vec![Array2::from_elem((1, 1), 1.0f64)];
    let mut opt = AdamW::new(&p, 0.01);
    let lr = 0.1;

    // Step 1: g = 0.5. m = 0.05, v = 0.00025, m_hat = 0.5, v_hat = 0.25,
    // update = lr * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0).
    let g1 = vec![Some(Array2::from_elem((1, 1), 0.5f64))];
    opt.step(&mut p, &g1, lr);
    let expected1 = 1.0 - 0.1 * (0.5 / (0.25f64.sqrt() + 1e-8) + 0.01 * 1.0);
    if (p[0][[0, 0]] - expected1).abs() > 1e-12 {
        return Err(format!("step 1: {} vs hand value {expected1}", p[0][[0, 0]]));
    }

    // Step 2: g = -0.25 against the running moments.
    let m2: f64 = 0.9 * 0.05 + 0.1 * (-0.25);
    let v2: f64 = 0.999 * 0.00025 + 0.001 * 0.0625;
    let m_hat = m2 / (1.0 - 0.9f64.powi(2));
    let v_hat = v2 / (1.0 - 0.999f64.powi(2));
    let expected2 = expected1 - 0.1 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.01 * expected1);
    let g2 = vec![Some(Array2::from_elem((1, 1), -0.25f64))];
    opt.step(&mut p, &g2, lr);
    if (p[0][[0, 0]] - expected2).abs() > 1e-12 {
        return Err(format!("step 2: {} vs hand value {expected2}", p[0][[0, 0]]));
    }
    Ok(format!("two hand-checked steps, final parameter {expected2:.12}"))
}

/// Warmup and decay schedule against the closed form, pointwise.
fn lr_schedule() -> Result<String, String> {
    let (total, base, frac) = (200usize, 3e-4, 0.05);
    let warmup = (frac * total as f64).floor() as usize;
    for step in 1..=total {
        let got = lr_at(step, total, base, frac);
        let want = if step <= warmup {
            base * step as f64 / warmup as f64
        } else {
            base * (total - step) as f64 / (total - warmup) as f64
        };
        if (got - want).abs() > 1e-15 {
            return Err(format!("step {step}: {got} vs closed form {want}"));
        }
    }
    if lr_at(total, total, base, frac) != 0.0 {
        return Err("final step must have learning rate exactly 0".into());
    }
    let no_warmup = lr_at(1, 100, base, 0.0);
    if (no_warmup - base * 99.0 / 100.0).abs() > 1e-15 {
        return Err(format!("zero-warmup start {no_warmup}, want {}", base * 0.99));
    }
    Ok(format!("{total} steps pointwise, warmup boundary at {warmup}"))
}

/// Gradient accumulation in micro-batches must match the whole batch.
fn grad_accum_equivalence() -> Result<String, String> {
    let cfg = tiny_cfg(&["precision=f64", "noise_enabled=true", "noise_error_rate=0.4"]);
    let pipeline = Pipeline::<f64>::prepare(&cfg, None).map_err(|e| e.to_string())?;
    let state = TrainState::new(&cfg, &pipeline.train, &pipeline.channel, 9, 10)
        .map_err(|e| e.to_string())?;
    let batch: Vec<usize> = (0..8).collect();
    let pool = state.gate_pool(&batch).map_err(|e| e.to_string())?;
    let (whole, _) = state
        .accumulate_with_gates(&batch, &pool)
        .map_err(|e| e.to_string())?;
    let mut merged: Option<crate::trainer::StudentGrads<f64>> = None;
    for chunk in batch.chunks(3) {
        let (g, _) = state
            .accumulate_with_gates(chunk, &pool)
            .map_err(|e| e.to_string())?;
        merged = Some(match merged.take() {
            None => g,
            Some(acc) => acc.merge(g),
        });
    }
    let merged = merged.unwrap();
    let (ws, wp) = whole.into_parts();
    let (ms, mp) = merged.into_parts();
    let mut worst = 0.0f64;
    for (a, b) in ws.iter().zip(&ms).chain(wp.iter().zip(&mp)) {
        match (a, b) {
            (Some(a), Some(b)) => {
                worst = worst.max((a - b).iter().fold(0.0f64, |m, v| m.max(v.abs())));
            }
            (None, None) => {}
            _ => return Err("gradient presence mismatch between accumulation paths".into()),
        }
    }
    if worst > 1e-6 {
        return Err(format!("accumulation paths differ by {worst:.3e} (limit 1e-6)"));
    }
    Ok(format!("8-example batch in 3 chunks, max difference {worst:.3e}"))
}

/// Save/load must be bit-exact, verified through the content checksum.
fn checkpoint_roundtrip() -> Result<String, String> {
    let cfg = ModelConfig {
        vocab_size: crate::tokenizer::VOCAB_SIZE,
        hidden_dim: 16,
        num_layers: 2,
        num_heads: 2,
        max_seq_len: 24,
        role: ModelRole::Teacher,
    };
    let model = Model::<f32>::new(cfg, 777).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    model.save(dir.path()).map_err(|e| e.to_string())?;
    let loaded = Model::<f32>::load(dir.path()).map_err(|e| e.to_string())?;
    if loaded.checksum() != model.checksum() {
        return Err("checksum changed across save/load".into());
    }
    for (a, b) in model.params().tensors().iter().zip(loaded.params().tensors()) {
        if a != b {
            return Err("tensor bits changed across save/load".into());
        }
    }
    Ok(format!("checksum {} stable across roundtrip", &model.checksum()[..12]))
}

/// The same seed must replay the same run, metrics byte for byte.
fn determinism_replay() -> Result<String, String> {
    let cfg = tiny_cfg(&["noise_enabled=true", "noise_error_rate=0.3"]);
    let pipeline = Pipeline::<f32>::prepare(&cfg, None).map_err(|e| e.to_string())?;
    let d1 = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d2 = tempfile::tempdir().map_err(|e| e.to_string())?;
    pipeline.train_seed(1, Some(d1.path())).map_err(|e| e.to_string())?;
    pipeline.train_seed(1, Some(d2.path())).map_err(|e| e.to_string())?;
    let m1 = std::fs::read(d1.path().join("metrics.csv")).map_err(|e| e.to_string())?;
    let m2 = std::fs::read(d2.path().join("metrics.csv")).map_err(|e| e.to_string())?;
    if m1 != m2 {
        return Err("metrics.csv differs between identical replays".into());
    }
    Ok(format!("{} metrics bytes identical across replays", m1.len()))
}

/// A student with the teacher's own shape and weights, distilled from the
/// teacher with confidence forced to 1, must not lose validation accuracy
/// relative to its starting checkpoint.
fn self_distillation_sanity() -> Result<String, String> {
    let cfg = tiny_cfg(&[
        "student_layers=2",
        "student_dim=16",
        "student_heads=2",
        "projection_identity=true",
        "force_confidence_one=true",
        "gating_strategy=none",
        "teacher_epochs=4",
        "learning_rate=1e-5",
    ]);
    let pipeline = Pipeline::<f32>::prepare(&cfg, None).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    pipeline.teacher.save(dir.path()).map_err(|e| e.to_string())?;
    let teacher_weights = Model::<f32>::load(dir.path()).map_err(|e| e.to_string())?;

    let batch_count = pipeline.train.len().div_ceil(cfg.batch_size);
    let total = 2 * batch_count;
    let mut state = TrainState::new(&cfg, &pipeline.train, &pipeline.channel, 31, total)
        .map_err(|e| e.to_string())?;
    for (dst, src) in state
        .student
        .model
        .params_mut()
        .tensors_mut()
        .iter_mut()
        .zip(teacher_weights.params().tensors())
    {
        dst.clone_from(src);
    }
    let start = evaluate(&state.student.model, &pipeline.val).map_err(|e| e.to_string())?;
    let mut best = f64::NEG_INFINITY;
    for _epoch in 0..2 {
        let order: Vec<usize> = (0..pipeline.train.len()).collect();
        for batch in order.chunks(cfg.batch_size) {
            state.distill_step(batch).map_err(|e| e.to_string())?;
        }
        let acc = evaluate(&state.student.model, &pipeline.val).map_err(|e| e.to_string())?;
        best = best.max(acc);
    }
    if best < start {
        return Err(format!(
            "best validation accuracy {best:.3} fell below the starting checkpoint {start:.3}"
        ));
    }
    Ok(format!("start {start:.3}, best after self-distillation {best:.3}"))
}
