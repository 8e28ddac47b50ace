//! Evaluate the three distillation losses on small hand-built tensors and
//! show how closed gates zero out individual pathways.

use gated_distill::confidence::{GateVector, GatingStrategy, ProbabilityDistribution};
use gated_distill::losses::{
    gated_attention_loss, gated_hidden_loss, gated_soft_loss, AttentionLossForm, LayerMap,
    Projection, SoftLossForm,
};
use ndarray::{array, Array2};

fn gates(weights: Vec<f64>) -> GateVector<f64> {
    GateVector {
        weights,
        strategy: GatingStrategy::FixedThreshold,
        threshold_tau: 0.5,
        sigmoid_slope: 10.0,
    }
}

fn main() {
    // Soft labels: two supervision steps over a 4-token vocabulary.
    let teacher_rows = vec![
        ProbabilityDistribution::new(vec![0.85, 0.05, 0.05, 0.05]).unwrap(),
        ProbabilityDistribution::new(vec![0.05, 0.85, 0.05, 0.05]).unwrap(),
    ];
    let student_logits: Array2<f64> = array![[2.0, 0.1, -0.3, 0.0], [0.2, 1.5, 0.0, -0.5]];
    for conf in [1.0, 0.5, 0.0] {
        let ce = gated_soft_loss(&teacher_rows, &student_logits, conf, SoftLossForm::CrossEntropy)
            .unwrap();
        let kl =
            gated_soft_loss(&teacher_rows, &student_logits, conf, SoftLossForm::Kl).unwrap();
        println!("soft loss  conf {conf:.1}  cross_entropy {ce:.6}  kl {kl:.6}");
    }
    // The two forms differ exactly by the teacher's own entropy, so their
    // gradients match; confidence 0 short-circuits to an exact zero.

    // Hidden states: a 2-layer student against a 4-layer teacher, wider
    // teacher representations mapped down by per-layer projections.
    println!();
    let map = LayerMap::uniform(2, 4).unwrap();
    println!("layer map (student layer -> teacher layer): {:?}", map.targets());
    let student_hiddens: Vec<Array2<f64>> =
        vec![array![[1.0, 0.0], [0.0, 1.0]], array![[0.5, 0.5], [0.25, 0.75]]];
    let teacher_hiddens: Vec<Array2<f64>> = (0..4)
        .map(|l| {
            let v = 0.2 * (l as f64 + 1.0);
            array![[v, 0.0, v, 0.0], [0.0, v, 0.0, v]]
        })
        .collect();
    let proj = vec![
        Projection::new(Array2::from_shape_fn((4, 2), |(i, j)| {
            if i % 2 == j { 0.5 } else { 0.0 }
        }), true),
        Projection::new(Array2::from_shape_fn((4, 2), |(i, j)| {
            if i % 2 == j { 1.0 } else { 0.0 }
        }), true),
    ];
    for g in [vec![1.0, 1.0], vec![1.0, 0.0], vec![0.0, 0.0]] {
        let loss =
            gated_hidden_loss(&student_hiddens, &teacher_hiddens, &proj, &gates(g.clone()), &map)
                .unwrap();
        println!("hidden loss  gates {g:?}  -> {loss:.6}");
    }

    // Attention: per-layer per-head row-stochastic maps; the student's two
    // layers align with teacher layers 2 and 4 under the same map.
    println!();
    let sharp = array![[1.0, 0.0], [0.0, 1.0]];
    let flat = array![[0.5, 0.5], [0.5, 0.5]];
    let student_attn = vec![vec![sharp.clone()], vec![flat.clone()]];
    let teacher_attn = vec![
        vec![sharp.clone()],
        vec![flat.clone()],
        vec![sharp.clone()],
        vec![sharp.clone()],
    ];
    for g in [vec![1.0, 1.0], vec![0.0, 1.0]] {
        let mse = gated_attention_loss(
            &student_attn,
            &teacher_attn,
            &gates(g.clone()),
            &map,
            AttentionLossForm::Mse,
        )
        .unwrap();
        let kl = gated_attention_loss(
            &student_attn,
            &teacher_attn,
            &gates(g.clone()),
            &map,
            AttentionLossForm::Kl,
        )
        .unwrap();
        println!("attention loss  gates {g:?}  mse {mse:.6}  kl {kl:.6}");
    }
}
