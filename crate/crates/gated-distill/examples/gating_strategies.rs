//! Push one batch of confidence scores through every gating strategy and
//! print the structural gates and soft-label weights each one produces.

use gated_distill::confidence::{make_gates, make_gates_with_ties, GatingStrategy};

const TAU: f64 = 0.5;
const SLOPE: f64 = 10.0;

fn soft_weight(strategy: GatingStrategy, confidence: f64, gate: f64) -> f64 {
    // The soft-label pathway reuses the structural gate except under the
    // always-open baseline (weight pinned to 1) and batch_relative, where
    // the raw confidence multiplies the open/closed decision.
    match strategy {
        GatingStrategy::None => 1.0,
        GatingStrategy::FixedThreshold | GatingStrategy::Sigmoid => gate,
        GatingStrategy::BatchRelative => confidence * gate,
    }
}

fn show(strategy: GatingStrategy, conf: &[f64]) {
    let gates = make_gates(conf, strategy, TAU, SLOPE).expect("well-formed batch");
    let soft: Vec<f64> = conf
        .iter()
        .zip(&gates.weights)
        .map(|(&c, &g)| soft_weight(strategy, c, g))
        .collect();
    println!("{}", strategy.name());
    println!("  struct gates   {:?}", rounded(&gates.weights));
    println!("  soft weights   {:?}", rounded(&soft));
    println!("  open fraction  {:.3}\n", gates.open_fraction());
}

fn rounded(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}

fn main() {
    let conf = [0.92f64, 0.61, 0.48, 0.07, 0.55];
    let mean: f64 = conf.iter().sum::<f64>() / conf.len() as f64;
    println!("batch confidences {conf:?}  (mean {mean:.3})\n");

    // none: always-open baseline.
    // fixed_threshold: hard cut at tau.
    // sigmoid: smooth version of the same cut; steep slopes approach it.
    // batch_relative: open exactly when strictly above the batch mean.
    for strategy in [
        GatingStrategy::None,
        GatingStrategy::FixedThreshold,
        GatingStrategy::Sigmoid,
        GatingStrategy::BatchRelative,
    ] {
        show(strategy, &conf);
    }

    // 0.25 is exact in binary floating point, so the batch mean of three
    // identical values really does equal each of them.
    println!("tie handling (confidence exactly at the batch mean)");
    let tied = [0.25f64, 0.25, 0.25];
    let closed = make_gates(&tied, GatingStrategy::BatchRelative, TAU, SLOPE).unwrap();
    let open = make_gates_with_ties(&tied, GatingStrategy::BatchRelative, TAU, SLOPE, true).unwrap();
    println!("  strict comparison: gates {:?}", closed.weights);
    println!("  ties-open option:  gates {:?}", open.weights);

    println!("\na lone example is its own batch mean, so strict comparison closes it");
    let single = make_gates(&[0.99f64], GatingStrategy::BatchRelative, TAU, SLOPE).unwrap();
    println!("  gates {:?}", single.weights);
}
