//! Walk through entropy-based teacher confidence on a few hand-picked
//! distributions and show how per-step scores aggregate over a sequence.

use gated_distill::confidence::{
    confidence_exp, confidence_normalized, sequence_confidence, shannon_entropy,
    ProbabilityDistribution,
};

fn describe(label: &str, probs: Vec<f64>) -> ProbabilityDistribution<f64> {
    let p = ProbabilityDistribution::new(probs).expect("valid distribution");
    let h = shannon_entropy(&p);
    let c_exp = confidence_exp(&p);
    let c_norm = confidence_normalized(&p, p.len()).expect("vocab > 1");
    println!(
        "{label:<22} H = {h:.6} nats   exp(-H) = {c_exp:.6}   1 - H/ln V = {c_norm:.6}"
    );
    p
}

fn main() {
    println!("single-step confidence (V = size of each distribution)\n");
    describe("near-delta", vec![0.97, 0.01, 0.01, 0.01]);
    describe("peaked", vec![0.7, 0.2, 0.1]);
    describe("two-way split", vec![0.5, 0.5]);
    describe("uniform over 4", vec![0.25; 4]);
    describe("uniform over 44", vec![1.0 / 44.0; 44]);

    // A sharp row scores near 1 under both formulas, a uniform row near 0.
    // The normalized form is the default because it stays comparable as the
    // vocabulary grows; exp(-H) decays toward 0 for large uniform vocabularies.

    println!("\nsequence aggregation (mean over non-pad steps)\n");
    let rows = [
        vec![0.97, 0.01, 0.01, 0.01],
        vec![0.25; 4],
        vec![0.7, 0.1, 0.1, 0.1],
        vec![0.25; 4],
    ];
    let per_step: Vec<f64> = rows
        .iter()
        .map(|r| {
            let p = ProbabilityDistribution::new(r.clone()).expect("valid distribution");
            confidence_normalized(&p, p.len()).expect("vocab > 1")
        })
        .collect();
    for (i, c) in per_step.iter().enumerate() {
        println!("  step {i}: confidence {c:.6}");
    }

    let no_padding = vec![false; 4];
    let seq = sequence_confidence(&per_step, &no_padding).expect("non-empty sequence");
    println!("  mean over 4 real steps: {seq:.6}");

    // The mask marks padding positions, which drop out of the mean entirely.
    let last_padded = vec![false, false, false, true];
    let seq_masked = sequence_confidence(&per_step, &last_padded).expect("non-empty sequence");
    println!("  mean with last step padded out: {seq_masked:.6}");
}
