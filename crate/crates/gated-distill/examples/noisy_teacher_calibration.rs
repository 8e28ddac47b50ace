//! Sample emissions from the synthetic imperfect teacher and show how the
//! calibration knob separates clean from corrupted confidence scores.

use gated_distill::confidence::{
    confidence_normalized, sequence_confidence, ProbabilityDistribution,
};
use gated_distill::tasks::{gen_last_letter, noisy_teacher_emit, NoisyTeacherSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn emission_confidence(distributions: &[Vec<f64>]) -> f64 {
    let per_step: Vec<f64> = distributions
        .iter()
        .map(|row| {
            let p = ProbabilityDistribution::new(row.clone()).expect("stochastic row");
            confidence_normalized(&p, p.len()).expect("vocab > 1")
        })
        .collect();
    let mask = vec![false; per_step.len()];
    sequence_confidence(&per_step, &mask).expect("non-empty")
}

fn sweep(calibration: f64, draws: usize) {
    let spec = NoisyTeacherSpec {
        error_rate: 0.3,
        calibration,
        peak_prob: 0.95,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut clean, mut corrupted) = (Vec::new(), Vec::new());
    for i in 0..draws {
        let ex = gen_last_letter(3, 10_000 + i as u64).expect("example");
        let em = noisy_teacher_emit(&ex, &spec, &mut rng).expect("emission");
        let c = emission_confidence(&em.distributions);
        if em.corrupted {
            corrupted.push(c);
        } else {
            clean.push(c);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!(
        "calibration {:.2}: {:>3} clean (mean conf {:.4})   {:>3} corrupted (mean conf {:.4})",
        calibration,
        clean.len(),
        mean(&clean),
        corrupted.len(),
        mean(&corrupted)
    );
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = NoisyTeacherSpec {
        error_rate: 0.5,
        calibration: 1.0,
        peak_prob: 0.95,
    };
    println!("sample emissions at error rate 0.5:\n");
    for i in 0..6 {
        let ex = gen_last_letter(3, 500 + i).expect("example");
        let em = noisy_teacher_emit(&ex, &spec, &mut rng).expect("emission");
        println!(
            "  gold {:<4} emitted {:<4} corrupted {:<5} confidence {:.4}",
            ex.target_text,
            em.supervision_text,
            em.corrupted,
            emission_confidence(&em.distributions)
        );
    }

    // At calibration 1 a corrupted emission reports uniform rows, so its
    // confidence collapses to 0 and the two populations are fully separable.
    // Lowering calibration keeps wrong answers overconfident and the gap
    // narrows until, at 0, the signal carries no information at all.
    println!("\nconfidence separation over 400 draws, error rate 0.3:\n");
    for calibration in [1.0, 0.75, 0.5, 0.25, 0.0] {
        sweep(calibration, 400);
    }
}
