//! Decoupled-weight-decay adaptive moment optimizer and the linear
//! warmup/decay schedule.
//!
//! The update follows the published rule: moment estimates with bias
//! correction, then `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`,
//! with the decay term multiplied by the learning rate but kept out of
//! the moments. Parameters whose gradient is absent in a step are left
//! completely untouched -- no decay, no moment update -- so a closed
//! gating path implies bit-identical parameters afterwards.

use ndarray::Array2;

use crate::real::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub struct AdamW<R: Real> {
    weight_decay: f64,
    /// Per-tensor update counts: a tensor skipped while its gating path is
    /// closed keeps its own bias-correction clock.
    t: Vec<u64>,
    m: Vec<Array2<R>>,
    v: Vec<Array2<R>>,
}

impl<R: Real> AdamW<R> {
    /// State shaped after `params`; one slot per tensor.
    pub fn new(params: &[Array2<R>], weight_decay: f64) -> Self {
        AdamW {
            weight_decay,
            t: vec![0; params.len()],
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t.iter().copied().max().unwrap_or(0)
    }

    /// One update over the whole parameter vector. `grads` aligns with
    /// `params`; `None` entries are skipped entirely.
    pub fn step(&mut self, params: &mut [Array2<R>], grads: &[Option<Array2<R>>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer/param count mismatch");
        assert_eq!(params.len(), grads.len(), "grad/param count mismatch");
        let b1 = R::of(BETA1);
        let b2 = R::of(BETA2);
        let one = R::one();
        let eps = R::of(ADAM_EPS);
        let lr_r = R::of(lr);
        let wd = R::of(self.weight_decay);
        for i in 0..params.len() {
            let Some(g) = &grads[i] else { continue };
            debug_assert_eq!(g.dim(), params[i].dim(), "grad shape mismatch at {i}");
            self.t[i] += 1;
            let bc1 = R::of(1.0 - BETA1.powi(self.t[i] as i32));
            let bc2 = R::of(1.0 - BETA2.powi(self.t[i] as i32));
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut params[i])
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr_r * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
                });
        }
    }
}

/// Learning rate at 1-based `step` of `total` steps: linear ramp over the
/// first `warmup_fraction` of training, then linear decay to zero at the
/// final step.
pub fn lr_at(step: usize, total: usize, base_lr: f64, warmup_fraction: f64) -> f64 {
    assert!(step >= 1 && step <= total, "step {step} outside 1..={total}");
    let w = warmup_fraction * total as f64;
    let s = step as f64;
    if s <= w {
        base_lr * s / w
    } else {
        base_lr * (total as f64 - s) / (total as f64 - w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_trace_matches_hand_computation() {
        // Scalar parameter, worked through the published update rule with
        // explicit arithmetic.
        let mut params = vec![Array2::from_elem((1, 1), 1.0f64)];
        let mut opt = AdamW::new(&params, 0.01);
        let lr = 0.1;

        let g1 = 0.5f64;
        opt.step(&mut params, &[Some(Array2::from_elem((1, 1), g1))], lr);
        let m1 = 0.1 * g1;
        let v1 = 0.001 * g1 * g1;
        let m1_hat = m1 / (1.0 - 0.9f64.powi(1));
        let v1_hat = v1 / (1.0 - 0.999f64.powi(1));
        let p1 = 1.0 - lr * (m1_hat / (v1_hat.sqrt() + 1e-8) + 0.01 * 1.0);
        assert!((params[0][(0, 0)] - p1).abs() < 1e-15, "step 1: {} vs {}", params[0][(0, 0)], p1);

        let g2 = -0.25f64;
        opt.step(&mut params, &[Some(Array2::from_elem((1, 1), g2))], lr);
        let m2 = 0.9 * m1 + 0.1 * g2;
        let v2 = 0.999 * v1 + 0.001 * g2 * g2;
        let m2_hat = m2 / (1.0 - 0.9f64.powi(2));
        let v2_hat = v2 / (1.0 - 0.999f64.powi(2));
        let p2 = p1 - lr * (m2_hat / (v2_hat.sqrt() + 1e-8) + 0.01 * p1);
        assert!((params[0][(0, 0)] - p2).abs() < 1e-15, "step 2: {} vs {}", params[0][(0, 0)], p2);
    }

    #[test]
    fn decay_is_decoupled_from_moments() {
        // With zero gradient supplied explicitly, only the decay term acts.
        let mut params = vec![Array2::from_elem((1, 1), 2.0f64)];
        let mut opt = AdamW::new(&params, 0.5);
        opt.step(&mut params, &[Some(Array2::zeros((1, 1)))], 0.1);
        // m and v stay 0, so the adaptive term is 0/(0+eps) = 0.
        assert!((params[0][(0, 0)] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn absent_gradient_leaves_parameter_untouched() {
        let mut params = vec![
            Array2::from_elem((1, 1), 3.0f64),
            Array2::from_elem((1, 1), 4.0f64),
        ];
        let mut opt = AdamW::new(&params, 0.9);
        opt.step(
            &mut params,
            &[None, Some(Array2::from_elem((1, 1), 1.0))],
            0.1,
        );
        assert_eq!(params[0][(0, 0)], 3.0, "no grad, no touch");
        assert_ne!(params[1][(0, 0)], 4.0);
    }

    #[test]
    fn schedule_is_linear_warmup_then_linear_decay() {
        let total = 200;
        let base = 3e-4;
        let frac = 0.05;
        let w = frac * total as f64;
        for s in 1..=total {
            let got = lr_at(s, total, base, frac);
            let expect = if s as f64 <= w {
                base * s as f64 / w
            } else {
                base * (total as f64 - s as f64) / (total as f64 - w)
            };
            assert!((got - expect).abs() < 1e-18, "step {s}");
        }
        assert!((lr_at(10, 200, base, frac) - base).abs() < 1e-18, "end of warmup hits base");
        assert_eq!(lr_at(200, 200, base, frac), 0.0, "final step decays to zero");
        // No warmup: pure decay from the base rate.
        assert!((lr_at(1, 100, base, 0.0) - base * 99.0 / 100.0).abs() < 1e-18);
    }

    #[test]
    fn skipped_steps_do_not_advance_a_tensors_clock() {
        // A tensor first updated at global step 2 follows the same
        // trajectory as one updated at a fresh optimizer's step 1.
        let mut params = vec![Array2::from_elem((1, 1), 1.0f64)];
        let mut a = AdamW::new(&params, 0.0);
        let g = Array2::from_elem((1, 1), 0.3f64);
        a.step(&mut params, &[None], 0.1);
        a.step(&mut params, &[Some(g.clone())], 0.1);

        let mut params_b = vec![Array2::from_elem((1, 1), 1.0f64)];
        let mut b = AdamW::new(&params_b, 0.0);
        b.step(&mut params_b, &[Some(g)], 0.1);
        assert_eq!(params[0][(0, 0)], params_b[0][(0, 0)]);
        assert_eq!(a.steps_taken(), 1);
    }
}
