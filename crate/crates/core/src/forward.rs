//! The absorbing forward process in closed form.
//!
//! With `Q_t = sigma(t) Q` and the absorbing generator `Q`, every transition
//! probability has a closed form in `sigma_bar`, so neither the `N x N` rate
//! matrix nor anything over `N^d` states is ever built.

use rand::Rng;

use crate::error::{domain, RaddError, Result};
use crate::schedule::NoiseSchedule;
use crate::space::{ExactJointTable, SequenceState, Vocab};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardKernel {
    pub schedule: NoiseSchedule,
    pub vocab: Vocab,
}

impl ForwardKernel {
    pub fn new(schedule: NoiseSchedule, vocab: Vocab) -> Self {
        Self { schedule, vocab }
    }

    fn check_interval(&self, s: f64, t: f64) -> Result<()> {
        let horizon = self.schedule.horizon();
        if !(0.0 <= s && s <= t && t <= horizon) {
            return domain(format!("need 0 <= s <= t <= {horizon}, got s={s}, t={t}"));
        }
        Ok(())
    }

    /// Single-token transition probability `p_{t|s}(x_t | x_s)`.
    pub fn transition_prob(&self, x_s: u32, x_t: u32, s: f64, t: f64) -> Result<f64> {
        self.check_interval(s, t)?;
        let mask = self.vocab.mask_id();
        if x_s > mask || x_t > mask {
            return domain(format!("token outside vocabulary: {x_s} -> {x_t}"));
        }
        // exp(-(sigma_bar(t) - sigma_bar(s))) as a ratio of survival probabilities.
        let stay = self.schedule.keep_prob(t) / self.schedule.keep_prob(s);
        Ok(match (x_s == mask, x_t == mask) {
            (true, true) => 1.0,
            (true, false) => 0.0,
            (false, true) => 1.0 - stay,
            (false, false) if x_s == x_t => stay,
            (false, false) => 0.0,
        })
    }

    /// Masks each position of a clean `x0` independently with probability `lambda(t)`.
    ///
    /// One uniform per position, drawn left to right.
    pub fn sample_forward<R: Rng + ?Sized>(
        &self,
        x0: &SequenceState,
        t: f64,
        rng: &mut R,
    ) -> Result<SequenceState> {
        self.schedule.evaluate(t)?;
        if x0.masked_count(self.vocab) > 0 {
            return domain("forward sampling starts from a clean sequence");
        }
        Ok(mask_with_prob(x0, self.schedule.lambda(t), self.vocab, rng))
    }

    /// Marginal `p_t(x_t) = lambda^{d1} (1 - lambda)^{d2} p0(x_t^UM)`.
    pub fn joint_prob(&self, p0: &ExactJointTable, x_t: &SequenceState, t: f64) -> Result<f64> {
        self.schedule.evaluate(t)?;
        let d1 = x_t.masked_count(self.vocab) as i32;
        let d2 = x_t.len() as i32 - d1;
        let marginal = p0.marginal_unmasked(x_t)?;
        Ok(self.schedule.lambda(t).powi(d1) * self.schedule.keep_prob(t).powi(d2) * marginal)
    }

    /// Concrete score `p_t(x_t with x^i = token) / p_t(x_t)` for a masked position `i`.
    pub fn concrete_score(
        &self,
        p0: &ExactJointTable,
        x_t: &SequenceState,
        i: usize,
        token: u32,
        t: f64,
    ) -> Result<f64> {
        self.schedule.evaluate(t)?;
        if t <= 0.0 {
            return domain("the concrete score is unbounded at t = 0");
        }
        if i >= x_t.len() {
            return Err(RaddError::Shape(format!(
                "position {i} out of range for length {}",
                x_t.len()
            )));
        }
        if !x_t.is_masked(i, self.vocab) {
            return Err(RaddError::InvalidTransition(format!(
                "position {i} is unmasked; only mask -> token moves carry a score"
            )));
        }
        if token >= self.vocab.mask_id() {
            return Err(RaddError::InvalidTransition(
                "target must be a data token".into(),
            ));
        }
        let rows = p0.conditional_of(x_t)?;
        Ok(self.schedule.score_scalar(t) * rows[i * self.vocab.n_tokens() + token as usize])
    }

    /// Exact reverse kernel `p_{s|t}(x_s | x_t)` for `s < t`.
    pub fn exact_reverse_prob(
        &self,
        p0: &ExactJointTable,
        x_s: &SequenceState,
        x_t: &SequenceState,
        s: f64,
        t: f64,
    ) -> Result<f64> {
        self.check_interval(s, t)?;
        if s == t {
            return domain("exact reverse kernel needs s < t");
        }
        if x_s.len() != x_t.len() {
            return Err(RaddError::Shape("x_s and x_t differ in length".into()));
        }
        let mask = self.vocab.mask_id();
        let mut d1 = 0i32;
        let mut newly_unmasked = 0i32;
        for (&a, &b) in x_s.tokens().iter().zip(x_t.tokens()) {
            if b == mask {
                d1 += 1;
                if a != mask {
                    newly_unmasked += 1;
                }
            } else if a != b {
                return Ok(0.0);
            }
        }
        let denom = p0.marginal_unmasked(x_t)?;
        if denom <= 0.0 {
            return Err(RaddError::DegenerateContext);
        }
        let numer = p0.marginal_unmasked(x_s)?;
        let (keep_s, keep_t) = (self.schedule.keep_prob(s), self.schedule.keep_prob(t));
        let (lam_s, lam_t) = (self.schedule.lambda(s), self.schedule.lambda(t));
        // At s = 0 every masked token must reveal: lam_s = 0 turns the product into 0^k * inf.
        if lam_s == 0.0 {
            return Ok(if newly_unmasked == d1 {
                numer / denom
            } else {
                0.0
            });
        }
        // Each masked token reveals w.p. (keep_s - keep_t) / lam_t, stays w.p. lam_s / lam_t.
        let reveal = ((keep_s - keep_t) / lam_t).powi(newly_unmasked);
        let stay = (lam_s / lam_t).powi(d1 - newly_unmasked);
        Ok(reveal * stay * numer / denom)
    }
}

/// Masks each position independently with probability `lambda`, one uniform per
/// position left to right.
pub fn mask_with_prob<R: Rng + ?Sized>(
    x0: &SequenceState,
    lambda: f64,
    vocab: Vocab,
    rng: &mut R,
) -> SequenceState {
    let tokens = x0
        .tokens()
        .iter()
        .map(|&tok| {
            if rng.gen::<f64>() < lambda {
                vocab.mask_id()
            } else {
                tok
            }
        })
        .collect();
    SequenceState::new(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn kernel(n: usize) -> ForwardKernel {
        ForwardKernel::new(
            NoiseSchedule::log_linear(1e-3).unwrap(),
            Vocab::new(n).unwrap(),
        )
    }

    fn seq(t: &[u32]) -> SequenceState {
        SequenceState::new(t.to_vec())
    }

    /// Time at which `exp(-sigma_bar) = target` under the kernel's schedule.
    fn time_with_keep(k: &ForwardKernel, target: f64) -> f64 {
        k.schedule.lambda_inverse(1.0 - target).unwrap()
    }

    #[test]
    fn transition_identity_at_equal_times() {
        let k = kernel(3);
        for a in 0..=3 {
            for b in 0..=3 {
                let p = k.transition_prob(a, b, 0.4, 0.4).unwrap();
                assert_eq!(p, if a == b { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn transition_at_ln2_gap_splits_evenly() {
        let k = kernel(3);
        // sigma_bar(t) - sigma_bar(0) = ln 2  <=>  keep(t) = 1/2.
        let t = time_with_keep(&k, 0.5);
        assert!((k.transition_prob(1, 1, 0.0, t).unwrap() - 0.5).abs() < 1e-15);
        assert!((k.transition_prob(1, 3, 0.0, t).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(k.transition_prob(1, 2, 0.0, t).unwrap(), 0.0);
        assert_eq!(k.transition_prob(3, 1, 0.0, t).unwrap(), 0.0);
        assert!(matches!(
            k.transition_prob(1, 1, 0.6, 0.5),
            Err(RaddError::Domain(_))
        ));
    }

    #[test]
    fn forward_sampling_edges() {
        let k = kernel(4);
        let x0 = seq(&[0, 1, 2, 3]);
        let mut rng = seeded(1);
        assert_eq!(k.sample_forward(&x0, 0.0, &mut rng).unwrap(), x0);
        let all = mask_with_prob(&x0, 1.0, k.vocab, &mut rng);
        assert_eq!(all.masked_count(k.vocab), 4);
        assert!(k.sample_forward(&seq(&[0, 4]), 0.5, &mut rng).is_err());
    }

    #[test]
    fn forward_masked_count_concentrates() {
        let k = kernel(2);
        let x0 = SequenceState::new(vec![0; 1000]);
        let t = k.schedule.lambda_inverse(0.25).unwrap();
        let mut rng = seeded(42);
        let trials = 10_000;
        let mean = (0..trials)
            .map(|_| {
                k.sample_forward(&x0, t, &mut rng)
                    .unwrap()
                    .masked_count(k.vocab) as f64
            })
            .sum::<f64>()
            / trials as f64;
        // Binomial(1000, 0.25) has sd 13.69; the mean of 10^4 draws has sd 0.137.
        assert!(
            (mean - 250.0).abs() < 3.0 * (1000.0f64 * 0.25 * 0.75 / trials as f64).sqrt(),
            "mean {mean}"
        );
    }

    #[test]
    fn joint_prob_reference_values() {
        let k = kernel(2);
        let p0 = ExactJointTable::uniform(k.vocab, 2).unwrap();
        assert!((k.joint_prob(&p0, &seq(&[1, 0]), 0.0).unwrap() - 0.25).abs() < 1e-15);
        let t = time_with_keep(&k, 0.5);
        assert!((k.joint_prob(&p0, &seq(&[2, 0]), t).unwrap() - 0.125).abs() < 1e-15);
        let lam = k.schedule.lambda(0.7);
        assert!((k.joint_prob(&p0, &seq(&[2, 2]), 0.7).unwrap() - lam * lam).abs() < 1e-15);
    }

    #[test]
    fn concrete_score_reference_values() {
        let k = kernel(2);
        let p0 = ExactJointTable::uniform(k.vocab, 1).unwrap();
        let t = time_with_keep(&k, 0.5);
        assert!((k.concrete_score(&p0, &seq(&[2]), 0, 1, t).unwrap() - 0.5).abs() < 1e-14);
        assert!(matches!(
            k.concrete_score(&p0, &seq(&[1]), 0, 0, t),
            Err(RaddError::InvalidTransition(_))
        ));
        assert!(k.concrete_score(&p0, &seq(&[2]), 0, 0, 0.0).is_err());

        // Toward lambda -> 1 the scalar vanishes.
        let sched = NoiseSchedule::log_linear(1e-12).unwrap();
        let k2 = ForwardKernel::new(sched, k.vocab);
        assert!(k2.concrete_score(&p0, &seq(&[2]), 0, 1, 1.0).unwrap() < 1e-11);
    }

    #[test]
    fn reverse_prob_edges() {
        let k = kernel(2);
        let mut rng = seeded(8);
        let p0 = ExactJointTable::random(k.vocab, 2, 1.0, &mut rng).unwrap();
        // Token conflict with an unmasked entry of x_t.
        assert_eq!(
            k.exact_reverse_prob(&p0, &seq(&[1, 0]), &seq(&[2, 1]), 0.2, 0.5)
                .unwrap(),
            0.0
        );
        // Staying put over a vanishing interval.
        let x = seq(&[2, 1]);
        let p = k.exact_reverse_prob(&p0, &x, &x, 0.5 - 1e-9, 0.5).unwrap();
        assert!((p - 1.0).abs() < 1e-7);
        assert!(k.exact_reverse_prob(&p0, &x, &x, 0.5, 0.5).is_err());
    }

    #[test]
    fn reverse_prob_normalizes() {
        let k = kernel(3);
        let mut rng = seeded(21);
        let p0 = ExactJointTable::random(k.vocab, 3, 1.0, &mut rng).unwrap();
        let x_t = seq(&[3, 1, 3]);
        for &(s, t) in &[(0.0, 0.5), (0.1, 0.9), (0.5, 0.51)] {
            let mut total = 0.0;
            for a in 0..=3 {
                for c in 0..=3 {
                    total += k
                        .exact_reverse_prob(&p0, &seq(&[a, 1, c]), &x_t, s, t)
                        .unwrap();
                }
            }
            assert!((total - 1.0).abs() < 1e-12, "s={s} t={t} total={total}");
        }
    }
}
