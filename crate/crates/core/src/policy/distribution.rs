use std::f64::consts::LN_2;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::world::AgentAction;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal Gaussian over (thrust, turn) and a two-way categorical over the signal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionDistribution {
    pub mean: [f64; 2],
    pub log_std: [f64; 2],
    /// Index 0 is "no signal", index 1 "signal raised".
    pub logits: [f64; 2],
}

/// Gradient of some scalar with respect to the distribution parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DistGrad {
    pub mean: [f64; 2],
    pub log_std: [f64; 2],
    pub logits: [f64; 2],
}

impl DistGrad {
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            mean: self.mean.map(|v| v * k),
            log_std: self.log_std.map(|v| v * k),
            logits: self.logits.map(|v| v * k),
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        let add2 = |a: [f64; 2], b: [f64; 2]| [a[0] + b[0], a[1] + b[1]];
        Self {
            mean: add2(self.mean, o.mean),
            log_std: add2(self.log_std, o.log_std),
            logits: add2(self.logits, o.logits),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledAction {
    /// Clamped action handed to the world.
    pub action: AgentAction,
    /// Pre-clamp Gaussian sample; log-probabilities are evaluated here.
    pub raw: [f64; 2],
    pub log_prob: f64,
}

impl ActionDistribution {
    pub fn std(&self) -> [f64; 2] {
        self.log_std.map(f64::exp)
    }

    fn log_softmax(&self) -> [f64; 2] {
        let m = self.logits[0].max(self.logits[1]);
        let lse = m + ((self.logits[0] - m).exp() + (self.logits[1] - m).exp()).ln();
        [self.logits[0] - lse, self.logits[1] - lse]
    }

    pub fn probs(&self) -> [f64; 2] {
        self.log_softmax().map(f64::exp)
    }

    pub fn gaussian_log_density(&self, raw: [f64; 2]) -> f64 {
        (0..2)
            .map(|d| {
                let z = (raw[d] - self.mean[d]) / self.log_std[d].exp();
                -0.5 * z * z - self.log_std[d] - HALF_LN_2PI
            })
            .sum()
    }

    pub fn log_prob(&self, raw: [f64; 2], signal: bool) -> f64 {
        self.gaussian_log_density(raw) + self.log_softmax()[usize::from(signal)]
    }

    pub fn gaussian_entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| 0.5 + HALF_LN_2PI + ls).sum()
    }

    /// In `[0, ln 2]`.
    pub fn categorical_entropy(&self) -> f64 {
        let lp = self.log_softmax();
        let h = -(0..2).map(|i| lp[i].exp() * lp[i]).sum::<f64>();
        h.clamp(0.0, LN_2)
    }

    pub fn entropy(&self) -> f64 {
        self.gaussian_entropy() + self.categorical_entropy()
    }

    /// `∂ log π(raw, signal) / ∂(mean, log_std, logits)`.
    pub fn log_prob_grad(&self, raw: [f64; 2], signal: bool) -> DistGrad {
        let mut g = DistGrad::default();
        for d in 0..2 {
            let std = self.log_std[d].exp();
            let z = (raw[d] - self.mean[d]) / std;
            g.mean[d] = z / std;
            g.log_std[d] = z * z - 1.0;
        }
        let p = self.probs();
        let k = usize::from(signal);
        for i in 0..2 {
            g.logits[i] = f64::from(u8::from(i == k)) - p[i];
        }
        g
    }

    /// `∂ entropy / ∂(mean, log_std, logits)`.
    pub fn entropy_grad(&self) -> DistGrad {
        let lp = self.log_softmax();
        let h = -(0..2).map(|i| lp[i].exp() * lp[i]).sum::<f64>();
        DistGrad {
            mean: [0.0; 2],
            log_std: [1.0; 2],
            logits: [0, 1].map(|i| -lp[i].exp() * (lp[i] + h)),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> SampledAction {
        let std = self.std();
        let mut raw = [0.0; 2];
        for d in 0..2 {
            let e: f64 = rng.sample(StandardNormal);
            raw[d] = self.mean[d] + std[d] * e;
        }
        let signal = rng.random::<f64>() < self.probs()[1];
        SampledAction {
            action: AgentAction::new(raw[0], raw[1], signal).clamped(),
            raw,
            log_prob: self.log_prob(raw, signal),
        }
    }

    /// Mean action and most likely signal (ties to no signal).
    pub fn mode(&self) -> SampledAction {
        let signal = self.logits[1] > self.logits[0];
        SampledAction {
            action: AgentAction::new(self.mean[0], self.mean[1], signal).clamped(),
            raw: self.mean,
            log_prob: self.log_prob(self.mean, signal),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::f64::consts::PI;
    use rand_chacha::ChaCha8Rng;

    fn dist(mean: [f64; 2], log_std: [f64; 2], logits: [f64; 2]) -> ActionDistribution {
        ActionDistribution {
            mean,
            log_std,
            logits,
        }
    }

    #[test]
    fn half_ln_two_pi() {
        assert!((HALF_LN_2PI - 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn density_at_mean_unit_std() {
        let d = dist([0.3, -0.2], [0.0, 0.0], [0.0, 0.0]);
        assert!((d.gaussian_log_density([0.3, -0.2]) - 2.0 * -HALF_LN_2PI).abs() < 1e-15);
        assert!((d.categorical_entropy() - LN_2).abs() < 1e-15);
    }

    #[test]
    fn degenerate_std_samples_mean() {
        let d = dist([0.4, -0.7], [-60.0, -60.0], [0.0, 0.0]);
        let s = d.sample(&mut ChaCha8Rng::seed_from_u64(1));
        assert!((s.raw[0] - 0.4).abs() < 1e-20 && (s.raw[1] + 0.7).abs() < 1e-20);
    }

    #[test]
    fn saturated_logits() {
        let d = dist([0.0; 2], [0.0; 2], [1e6, -1e6]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!((0..1000).all(|_| !d.sample(&mut rng).action.signal));
        assert!(d.probs()[0] == 1.0);
        assert!(d.categorical_entropy() >= 0.0);
    }

    #[test]
    fn clamping_happens_after_sampling() {
        let d = dist([5.0, -5.0], [-30.0; 2], [0.0; 2]);
        let s = d.sample(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!((s.action.thrust, s.action.turn), (1.0, -1.0));
        assert!((s.raw[0] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn gradients_match_differences() {
        let d = dist([0.2, -0.4], [-0.3, 0.25], [0.6, -0.1]);
        let raw = [0.9, -1.1];
        let h = 1e-6;
        let g = d.log_prob_grad(raw, true);
        let eg = d.entropy_grad();
        for i in 0..2 {
            let mut p = d;
            let mut m = d;
            p.mean[i] += h;
            m.mean[i] -= h;
            assert!(((p.log_prob(raw, true) - m.log_prob(raw, true)) / (2.0 * h) - g.mean[i]).abs() < 1e-7);
            let mut p = d;
            let mut m = d;
            p.log_std[i] += h;
            m.log_std[i] -= h;
            assert!(((p.log_prob(raw, true) - m.log_prob(raw, true)) / (2.0 * h) - g.log_std[i]).abs() < 1e-7);
            assert!(((p.entropy() - m.entropy()) / (2.0 * h) - eg.log_std[i]).abs() < 1e-7);
            let mut p = d;
            let mut m = d;
            p.logits[i] += h;
            m.logits[i] -= h;
            assert!(((p.log_prob(raw, true) - m.log_prob(raw, true)) / (2.0 * h) - g.logits[i]).abs() < 1e-7);
            assert!(((p.entropy() - m.entropy()) / (2.0 * h) - eg.logits[i]).abs() < 1e-7);
        }
    }
}
