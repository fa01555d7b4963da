//! Deterministic training/inference mismatch. The rollout distribution μ_θ is a
//! perturbation of the trainer distribution π_θ that depends only on the policy
//! row, the state and a seed, so the bias persists across gradient steps.

use serde::{Deserialize, Serialize};

use crate::dist::{self, Distribution};
use crate::env::{BehaviorSource, Trajectory};
use crate::error::{Error, Result};
use crate::policy::{StateKey, TabularPolicy};
use crate::rng::{hash_words, mix64, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MismatchKind {
    #[default]
    None,
    /// Gaussian noise with standard deviation `sigma` added to the logits.
    LogitNoise { sigma: f64 },
    /// Probabilities rounded to `bits` mantissa bits, then renormalized.
    Quantize { bits: u32 },
    /// Logits divided by `1 + δ_s`, `δ_s` uniform in `[-jitter, jitter]`.
    TempJitter { jitter: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MismatchConfig {
    pub kind: MismatchKind,
    pub seed: u64,
}

impl MismatchConfig {
    pub const fn none() -> Self {
        Self { kind: MismatchKind::None, seed: 0 }
    }

    pub const fn logit_noise(sigma: f64, seed: u64) -> Self {
        Self { kind: MismatchKind::LogitNoise { sigma }, seed }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            MismatchKind::None => Ok(()),
            MismatchKind::LogitNoise { sigma } if sigma.is_finite() && sigma >= 0.0 => Ok(()),
            MismatchKind::LogitNoise { sigma } => Err(Error::Config(format!("mismatch.sigma must be >= 0, got {sigma}"))),
            MismatchKind::Quantize { bits } if (4..=52).contains(&bits) => Ok(()),
            MismatchKind::Quantize { bits } => Err(Error::Config(format!("mismatch.bits must lie in [4, 52], got {bits}"))),
            MismatchKind::TempJitter { jitter } if jitter.is_finite() && (0.0..1.0).contains(&jitter) => Ok(()),
            MismatchKind::TempJitter { jitter } => {
                Err(Error::Config(format!("mismatch.jitter must lie in [0, 1), got {jitter}")))
            }
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self.kind, MismatchKind::None)
    }
}

fn state_seed(seed: u64, state: &StateKey) -> u64 {
    hash_words([seed, state.stable_hash()])
}

/// Rounds `x > 0` to `bits` mantissa bits, ties away from zero.
pub fn round_mantissa(x: f64, bits: u32) -> f64 {
    if x == 0.0 || !x.is_finite() || bits >= 52 {
        return x;
    }
    let drop = 52 - bits;
    let raw = x.to_bits();
    let half = 1u64 << (drop - 1);
    let mask = !((1u64 << drop) - 1);
    // carrying into the exponent field is the correct rounding behaviour
    f64::from_bits((raw + half) & mask)
}

/// μ_θ(·|s) for the given trainer row.
pub fn perturb(logits: &[f64], state: &StateKey, cfg: &MismatchConfig) -> Result<Distribution> {
    match cfg.kind {
        MismatchKind::None => dist::softmax(logits),
        MismatchKind::LogitNoise { sigma } => {
            if sigma == 0.0 {
                return dist::softmax(logits);
            }
            let mut rng = RngStream::new(state_seed(cfg.seed, state), 0x6e6f697365);
            let noisy: Vec<f64> = logits
                .iter()
                .map(|l| l + sigma * rng.normal())
                .collect();
            dist::softmax(&noisy)
        }
        MismatchKind::Quantize { bits } => {
            let exact = dist::softmax(logits)?;
            let rounded: Vec<f64> = exact.probs().iter().map(|p| round_mantissa(*p, bits)).collect();
            Distribution::from_weights(rounded)
        }
        MismatchKind::TempJitter { jitter } => {
            let h = mix64(state_seed(cfg.seed, state) ^ 0x7465_6d70);
            let u = (h >> 11) as f64 / (1u64 << 53) as f64;
            let delta = jitter * (2.0 * u - 1.0);
            let scaled: Vec<f64> = logits.iter().map(|l| l / (1.0 + delta)).collect();
            dist::softmax(&scaled)
        }
    }
}

/// The rollout distribution μ_θ(·|s) of `policy` under `cfg`.
pub fn rollout_distribution(policy: &TabularPolicy, state: &StateKey, cfg: &MismatchConfig) -> Result<Distribution> {
    match policy.logits(state) {
        Some(l) => perturb(l, state, cfg),
        None => perturb(&vec![0.0; policy.vocab().size()], state, cfg),
    }
}

/// A policy seen through the mismatch injector, usable as a rollout source.
#[derive(Debug, Clone, Copy)]
pub struct RolloutView<'a> {
    pub policy: &'a TabularPolicy,
    pub cfg: MismatchConfig,
}

impl BehaviorSource for RolloutView<'_> {
    fn behavior(&self, state: &StateKey) -> Result<Distribution> {
        rollout_distribution(self.policy, state, &self.cfg)
    }
}

/// Mean over all steps of `|π_θ'(y_t|s_t) − μ_θ'(y_t|s_t)|`.
pub fn mismatch_mean(trajectories: &[Trajectory]) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for t in trajectories {
        for s in &t.steps {
            total += (s.trainer_prob - s.rollout_prob).abs();
            n += 1;
        }
    }
    if n == 0 { 0.0 } else { total / n as f64 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::tv_exact;
    use crate::dist::Vocab;
    use crate::env::StepRecord;

    fn row() -> (TabularPolicy, StateKey) {
        let mut p = TabularPolicy::new(Vocab::new(4).unwrap());
        let s = StateKey::new(3, vec![1, 2]);
        p.set_logits(s.clone(), vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        (p, s)
    }

    #[test]
    fn none_and_zero_noise_are_identity() {
        let (p, s) = row();
        let exact = p.distribution(&s);
        assert_eq!(rollout_distribution(&p, &s, &MismatchConfig::none()).unwrap(), exact);
        assert_eq!(rollout_distribution(&p, &s, &MismatchConfig::logit_noise(0.0, 9)).unwrap(), exact);
    }

    #[test]
    fn perturbations_are_deterministic_and_valid() {
        let (p, s) = row();
        for kind in [
            MismatchKind::LogitNoise { sigma: 0.3 },
            MismatchKind::Quantize { bits: 4 },
            MismatchKind::TempJitter { jitter: 0.2 },
        ] {
            let cfg = MismatchConfig { kind, seed: 11 };
            cfg.validate().unwrap();
            let a = rollout_distribution(&p, &s, &cfg).unwrap();
            let b = rollout_distribution(&p, &s, &cfg).unwrap();
            assert_eq!(a.probs().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.probs().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(a.probs().iter().all(|x| *x >= 0.0));
            assert!(tv_exact(&a, &p.distribution(&s)).unwrap() > 0.0);
        }
    }

    #[test]
    fn noise_depends_on_state_and_seed() {
        let p = TabularPolicy::new(Vocab::new(8).unwrap());
        let cfg = MismatchConfig::logit_noise(0.1, 1);
        let a = rollout_distribution(&p, &StateKey::new(0, vec![1]), &cfg).unwrap();
        let b = rollout_distribution(&p, &StateKey::new(0, vec![2]), &cfg).unwrap();
        let c = rollout_distribution(&p, &StateKey::new(0, vec![1]), &MismatchConfig::logit_noise(0.1, 2)).unwrap();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(MismatchConfig { kind: MismatchKind::Quantize { bits: 3 }, seed: 0 }.validate().is_err());
        assert!(MismatchConfig { kind: MismatchKind::Quantize { bits: 53 }, seed: 0 }.validate().is_err());
        assert!(MismatchConfig::logit_noise(-0.1, 0).validate().is_err());
        assert!(MismatchConfig { kind: MismatchKind::TempJitter { jitter: -1.0 }, seed: 0 }.validate().is_err());
    }

    #[test]
    fn mantissa_rounding() {
        assert_eq!(round_mantissa(1.0, 4), 1.0);
        assert_eq!(round_mantissa(0.75, 4), 0.75);
        // 1 + 2^-6 rounds down to 1 at 4 bits, 1 + 2^-5 + 2^-6 rounds up to 1 + 2^-4
        assert_eq!(round_mantissa(1.0 + 2f64.powi(-6), 4), 1.0);
        assert_eq!(round_mantissa(1.0 + 2f64.powi(-5) + 2f64.powi(-6), 4), 1.0 + 2f64.powi(-4));
        assert_eq!(round_mantissa(0.1, 52), 0.1);
    }

    fn step(mu: f64, pi: f64) -> StepRecord {
        StepRecord {
            state: StateKey::root(0),
            token: 0,
            rollout_prob: mu,
            trainer_prob: pi,
            rollout_topk: None,
            trainer_full: None,
        }
    }

    #[test]
    fn mismatch_mean_examples() {
        let t = Trajectory { prompt_id: 0, tokens: vec![0], steps: vec![step(0.8, 0.9)], reward: 0.0 };
        assert!((mismatch_mean(&[t]) - 0.1).abs() < 1e-15);
        assert_eq!(mismatch_mean(&[]), 0.0);
    }

    #[test]
    fn noise_on_uniform_rows_is_small() {
        // golden check at seed 0: TV in (0, 0.1) for at least 99% of 10^4 hashed states
        let p = TabularPolicy::new(Vocab::new(16).unwrap());
        let cfg = MismatchConfig::logit_noise(0.05, 0);
        let uniform = Distribution::uniform(p.vocab());
        let mut inside = 0;
        for i in 0..10_000u32 {
            let s = StateKey::new(i, vec![(i % 16), (i / 16 % 16)]);
            let tv = tv_exact(&rollout_distribution(&p, &s, &cfg).unwrap(), &uniform).unwrap();
            if tv > 0.0 && tv < 0.1 {
                inside += 1;
            }
        }
        assert!(inside >= 9_900, "{inside}");
    }
}
