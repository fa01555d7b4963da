//! Vocabularies and categorical distributions.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Token id, `0..vocab.size()`.
pub type Token = u32;

/// Smallest probability used as a divisor.
pub const PROB_FLOOR: f64 = 1e-12;

static FLOORED_PROBS: AtomicU64 = AtomicU64::new(0);

/// Floors a probability used as a divisor at [`PROB_FLOOR`], counting every hit.
#[inline]
pub fn guard_prob(p: f64) -> f64 {
    if p < PROB_FLOOR {
        FLOORED_PROBS.fetch_add(1, Ordering::Relaxed);
        PROB_FLOOR
    } else {
        p
    }
}

/// Number of times [`guard_prob`] has floored a probability in this process.
pub fn floored_prob_count() -> u64 {
    FLOORED_PROBS.load(Ordering::Relaxed)
}

/// The action space: token ids `0..size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Vocab(usize);

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!("vocab size must be >= 2, got {size}")));
        }
        Ok(Self(size))
    }

    pub fn size(self) -> usize {
        self.0
    }

    pub fn tokens(self) -> impl Iterator<Item = Token> {
        0..self.0 as Token
    }
}

/// A probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates non-negativity and normalisation (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidDistribution(format!("need at least 2 entries, got {}", probs.len())));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidDistribution(format!("entry {i} is {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!("entries sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Normalises non-negative weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidDistribution(format!("cannot normalise weights with total {total}")));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(vocab: Vocab) -> Self {
        let n = vocab.size();
        Self { probs: vec![1.0 / n as f64; n] }
    }

    /// Point mass on `token`.
    pub fn point(vocab: Vocab, token: Token) -> Self {
        let mut probs = vec![0.0; vocab.size()];
        probs[token as usize] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: Token) -> f64 {
        self.probs[token as usize]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    pub fn entropy(&self) -> f64 {
        entropy(self)
    }
}

/// `ln Σ exp(x_i)` computed with the max shift.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::InvalidLogits(format!("need at least 2 logits, got {}", logits.len())));
    }
    if let Some((i, x)) = logits.iter().enumerate().find(|(_, x)| !x.is_finite()) {
        return Err(Error::InvalidLogits(format!("logit {i} is {x}")));
    }
    Ok(())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<Distribution> {
    check_logits(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(Distribution { probs: exps.into_iter().map(|e| e / total).collect() })
}

/// Log-probabilities `logit_i - logsumexp(logits)`.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let lse = log_sum_exp(logits);
    Ok(logits.iter().map(|x| x - lse).collect())
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(dist: &Distribution) -> f64 {
    -dist.probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Inverse-CDF draw.
pub fn sample(dist: &Distribution, rng: &mut RngStream) -> Token {
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in dist.probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        last_positive = i;
        if u < acc {
            return i as Token;
        }
    }
    // u landed in the rounding slack above the cumulative sum
    last_positive as Token
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().probs(), &[0.5, 0.5]);
        for x in [-3.0, 0.0, 7.5, 1e3] {
            let d = softmax(&[x; 4]).unwrap();
            for p in d.probs() {
                assert_abs_diff_eq!(*p, 0.25, epsilon = 1e-15);
            }
        }
        let d = softmax(&[3f64.ln(), 0.0]).unwrap();
        assert_abs_diff_eq!(d.prob(0), 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(d.prob(1), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let err = softmax(&[0.0, f64::NAN]).unwrap_err();
        assert!(err.to_string().contains("invalid logits"));
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let d = softmax(&[1000.0, 0.0, -1000.0]).unwrap();
        assert_eq!(d.prob(0), 1.0);
        let sum: f64 = d.probs().iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let logits = [0.3, -1.2, 2.5, 0.0];
        let lp = log_softmax(&logits).unwrap();
        let p = softmax(&logits).unwrap();
        for (l, q) in lp.iter().zip(p.probs()) {
            assert_abs_diff_eq!(l.exp(), *q, epsilon = 1e-15);
        }
    }

    #[test]
    fn entropy_examples() {
        let v3 = Vocab::new(3).unwrap();
        assert_eq!(entropy(&Distribution::point(v3, 0)), 0.0);
        let v2 = Vocab::new(2).unwrap();
        assert_abs_diff_eq!(entropy(&Distribution::uniform(v2)), 2f64.ln(), epsilon = 1e-15);
        let v4 = Vocab::new(4).unwrap();
        assert_abs_diff_eq!(entropy(&Distribution::uniform(v4)), 4f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn sample_deterministic_support() {
        let d = Distribution::new(vec![1.0, 0.0]).unwrap();
        for seed in 0..50 {
            let mut rng = RngStream::new(seed, 0);
            assert_eq!(sample(&d, &mut rng), 0);
        }
        let d = Distribution::new(vec![0.0, 1.0, 0.0]).unwrap();
        let mut rng = RngStream::new(3, 9);
        assert!((0..1000).all(|_| sample(&d, &mut rng) == 1));
    }

    #[test]
    fn sample_frequency_within_three_sigma() {
        // sd of the mean for p = 0.5 and n = 1e6 is 5e-4; 3 sd < 0.002
        let d = Distribution::new(vec![0.5, 0.5]).unwrap();
        let mut rng = RngStream::new(2024, 1);
        let n = 1_000_000;
        let zeros = (0..n).filter(|_| sample(&d, &mut rng) == 0).count();
        let freq = zeros as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.002, "freq {freq}");
    }

    #[test]
    fn sample_stream_determinism() {
        let d = Distribution::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let draw = || {
            let mut rng = RngStream::new(11, 5);
            (0..500).map(|_| sample(&d, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn guard_counts_floors() {
        let before = floored_prob_count();
        assert_eq!(guard_prob(0.0), PROB_FLOOR);
        assert_eq!(guard_prob(0.5), 0.5);
        assert!(floored_prob_count() > before);
    }

    #[test]
    fn distribution_validation() {
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![-0.1, 1.1]).is_err());
        assert!(Distribution::new(vec![1.0]).is_err());
        assert!(Vocab::new(1).is_err());
    }
}
