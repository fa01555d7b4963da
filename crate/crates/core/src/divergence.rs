//! Total-variation and KL divergences: exact, binary (sampled token vs rest) and
//! Top-K (behavior top-K plus the sampled token, tail aggregated into one cell).
//! The binary and Top-K forms are lower bounds on the exact divergence.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dist::{Distribution, Token};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Sentinel for an infinite KL divergence.
pub const KL_INF: f64 = f64::MAX;

/// Clamp applied to the trainer probability in the binary KL.
pub const KL_BINARY_CLAMP: f64 = 1e-12;

pub const DEFAULT_TOP_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Tv,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Approx {
    Exact,
    Binary,
    TopK(usize),
}

/// Which divergence a trust-region mask measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DivergenceKind {
    pub metric: Metric,
    pub approx: Approx,
}

impl DivergenceKind {
    pub const fn new(metric: Metric, approx: Approx) -> Self {
        Self { metric, approx }
    }

    pub const fn binary_tv() -> Self {
        Self::new(Metric::Tv, Approx::Binary)
    }

    pub const fn binary_kl() -> Self {
        Self::new(Metric::Kl, Approx::Binary)
    }

    pub fn validate(&self) -> Result<()> {
        match self.approx {
            Approx::TopK(0) => Err(Error::Config("top-k divergence needs k >= 1".into())),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Tv => "tv",
            Metric::Kl => "kl",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tv" => Ok(Metric::Tv),
            "kl" => Ok(Metric::Kl),
            _ => Err(Error::Config(format!("unknown divergence metric {s:?} (expected tv or kl)"))),
        }
    }
}

fn check_len(p: &Distribution, q: &Distribution) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch { left: p.len(), right: q.len() });
    }
    Ok(())
}

fn tv_slices(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn kl_slices(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return KL_INF;
            }
            total += a * (a / b).ln();
        }
    }
    // rounding can leave a tiny negative value
    total.max(0.0)
}

/// `½ Σ |p_a − q_a|`.
pub fn tv_exact(p: &Distribution, q: &Distribution) -> Result<f64> {
    check_len(p, q)?;
    Ok(tv_slices(p.probs(), q.probs()))
}

/// `Σ p_a ln(p_a/q_a)`, or [`KL_INF`] when `p` is not absolutely continuous w.r.t. `q`.
pub fn kl_exact(p: &Distribution, q: &Distribution) -> Result<f64> {
    check_len(p, q)?;
    Ok(kl_slices(p.probs(), q.probs()))
}

/// Binary TV: `|μ_a − π_a|`.
pub fn tv_binary(mu_a: f64, pi_a: f64) -> f64 {
    (mu_a - pi_a).abs()
}

/// KL between the Bernoulli distributions `(μ_a, 1−μ_a)` and `(π_a, 1−π_a)`.
pub fn kl_binary(mu_a: f64, pi_a: f64) -> f64 {
    let pi_a = pi_a.clamp(KL_BINARY_CLAMP, 1.0 - KL_BINARY_CLAMP);
    let mu_a = mu_a.clamp(0.0, 1.0);
    let term = |p: f64, q: f64| if p > 0.0 { p * (p / q).ln() } else { 0.0 };
    (term(mu_a, pi_a) + term(1.0 - mu_a, 1.0 - pi_a)).max(0.0)
}

/// Token set `TopK(μ, K) ∪ {sampled}`, ties broken by lower id.
pub fn topk_support(mu: &Distribution, k: usize, sampled: Token) -> Vec<Token> {
    let mut idx: Vec<Token> = (0..mu.len() as Token).collect();
    idx.sort_by(|&a, &b| mu.prob(b).total_cmp(&mu.prob(a)).then(a.cmp(&b)));
    idx.truncate(k.min(mu.len()));
    if !idx.contains(&sampled) {
        idx.push(sampled);
    }
    idx
}

/// Reduced categorical pair over `support ∪ {other}`. The other cell is summed
/// directly over the tail rather than taken as a complement.
fn reduce(mu: &[f64], pi: &[f64], support: &[Token]) -> (Vec<f64>, Vec<f64>) {
    let mut in_support = vec![false; mu.len()];
    let mut rm = Vec::with_capacity(support.len() + 1);
    let mut rp = Vec::with_capacity(support.len() + 1);
    for &t in support {
        in_support[t as usize] = true;
        rm.push(mu[t as usize]);
        rp.push(pi[t as usize]);
    }
    let (mut om, mut op) = (0.0, 0.0);
    for (i, inside) in in_support.iter().enumerate() {
        if !inside {
            om += mu[i];
            op += pi[i];
        }
    }
    rm.push(om);
    rp.push(op);
    (rm, rp)
}

/// Reduced pair from a recorded behavior top-K list and the full trainer row.
/// The behavior tail mass is the complement of the recorded entries.
pub fn reduce_recorded(mu_top: &[(Token, f64)], pi: &Distribution) -> (Vec<f64>, Vec<f64>) {
    let mut rm: Vec<f64> = mu_top.iter().map(|(_, p)| *p).collect();
    let mut rp: Vec<f64> = mu_top.iter().map(|(t, _)| pi.prob(*t)).collect();
    let om = (1.0 - rm.iter().sum::<f64>()).max(0.0);
    let op = (1.0 - rp.iter().sum::<f64>()).max(0.0);
    rm.push(om);
    rp.push(op);
    (rm, rp)
}

fn check_sampled(mu: &Distribution, sampled: Token) -> Result<()> {
    if sampled as usize >= mu.len() {
        return Err(Error::InvalidDistribution(format!("sampled token {sampled} outside vocab {}", mu.len())));
    }
    Ok(())
}

/// TV over the Top-K reduction.
pub fn tv_topk(mu: &Distribution, pi: &Distribution, k: usize, sampled: Token) -> Result<f64> {
    check_len(mu, pi)?;
    check_sampled(mu, sampled)?;
    let (rm, rp) = reduce(mu.probs(), pi.probs(), &topk_support(mu, k, sampled));
    Ok(tv_slices(&rm, &rp))
}

/// KL over the Top-K reduction.
pub fn kl_topk(mu: &Distribution, pi: &Distribution, k: usize, sampled: Token) -> Result<f64> {
    check_len(mu, pi)?;
    check_sampled(mu, sampled)?;
    let (rm, rp) = reduce(mu.probs(), pi.probs(), &topk_support(mu, k, sampled));
    Ok(kl_slices(&rm, &rp))
}

/// TV over the Top-K reduction for a precomputed support (must include the sampled token).
pub fn tv_on_support(mu: &Distribution, pi: &Distribution, support: &[Token]) -> f64 {
    let (rm, rp) = reduce(mu.probs(), pi.probs(), support);
    tv_slices(&rm, &rp)
}

/// KL over the Top-K reduction for a precomputed support.
pub fn kl_on_support(mu: &Distribution, pi: &Distribution, support: &[Token]) -> f64 {
    let (rm, rp) = reduce(mu.probs(), pi.probs(), support);
    kl_slices(&rm, &rp)
}

/// TV or KL of a reduced pair.
pub fn reduced_divergence(metric: Metric, rm: &[f64], rp: &[f64]) -> f64 {
    match metric {
        Metric::Tv => tv_slices(rm, rp),
        Metric::Kl => kl_slices(rm, rp),
    }
}

/// Exact divergence of the given metric.
pub fn exact(metric: Metric, mu: &Distribution, pi: &Distribution) -> Result<f64> {
    match metric {
        Metric::Tv => tv_exact(mu, pi),
        Metric::Kl => kl_exact(mu, pi),
    }
}

/// Divergence of `kind` between full rows, with `sampled` the token drawn from `mu`.
pub fn divergence(kind: DivergenceKind, mu: &Distribution, pi: &Distribution, sampled: Token) -> Result<f64> {
    check_len(mu, pi)?;
    check_sampled(mu, sampled)?;
    Ok(match (kind.metric, kind.approx) {
        (m, Approx::Exact) => exact(m, mu, pi)?,
        (Metric::Tv, Approx::Binary) => tv_binary(mu.prob(sampled), pi.prob(sampled)),
        (Metric::Kl, Approx::Binary) => kl_binary(mu.prob(sampled), pi.prob(sampled)),
        (Metric::Tv, Approx::TopK(k)) => tv_topk(mu, pi, k, sampled)?,
        (Metric::Kl, Approx::TopK(k)) => kl_topk(mu, pi, k, sampled)?,
    })
}

/// Single-draw-average estimate `½ mean |π(a)/μ(a) − 1|` over `n` draws `a ∼ μ`.
pub fn tv_mc_estimate(mu: &Distribution, pi: &Distribution, n: usize, rng: &mut RngStream) -> Result<f64> {
    check_len(mu, pi)?;
    if n == 0 {
        return Err(Error::Config("Monte-Carlo estimate needs n >= 1".into()));
    }
    let mut total = 0.0;
    for _ in 0..n {
        let a = crate::dist::sample(mu, rng);
        let m = crate::dist::guard_prob(mu.prob(a));
        total += (pi.prob(a) / m - 1.0).abs();
    }
    Ok(0.5 * total / n as f64)
}

/// `½ KL − TV²`; non-negative by Pinsker's inequality.
pub fn pinsker_gap(p: &Distribution, q: &Distribution) -> Result<f64> {
    let kl = kl_exact(p, q)?;
    let tv = tv_exact(p, q)?;
    Ok(0.5 * kl - tv * tv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn d(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn tv_exact_examples() {
        let p = d(&[0.7, 0.2, 0.05, 0.05]);
        assert_eq!(tv_exact(&p, &p).unwrap(), 0.0);
        assert_eq!(tv_exact(&d(&[1.0, 0.0]), &d(&[0.0, 1.0])).unwrap(), 1.0);
        assert_abs_diff_eq!(tv_exact(&p, &d(&[0.5, 0.3, 0.1, 0.1])).unwrap(), 0.2, epsilon = 1e-15);
        assert!(tv_exact(&p, &d(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn kl_exact_examples() {
        let p = d(&[0.5, 0.5]);
        assert_eq!(kl_exact(&p, &p).unwrap(), 0.0);
        assert_abs_diff_eq!(kl_exact(&d(&[1.0, 0.0]), &p).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert_abs_diff_eq!(kl_exact(&p, &d(&[0.9, 0.1])).unwrap(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 0.5108, epsilon = 1e-4);
        assert_eq!(kl_exact(&p, &d(&[1.0, 0.0])).unwrap(), KL_INF);
    }

    #[test]
    fn binary_examples() {
        assert_abs_diff_eq!(tv_binary(1e-4, 1e-2), 0.0099, epsilon = 1e-15);
        assert_abs_diff_eq!(tv_binary(0.99, 0.80), 0.19, epsilon = 1e-12);
        assert_eq!(tv_binary(0.3, 0.3), 0.0);
        assert_eq!(kl_binary(0.3, 0.3), 0.0);
        // oracle: direct evaluation of the Bernoulli KL
        let oracle = |m: f64, p: f64| m * (m / p).ln() + (1.0 - m) * ((1.0 - m) / (1.0 - p)).ln();
        assert_abs_diff_eq!(kl_binary(0.99, 0.80), oracle(0.99, 0.80), epsilon = 1e-15);
        assert_abs_diff_eq!(kl_binary(0.99, 0.80), 0.18100, epsilon = 1e-5);
        assert_abs_diff_eq!(kl_binary(1e-4, 1e-2), oracle(1e-4, 1e-2), epsilon = 1e-15);
        assert_abs_diff_eq!(kl_binary(1e-4, 1e-2), 0.00948882, epsilon = 1e-8);
        assert!(kl_binary(0.5, 0.0).is_finite());
    }

    #[test]
    fn topk_examples() {
        let mu = d(&[0.7, 0.2, 0.05, 0.05]);
        let pi = d(&[0.5, 0.3, 0.1, 0.1]);
        assert_abs_diff_eq!(tv_topk(&mu, &pi, 1, 0).unwrap(), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(tv_topk(&mu, &pi, 4, 2).unwrap(), tv_exact(&mu, &pi).unwrap(), epsilon = 1e-15);
        let mu = d(&[0.4, 0.3, 0.2, 0.1]);
        let pi = d(&[0.3, 0.4, 0.1, 0.2]);
        assert_abs_diff_eq!(tv_topk(&mu, &pi, 1, 0).unwrap(), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(tv_exact(&mu, &pi).unwrap(), 0.2, epsilon = 1e-15);
        assert_eq!(kl_topk(&mu, &mu, 2, 3).unwrap(), 0.0);
        assert_abs_diff_eq!(kl_topk(&mu, &pi, 10, 1).unwrap(), kl_exact(&mu, &pi).unwrap(), epsilon = 1e-15);
    }

    #[test]
    fn topk_support_includes_sampled_and_breaks_ties_low() {
        let mu = d(&[0.25, 0.25, 0.25, 0.25]);
        assert_eq!(topk_support(&mu, 2, 3), vec![0, 1, 3]);
        assert_eq!(topk_support(&mu, 2, 1), vec![0, 1]);
    }

    #[test]
    fn recorded_reduction_matches_full() {
        let mu = d(&[0.4, 0.3, 0.2, 0.1]);
        let pi = d(&[0.3, 0.4, 0.1, 0.2]);
        let top: Vec<(Token, f64)> = topk_support(&mu, 2, 3).into_iter().map(|t| (t, mu.prob(t))).collect();
        let (rm, rp) = reduce_recorded(&top, &pi);
        assert_abs_diff_eq!(reduced_divergence(Metric::Tv, &rm, &rp), tv_topk(&mu, &pi, 2, 3).unwrap(), epsilon = 1e-15);
    }

    #[test]
    fn mc_estimate_examples() {
        let mu = d(&[0.6, 0.3, 0.1]);
        let mut rng = RngStream::new(5, 0);
        assert_eq!(tv_mc_estimate(&mu, &mu, 17, &mut rng).unwrap(), 0.0);
        let pi = d(&[0.2, 0.5, 0.3]);
        let mut rng = RngStream::new(5, 1);
        let one = tv_mc_estimate(&mu, &pi, 1, &mut rng).unwrap();
        let mut rng = RngStream::new(5, 1);
        let a = crate::dist::sample(&mu, &mut rng);
        assert_eq!(one, 0.5 * (pi.prob(a) / mu.prob(a) - 1.0).abs());
    }

    #[test]
    fn pinsker_examples() {
        let p = d(&[1.0, 0.0]);
        let q = d(&[0.5, 0.5]);
        assert_eq!(pinsker_gap(&q, &q).unwrap(), 0.0);
        assert_abs_diff_eq!(pinsker_gap(&p, &q).unwrap(), 0.5 * 2f64.ln() - 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(pinsker_gap(&p, &q).unwrap(), 0.0966, epsilon = 1e-4);
    }
}
