//! Exact checks of the finite-horizon performance-difference identity
//!
//! ```text
//! J(π) − J(μ) = L′ − Δ
//! L′ = E_μ[ R(y) Σ_t (ρ_t − 1) ]
//! Δ  = E_μ[ R(y) Σ_t (ρ_t − 1)(1 − Π_{j>t} ρ_j) ],      ρ_t = π(y_t|s_t)/μ(y_t|s_t)
//! ```
//!
//! and of the improvement bounds `Δ ≤ 2ξT(T−1)·max_s TV²` and
//! `Δ ≤ 4ξ·E_μ[Σ_t TV(μ(·|s_t), π(·|s_t))]`, by enumeration of every response.
//! Quantities are averaged uniformly over prompts.

use crate::dist::{Distribution, Token};
use crate::divergence::tv_exact;
use crate::env::{self, BehaviorSource, EpisodicTokenEnv, DEFAULT_ENUM_CAP};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::policy::{StateKey, TabularPolicy};
use crate::rng::RngStream;

/// Absolute slack for every inequality and identity check.
pub const BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundReport {
    /// `J(π) − J(μ)`.
    pub exact_diff: f64,
    /// `L′_μ(π)`.
    pub surrogate: f64,
    /// `Δ(μ, π)`.
    pub delta: f64,
    /// Largest TV over μ-reachable states.
    pub dtv_max: f64,
    /// `E_μ[Σ_t TV(μ(·|s_t), π(·|s_t))]`.
    pub expected_tv_sum: f64,
    /// `2ξT(T−1)·dtv_max²`.
    pub quad_bound: f64,
    /// `4ξ·expected_tv_sum`.
    pub linear_bound: f64,
    /// Declared reward bound.
    pub xi: f64,
    /// Largest `|R(y)|` over enumerated responses.
    pub xi_empirical: f64,
    /// TV between the sequence distributions of μ and π.
    pub sequence_tv: f64,
    pub horizon: usize,
}

impl BoundReport {
    pub fn composite_bound(&self) -> f64 {
        self.quad_bound.min(self.linear_bound)
    }

    /// Names of every violated check, with the offending values.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let gap = self.exact_diff - (self.surrogate - self.delta);
        if !(gap.abs() <= BOUND_TOL) {
            out.push(format!("identity: J(pi)-J(mu)={} but L'-Delta={} (gap {gap:e})", self.exact_diff, self.surrogate - self.delta));
        }
        if !(self.delta <= self.quad_bound + BOUND_TOL) {
            out.push(format!("quadratic bound: Delta={} > {}", self.delta, self.quad_bound));
        }
        if !(self.delta <= self.linear_bound + BOUND_TOL) {
            out.push(format!("linear bound: Delta={} > {}", self.delta, self.linear_bound));
        }
        if !(self.exact_diff >= self.surrogate - self.composite_bound() - BOUND_TOL) {
            out.push(format!(
                "composite bound: J(pi)-J(mu)={} < L'-min(quad,linear)={}",
                self.exact_diff,
                self.surrogate - self.composite_bound()
            ));
        }
        if !(self.sequence_tv <= self.expected_tv_sum + 1e-10) {
            out.push(format!("sequence TV lemma: {} > {}", self.sequence_tv, self.expected_tv_sum));
        }
        out
    }
}

fn row(src: &dyn BehaviorSource, s: &StateKey, vocab: usize) -> Result<Distribution> {
    let d = src.behavior(s)?;
    if d.len() != vocab {
        return Err(Error::LengthMismatch { left: d.len(), right: vocab });
    }
    Ok(d)
}

#[derive(Debug, Default, Clone, Copy)]
struct Acc {
    j_mu: f64,
    j_pi: f64,
    surrogate: f64,
    delta: f64,
    tv_sum: f64,
    dtv_max: f64,
    seq_tv: f64,
    xi_emp: f64,
}

impl Acc {
    fn merge(&mut self, o: &Acc) {
        self.j_mu += o.j_mu;
        self.j_pi += o.j_pi;
        self.surrogate += o.surrogate;
        self.delta += o.delta;
        self.tv_sum += o.tv_sum;
        self.dtv_max = self.dtv_max.max(o.dtv_max);
        self.seq_tv += o.seq_tv;
        self.xi_emp = self.xi_emp.max(o.xi_emp);
    }
}

struct Walker<'a> {
    env: &'a EpisodicTokenEnv,
    mu: &'a dyn BehaviorSource,
    pi: &'a dyn BehaviorSource,
}

impl Walker<'_> {
    /// Visits the subtree below `state`, whose prefix has probabilities `p_mu`, `p_pi`
    /// and per-step ratios `ratios`.
    fn walk(&self, state: &StateKey, p_mu: f64, p_pi: f64, ratios: &mut Vec<f64>, acc: &mut Acc) -> Result<()> {
        let v = self.env.vocab().size();
        let mu = row(self.mu, state, v)?;
        let pi = row(self.pi, state, v)?;
        if p_mu > 0.0 {
            let tv = tv_exact(&mu, &pi)?;
            acc.tv_sum += p_mu * tv;
            acc.dtv_max = acc.dtv_max.max(tv);
        }
        for a in 0..v as Token {
            let (m, p) = (mu.prob(a), pi.prob(a));
            let (cm, cp) = (p_mu * m, p_pi * p);
            if cm == 0.0 && cp == 0.0 {
                continue;
            }
            let child = state.child(a);
            ratios.push(if m > 0.0 { p / m } else { f64::NAN });
            if self.env.is_terminal(&child.prefix) {
                self.leaf(&child, cm, cp, ratios, acc);
            } else {
                self.walk(&child, cm, cp, ratios, acc)?;
            }
            ratios.pop();
        }
        Ok(())
    }

    fn leaf(&self, leaf: &StateKey, p_mu: f64, p_pi: f64, ratios: &[f64], acc: &mut Acc) {
        let r = self.env.reward(leaf.prompt_id, &leaf.prefix);
        acc.xi_emp = acc.xi_emp.max(r.abs());
        acc.j_mu += p_mu * r;
        acc.j_pi += p_pi * r;
        acc.seq_tv += 0.5 * (p_mu - p_pi).abs();
        if p_mu == 0.0 {
            return;
        }
        let mut tail = 1.0;
        let (mut lin, mut err) = (0.0, 0.0);
        for rho in ratios.iter().rev() {
            lin += rho - 1.0;
            err += (rho - 1.0) * (1.0 - tail);
            tail *= rho;
        }
        acc.surrogate += p_mu * r * lin;
        acc.delta += p_mu * r * err;
    }
}

fn accumulate(env: &EpisodicTokenEnv, mu: &dyn BehaviorSource, pi: &dyn BehaviorSource, cap: u64, exec: Exec) -> Result<Acc> {
    if !env.is_enumerable(cap) {
        return Err(Error::EnumerationTooLarge { count: env.sequence_count(), cap });
    }
    let walker = Walker { env, mu, pi };
    let parts = par::map_slice(exec, env.prompts(), |&p| -> Result<Acc> {
        let mut acc = Acc::default();
        walker.walk(&StateKey::root(p), 1.0, 1.0, &mut Vec::with_capacity(env.horizon()), &mut acc)?;
        Ok(acc)
    });
    let mut total = Acc::default();
    for part in parts {
        total.merge(&part?);
    }
    let n = env.prompts().len() as f64;
    for x in [&mut total.j_mu, &mut total.j_pi, &mut total.surrogate, &mut total.delta, &mut total.tv_sum, &mut total.seq_tv] {
        *x /= n;
    }
    Ok(total)
}

/// All report fields, without checking them.
pub fn compute_bounds(env: &EpisodicTokenEnv, mu: &dyn BehaviorSource, pi: &dyn BehaviorSource) -> Result<BoundReport> {
    compute_bounds_with(env, mu, pi, DEFAULT_ENUM_CAP, Exec::Parallel)
}

pub fn compute_bounds_with(
    env: &EpisodicTokenEnv,
    mu: &dyn BehaviorSource,
    pi: &dyn BehaviorSource,
    cap: u64,
    exec: Exec,
) -> Result<BoundReport> {
    let acc = accumulate(env, mu, pi, cap, exec)?;
    let t = env.horizon() as f64;
    let xi = env.xi();
    Ok(BoundReport {
        exact_diff: acc.j_pi - acc.j_mu,
        surrogate: acc.surrogate,
        delta: acc.delta,
        dtv_max: acc.dtv_max,
        expected_tv_sum: acc.tv_sum,
        quad_bound: 2.0 * xi * t * (t - 1.0) * acc.dtv_max * acc.dtv_max,
        linear_bound: 4.0 * xi * acc.tv_sum,
        xi,
        xi_empirical: acc.xi_emp,
        sequence_tv: acc.seq_tv,
        horizon: env.horizon(),
    })
}

/// `L′_μ(π)`.
pub fn surrogate_l(env: &EpisodicTokenEnv, mu: &dyn BehaviorSource, pi: &dyn BehaviorSource) -> Result<f64> {
    Ok(compute_bounds(env, mu, pi)?.surrogate)
}

/// `Δ(μ, π)`.
pub fn error_delta(env: &EpisodicTokenEnv, mu: &dyn BehaviorSource, pi: &dyn BehaviorSource) -> Result<f64> {
    Ok(compute_bounds(env, mu, pi)?.delta)
}

/// Largest per-state TV over states reachable under μ.
pub fn dtv_max(env: &EpisodicTokenEnv, mu: &dyn BehaviorSource, pi: &dyn BehaviorSource) -> Result<f64> {
    Ok(compute_bounds(env, mu, pi)?.dtv_max)
}

/// `(TV between sequence distributions, Σ_t E_μ[per-step TV])`.
pub fn sequence_tv_lemma_check(env: &EpisodicTokenEnv, mu: &dyn BehaviorSource, pi: &dyn BehaviorSource) -> Result<(f64, f64)> {
    let r = compute_bounds(env, mu, pi)?;
    if r.sequence_tv > r.expected_tv_sum + 1e-10 {
        return Err(Error::BoundViolation(format!("sequence TV lemma: {} > {}", r.sequence_tv, r.expected_tv_sum)));
    }
    Ok((r.sequence_tv, r.expected_tv_sum))
}

/// Independent evaluation of `(J(π) − J(μ), L′, Δ)` from the raw response table,
/// with its own softmax and an explicit double loop for the tail products.
pub fn naive_identity_terms(env: &EpisodicTokenEnv, mu: &TabularPolicy, pi: &TabularPolicy) -> Result<(f64, f64, f64)> {
    fn prob(p: &TabularPolicy, s: &StateKey, a: Token) -> f64 {
        let logits = p.logits_or_zero(s);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        (logits[a as usize] - m).exp() / z
    }
    let table = env::enumerate(env, mu)?;
    let (mut j_mu, mut j_pi, mut lp, mut dl) = (0.0, 0.0, 0.0, 0.0);
    for y in &table {
        let mut pm = Vec::new();
        let mut pp = Vec::new();
        for t in 0..y.tokens.len() {
            let s = StateKey::new(y.prompt_id, y.tokens[..t].to_vec());
            pm.push(prob(mu, &s, y.tokens[t]));
            pp.push(prob(pi, &s, y.tokens[t]));
        }
        let p_mu: f64 = pm.iter().product();
        let p_pi: f64 = pp.iter().product();
        j_mu += p_mu * y.reward;
        j_pi += p_pi * y.reward;
        let n = y.tokens.len();
        for t in 0..n {
            let rho = pp[t] / pm[t];
            let mut tail = 1.0;
            for j in t + 1..n {
                tail *= pp[j] / pm[j];
            }
            lp += p_mu * y.reward * (rho - 1.0);
            dl += p_mu * y.reward * (rho - 1.0) * (1.0 - tail);
        }
    }
    let k = env.prompts().len() as f64;
    Ok(((j_pi - j_mu) / k, lp / k, dl / k))
}

fn witness(mu: &TabularPolicy, pi: &TabularPolicy) -> String {
    format!("--- mu ---\n{}--- pi ---\n{}", mu.to_text(), pi.to_text())
}

/// Computes the report and fails with the violated inequality and both policies
/// when any check, or agreement with the naive recomputation, fails.
pub fn verify_bounds(env: &EpisodicTokenEnv, mu: &TabularPolicy, pi: &TabularPolicy) -> Result<BoundReport> {
    let report = compute_bounds(env, mu, pi)?;
    check_report(&report, env, mu, pi)?;
    Ok(report)
}

/// Checks `report` (possibly produced elsewhere) for `(env, mu, pi)`.
pub fn check_report(report: &BoundReport, env: &EpisodicTokenEnv, mu: &TabularPolicy, pi: &TabularPolicy) -> Result<()> {
    let mut problems = report.violations();
    let (diff, lp, dl) = naive_identity_terms(env, mu, pi)?;
    for (name, main, naive) in [("J(pi)-J(mu)", report.exact_diff, diff), ("L'", report.surrogate, lp), ("Delta", report.delta, dl)] {
        if !((main - naive).abs() <= BOUND_TOL) {
            problems.push(format!("oracle disagreement on {name}: {main} vs naive {naive}"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::BoundViolation(format!("{}\n{}", problems.join("; "), witness(mu, pi))))
    }
}

/// Every non-terminal state of `env` in DFS order.
pub fn internal_states(env: &EpisodicTokenEnv) -> Vec<StateKey> {
    fn go(env: &EpisodicTokenEnv, s: StateKey, out: &mut Vec<StateKey>) {
        let children: Vec<StateKey> = env.vocab().tokens().map(|a| s.child(a)).collect();
        out.push(s);
        for c in children {
            if !env.is_terminal(&c.prefix) {
                go(env, c, out);
            }
        }
    }
    let mut out = Vec::new();
    for &p in env.prompts() {
        go(env, StateKey::root(p), &mut out);
    }
    out
}

/// Policy with i.i.d. `N(0, scale²)` logits at every non-terminal state.
pub fn random_policy(env: &EpisodicTokenEnv, scale: f64, rng: &mut RngStream) -> TabularPolicy {
    let mut p = TabularPolicy::new(env.vocab());
    for s in internal_states(env) {
        let logits = (0..env.vocab().size()).map(|_| scale * rng.normal()).collect();
        p.set_logits(s, logits).expect("finite logits");
    }
    p
}

/// `base` with `N(0, scale²)` noise added to every logit.
pub fn perturbed_policy(env: &EpisodicTokenEnv, base: &TabularPolicy, scale: f64, rng: &mut RngStream) -> TabularPolicy {
    let mut p = TabularPolicy::new(env.vocab());
    for s in internal_states(env) {
        let logits = base.logits_or_zero(&s).into_iter().map(|l| l + scale * rng.normal()).collect();
        p.set_logits(s, logits).expect("finite logits");
    }
    p
}

/// Random `(μ, π)` pair; the perturbation scale cycles through near, moderate and
/// unrelated regimes so both bounds are exercised close to tight and far from it.
pub fn random_pair(env: &EpisodicTokenEnv, index: u64, seed: u64) -> (TabularPolicy, TabularPolicy) {
    let mut rng = RngStream::derive(seed, &[0x626f_756e_6473, index]);
    let mu = random_policy(env, 1.5, &mut rng);
    let pi = match index % 4 {
        0 => perturbed_policy(env, &mu, 0.05, &mut rng),
        1 => perturbed_policy(env, &mu, 0.3, &mut rng),
        2 => perturbed_policy(env, &mu, 1.0, &mut rng),
        _ => random_policy(env, 1.5, &mut rng),
    };
    (mu, pi)
}

/// Near-deterministic μ (`confidence` on token 0 everywhere) and π equal to μ except
/// at the root of the first prompt, where the row is flipped onto token 1. The
/// maximal TV is then close to 1 while the expected summed TV stays at one step.
pub fn flipped_row_pair(env: &EpisodicTokenEnv, confidence: f64) -> Result<(TabularPolicy, TabularPolicy)> {
    let v = env.vocab().size();
    let rest = (1.0 - confidence) / (v - 1) as f64;
    let mut peaked = vec![rest; v];
    peaked[0] = confidence;
    let mut flipped = vec![rest; v];
    flipped[1] = confidence;
    let mut mu = TabularPolicy::new(env.vocab());
    let mut pi = TabularPolicy::new(env.vocab());
    let root = StateKey::root(env.prompts()[0]);
    for s in internal_states(env) {
        mu.set_probs(s.clone(), &peaked)?;
        pi.set_probs(s.clone(), if s == root { &flipped } else { &peaked })?;
    }
    Ok((mu, pi))
}

/// Exact `∇_θ L′_μ(π_θ)` at `θ = θ'` (μ = π_θ'): `E_μ[R Σ_t ∇ log π(y_t|s_t)]`,
/// averaged over prompts, keyed by `(state, token)` in DFS order.
pub fn surrogate_gradient(env: &EpisodicTokenEnv, policy: &TabularPolicy) -> Result<Vec<(StateKey, Token, f64)>> {
    let states = internal_states(env);
    let index: std::collections::HashMap<StateKey, usize> = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let v = env.vocab().size();
    let mut grad = vec![0.0; states.len() * v];
    let k = env.prompts().len() as f64;
    for y in env::enumerate(env, policy)? {
        let w = y.prob * y.reward / k;
        if w == 0.0 {
            continue;
        }
        for t in 0..y.tokens.len() {
            let s = StateKey::new(y.prompt_id, y.tokens[..t].to_vec());
            let d = policy.distribution(&s);
            let base = index[&s] * v;
            for b in 0..v {
                let ind = if b as Token == y.tokens[t] { 1.0 } else { 0.0 };
                grad[base + b] += w * (ind - d.probs()[b]);
            }
        }
    }
    let mut out = Vec::with_capacity(grad.len());
    for (i, s) in states.into_iter().enumerate() {
        for b in 0..v {
            out.push((s.clone(), b as Token, grad[i * v + b]));
        }
    }
    Ok(out)
}

/// Central finite-difference `∂J/∂θ_{s,a}`.
pub fn finite_difference(env: &EpisodicTokenEnv, policy: &TabularPolicy, state: &StateKey, token: Token, step: f64) -> Result<f64> {
    let base = policy.logits_or_zero(state);
    let eval = |h: f64| -> Result<f64> {
        let mut p = policy.clone();
        let mut l = base.clone();
        l[token as usize] += h;
        p.set_logits(state.clone(), l)?;
        env::expected_return_with(env, &p, DEFAULT_ENUM_CAP, Exec::Sequential)
    };
    Ok((eval(step)? - eval(-step)?) / (2.0 * step))
}

/// Largest relative error between the exact surrogate gradient at `θ = θ'` and
/// central finite differences of `J`, over parameters with `|grad| > 1e-6`.
pub fn first_order_match_check(env: &EpisodicTokenEnv, policy: &TabularPolicy, step: f64) -> Result<f64> {
    let grad = surrogate_gradient(env, policy)?;
    let mut worst: f64 = 0.0;
    for (s, a, g) in grad {
        if g.abs() <= 1e-6 {
            continue;
        }
        let fd = finite_difference(env, policy, &s, a, step)?;
        worst = worst.max((g - fd).abs() / g.abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::Vocab;
    use crate::env::PathRewardTree;
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn tree(v: usize, t: usize, seed: u64) -> EpisodicTokenEnv {
        PathRewardTree { num_prompts: 1, low: -1.0, high: 1.0, seed }.build(Vocab::new(v).unwrap(), t).unwrap()
    }

    #[test]
    fn identical_policies_give_zero_terms() {
        let env = tree(3, 3, 1);
        let (mu, _) = random_pair(&env, 3, 4);
        let r = verify_bounds(&env, &mu, &mu).unwrap();
        assert_eq!((r.exact_diff, r.delta, r.dtv_max, r.sequence_tv), (0.0, 0.0, 0.0, 0.0));
        assert_abs_diff_eq!(r.surrogate, 0.0, epsilon = 1e-15);
        assert_eq!(r.quad_bound, 0.0);
    }

    #[test]
    fn horizon_one_has_no_error_term_and_tight_lemma() {
        let env = tree(4, 1, 2);
        let (mu, pi) = random_pair(&env, 2, 9);
        let r = verify_bounds(&env, &mu, &pi).unwrap();
        assert_eq!(r.delta, 0.0);
        assert_abs_diff_eq!(r.sequence_tv, r.expected_tv_sum, epsilon = 1e-15);
    }

    #[test]
    fn quad_bound_arithmetic() {
        let r = BoundReport { xi: 1.0, horizon: 3, dtv_max: 0.1, ..Default::default() };
        let quad = 2.0 * r.xi * 3.0 * 2.0 * r.dtv_max * r.dtv_max;
        assert_abs_diff_eq!(quad, 0.12, epsilon = 1e-15);
    }

    #[test]
    fn single_state_dtv() {
        let env = EpisodicTokenEnv::new(Vocab::new(2).unwrap(), 1, vec![0], 1.0, Arc::new(|_, _| 1.0)).unwrap();
        let mut mu = TabularPolicy::new(env.vocab());
        let mut pi = TabularPolicy::new(env.vocab());
        mu.set_probs(StateKey::root(0), &[0.5, 0.5]).unwrap();
        pi.set_probs(StateKey::root(0), &[0.25, 0.75]).unwrap();
        assert_abs_diff_eq!(dtv_max(&env, &mu, &pi).unwrap(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn random_pairs_satisfy_everything() {
        for i in 0..200 {
            let env = tree(2 + (i % 3) as usize, 1 + (i % 4) as usize, i);
            let (mu, pi) = random_pair(&env, i, 17);
            verify_bounds(&env, &mu, &pi).unwrap();
        }
    }

    #[test]
    fn flipped_row_makes_linear_bound_tighter() {
        let env = tree(2, 4, 5);
        let (mu, pi) = flipped_row_pair(&env, 0.999).unwrap();
        let r = verify_bounds(&env, &mu, &pi).unwrap();
        assert!(r.dtv_max > 0.99);
        assert!(r.linear_bound < r.quad_bound);
    }

    #[test]
    fn zero_reward_gradients_vanish() {
        let env = EpisodicTokenEnv::new(Vocab::new(3).unwrap(), 2, vec![0], 0.0, Arc::new(|_, _| 0.0)).unwrap();
        let mut rng = RngStream::new(1, 2);
        let p = random_policy(&env, 1.0, &mut rng);
        assert!(surrogate_gradient(&env, &p).unwrap().iter().all(|(_, _, g)| *g == 0.0));
        assert_eq!(first_order_match_check(&env, &p, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn first_order_match_on_small_env() {
        let env = tree(3, 3, 11);
        let mut rng = RngStream::new(3, 4);
        let p = random_policy(&env, 1.0, &mut rng);
        assert!(first_order_match_check(&env, &p, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn violation_carries_witness() {
        let env = tree(2, 2, 1);
        let (mu, pi) = random_pair(&env, 1, 1);
        let mut r = compute_bounds(&env, &mu, &pi).unwrap();
        r.surrogate += 1e-3;
        let err = check_report(&r, &env, &mu, &pi).unwrap_err().to_string();
        assert!(err.contains("identity"));
        assert!(err.contains("--- mu ---"));
    }
}
