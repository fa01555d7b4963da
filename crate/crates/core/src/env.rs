//! Finite-horizon, undiscounted token-generation environments.
//!
//! A prompt fixes the root state; each step appends one token. An episode ends at
//! the horizon or when the optional EOS token is emitted, and only then is the
//! scalar reward revealed.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dist::{self, Distribution, Token, Vocab};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::policy::{StateKey, TabularPolicy};
use crate::rng::{hash_words, RngStream};

/// Default enumeration cap (trajectories per prompt).
pub const DEFAULT_ENUM_CAP: u64 = 1 << 20;

/// Anything that yields a next-token distribution for a state.
pub trait BehaviorSource: Sync {
    fn behavior(&self, state: &StateKey) -> Result<Distribution>;
}

impl BehaviorSource for TabularPolicy {
    fn behavior(&self, state: &StateKey) -> Result<Distribution> {
        Ok(self.distribution(state))
    }
}

impl<F> BehaviorSource for F
where
    F: Fn(&StateKey) -> Result<Distribution> + Sync,
{
    fn behavior(&self, state: &StateKey) -> Result<Distribution> {
        self(state)
    }
}

pub type RewardFn = Arc<dyn Fn(u32, &[Token]) -> f64 + Send + Sync>;

/// Episodic token-generation MDP with a terminal reward bounded by `xi`.
#[derive(Clone)]
pub struct EpisodicTokenEnv {
    vocab: Vocab,
    horizon: usize,
    prompts: Vec<u32>,
    eos: Option<Token>,
    xi: f64,
    known_optimum: Option<f64>,
    reward: RewardFn,
}

impl fmt::Debug for EpisodicTokenEnv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EpisodicTokenEnv")
            .field("vocab", &self.vocab)
            .field("horizon", &self.horizon)
            .field("prompts", &self.prompts)
            .field("eos", &self.eos)
            .field("xi", &self.xi)
            .finish_non_exhaustive()
    }
}

impl EpisodicTokenEnv {
    /// `xi` is the declared bound on `|R|`; rewards are checked against it.
    pub fn new(vocab: Vocab, horizon: usize, prompts: Vec<u32>, xi: f64, reward: RewardFn) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if prompts.is_empty() {
            return Err(Error::Config("need at least one prompt".into()));
        }
        if !(xi.is_finite() && xi >= 0.0) {
            return Err(Error::Config(format!("reward bound must be finite and >= 0, got {xi}")));
        }
        Ok(Self { vocab, horizon, prompts, eos: None, xi, known_optimum: None, reward })
    }

    pub fn with_eos(mut self, eos: Token) -> Result<Self> {
        if eos as usize >= self.vocab.size() {
            return Err(Error::Config(format!("eos token {eos} outside vocab")));
        }
        self.eos = Some(eos);
        Ok(self)
    }

    pub fn with_known_optimum(mut self, optimum: f64) -> Self {
        self.known_optimum = Some(optimum);
        self
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn prompts(&self) -> &[u32] {
        &self.prompts
    }

    pub fn eos(&self) -> Option<Token> {
        self.eos
    }

    /// Declared reward bound ξ.
    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn reward(&self, prompt_id: u32, tokens: &[Token]) -> f64 {
        let r = (self.reward)(prompt_id, tokens);
        debug_assert!(r.abs() <= self.xi + 1e-12, "reward {r} exceeds declared bound {}", self.xi);
        r
    }

    /// True once `tokens` form a complete response.
    pub fn is_terminal(&self, tokens: &[Token]) -> bool {
        tokens.len() >= self.horizon || matches!((self.eos, tokens.last()), (Some(e), Some(t)) if e == *t)
    }

    /// `vocab^horizon` per prompt, saturating.
    pub fn sequence_count(&self) -> u128 {
        (self.vocab.size() as u128).checked_pow(self.horizon as u32).unwrap_or(u128::MAX)
    }

    pub fn is_enumerable(&self, cap: u64) -> bool {
        self.sequence_count() <= cap as u128
    }

    fn check_enumerable(&self, cap: u64) -> Result<()> {
        if self.is_enumerable(cap) {
            Ok(())
        } else {
            Err(Error::EnumerationTooLarge { count: self.sequence_count(), cap })
        }
    }

    /// Best achievable expected return: the mean over prompts of `max_y R(y)`.
    pub fn optimal_return(&self, cap: u64) -> Result<f64> {
        if let Some(v) = self.known_optimum {
            return Ok(v);
        }
        self.check_enumerable(cap)?;
        let uniform = |_: &StateKey| Ok(Distribution::uniform(self.vocab));
        let all = enumerate_with(self, &uniform, cap, Exec::Parallel)?;
        let mut total = 0.0;
        for &p in &self.prompts {
            let best = all.iter().filter(|t| t.prompt_id == p).map(|t| t.reward).fold(f64::NEG_INFINITY, f64::max);
            total += best;
        }
        Ok(total / self.prompts.len() as f64)
    }
}

/// Per-step record of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub state: StateKey,
    pub token: Token,
    /// μ(y_t | s_t) under the rollout distribution.
    pub rollout_prob: f64,
    /// π(y_t | s_t) under the trainer distribution at the rollout parameters.
    pub trainer_prob: f64,
    /// Top-K of μ(·|s_t), always containing the sampled token.
    pub rollout_topk: Option<Vec<(Token, f64)>>,
    /// π(·|s_t) at the rollout parameters; the recompute anchor.
    pub trainer_full: Option<Distribution>,
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt_id: u32,
    pub tokens: Vec<Token>,
    pub steps: Vec<StepRecord>,
    pub reward: f64,
}

/// What to record besides the sampled-token probabilities.
#[derive(Debug, Clone, Copy, Default)]
pub struct RecordOptions {
    /// Keep the top-K of μ(·|s_t) (plus the sampled token).
    pub rollout_topk: Option<usize>,
    /// Keep the full trainer distribution π_θ'(·|s_t).
    pub trainer_full: bool,
}

/// Top-`k` tokens of `dist` by probability, ties broken by lower id.
pub fn top_k(dist: &Distribution, k: usize) -> Vec<(Token, f64)> {
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    idx.sort_by(|&a, &b| dist.probs()[b].total_cmp(&dist.probs()[a]).then(a.cmp(&b)));
    idx.truncate(k.min(dist.len()));
    idx.into_iter().map(|i| (i as Token, dist.probs()[i])).collect()
}

fn checked_behavior(env: &EpisodicTokenEnv, source: &dyn BehaviorSource, state: &StateKey) -> Result<Distribution> {
    let d = source.behavior(state)?;
    if d.len() != env.vocab.size() {
        return Err(Error::InvalidDistribution(format!(
            "behavior returned {} probabilities for vocab {} at {state:?}",
            d.len(),
            env.vocab.size()
        )));
    }
    Ok(d)
}

/// Samples one response from `behavior`, recording μ-probabilities. The trainer
/// probability is taken from `trainer` when given, else equals μ.
pub fn rollout_with(
    env: &EpisodicTokenEnv,
    prompt_id: u32,
    behavior: &dyn BehaviorSource,
    trainer: Option<&dyn BehaviorSource>,
    opts: RecordOptions,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    let mut state = StateKey::root(prompt_id);
    let mut steps = Vec::with_capacity(env.horizon);
    loop {
        let mu = checked_behavior(env, behavior, &state)?;
        let token = dist::sample(&mu, rng);
        let rollout_prob = mu.prob(token);
        let trainer_dist = match trainer {
            Some(t) => Some(checked_behavior(env, t, &state)?),
            None => None,
        };
        let trainer_prob = trainer_dist.as_ref().map_or(rollout_prob, |d| d.prob(token));
        let rollout_topk = opts.rollout_topk.map(|k| {
            let mut top = top_k(&mu, k);
            if !top.iter().any(|(t, _)| *t == token) {
                top.push((token, rollout_prob));
            }
            top
        });
        let trainer_full = if opts.trainer_full { Some(trainer_dist.unwrap_or_else(|| mu.clone())) } else { None };
        let next = state.child(token);
        steps.push(StepRecord { state, token, rollout_prob, trainer_prob, rollout_topk, trainer_full });
        state = next;
        if env.is_terminal(&state.prefix) {
            break;
        }
    }
    let tokens = state.prefix;
    let reward = env.reward(prompt_id, &tokens);
    Ok(Trajectory { prompt_id, tokens, steps, reward })
}

/// Samples one response from `behavior`.
pub fn rollout(
    env: &EpisodicTokenEnv,
    prompt_id: u32,
    behavior: &dyn BehaviorSource,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    rollout_with(env, prompt_id, behavior, None, RecordOptions::default(), rng)
}

/// An enumerated response with its probability under the enumerating policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Enumerated {
    pub prompt_id: u32,
    pub tokens: Vec<Token>,
    pub prob: f64,
    pub reward: f64,
}

fn enumerate_subtree(
    env: &EpisodicTokenEnv,
    policy: &dyn BehaviorSource,
    state: StateKey,
    prob: f64,
    out: &mut Vec<Enumerated>,
) -> Result<()> {
    let d = checked_behavior(env, policy, &state)?;
    for a in env.vocab.tokens() {
        let p = prob * d.prob(a);
        let child = state.child(a);
        if env.is_terminal(&child.prefix) {
            let reward = env.reward(child.prompt_id, &child.prefix);
            out.push(Enumerated { prompt_id: child.prompt_id, tokens: child.prefix, prob: p, reward });
        } else {
            enumerate_subtree(env, policy, child, p, out)?;
        }
    }
    Ok(())
}

/// Exhaustive list of complete responses for every prompt, sharded by
/// `(prompt, first token)` and concatenated in shard order.
pub fn enumerate_with(
    env: &EpisodicTokenEnv,
    policy: &dyn BehaviorSource,
    cap: u64,
    exec: Exec,
) -> Result<Vec<Enumerated>> {
    env.check_enumerable(cap)?;
    let v = env.vocab.size();
    let shards = env.prompts.len() * v;
    let parts = par::map_indexed(exec, shards, |i| -> Result<Vec<Enumerated>> {
        let prompt = env.prompts[i / v];
        let a = (i % v) as Token;
        let root = StateKey::root(prompt);
        let p = checked_behavior(env, policy, &root)?.prob(a);
        let child = root.child(a);
        let mut out = Vec::new();
        if env.is_terminal(&child.prefix) {
            let reward = env.reward(prompt, &child.prefix);
            out.push(Enumerated { prompt_id: prompt, tokens: child.prefix, prob: p, reward });
        } else {
            enumerate_subtree(env, policy, child, p, &mut out)?;
        }
        Ok(out)
    });
    let mut all = Vec::new();
    for part in parts {
        all.extend(part?);
    }
    Ok(all)
}

pub fn enumerate(env: &EpisodicTokenEnv, policy: &dyn BehaviorSource) -> Result<Vec<Enumerated>> {
    enumerate_with(env, policy, DEFAULT_ENUM_CAP, Exec::Parallel)
}

/// Exact `J(π)`, averaged uniformly over prompts.
pub fn expected_return(env: &EpisodicTokenEnv, policy: &dyn BehaviorSource) -> Result<f64> {
    expected_return_with(env, policy, DEFAULT_ENUM_CAP, Exec::Parallel)
}

pub fn expected_return_with(env: &EpisodicTokenEnv, policy: &dyn BehaviorSource, cap: u64, exec: Exec) -> Result<f64> {
    let all = enumerate_with(env, policy, cap, exec)?;
    let total: f64 = all.iter().map(|t| t.prob * t.reward).sum();
    Ok(total / env.prompts.len() as f64)
}

/// Rewarded target sequences with a configurable initial pull toward them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeedleSpec {
    pub num_prompts: usize,
    /// Rewarded sequences per prompt.
    pub targets_per_prompt: usize,
    /// Initial probability of the target token at ordinary on-path states.
    pub target_prob: f64,
    /// Fraction of prompts that contain low-probability needle steps.
    pub hard_fraction: f64,
    /// Needle steps per hard prompt.
    pub hard_steps: usize,
    /// Initial probability of the target token at a needle step.
    pub hard_prob: f64,
    /// Seed for drawing target sequences.
    pub seed: u64,
    /// Key policy rows by the prompt and the last `k` tokens instead of the full
    /// prefix. Targets are then drawn so that every context has one successor.
    pub context_window: Option<usize>,
}

impl Default for NeedleSpec {
    fn default() -> Self {
        Self {
            num_prompts: 16,
            targets_per_prompt: 1,
            target_prob: 0.97,
            hard_fraction: 0.15,
            hard_steps: 1,
            hard_prob: 0.05,
            seed: 0,
            context_window: None,
        }
    }
}

/// Needle task instance: environment, target sequences and initial policy.
#[derive(Debug, Clone)]
pub struct NeedleTask {
    pub env: EpisodicTokenEnv,
    pub targets: Vec<Vec<Vec<Token>>>,
    pub initial_policy: TabularPolicy,
}

impl NeedleTask {
    /// Builds the task. Reward is 1 for any target sequence of the prompt and 0
    /// otherwise, so the optimum is 1. Prompts `0..round(hard_fraction * n)` are
    /// hard. Rows along every target path get `target_prob` (or `hard_prob` at a
    /// needle step) on the target token with the rest spread evenly; rows shared
    /// by several targets split that mass between them.
    pub fn build(vocab: Vocab, horizon: usize, spec: &NeedleSpec) -> Result<Self> {
        if spec.num_prompts == 0 || spec.targets_per_prompt == 0 {
            return Err(Error::Config("needle task needs prompts and targets".into()));
        }
        for (name, p) in [("target_prob", spec.target_prob), ("hard_prob", spec.hard_prob)] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config(format!("needle.{name} must lie in (0, 1), got {p}")));
            }
        }
        if !(0.0..=1.0).contains(&spec.hard_fraction) {
            return Err(Error::Config("needle.hard_fraction must lie in [0, 1]".into()));
        }
        let n_hard = (spec.hard_fraction * spec.num_prompts as f64).round() as usize;
        let mut rng = RngStream::derive(spec.seed, &[0x6e65_6564_6c65]);
        let mut targets = Vec::with_capacity(spec.num_prompts);
        let mut policy = match spec.context_window {
            Some(k) => TabularPolicy::with_window(vocab, k),
            None => TabularPolicy::new(vocab),
        };
        for prompt in 0..spec.num_prompts {
            let mut set: Vec<Vec<Token>> = Vec::new();
            let mut successor: std::collections::HashMap<StateKey, Token> = Default::default();
            let mut attempts = 0;
            while set.len() < spec.targets_per_prompt {
                attempts += 1;
                if attempts > 1000 {
                    return Err(Error::Config("could not draw distinct needle targets".into()));
                }
                let mut t: Vec<Token> = Vec::with_capacity(horizon);
                for depth in 0..horizon {
                    let key = policy.row_key(&StateKey::new(prompt as u32, t[..depth].to_vec())).into_owned();
                    let next = *successor.entry(key).or_insert_with(|| rng.below(vocab.size()) as Token);
                    t.push(next);
                }
                if !set.contains(&t) {
                    set.push(t);
                }
            }
            let needle_steps: Vec<usize> = if prompt < n_hard {
                let mut steps = Vec::new();
                while steps.len() < spec.hard_steps.min(horizon) {
                    let s = rng.below(horizon);
                    if !steps.contains(&s) {
                        steps.push(s);
                    }
                }
                steps
            } else {
                Vec::new()
            };
            // group target tokens by parameter row; a row is hard if any of its
            // on-path positions is a needle step
            let mut rows: std::collections::BTreeMap<StateKey, (Vec<Token>, bool)> = Default::default();
            for t in &set {
                for depth in 0..horizon {
                    let key = policy.row_key(&StateKey::new(prompt as u32, t[..depth].to_vec())).into_owned();
                    let entry = rows.entry(key).or_default();
                    if !entry.0.contains(&t[depth]) {
                        entry.0.push(t[depth]);
                    }
                    entry.1 |= needle_steps.contains(&depth);
                }
            }
            for (key, (toks, hard)) in rows {
                let p = if hard { spec.hard_prob } else { spec.target_prob };
                let rest = vocab.size() - toks.len();
                let mut probs = vec![0.0; vocab.size()];
                let on = if rest == 0 { 1.0 / toks.len() as f64 } else { p / toks.len() as f64 };
                let off = if rest == 0 { 0.0 } else { (1.0 - p) / rest as f64 };
                for (a, q) in probs.iter_mut().enumerate() {
                    *q = if toks.contains(&(a as Token)) { on } else { off };
                }
                policy.set_probs(key, &probs)?;
            }
            targets.push(set);
        }
        let table = targets.clone();
        let reward: RewardFn = Arc::new(move |prompt, tokens| {
            let set = &table[prompt as usize];
            if set.iter().any(|t| t.as_slice() == tokens) { 1.0 } else { 0.0 }
        });
        let env = EpisodicTokenEnv::new(vocab, horizon, (0..spec.num_prompts as u32).collect(), 1.0, reward)?
            .with_known_optimum(1.0);
        Ok(Self { env, targets, initial_policy: policy })
    }

    /// Exact probability that `policy` emits a target of `prompt`.
    pub fn success_prob(&self, policy: &dyn BehaviorSource, prompt: u32) -> Result<f64> {
        let mut total = 0.0;
        for t in &self.targets[prompt as usize] {
            let mut p = 1.0;
            let mut state = StateKey::root(prompt);
            for &a in t {
                p *= policy.behavior(&state)?.prob(a);
                state = state.child(a);
            }
            total += p;
        }
        Ok(total)
    }

    /// Exact `J(π)` without enumerating the whole tree.
    pub fn expected_return(&self, policy: &dyn BehaviorSource) -> Result<f64> {
        let mut total = 0.0;
        for &p in self.env.prompts() {
            total += self.success_prob(policy, p)?;
        }
        Ok(total / self.env.prompts().len() as f64)
    }
}

/// Random per-leaf rewards in `[low, high]`, derived by hashing `(seed, prompt, response)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathRewardTree {
    pub num_prompts: usize,
    pub low: f64,
    pub high: f64,
    pub seed: u64,
}

impl Default for PathRewardTree {
    fn default() -> Self {
        Self { num_prompts: 1, low: 0.0, high: 1.0, seed: 0 }
    }
}

impl PathRewardTree {
    pub fn leaf_reward(&self, prompt: u32, tokens: &[Token]) -> f64 {
        let h = hash_words(
            [self.seed, prompt as u64, tokens.len() as u64].into_iter().chain(tokens.iter().map(|t| *t as u64)),
        );
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        self.low + (self.high - self.low) * u
    }

    pub fn build(&self, vocab: Vocab, horizon: usize) -> Result<EpisodicTokenEnv> {
        if !(self.low <= self.high && self.low >= -1.0 && self.high <= 1.0) {
            return Err(Error::Config(format!("leaf rewards must satisfy -1 <= low <= high <= 1, got [{}, {}]", self.low, self.high)));
        }
        if self.num_prompts == 0 {
            return Err(Error::Config("tree task needs at least one prompt".into()));
        }
        let tree = *self;
        let xi = self.low.abs().max(self.high.abs());
        let reward: RewardFn = Arc::new(move |p, y| tree.leaf_reward(p, y));
        EpisodicTokenEnv::new(vocab, horizon, (0..self.num_prompts as u32).collect(), xi, reward)
    }
}

/// One-step, three-token environment reproducing the ratio-clipping counterexample:
/// μ(a_low) = 1e-4, π(a_low) = 1e-2, μ(a_high) = 0.99, π(a_high) = 0.80, with the
/// remaining mass on a filler token. Emitting `a_low` earns reward 1.
#[derive(Debug, Clone)]
pub struct ClipContrast {
    pub env: EpisodicTokenEnv,
    pub mu: TabularPolicy,
    pub pi: TabularPolicy,
    pub a_high: Token,
    pub a_low: Token,
    pub filler: Token,
}

pub fn clip_contrast_env() -> ClipContrast {
    let vocab = Vocab::new(3).expect("3 >= 2");
    let (a_high, a_low, filler) = (0, 1, 2);
    let reward: RewardFn = Arc::new(move |_, y| if y.first() == Some(&a_low) { 1.0 } else { 0.0 });
    let env = EpisodicTokenEnv::new(vocab, 1, vec![0], 1.0, reward).expect("valid env");
    let root = StateKey::root(0);
    let mut mu = TabularPolicy::new(vocab);
    mu.set_probs(root.clone(), &[0.99, 1e-4, 1.0 - 0.99 - 1e-4]).expect("valid probs");
    let mut pi = TabularPolicy::new(vocab);
    pi.set_probs(root, &[0.80, 1e-2, 1.0 - 0.80 - 1e-2]).expect("valid probs");
    ClipContrast { env, mu, pi, a_high, a_low, filler }
}
