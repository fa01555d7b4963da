//! Group advantages, the token-mask family and the unified masked policy gradient
//!
//! ```text
//! ∇L = E_{y∼μ} [ Σ_t M_t · min(r_t, C) · Â_t · ∇ log π_θ(y_t|s_t) ],   r_t = π_θ(y_t|s_t) / μ(y_t|s_t)
//! ```
//!
//! Masks differ in what they compare: the rollout ratio (GRPO clip, relaxed clip),
//! the recomputed ratio `π_θ/π_θ'` (MiniRL), a divergence from the anchor
//! distribution (DPPO) or a raw probability drop (minimal negative mask).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dist::{self, Distribution, Token};
use crate::divergence::{self, Approx, DivergenceKind, Metric};
use crate::env::{StepRecord, Trajectory};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::policy::{SparseGrad, StateKey, TabularPolicy};

/// Threshold on `μ − π` above which a negative-advantage token counts as a bad update.
pub const BAD_UPDATE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvantageConfig {
    #[serde(default)]
    pub normalize_std: bool,
}

/// `Â_i = R_i − mean(R)`, optionally divided by `std(R) + 1e-8` (population std).
pub fn group_advantages(rewards: &[f64], cfg: AdvantageConfig) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let mut adv: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if cfg.normalize_std {
        let std = (adv.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
        for a in &mut adv {
            *a /= std + 1e-8;
        }
    }
    Ok(adv)
}

/// Which distribution a trust region is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Anchor {
    /// The behavior distribution μ_θ' that produced the samples.
    #[default]
    Rollout,
    /// The trainer distribution π_θ' recomputed at the rollout parameters.
    Recompute,
}

/// Which clip side(s) a relaxed mask drops for low-probability tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    High,
    Low,
    #[default]
    Both,
}

macro_rules! str_enum {
    ($ty:ty, $what:literal, $($s:literal => $v:expr),+) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::Config(format!(concat!("unknown ", $what, " {:?}"), s))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $v { return f.write_str($s); })+
                unreachable!()
            }
        }
    };
}

str_enum!(Anchor, "anchor", "rollout" => Anchor::Rollout, "recompute" => Anchor::Recompute);
str_enum!(Direction, "direction", "high" => Direction::High, "low" => Direction::Low, "both" => Direction::Both);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskKind {
    /// Plain importance-weighted policy gradient, no mask, no cap.
    Pgis,
    /// No mask, ratio truncated at `c`.
    Cispo { c: f64 },
    GrpoClip { eps_low: f64, eps_high: f64 },
    /// GRPO clip applied to the recomputed ratio `π_θ/π_θ'`.
    MiniRl { eps_low: f64, eps_high: f64 },
    Dppo { divergence: DivergenceKind, delta: f64, anchor: Anchor },
    MinimalNegative { delta: f64, anchor: Anchor },
    /// GRPO clip whose `direction` side(s) are dropped when `μ < alpha`.
    Relaxed { eps_low: f64, eps_high: f64, alpha: f64, direction: Direction },
}

/// A mask rule plus the ratio cap `C` used by the masked rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskRule {
    pub kind: MaskKind,
    pub ratio_cap: f64,
}

pub const DEFAULT_RATIO_CAP: f64 = 5.0;

impl MaskRule {
    pub fn new(kind: MaskKind) -> Self {
        Self { kind, ratio_cap: DEFAULT_RATIO_CAP }
    }

    pub fn with_cap(mut self, cap: f64) -> Self {
        self.ratio_cap = cap;
        self
    }

    pub fn pgis() -> Self {
        Self::new(MaskKind::Pgis)
    }

    pub fn cispo(c: f64) -> Self {
        Self::new(MaskKind::Cispo { c })
    }

    pub fn grpo(eps_low: f64, eps_high: f64) -> Self {
        Self::new(MaskKind::GrpoClip { eps_low, eps_high })
    }

    pub fn dppo(divergence: DivergenceKind, delta: f64) -> Self {
        Self::new(MaskKind::Dppo { divergence, delta, anchor: Anchor::Rollout })
    }

    /// The cap actually applied: ∞ for PGIS, `c` for CISPO, else `ratio_cap`.
    pub fn effective_cap(&self) -> f64 {
        match self.kind {
            MaskKind::Pgis => f64::INFINITY,
            MaskKind::Cispo { c } => c,
            _ => self.ratio_cap,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            MaskKind::Pgis => "pgis",
            MaskKind::Cispo { .. } => "cispo",
            MaskKind::GrpoClip { .. } => "grpo",
            MaskKind::MiniRl { .. } => "minirl",
            MaskKind::Dppo { .. } => "dppo",
            MaskKind::MinimalNegative { .. } => "minimal_negative",
            MaskKind::Relaxed { .. } => "relaxed",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let eps = |lo: f64, hi: f64| -> Result<()> {
            if lo > 0.0 && hi > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("clip thresholds must be > 0, got eps_low={lo}, eps_high={hi}")))
            }
        };
        let delta = |d: f64| -> Result<()> {
            if d > 0.0 { Ok(()) } else { Err(Error::Config(format!("algo.delta must be > 0, got {d}"))) }
        };
        match self.kind {
            MaskKind::Pgis => {}
            MaskKind::Cispo { c } => {
                if c.is_nan() || c <= 1.0 {
                    return Err(Error::Config(format!("algo.c_cap must be > 1, got {c}")));
                }
            }
            MaskKind::GrpoClip { eps_low, eps_high } | MaskKind::MiniRl { eps_low, eps_high } => eps(eps_low, eps_high)?,
            MaskKind::Dppo { divergence, delta: d, .. } => {
                divergence.validate()?;
                delta(d)?;
            }
            MaskKind::MinimalNegative { delta: d, .. } => delta(d)?,
            MaskKind::Relaxed { eps_low, eps_high, alpha, .. } => {
                eps(eps_low, eps_high)?;
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::Config(format!("algo.alpha must lie in [0, 1], got {alpha}")));
                }
            }
        }
        if self.ratio_cap.is_nan() || self.ratio_cap <= 1.0 {
            return Err(Error::Config(format!("algo.c_cap must be > 1, got {}", self.ratio_cap)));
        }
        Ok(())
    }

    /// Whether building updates needs the full trainer row at the rollout parameters.
    pub fn needs_trainer_full(&self) -> bool {
        matches!(
            self.kind,
            MaskKind::Dppo { anchor: Anchor::Recompute, divergence: DivergenceKind { approx: Approx::Exact | Approx::TopK(_), .. }, .. }
        )
    }
}

/// GRPO/PPO clip mask: 0 iff `(Â>0 ∧ r>1+ε_high) ∨ (Â<0 ∧ r<1−ε_low)`.
pub fn mask_grpo_clip(r: f64, adv: f64, eps_low: f64, eps_high: f64) -> u8 {
    u8::from(!((adv > 0.0 && r > 1.0 + eps_high) || (adv < 0.0 && r < 1.0 - eps_low)))
}

/// DPPO mask: 0 iff the update moves `r` away from 1 and `D > δ`.
pub fn mask_dppo(r: f64, adv: f64, d: f64, delta: f64) -> u8 {
    u8::from(!((adv > 0.0 && r > 1.0 && d > delta) || (adv < 0.0 && r < 1.0 && d > delta)))
}

/// MiniRL mask: the GRPO clip rule on the recomputed ratio.
pub fn mask_minirl(r_recomputed: f64, adv: f64, eps_low: f64, eps_high: f64) -> u8 {
    mask_grpo_clip(r_recomputed, adv, eps_low, eps_high)
}

/// Minimal mask: 0 iff `Â < 0` and the probability dropped by at least δ.
pub fn mask_minimal_negative(adv: f64, mu_prob: f64, pi_prob: f64, delta: f64) -> u8 {
    u8::from(!(adv < 0.0 && mu_prob - pi_prob >= delta))
}

/// GRPO clip with the `direction` side(s) set to ∞ for tokens with `μ < α`.
pub fn mask_relaxed(r: f64, adv: f64, mu_prob: f64, eps_low: f64, eps_high: f64, alpha: f64, direction: Direction) -> u8 {
    if mu_prob >= alpha {
        return mask_grpo_clip(r, adv, eps_low, eps_high);
    }
    let (lo, hi) = match direction {
        Direction::High => (eps_low, f64::INFINITY),
        Direction::Low => (f64::INFINITY, eps_high),
        Direction::Both => return 1,
    };
    mask_grpo_clip(r, adv, lo, hi)
}

/// Everything a mask may look at for one sampled token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenUpdate {
    pub state: StateKey,
    pub token: Token,
    pub advantage: f64,
    /// μ_θ'(y_t|s_t).
    pub mu_prob: f64,
    /// π_θ(y_t|s_t) at the current parameters.
    pub pi_prob: f64,
    /// π_θ'(y_t|s_t), the recompute anchor.
    pub anchor_prob: Option<f64>,
    /// `π_θ/μ`, with μ floored.
    pub ratio: f64,
    /// `π_θ/π_θ'`.
    pub recomputed_ratio: Option<f64>,
    /// Divergence used by the DPPO mask.
    pub divergence: Option<f64>,
    pub mask: u8,
    /// `min(r, C)`.
    pub capped_weight: f64,
}

impl TokenUpdate {
    /// Update with the ratio fields filled in; mask-specific fields are left empty
    /// and the mask is 1 until [`evaluate_mask`] runs.
    pub fn new(state: StateKey, token: Token, advantage: f64, mu_prob: f64, pi_prob: f64) -> Self {
        let ratio = pi_prob / dist::guard_prob(mu_prob);
        Self {
            state,
            token,
            advantage,
            mu_prob,
            pi_prob,
            anchor_prob: None,
            ratio,
            recomputed_ratio: None,
            divergence: None,
            mask: 1,
            capped_weight: ratio,
        }
    }

    pub fn with_anchor(mut self, anchor_prob: f64) -> Self {
        self.anchor_prob = Some(anchor_prob);
        self.recomputed_ratio = Some(self.pi_prob / dist::guard_prob(anchor_prob));
        self
    }

    pub fn with_divergence(mut self, d: f64) -> Self {
        self.divergence = Some(d);
        self
    }
}

fn missing(field: &'static str, rule: &MaskRule) -> Error {
    Error::MissingField { field, rule: rule.name().to_string() }
}

/// The mask `M_t` of `rule` for `u`.
pub fn evaluate_mask(u: &TokenUpdate, rule: &MaskRule) -> Result<u8> {
    Ok(match rule.kind {
        MaskKind::Pgis | MaskKind::Cispo { .. } => 1,
        MaskKind::GrpoClip { eps_low, eps_high } => mask_grpo_clip(u.ratio, u.advantage, eps_low, eps_high),
        MaskKind::MiniRl { eps_low, eps_high } => {
            let r = u.recomputed_ratio.ok_or_else(|| missing("recomputed_ratio", rule))?;
            mask_minirl(r, u.advantage, eps_low, eps_high)
        }
        MaskKind::Dppo { delta, anchor, .. } => {
            let d = u.divergence.ok_or_else(|| missing("divergence", rule))?;
            let r = match anchor {
                Anchor::Rollout => u.ratio,
                Anchor::Recompute => u.recomputed_ratio.ok_or_else(|| missing("recomputed_ratio", rule))?,
            };
            mask_dppo(r, u.advantage, d, delta)
        }
        MaskKind::MinimalNegative { delta, anchor } => {
            let reference = match anchor {
                Anchor::Rollout => u.mu_prob,
                Anchor::Recompute => u.anchor_prob.ok_or_else(|| missing("anchor_prob", rule))?,
            };
            mask_minimal_negative(u.advantage, reference, u.pi_prob, delta)
        }
        MaskKind::Relaxed { eps_low, eps_high, alpha, direction } => {
            mask_relaxed(u.ratio, u.advantage, u.mu_prob, eps_low, eps_high, alpha, direction)
        }
    })
}

/// Score-function coefficient `M_t · min(r_t, C) · Â_t`.
pub fn token_gradient_term(u: &TokenUpdate, rule: &MaskRule) -> Result<f64> {
    let m = evaluate_mask(u, rule)?;
    if m == 0 {
        return Ok(0.0);
    }
    Ok(u.ratio.min(rule.effective_cap()) * u.advantage)
}

/// The rollout row if the step recorded all of it.
pub fn recorded_rollout_row(step: &StepRecord, vocab_size: usize) -> Option<Distribution> {
    let top = step.rollout_topk.as_ref()?;
    if top.len() != vocab_size {
        return None;
    }
    let mut probs = vec![0.0; vocab_size];
    for &(t, p) in top {
        probs[t as usize] = p;
    }
    Distribution::new(probs).ok()
}

fn anchored_divergence(
    kind: DivergenceKind,
    anchor: Anchor,
    step: &StepRecord,
    current: &Distribution,
    rule: &MaskRule,
) -> Result<f64> {
    let a = step.token;
    match (anchor, kind.approx) {
        (Anchor::Rollout, Approx::Binary) => Ok(binary(kind.metric, step.rollout_prob, current.prob(a))),
        (Anchor::Recompute, Approx::Binary) => Ok(binary(kind.metric, step.trainer_prob, current.prob(a))),
        (Anchor::Recompute, approx) => {
            let anchor_row = step.trainer_full.as_ref().ok_or_else(|| missing("trainer_full", rule))?;
            full_or_topk(kind.metric, approx, anchor_row, current, a)
        }
        (Anchor::Rollout, approx) => {
            let top = step.rollout_topk.as_ref().ok_or_else(|| missing("rollout_topk", rule))?;
            if let Some(mu) = recorded_rollout_row(step, current.len()) {
                return full_or_topk(kind.metric, approx, &mu, current, a);
            }
            match approx {
                Approx::TopK(_) => {
                    let (rm, rp) = divergence::reduce_recorded(top, current);
                    Ok(divergence::reduced_divergence(kind.metric, &rm, &rp))
                }
                _ => Err(missing("rollout_topk (full row)", rule)),
            }
        }
    }
}

fn binary(metric: Metric, mu_a: f64, pi_a: f64) -> f64 {
    match metric {
        Metric::Tv => divergence::tv_binary(mu_a, pi_a),
        Metric::Kl => divergence::kl_binary(mu_a, pi_a),
    }
}

fn full_or_topk(metric: Metric, approx: Approx, mu: &Distribution, pi: &Distribution, a: Token) -> Result<f64> {
    divergence::divergence(DivergenceKind::new(metric, approx), mu, pi, a)
}

/// Builds the token update for one recorded step, given the current trainer row
/// `π_θ(·|s_t)`, and evaluates its mask.
pub fn prepare_update(step: &StepRecord, advantage: f64, current: &Distribution, rule: &MaskRule) -> Result<TokenUpdate> {
    let mut u = TokenUpdate::new(step.state.clone(), step.token, advantage, step.rollout_prob, current.prob(step.token))
        .with_anchor(step.trainer_prob);
    if let MaskKind::Dppo { divergence: kind, anchor, .. } = rule.kind {
        u = u.with_divergence(anchored_divergence(kind, anchor, step, current, rule)?);
    }
    u.mask = evaluate_mask(&u, rule)?;
    u.capped_weight = u.ratio.min(rule.effective_cap());
    Ok(u)
}

/// Per-batch diagnostics of a gradient evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchStats {
    pub tokens: usize,
    pub masked_fraction: f64,
    /// Fraction of tokens with `Â < 0` and `μ − π_θ ≥ 0.5`.
    pub bad_update_fraction: f64,
    /// Mean μ-probability of masked tokens; `None` when nothing was masked.
    pub clipped_token_prob_mean: Option<f64>,
    /// Mean trainer entropy at masked tokens; `None` when nothing was masked.
    pub clipped_token_entropy_mean: Option<f64>,
    /// Mean trainer entropy over all steps.
    pub entropy_mean: f64,
    /// Mean `|π_θ' − μ_θ'|` on sampled tokens.
    pub mismatch_mean: f64,
    /// Largest exact `TV(μ_θ'(·|s), π_θ(·|s))` over steps whose rollout row was recorded.
    pub dtv_max: Option<f64>,
}

#[derive(Debug, Default)]
struct Partial {
    grad: SparseGrad,
    tokens: usize,
    masked: usize,
    bad: usize,
    clipped_prob: f64,
    clipped_entropy: f64,
    entropy: f64,
    mismatch: f64,
    dtv_max: Option<f64>,
}

fn trajectory_terms(traj: &Trajectory, adv: f64, policy: &TabularPolicy, rule: &MaskRule) -> Result<Partial> {
    let mut part = Partial::default();
    for step in &traj.steps {
        let row = policy.distribution(&step.state);
        let u = prepare_update(step, adv, &row, rule)?;
        let h = dist::entropy(&row);
        part.tokens += 1;
        part.entropy += h;
        part.mismatch += (step.trainer_prob - step.rollout_prob).abs();
        if adv < 0.0 && step.rollout_prob - u.pi_prob >= BAD_UPDATE_THRESHOLD {
            part.bad += 1;
        }
        if let Some(mu) = recorded_rollout_row(step, policy.vocab().size()) {
            let tv = divergence::tv_exact(&mu, &row)?;
            part.dtv_max = Some(part.dtv_max.map_or(tv, |m: f64| m.max(tv)));
        }
        if u.mask == 0 {
            part.masked += 1;
            part.clipped_prob += step.rollout_prob;
            part.clipped_entropy += h;
            continue;
        }
        let coef = u.capped_weight * adv;
        if !coef.is_finite() {
            return Err(Error::GradientBlowup(format!(
                "non-finite coefficient {coef} at {:?} token {} (ratio {}, advantage {adv})",
                step.state, step.token, u.ratio
            )));
        }
        if coef != 0.0 {
            part.grad.add_score(&policy.row_key(&step.state), step.token, coef, &row);
        }
    }
    Ok(part)
}

/// Unified masked gradient: the mean over trajectories of the summed token terms,
/// evaluated at the current `policy`. `advantages[i]` belongs to `trajectories[i]`.
/// Per-trajectory terms may run in parallel; they are folded in index order.
pub fn batch_gradient(
    trajectories: &[Trajectory],
    advantages: &[f64],
    policy: &TabularPolicy,
    rule: &MaskRule,
    exec: Exec,
) -> Result<(SparseGrad, BatchStats)> {
    if trajectories.len() != advantages.len() {
        return Err(Error::LengthMismatch { left: trajectories.len(), right: advantages.len() });
    }
    let parts = par::map_indexed(exec, trajectories.len(), |i| trajectory_terms(&trajectories[i], advantages[i], policy, rule));
    let mut grad = SparseGrad::new();
    let mut acc = Partial::default();
    let scale = if trajectories.is_empty() { 0.0 } else { 1.0 / trajectories.len() as f64 };
    for part in parts {
        let part = part?;
        grad.add_scaled(&part.grad, scale);
        acc.tokens += part.tokens;
        acc.masked += part.masked;
        acc.bad += part.bad;
        acc.clipped_prob += part.clipped_prob;
        acc.clipped_entropy += part.clipped_entropy;
        acc.entropy += part.entropy;
        acc.mismatch += part.mismatch;
        acc.dtv_max = match (acc.dtv_max, part.dtv_max) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
    }
    if let Some((s, a, v)) = grad.first_non_finite() {
        return Err(Error::GradientBlowup(format!("gradient entry {v} at {s:?} token {a}")));
    }
    let n = acc.tokens.max(1) as f64;
    let stats = BatchStats {
        tokens: acc.tokens,
        masked_fraction: acc.masked as f64 / n,
        bad_update_fraction: acc.bad as f64 / n,
        clipped_token_prob_mean: (acc.masked > 0).then(|| acc.clipped_prob / acc.masked as f64),
        clipped_token_entropy_mean: (acc.masked > 0).then(|| acc.clipped_entropy / acc.masked as f64),
        entropy_mean: acc.entropy / n,
        mismatch_mean: acc.mismatch / n,
        dtv_max: acc.dtv_max,
    };
    Ok((grad, stats))
}

/// Fraction of recorded steps with `Â < 0` and `μ − π ≥ threshold`.
pub fn bad_update_fraction(trajectories: &[Trajectory], advantages: &[f64], threshold: f64) -> f64 {
    let (mut bad, mut n) = (0usize, 0usize);
    for (t, &adv) in trajectories.iter().zip(advantages) {
        for s in &t.steps {
            n += 1;
            if adv < 0.0 && s.rollout_prob - s.trainer_prob >= threshold {
                bad += 1;
            }
        }
    }
    if n == 0 { 0.0 } else { bad as f64 / n as f64 }
}
