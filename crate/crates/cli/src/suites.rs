//! Property sweeps behind `verify-bounds` and `divergence-props`.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use trustlab_core::bounds::{check_report, compute_bounds_with, first_order_match_check, random_pair, random_policy, BoundReport};
use trustlab_core::divergence::*;
use trustlab_core::env::{EpisodicTokenEnv, PathRewardTree, DEFAULT_ENUM_CAP};
use trustlab_core::rng::hash_words;
use trustlab_core::{dist, par, Distribution, Exec, RngStream, Vocab};

/// Relative-error limit for the surrogate-gradient check.
pub const FIRST_ORDER_TOL: f64 = 1e-4;
/// Central-difference step for the surrogate-gradient check.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BoundsSweep {
    pub pairs: usize,
    pub vocabs: Vec<usize>,
    pub horizons: Vec<usize>,
    pub prompts: usize,
    pub seed: u64,
    /// Run the gradient check on every n-th pair (0 disables it).
    pub first_order_every: usize,
    /// Corrupts every report before checking; exercises the failure path.
    pub inject_bug: bool,
    pub exec: Exec,
}

impl Default for BoundsSweep {
    fn default() -> Self {
        Self {
            pairs: 1000,
            vocabs: vec![3],
            horizons: vec![3],
            prompts: 2,
            seed: 0,
            first_order_every: 10,
            inject_bug: false,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundsRow {
    pub pair: usize,
    pub vocab: usize,
    pub horizon: usize,
    pub report: BoundReport,
    pub first_order_err: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BoundsOutcome {
    pub rows: Vec<BoundsRow>,
    /// Pairs with at least one failed check.
    pub failures: usize,
    /// Full text of the first failure, including both policies.
    pub witness: Option<String>,
    pub elapsed: Duration,
}

impl BoundsOutcome {
    pub fn linear_tighter(&self) -> usize {
        self.rows.iter().filter(|r| r.report.linear_bound < r.report.quad_bound).count()
    }

    pub fn first_order_checks(&self) -> usize {
        self.rows.iter().filter(|r| r.first_order_err.is_some()).count()
    }

    pub fn max_first_order_err(&self) -> f64 {
        self.rows.iter().filter_map(|r| r.first_order_err).fold(0.0, f64::max)
    }
}

pub const BOUNDS_CSV_HEADER: &str = "pair,vocab,horizon,exact_diff,surrogate,delta,dtv_max,expected_tv_sum,quad_bound,linear_bound,xi,xi_empirical,sequence_tv,first_order_rel_err";

impl BoundsRow {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.pair,
            self.vocab,
            self.horizon,
            r.exact_diff,
            r.surrogate,
            r.delta,
            r.dtv_max,
            r.expected_tv_sum,
            r.quad_bound,
            r.linear_bound,
            r.xi,
            r.xi_empirical,
            r.sequence_tv,
            self.first_order_err.map(|e| e.to_string()).unwrap_or_default()
        )
    }
}

/// Signed-reward tree of the given shape; the reward table depends on the seed and shape.
pub fn sweep_env(vocab: usize, horizon: usize, prompts: usize, seed: u64) -> anyhow::Result<EpisodicTokenEnv> {
    let tree = PathRewardTree { num_prompts: prompts, low: -1.0, high: 1.0, seed: hash_words([seed, vocab as u64, horizon as u64]) };
    Ok(tree.build(Vocab::new(vocab)?, horizon)?)
}

/// Identity, both bounds, the sequence-TV lemma and agreement with the naive
/// oracle on `pairs` random policy pairs, cycling through every (vocab, horizon)
/// shape. Every `first_order_every`-th pair also runs the gradient check on μ.
pub fn run_bounds_sweep(s: &BoundsSweep) -> anyhow::Result<BoundsOutcome> {
    let start = Instant::now();
    let mut shapes = Vec::new();
    for &v in &s.vocabs {
        for &h in &s.horizons {
            shapes.push((v, h, sweep_env(v, h, s.prompts, s.seed)?));
        }
    }
    if shapes.is_empty() && s.pairs > 0 {
        anyhow::bail!("bounds sweep needs at least one vocab and one horizon");
    }
    let results = par::map_indexed(s.exec, s.pairs, |i| -> anyhow::Result<(BoundsRow, Option<String>)> {
        let (v, h, env) = &shapes[i % shapes.len()];
        let (mu, pi) = random_pair(env, i as u64, s.seed);
        let mut report = compute_bounds_with(env, &mu, &pi, DEFAULT_ENUM_CAP, Exec::Sequential)?;
        if s.inject_bug {
            report.delta += 1e-6;
        }
        let mut failure = check_report(&report, env, &mu, &pi).err().map(|e| format!("pair {i} (vocab {v}, horizon {h}): {e}"));
        let first_order_err = if s.first_order_every > 0 && i % s.first_order_every == 0 {
            let err = first_order_match_check(env, &mu, FD_STEP)?;
            if !(err < FIRST_ORDER_TOL) && failure.is_none() {
                failure = Some(format!(
                    "pair {i} (vocab {v}, horizon {h}): surrogate gradient relative error {err:e} >= {FIRST_ORDER_TOL:e}\n--- policy ---\n{}",
                    mu.to_text()
                ));
            }
            Some(err)
        } else {
            None
        };
        Ok((BoundsRow { pair: i, vocab: *v, horizon: *h, report, first_order_err }, failure))
    });
    let mut rows = Vec::with_capacity(s.pairs);
    let mut failures = 0;
    let mut witness = None;
    for r in results {
        let (row, failure) = r?;
        if let Some(f) = failure {
            failures += 1;
            witness.get_or_insert(f);
        }
        rows.push(row);
    }
    Ok(BoundsOutcome { rows, failures, witness, elapsed: start.elapsed() })
}

/// Gradient check on `envs` random small environments, one random policy each.
pub fn first_order_envs(envs: usize, seed: u64) -> anyhow::Result<Vec<f64>> {
    let results = par::map_indexed(Exec::Parallel, envs, |i| -> anyhow::Result<f64> {
        let mut rng = RngStream::derive(seed, &[0x666f, i as u64]);
        let vocab = 2 + rng.below(2);
        let horizon = 1 + rng.below(3);
        let prompts = 1 + rng.below(2);
        let env = sweep_env(vocab, horizon, prompts, hash_words([seed, i as u64]))?;
        let scale = [0.3, 1.0, 2.0][i % 3];
        let policy = random_policy(&env, scale, &mut rng);
        Ok(first_order_match_check(&env, &policy, FD_STEP)?)
    });
    results.into_iter().collect()
}

#[derive(Debug, Clone)]
pub struct DivergenceSweep {
    pub pairs: usize,
    pub vocabs: Vec<usize>,
    pub seed: u64,
    /// Constant-tail-ratio constructions checked for KL equality.
    pub equality_cases: usize,
    /// Pairs used for the Monte-Carlo TV convergence check.
    pub mc_pairs: usize,
    pub mc_samples: usize,
    pub exec: Exec,
}

impl Default for DivergenceSweep {
    fn default() -> Self {
        Self {
            pairs: 100_000,
            vocabs: vec![4, 64, 1024],
            seed: 0,
            equality_cases: 1000,
            mc_pairs: 30,
            mc_samples: 100_000,
            exec: Exec::Parallel,
        }
    }
}

/// Failure counts per property; `min_slack` is the smallest `exact − approx` seen.
#[derive(Debug, Clone, Default)]
pub struct DivergenceOutcome {
    pub pairs: usize,
    pub lower_bound_failures: usize,
    pub min_slack: f64,
    pub monotonicity_failures: usize,
    pub gap_bound_failures: usize,
    pub pinsker_failures: usize,
    pub full_support_failures: usize,
    pub equality_failures: usize,
    pub max_equality_err: f64,
    pub mc_failures: usize,
    pub witness: Option<String>,
    pub elapsed: Duration,
}

impl DivergenceOutcome {
    pub fn total_failures(&self) -> usize {
        self.lower_bound_failures
            + self.monotonicity_failures
            + self.gap_bound_failures
            + self.pinsker_failures
            + self.full_support_failures
            + self.equality_failures
            + self.mc_failures
    }
}

const SLACK: f64 = 1e-9;

fn random_logits(rng: &mut RngStream, v: usize, scale: f64) -> Vec<f64> {
    (0..v).map(|_| scale * rng.normal()).collect()
}

/// A pair of distributions from one of several regimes: near-identical,
/// moderately perturbed, independent, or peaked.
pub fn random_distribution_pair(seed: u64, index: u64, v: usize) -> (Distribution, Distribution) {
    let mut rng = RngStream::derive(seed, &[0x646976, index]);
    let scale = [0.5, 2.0, 5.0][(index / 4 % 3) as usize];
    let a = random_logits(&mut rng, v, scale);
    let b: Vec<f64> = match index % 4 {
        0 => a.iter().map(|x| x + 0.01 * rng.normal()).collect(),
        1 => a.iter().map(|x| x + 0.5 * rng.normal()).collect(),
        2 => random_logits(&mut rng, v, scale),
        _ => a.iter().map(|x| x + 3.0 * rng.normal()).collect(),
    };
    (dist::softmax(&a).expect("finite"), dist::softmax(&b).expect("finite"))
}

fn describe(mu: &Distribution, pi: &Distribution, sampled: u32, k: usize) -> String {
    let mut s = format!("vocab {}, sampled {sampled}, k {k}\nmu:", mu.len());
    for p in mu.probs() {
        let _ = write!(s, " {p:e}");
    }
    s.push_str("\npi:");
    for p in pi.probs() {
        let _ = write!(s, " {p:e}");
    }
    s
}

#[derive(Default)]
struct PairResult {
    lower: bool,
    slack: f64,
    mono: bool,
    gap: bool,
    pinsker: bool,
    full: bool,
    witness: Option<String>,
}

fn check_pair(seed: u64, i: usize, v: usize) -> PairResult {
    let (mu, pi) = random_distribution_pair(seed, i as u64, v);
    let mut rng = RngStream::derive(seed, &[0x7069_636b, i as u64]);
    let sampled = dist::sample(&mu, &mut rng);
    let k = 1 + rng.below(v.min(64));
    let tv = tv_exact(&mu, &pi).expect("same length");
    let kl = kl_exact(&mu, &pi).expect("same length");
    let tvb = tv_binary(mu.prob(sampled), pi.prob(sampled));
    let klb = kl_binary(mu.prob(sampled), pi.prob(sampled));
    let tvk = tv_topk(&mu, &pi, k, sampled).expect("valid");
    let klk = kl_topk(&mu, &pi, k, sampled).expect("valid");
    let slack = (tv - tvb).min(kl - klb).min(tv - tvk).min(kl - klk);
    let lower = slack >= -SLACK;
    let mono = tv_topk(&mu, &pi, k + 1, sampled).expect("valid") - tvk >= -SLACK
        && kl_topk(&mu, &pi, k + 1, sampled).expect("valid") - klk >= -SLACK;
    let support = topk_support(&mu, k, sampled);
    let (mut om, mut op) = (0.0, 0.0);
    for a in 0..v as u32 {
        if !support.contains(&a) {
            om += mu.prob(a);
            op += pi.prob(a);
        }
    }
    let gap = tv - tvk <= 0.5 * (om + op) + SLACK;
    let pinsker = tv * tv <= 0.5 * kl + SLACK;
    let full = v > 64
        || ((tv_topk(&mu, &pi, v, sampled).expect("valid") - tv).abs() <= 1e-12
            && (kl_topk(&mu, &pi, v, sampled).expect("valid") - kl).abs() <= 1e-12);
    let witness = (!(lower && mono && gap && pinsker && full)).then(|| {
        format!(
            "pair {i}: lower_bounds={lower} (slack {slack:e}) k_monotone={mono} gap_bound={gap} pinsker={pinsker} full_support={full}\n{}",
            describe(&mu, &pi, sampled, k)
        )
    });
    PairResult { lower, slack, mono, gap, pinsker, full, witness }
}

/// Distribution whose top-`k` head is arbitrary and whose tail has a constant
/// π/μ ratio; Top-K KL then equals the exact KL.
pub fn constant_tail_pair(seed: u64, index: u64, v: usize, k: usize) -> (Distribution, Distribution) {
    let mut rng = RngStream::derive(seed, &[0x6571, index]);
    let mut w: Vec<f64> = (0..v).map(|i| if i < k { (12.0 + rng.normal()).exp() } else { rng.normal().exp() }).collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    let mu = Distribution::new(w.clone()).expect("normalized");
    let ratio = 0.2 + 2.0 * rng.uniform();
    let tail_mu: f64 = w[k..].iter().sum();
    let head: Vec<f64> = (0..k).map(|_| 0.05 + rng.uniform()).collect();
    let head_total: f64 = head.iter().sum();
    let head_mass = (1.0 - ratio * tail_mu).max(0.0);
    let mut p: Vec<f64> = head.iter().map(|h| h / head_total * head_mass).collect();
    p.extend(w[k..].iter().map(|m| m * ratio));
    let pi = Distribution::from_weights(p).expect("positive");
    (mu, pi)
}

/// Exact standard deviation of the single-draw TV estimator under μ.
fn mc_std(mu: &Distribution, pi: &Distribution) -> f64 {
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for (m, p) in mu.probs().iter().zip(pi.probs()) {
        if *m > 0.0 {
            let x = 0.5 * (p / m - 1.0).abs();
            m1 += m * x;
            m2 += m * x * x;
        }
    }
    (m2 - m1 * m1).max(0.0).sqrt()
}

/// Lower bounds, K-monotonicity, the Top-K TV gap bound, Pinsker, full-support
/// equality, constant-tail KL equality and Monte-Carlo TV convergence.
pub fn run_divergence_sweep(s: &DivergenceSweep) -> anyhow::Result<DivergenceOutcome> {
    let start = Instant::now();
    if s.vocabs.is_empty() || s.vocabs.iter().any(|&v| v < 2) {
        anyhow::bail!("divergence sweep needs vocab sizes >= 2");
    }
    let results = par::map_indexed(s.exec, s.pairs, |i| check_pair(s.seed, i, s.vocabs[i % s.vocabs.len()]));
    let mut out = DivergenceOutcome { pairs: s.pairs, min_slack: f64::INFINITY, ..Default::default() };
    for r in results {
        out.lower_bound_failures += usize::from(!r.lower);
        out.monotonicity_failures += usize::from(!r.mono);
        out.gap_bound_failures += usize::from(!r.gap);
        out.pinsker_failures += usize::from(!r.pinsker);
        out.full_support_failures += usize::from(!r.full);
        out.min_slack = out.min_slack.min(r.slack);
        if out.witness.is_none() {
            out.witness = r.witness;
        }
    }

    let eq = par::map_indexed(s.exec, s.equality_cases, |i| {
        let v = s.vocabs[i % s.vocabs.len()].max(4);
        let k = 1 + i % (v / 2).min(20);
        let (mu, pi) = constant_tail_pair(s.seed, i as u64, v, k);
        // the head was made heavy enough to be the top-k
        let sampled = (i % k) as u32;
        let err = (kl_topk(&mu, &pi, k, sampled).expect("valid") - kl_exact(&mu, &pi).expect("valid")).abs();
        (err, describe(&mu, &pi, sampled, k))
    });
    for (err, desc) in eq {
        out.max_equality_err = out.max_equality_err.max(err);
        if !(err <= 1e-10) {
            out.equality_failures += 1;
            out.witness.get_or_insert_with(|| format!("constant-tail KL equality off by {err:e}\n{desc}"));
        }
    }

    for i in 0..s.mc_pairs {
        let v = s.vocabs[i % s.vocabs.len()].min(64);
        let (mu, pi) = random_distribution_pair(s.seed ^ 0x6d63, i as u64, v);
        let mut rng = RngStream::derive(s.seed, &[0x6d63, i as u64]);
        let est = tv_mc_estimate(&mu, &pi, s.mc_samples, &mut rng)?;
        let exact = tv_exact(&mu, &pi)?;
        let tol = 5.0 * mc_std(&mu, &pi) / (s.mc_samples as f64).sqrt() + 1e-12;
        if (est - exact).abs() > tol {
            out.mc_failures += 1;
            out.witness.get_or_insert_with(|| {
                format!("Monte-Carlo TV estimate {est} vs exact {exact} (tolerance {tol:e})\n{}", describe(&mu, &pi, 0, 0))
            });
        }
    }
    if !out.min_slack.is_finite() {
        out.min_slack = 0.0;
    }
    out.elapsed = start.elapsed();
    Ok(out)
}
