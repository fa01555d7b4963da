//! Iterative group-rollout training: freeze θ', sample G responses per prompt from
//! the mismatched rollout distribution, compute group advantages, then take
//! `grad_steps_per_batch` passes of masked policy-gradient ascent.

use std::fmt::Write as _;

use crate::algorithms::{batch_gradient, group_advantages, AdvantageConfig, BatchStats, MaskRule};
use crate::env::{self, rollout_with, EpisodicTokenEnv, NeedleTask, RecordOptions, Trajectory};
use crate::error::{Error, Result};
use crate::mismatch::{mismatch_mean, MismatchConfig, RolloutView};
use crate::par::{self, Exec};
use crate::policy::{apply_update, OptimizerConfig, OptimizerState, TabularPolicy};
use crate::rng::RngStream;

/// Largest vocabulary for which the full rollout row is recorded at every step.
pub const FULL_ROW_VOCAB_LIMIT: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub prompts_per_batch: usize,
    pub group_size: usize,
    pub grad_steps_per_batch: usize,
    /// Trajectories per minibatch; `None` means full-batch passes.
    pub minibatch_size: Option<usize>,
    pub total_iterations: usize,
    pub optimizer: OptimizerConfig,
    pub mask_rule: MaskRule,
    pub mismatch: MismatchConfig,
    pub advantage: AdvantageConfig,
    /// Compute `j_exact` every this many iterations (0 disables it).
    pub eval_every: usize,
    /// Top-K recorded from the rollout row when the vocabulary is too large to keep it whole.
    pub rollout_topk: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            prompts_per_batch: 16,
            group_size: 8,
            grad_steps_per_batch: 4,
            minibatch_size: None,
            total_iterations: 300,
            optimizer: OptimizerConfig::default(),
            mask_rule: MaskRule::pgis(),
            mismatch: MismatchConfig::none(),
            advantage: AdvantageConfig::default(),
            eval_every: 1,
            rollout_topk: crate::divergence::DEFAULT_TOP_K,
            seed: 0,
            exec: Exec::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.prompts_per_batch", self.prompts_per_batch),
            ("train.group_size", self.group_size),
            ("train.grad_steps_per_batch", self.grad_steps_per_batch),
            ("divergence.k", self.rollout_topk),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.group_size < 2 {
            return Err(Error::Config("train.group_size must be >= 2".into()));
        }
        if self.minibatch_size == Some(0) {
            return Err(Error::Config("train.minibatch_size must be >= 1".into()));
        }
        let lr = self.optimizer.lr();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be > 0, got {lr}")));
        }
        self.mask_rule.validate()?;
        self.mismatch.validate()
    }
}

/// Environment, initial policy and optional closed-form `J`.
#[derive(Debug, Clone)]
pub struct TrainTask {
    pub env: EpisodicTokenEnv,
    pub initial_policy: TabularPolicy,
    pub needle: Option<NeedleTask>,
}

impl TrainTask {
    pub fn new(env: EpisodicTokenEnv, initial_policy: TabularPolicy) -> Self {
        Self { env, initial_policy, needle: None }
    }

    pub fn needle(task: NeedleTask) -> Self {
        Self { env: task.env.clone(), initial_policy: task.initial_policy.clone(), needle: Some(task) }
    }

    /// Exact `J(π)` when it can be computed: closed form for the needle task,
    /// enumeration for small environments.
    pub fn exact_return(&self, policy: &TabularPolicy) -> Option<Result<f64>> {
        if let Some(n) = &self.needle {
            return Some(n.expected_return(policy));
        }
        if self.env.is_enumerable(env::DEFAULT_ENUM_CAP) {
            return Some(env::expected_return(&self.env, policy));
        }
        None
    }

    /// Best achievable `J`, when known or enumerable.
    pub fn optimum(&self) -> Option<f64> {
        self.env.optimal_return(env::DEFAULT_ENUM_CAP).ok()
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub reward_mean: f64,
    pub mismatch_mean: f64,
    pub entropy_mean: f64,
    pub masked_fraction: f64,
    pub bad_update_fraction: f64,
    pub clipped_token_prob_mean: Option<f64>,
    pub clipped_token_entropy_mean: Option<f64>,
    pub dtv_max_sampled: Option<f64>,
    pub j_exact: Option<f64>,
}

pub const METRICS_HEADER: [&str; 10] = [
    "iteration",
    "reward_mean",
    "mismatch_mean",
    "entropy_mean",
    "masked_fraction",
    "bad_update_fraction",
    "clipped_token_prob_mean",
    "clipped_token_entropy_mean",
    "dtv_max_sampled",
    "j_exact",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl IterationMetrics {
    /// Comma-separated values in [`METRICS_HEADER`] order (shortest round-trip formatting).
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.reward_mean,
            self.mismatch_mean,
            self.entropy_mean,
            self.masked_fraction,
            self.bad_update_fraction,
            opt(self.clipped_token_prob_mean),
            opt(self.clipped_token_entropy_mean),
            opt(self.dtv_max_sampled),
            opt(self.j_exact)
        );
        s
    }
}

pub fn metrics_header() -> String {
    METRICS_HEADER.join(",")
}

/// Mutable training state.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub policy: TabularPolicy,
    pub optimizer: OptimizerState,
    /// Iterations completed so far.
    pub iteration: usize,
}

impl TrainerState {
    pub fn new(policy: TabularPolicy) -> Self {
        Self { policy, optimizer: OptimizerState::new(), iteration: 0 }
    }
}

/// Prompts used at `iteration`: all of them when the batch covers the prompt set,
/// otherwise a seeded sample without replacement, in ascending order.
pub fn batch_prompts(prompts: &[u32], per_batch: usize, seed: u64, iteration: usize) -> Vec<u32> {
    if per_batch >= prompts.len() {
        return prompts.to_vec();
    }
    let mut rng = RngStream::derive(seed, &[0x7072_6f6d_7074, iteration as u64]);
    let mut pool = prompts.to_vec();
    for i in 0..per_batch {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(per_batch);
    pool.sort_unstable();
    pool
}

/// Rollouts of one iteration, in (prompt, sample) order.
pub fn collect_rollouts(
    task: &TrainTask,
    frozen: &TabularPolicy,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<Vec<Trajectory>> {
    let prompts = batch_prompts(task.env.prompts(), cfg.prompts_per_batch, cfg.seed, iteration);
    let g = cfg.group_size;
    let vocab = task.env.vocab().size();
    let opts = RecordOptions {
        rollout_topk: Some(if vocab <= FULL_ROW_VOCAB_LIMIT { vocab } else { cfg.rollout_topk }),
        trainer_full: cfg.mask_rule.needs_trainer_full(),
    };
    let view = RolloutView { policy: frozen, cfg: cfg.mismatch };
    let out = par::map_indexed(cfg.exec, prompts.len() * g, |i| {
        let prompt = prompts[i / g];
        let mut rng = RngStream::derive(cfg.seed, &[0x726f_6c6c, iteration as u64, prompt as u64, (i % g) as u64]);
        rollout_with(&task.env, prompt, &view, Some(frozen), opts, &mut rng)
    });
    out.into_iter().collect()
}

/// Per-trajectory advantages from consecutive groups of `group_size`.
pub fn advantages_for(trajectories: &[Trajectory], group_size: usize, cfg: AdvantageConfig) -> Result<Vec<f64>> {
    let mut adv = Vec::with_capacity(trajectories.len());
    for group in trajectories.chunks(group_size) {
        let rewards: Vec<f64> = group.iter().map(|t| t.reward).collect();
        adv.extend(group_advantages(&rewards, cfg)?);
    }
    Ok(adv)
}

#[derive(Default)]
struct StatsAcc {
    tokens: usize,
    masked: f64,
    bad: f64,
    entropy: f64,
    clipped_n: f64,
    clipped_prob: f64,
    clipped_entropy: f64,
    dtv_max: Option<f64>,
}

impl StatsAcc {
    fn add(&mut self, s: &BatchStats) {
        let n = s.tokens as f64;
        self.tokens += s.tokens;
        self.masked += s.masked_fraction * n;
        self.bad += s.bad_update_fraction * n;
        self.entropy += s.entropy_mean * n;
        let masked = s.masked_fraction * n;
        if let (Some(p), Some(h)) = (s.clipped_token_prob_mean, s.clipped_token_entropy_mean) {
            self.clipped_n += masked;
            self.clipped_prob += p * masked;
            self.clipped_entropy += h * masked;
        }
        self.dtv_max = match (self.dtv_max, s.dtv_max) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
    }
}

/// One training iteration. On error the state is left as it was before the
/// failing optimizer step.
pub fn run_iteration(state: &mut TrainerState, task: &TrainTask, cfg: &TrainConfig) -> Result<IterationMetrics> {
    let iteration = state.iteration + 1;
    let frozen = state.policy.clone();
    let trajectories = collect_rollouts(task, &frozen, cfg, iteration)?;
    let advantages = advantages_for(&trajectories, cfg.group_size, cfg.advantage)?;
    let j_exact = if cfg.eval_every > 0 && iteration.is_multiple_of(cfg.eval_every) {
        task.exact_return(&frozen).transpose()?
    } else {
        None
    };

    let mb = cfg.minibatch_size.unwrap_or(trajectories.len()).max(1);
    let mut acc = StatsAcc::default();
    for _pass in 0..cfg.grad_steps_per_batch {
        for (trajs, advs) in trajectories.chunks(mb).zip(advantages.chunks(mb)) {
            let (grad, stats) = batch_gradient(trajs, advs, &state.policy, &cfg.mask_rule, cfg.exec)?;
            acc.add(&stats);
            let mut next = state.policy.clone();
            let mut opt = state.optimizer.clone();
            apply_update(&mut next, &grad, &mut opt, &cfg.optimizer)?;
            state.policy = next;
            state.optimizer = opt;
        }
    }
    state.iteration = iteration;

    let n = acc.tokens.max(1) as f64;
    let reward_mean = trajectories.iter().map(|t| t.reward).sum::<f64>() / trajectories.len().max(1) as f64;
    Ok(IterationMetrics {
        iteration,
        reward_mean,
        mismatch_mean: mismatch_mean(&trajectories),
        entropy_mean: acc.entropy / n,
        masked_fraction: acc.masked / n,
        bad_update_fraction: acc.bad / n,
        clipped_token_prob_mean: (acc.clipped_n > 0.0).then(|| acc.clipped_prob / acc.clipped_n),
        clipped_token_entropy_mean: (acc.clipped_n > 0.0).then(|| acc.clipped_entropy / acc.clipped_n),
        dtv_max_sampled: acc.dtv_max,
        j_exact,
    })
}

/// Headline numbers of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub iterations: usize,
    pub final_reward: f64,
    pub peak_reward: f64,
    /// First iteration whose reward reached the threshold.
    pub iterations_to_threshold: Option<usize>,
    pub threshold: f64,
}

impl RunSummary {
    pub fn from_metrics(metrics: &[IterationMetrics], threshold: f64) -> Self {
        Self {
            iterations: metrics.len(),
            final_reward: metrics.last().map_or(0.0, |m| m.reward_mean),
            peak_reward: metrics.iter().map(|m| m.reward_mean).fold(0.0, f64::max),
            iterations_to_threshold: metrics.iter().find(|m| m.reward_mean >= threshold).map(|m| m.iteration),
            threshold,
        }
    }
}

/// Callbacks for streaming results out of [`run_experiment`].
pub trait RunObserver {
    fn on_metrics(&mut self, metrics: &IterationMetrics) -> Result<()>;

    /// Called every `snapshot_every` iterations and once at the end.
    fn on_snapshot(&mut self, _iteration: usize, _policy: &TabularPolicy) -> Result<()> {
        Ok(())
    }

    /// Called with the last good policy when an iteration fails.
    fn on_failure(&mut self, _iteration: usize, _policy: &TabularPolicy, _error: &Error) -> Result<()> {
        Ok(())
    }
}

/// Collects metrics in memory.
#[derive(Debug, Default)]
pub struct Collect {
    pub metrics: Vec<IterationMetrics>,
}

impl RunObserver for Collect {
    fn on_metrics(&mut self, m: &IterationMetrics) -> Result<()> {
        self.metrics.push(m.clone());
        Ok(())
    }
}

/// Runs `cfg.total_iterations` iterations from the task's initial policy.
pub fn run_experiment(
    task: &TrainTask,
    cfg: &TrainConfig,
    snapshot_every: usize,
    observer: &mut dyn RunObserver,
) -> Result<TrainerState> {
    cfg.validate()?;
    let mut state = TrainerState::new(task.initial_policy.clone());
    for _ in 0..cfg.total_iterations {
        match run_iteration(&mut state, task, cfg) {
            Ok(m) => observer.on_metrics(&m)?,
            Err(e) => {
                observer.on_failure(state.iteration + 1, &state.policy, &e)?;
                return Err(e);
            }
        }
        if snapshot_every > 0 && state.iteration.is_multiple_of(snapshot_every) {
            observer.on_snapshot(state.iteration, &state.policy)?;
        }
    }
    if snapshot_every == 0 || !state.iteration.is_multiple_of(snapshot_every) {
        observer.on_snapshot(state.iteration, &state.policy)?;
    }
    Ok(state)
}

/// Metrics of a whole run, in memory.
pub fn train(task: &TrainTask, cfg: &TrainConfig) -> Result<(Vec<IterationMetrics>, TrainerState)> {
    let mut c = Collect::default();
    let state = run_experiment(task, cfg, 0, &mut c)?;
    Ok((c.metrics, state))
}
