//! Experiment file schema. Every section rejects unknown keys and fills missing
//! ones from the defaults below.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use trustlab_core::algorithms::{AdvantageConfig, Anchor, Direction, MaskKind, MaskRule};
use trustlab_core::divergence::{Approx, DivergenceKind, Metric};
use trustlab_core::env::{NeedleSpec, NeedleTask, PathRewardTree};
use trustlab_core::mismatch::{MismatchConfig, MismatchKind};
use trustlab_core::policy::{OptimizerConfig, TabularPolicy};
use trustlab_core::trainer::{TrainConfig, TrainTask};
use trustlab_core::{Exec, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed for targets, rollouts, batching and mismatch noise.
    pub seed: u64,
    /// Directory receiving metrics.csv, config.toml, summary.txt and snapshots.
    pub out_dir: PathBuf,
    pub env: EnvSection,
    pub mismatch: MismatchSection,
    pub algo: AlgoSection,
    pub advantage: AdvantageSection,
    pub train: TrainSection,
    pub divergence: DivergenceSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            env: EnvSection::default(),
            mismatch: MismatchSection::default(),
            algo: AlgoSection::default(),
            advantage: AdvantageSection::default(),
            train: TrainSection::default(),
            divergence: DivergenceSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Needle,
    Tree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub kind: EnvKind,
    pub vocab: usize,
    pub horizon: usize,
    pub num_prompts: usize,
    pub targets_per_prompt: usize,
    pub target_prob: f64,
    pub hard_fraction: f64,
    pub hard_steps: usize,
    pub hard_prob: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_window: Option<usize>,
    pub reward_low: f64,
    pub reward_high: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        let n = NeedleSpec::default();
        Self {
            kind: EnvKind::Needle,
            vocab: 16,
            horizon: 16,
            num_prompts: n.num_prompts,
            targets_per_prompt: n.targets_per_prompt,
            target_prob: n.target_prob,
            hard_fraction: n.hard_fraction,
            hard_steps: n.hard_steps,
            hard_prob: n.hard_prob,
            context_window: n.context_window,
            reward_low: 0.0,
            reward_high: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchName {
    None,
    LogitNoise,
    Quantize,
    TempJitter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MismatchSection {
    pub kind: MismatchName,
    pub sigma: f64,
    pub bits: u32,
    pub jitter: f64,
}

impl Default for MismatchSection {
    fn default() -> Self {
        Self { kind: MismatchName::None, sigma: 0.05, bits: 16, jitter: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgoName {
    Pgis,
    Cispo,
    Grpo,
    Minirl,
    Dppo,
    MinimalNegative,
    Relaxed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgoSection {
    pub name: AlgoName,
    pub eps_low: f64,
    pub eps_high: f64,
    /// Ratio cap C; the truncation constant for cispo.
    pub c_cap: f64,
    pub delta: f64,
    pub anchor: Anchor,
    pub alpha: f64,
    pub direction: Direction,
}

impl Default for AlgoSection {
    fn default() -> Self {
        Self {
            name: AlgoName::Pgis,
            eps_low: 0.2,
            eps_high: 0.28,
            c_cap: trustlab_core::algorithms::DEFAULT_RATIO_CAP,
            delta: 0.15,
            anchor: Anchor::Rollout,
            alpha: 0.0,
            direction: Direction::Both,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvantageSection {
    pub normalize_std: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub prompts_per_batch: usize,
    pub group_size: usize,
    pub grad_steps_per_batch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minibatch_size: Option<usize>,
    pub total_iterations: usize,
    pub optimizer: OptimizerName,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub eval_every: usize,
    pub snapshot_every: usize,
    pub reward_threshold: f64,
    pub parallel: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            prompts_per_batch: 16,
            group_size: 8,
            grad_steps_per_batch: 4,
            minibatch_size: None,
            total_iterations: 300,
            optimizer: OptimizerName::Adam,
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 1,
            snapshot_every: 0,
            reward_threshold: 0.9,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproxName {
    Exact,
    Binary,
    Topk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DivergenceSection {
    pub metric: Metric,
    pub approx: ApproxName,
    pub k: usize,
}

impl Default for DivergenceSection {
    fn default() -> Self {
        Self { metric: Metric::Tv, approx: ApproxName::Binary, k: trustlab_core::divergence::DEFAULT_TOP_K }
    }
}

impl DivergenceSection {
    pub fn kind(&self) -> DivergenceKind {
        let approx = match self.approx {
            ApproxName::Exact => Approx::Exact,
            ApproxName::Binary => Approx::Binary,
            ApproxName::Topk => Approx::TopK(self.k),
        };
        DivergenceKind::new(self.metric, approx)
    }
}

impl ExperimentConfig {
    pub fn mask_rule(&self) -> MaskRule {
        let a = &self.algo;
        let kind = match a.name {
            AlgoName::Pgis => MaskKind::Pgis,
            AlgoName::Cispo => MaskKind::Cispo { c: a.c_cap },
            AlgoName::Grpo => MaskKind::GrpoClip { eps_low: a.eps_low, eps_high: a.eps_high },
            AlgoName::Minirl => MaskKind::MiniRl { eps_low: a.eps_low, eps_high: a.eps_high },
            AlgoName::Dppo => MaskKind::Dppo { divergence: self.divergence.kind(), delta: a.delta, anchor: a.anchor },
            AlgoName::MinimalNegative => MaskKind::MinimalNegative { delta: a.delta, anchor: a.anchor },
            AlgoName::Relaxed => {
                MaskKind::Relaxed { eps_low: a.eps_low, eps_high: a.eps_high, alpha: a.alpha, direction: a.direction }
            }
        };
        MaskRule::new(kind).with_cap(a.c_cap)
    }

    pub fn mismatch_config(&self) -> MismatchConfig {
        let m = &self.mismatch;
        let kind = match m.kind {
            MismatchName::None => MismatchKind::None,
            MismatchName::LogitNoise => MismatchKind::LogitNoise { sigma: m.sigma },
            MismatchName::Quantize => MismatchKind::Quantize { bits: m.bits },
            MismatchName::TempJitter => MismatchKind::TempJitter { jitter: m.jitter },
        };
        MismatchConfig { kind, seed: self.seed }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let optimizer = match t.optimizer {
            OptimizerName::Adam => OptimizerConfig::Adam { lr: t.lr, beta1: t.beta1, beta2: t.beta2, eps: t.adam_eps },
            OptimizerName::Sgd => OptimizerConfig::Sgd { lr: t.lr },
        };
        let cfg = TrainConfig {
            prompts_per_batch: t.prompts_per_batch,
            group_size: t.group_size,
            grad_steps_per_batch: t.grad_steps_per_batch,
            minibatch_size: t.minibatch_size,
            total_iterations: t.total_iterations,
            optimizer,
            mask_rule: self.mask_rule(),
            mismatch: self.mismatch_config(),
            advantage: AdvantageConfig { normalize_std: self.advantage.normalize_std },
            eval_every: t.eval_every,
            rollout_topk: self.divergence.k,
            seed: self.seed,
            exec: if t.parallel { Exec::Parallel } else { Exec::Sequential },
        };
        cfg.validate()?;
        if let OptimizerConfig::Adam { beta1, beta2, eps, .. } = optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                bail!("train.beta1 and train.beta2 must lie in [0, 1) and train.adam_eps must be > 0");
            }
        }
        Ok(cfg)
    }

    pub fn build_task(&self) -> Result<TrainTask> {
        let e = &self.env;
        let vocab = Vocab::new(e.vocab).map_err(|err| anyhow!("env.vocab: {err}"))?;
        if e.horizon == 0 {
            bail!("env.horizon must be >= 1");
        }
        match e.kind {
            EnvKind::Needle => {
                let spec = NeedleSpec {
                    num_prompts: e.num_prompts,
                    targets_per_prompt: e.targets_per_prompt,
                    target_prob: e.target_prob,
                    hard_fraction: e.hard_fraction,
                    hard_steps: e.hard_steps,
                    hard_prob: e.hard_prob,
                    seed: self.seed,
                    context_window: e.context_window,
                };
                Ok(TrainTask::needle(NeedleTask::build(vocab, e.horizon, &spec).context("env")?))
            }
            EnvKind::Tree => {
                let tree = PathRewardTree { num_prompts: e.num_prompts, low: e.reward_low, high: e.reward_high, seed: self.seed };
                let env = tree.build(vocab, e.horizon).context("env")?;
                let policy = match e.context_window {
                    Some(k) => TabularPolicy::with_window(vocab, k),
                    None => TabularPolicy::new(vocab),
                };
                Ok(TrainTask::new(env, policy))
            }
        }
    }

    /// Checks everything a run needs, without running it.
    pub fn validate(&self) -> Result<()> {
        self.train_config()?;
        self.build_task()?;
        if !(self.train.reward_threshold.is_finite()) {
            bail!("train.reward_threshold must be finite");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow!("invalid config: {e}"))
    }
}

/// Sets `dotted.key` in `table` to `raw`, read as a TOML value when it parses as
/// one (so `inf`, `0.1`, `true` keep their types) and as a string otherwise.
pub fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("invalid override key {key:?}");
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override {key:?}: {p:?} is not a section"),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("override {s:?} is not of the form key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Applies `key=value` overrides to `base`.
pub fn apply_overrides(base: &ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig> {
    if overrides.is_empty() {
        return Ok(base.clone());
    }
    let mut table = toml::Table::try_from(base).context("serializing config")?;
    for o in overrides {
        let (k, v) = parse_override(o)?;
        set_dotted(&mut table, &k, &v)?;
    }
    let text = toml::to_string(&table).context("serializing config")?;
    ExperimentConfig::from_toml(&text)
}

/// Reads a config file.
pub fn load_file(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| anyhow!("invalid config {}: {e}", path.display()))
}
