//! Config reference page, generated from the schema defaults so it cannot drift.

use std::fmt::Write as _;

use crate::config::ExperimentConfig;
use crate::presets::{preset, Preset, PRESET_NAMES};

/// `(dotted key, description)` for every config key, in page order.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "Master seed: needle targets, batching, rollouts and mismatch noise all derive from it."),
    ("out_dir", "Output directory for metrics.csv, config.toml, summary.txt and policy snapshots."),
    ("env.kind", "`needle` (rewarded target sequences) or `tree` (random leaf rewards, enumerable when small)."),
    ("env.vocab", "Vocabulary size."),
    ("env.horizon", "Maximum response length T."),
    ("env.num_prompts", "Number of prompts."),
    ("env.targets_per_prompt", "Needle: rewarded sequences per prompt."),
    ("env.target_prob", "Needle: initial probability of the target token at ordinary steps."),
    ("env.hard_fraction", "Needle: fraction of prompts with a low-probability needle step."),
    ("env.hard_steps", "Needle: needle steps per hard prompt."),
    ("env.hard_prob", "Needle: initial target probability at a needle step."),
    ("env.context_window", "Key policy rows by the prompt and the last k tokens (unset: full prefix)."),
    ("env.reward_low", "Tree: lower end of the leaf reward range."),
    ("env.reward_high", "Tree: upper end of the leaf reward range."),
    ("mismatch.kind", "`none`, `logit_noise`, `quantize` or `temp_jitter`."),
    ("mismatch.sigma", "logit_noise: standard deviation of the per-state logit noise."),
    ("mismatch.bits", "quantize: mantissa bits kept (4 to 52)."),
    ("mismatch.jitter", "temp_jitter: half-width of the per-state temperature jitter."),
    ("algo.name", "`pgis`, `cispo`, `grpo`, `minirl`, `dppo`, `minimal_negative` or `relaxed`."),
    ("algo.eps_low", "Lower clip threshold (grpo, minirl, relaxed)."),
    ("algo.eps_high", "Upper clip threshold (grpo, minirl, relaxed)."),
    ("algo.c_cap", "Ratio cap C in min(r, C); the truncation constant for cispo; `inf` disables it. Ignored by pgis."),
    ("algo.delta", "Divergence threshold (dppo) or probability-drop threshold (minimal_negative)."),
    ("algo.anchor", "`rollout` or `recompute`: distribution the trust region is measured against."),
    ("algo.alpha", "relaxed: tokens with rollout probability below alpha get the relaxed clip."),
    ("algo.direction", "relaxed: `high`, `low` or `both` clip sides dropped below alpha."),
    ("advantage.normalize_std", "Divide group advantages by the group standard deviation."),
    ("train.prompts_per_batch", "Prompts sampled per iteration."),
    ("train.group_size", "Responses per prompt (G)."),
    ("train.grad_steps_per_batch", "Gradient passes over each batch."),
    ("train.minibatch_size", "Trajectories per minibatch (unset: full batch)."),
    ("train.total_iterations", "Iterations to run."),
    ("train.optimizer", "`adam` or `sgd`."),
    ("train.lr", "Learning rate."),
    ("train.beta1", "Adam first-moment decay."),
    ("train.beta2", "Adam second-moment decay."),
    ("train.adam_eps", "Adam denominator epsilon."),
    ("train.eval_every", "Compute j_exact every n iterations (0: never)."),
    ("train.snapshot_every", "Write a policy snapshot every n iterations (0: only at the end)."),
    ("train.reward_threshold", "Reward used for iterations_to_threshold in the summary."),
    ("train.parallel", "Use the thread pool for rollouts and gradient terms (results are identical either way)."),
    ("divergence.metric", "`tv` or `kl` (dppo)."),
    ("divergence.approx", "`binary`, `topk` or `exact` (dppo)."),
    ("divergence.k", "K for the top-k approximation; also the recorded rollout top-k for large vocabularies."),
];

/// Keys that are omitted from serialized configs while unset.
pub const OPTIONAL_KEYS: &[&str] = &["env.context_window", "train.minibatch_size"];

/// Flattens a TOML table into `(dotted key, rendered value)` pairs.
pub fn flatten(table: &toml::Table) -> Vec<(String, String)> {
    fn go(prefix: &str, t: &toml::Table, out: &mut Vec<(String, String)>) {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(inner) => go(&key, inner, out),
                other => out.push((key, other.to_string())),
            }
        }
    }
    let mut out = Vec::new();
    go("", table, &mut out);
    out
}

fn preset_blurb(name: &str) -> &'static str {
    match name {
        "stability-pgis" => "unmasked importance-weighted policy gradient under mismatch",
        "stability-cispo" => "truncated importance sampling, C = 3",
        "stability-grpo" => "GRPO clip with Clip-Higher (0.2, 0.28)",
        "stability-minirl" => "GRPO clip on the recomputed ratio",
        "stability-minirl-tis" => "MiniRL with ratio cap 3",
        "stability-dppo-kl" => "DPPO, binary KL, delta 0.05",
        "stability-dppo-tv" => "DPPO, binary TV, delta 0.15",
        "anchor-recompute" => "stability-dppo-kl measured against the recomputed trainer distribution",
        "minimal-negative-0.5" => "mask only negative updates that drop the token probability by > 0.5",
        "minimal-negative-0.8" => "the same with delta 0.8",
        "minimal-negative-0.5-recompute" => "delta 0.5 against the recomputed trainer distribution",
        "efficiency-grpo" => "relaxation baseline (alpha = 0, plain clip)",
        "efficiency-relax-both" => "both clip sides dropped for rollout probability < 0.1",
        "efficiency-relax-high" => "upper clip side dropped for rollout probability < 0.1",
        "efficiency-relax-low" => "lower clip side dropped for rollout probability < 0.1",
        "sweep-alpha" => "alpha in {0, 0.05, 0.1} over efficiency-relax-both",
        "sweep-direction" => "direction in {high, low, both} over efficiency-relax-both",
        "sweep-minimal-delta" => "delta in {0.5, 0.8} over minimal-negative-0.5",
        "bounds" => "10^4 random policy pairs over vocab {2,3,4} x horizon {1..4}",
        _ => "",
    }
}

/// The whole page as Markdown.
pub fn reference_markdown() -> String {
    let defaults = toml::Table::try_from(ExperimentConfig::default()).expect("config serializes");
    let values: std::collections::HashMap<String, String> = flatten(&defaults).into_iter().collect();
    let mut s = String::from("# Experiment config reference\n\n");
    s.push_str("Generated by `trustlab reference`. Config files are TOML; unknown keys are rejected. ");
    s.push_str("Any key can be overridden with `--set section.key=value`.\n");
    let mut section = None;
    for (key, doc) in KEY_DOCS {
        let sec = key.split_once('.').map_or("", |(a, _)| a);
        if section != Some(sec) {
            section = Some(sec);
            let title = if sec.is_empty() { "## Top level".to_string() } else { format!("## [{sec}]") };
            let _ = write!(s, "\n{title}\n\n| key | default | description |\n|---|---|---|\n");
        }
        let default = values.get(*key).cloned().unwrap_or_else(|| "unset".into());
        let _ = writeln!(s, "| `{key}` | `{default}` | {doc} |");
    }
    s.push_str("\n## Presets\n\n| name | kind | description |\n|---|---|---|\n");
    for name in PRESET_NAMES {
        let kind = match preset(name) {
            Some(Preset::Experiment(_)) => "run",
            Some(Preset::Sweep(_)) => "sweep",
            Some(Preset::Bounds(_)) => "verify-bounds",
            None => "missing",
        };
        let _ = writeln!(s, "| `{name}` | {kind} | {} |", preset_blurb(name));
    }
    s
}
