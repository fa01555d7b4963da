//! Named configurations. Seeds and learning rates were fixed by calibration runs
//! and are what the acceptance suite checks against.

use std::path::PathBuf;

use trustlab_core::algorithms::{Anchor, Direction};
use trustlab_core::divergence::Metric;

use crate::config::{AlgoName, ApproxName, ExperimentConfig, MismatchName};

/// Parameters of a bound-verification sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundsPreset {
    pub pairs: usize,
    pub vocabs: Vec<usize>,
    pub horizons: Vec<usize>,
    pub seed: u64,
}

/// One-parameter sweep over a base experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPreset {
    pub base: &'static str,
    pub param: &'static str,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Preset {
    Experiment(Box<ExperimentConfig>),
    Bounds(BoundsPreset),
    Sweep(SweepPreset),
}

pub const PRESET_NAMES: &[&str] = &[
    "stability-pgis",
    "stability-cispo",
    "stability-grpo",
    "stability-minirl",
    "stability-minirl-tis",
    "stability-dppo-kl",
    "stability-dppo-tv",
    "anchor-recompute",
    "minimal-negative-0.5",
    "minimal-negative-0.8",
    "minimal-negative-0.5-recompute",
    "efficiency-grpo",
    "efficiency-relax-both",
    "efficiency-relax-high",
    "efficiency-relax-low",
    "sweep-alpha",
    "sweep-direction",
    "sweep-minimal-delta",
    "bounds",
];

pub const STABILITY_SEED: u64 = 0;
pub const EFFICIENCY_SEED: u64 = 1;

/// Needle task with 15% hard prompts, LogitNoise σ = 0.05, 300 iterations.
pub fn stability_base(name: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig { seed: STABILITY_SEED, out_dir: PathBuf::from("runs").join(name), ..Default::default() };
    c.mismatch.kind = MismatchName::LogitNoise;
    c.mismatch.sigma = 0.05;
    c.train.lr = 0.05;
    c.algo.c_cap = f64::INFINITY;
    c
}

/// Same task without mismatch, a larger step so the clip binds on low-probability tokens.
pub fn efficiency_base(name: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig { seed: EFFICIENCY_SEED, out_dir: PathBuf::from("runs").join(name), ..Default::default() };
    c.mismatch.kind = MismatchName::None;
    c.train.lr = 0.3;
    c.algo.name = AlgoName::Relaxed;
    c.algo.eps_low = 0.2;
    c.algo.eps_high = 0.28;
    c.algo.alpha = 0.1;
    c
}

pub fn preset(name: &str) -> Option<Preset> {
    let exp = |c: ExperimentConfig| Some(Preset::Experiment(Box::new(c)));
    let mut c = stability_base(name);
    match name {
        "stability-pgis" => {
            c.algo.name = AlgoName::Pgis;
            exp(c)
        }
        "stability-cispo" => {
            c.algo.name = AlgoName::Cispo;
            c.algo.c_cap = 3.0;
            exp(c)
        }
        "stability-grpo" => {
            c.algo.name = AlgoName::Grpo;
            exp(c)
        }
        "stability-minirl" => {
            c.algo.name = AlgoName::Minirl;
            exp(c)
        }
        "stability-minirl-tis" => {
            c.algo.name = AlgoName::Minirl;
            c.algo.c_cap = 3.0;
            exp(c)
        }
        "stability-dppo-kl" | "anchor-recompute" => {
            c.algo.name = AlgoName::Dppo;
            c.algo.delta = 0.05;
            c.divergence.metric = Metric::Kl;
            c.divergence.approx = ApproxName::Binary;
            if name == "anchor-recompute" {
                c.algo.anchor = Anchor::Recompute;
            }
            exp(c)
        }
        "stability-dppo-tv" => {
            c.algo.name = AlgoName::Dppo;
            c.algo.delta = 0.15;
            c.divergence.metric = Metric::Tv;
            c.divergence.approx = ApproxName::Binary;
            exp(c)
        }
        "minimal-negative-0.5" | "minimal-negative-0.8" | "minimal-negative-0.5-recompute" => {
            c.algo.name = AlgoName::MinimalNegative;
            c.algo.delta = if name == "minimal-negative-0.8" { 0.8 } else { 0.5 };
            if name.ends_with("recompute") {
                c.algo.anchor = Anchor::Recompute;
            }
            exp(c)
        }
        "efficiency-grpo" => {
            let mut c = efficiency_base(name);
            c.algo.alpha = 0.0;
            exp(c)
        }
        "efficiency-relax-both" | "efficiency-relax-high" | "efficiency-relax-low" => {
            let mut c = efficiency_base(name);
            c.algo.direction = match name {
                "efficiency-relax-high" => Direction::High,
                "efficiency-relax-low" => Direction::Low,
                _ => Direction::Both,
            };
            exp(c)
        }
        "sweep-alpha" => Some(Preset::Sweep(SweepPreset {
            base: "efficiency-relax-both",
            param: "algo.alpha",
            values: vec!["0".into(), "0.05".into(), "0.1".into()],
        })),
        "sweep-direction" => Some(Preset::Sweep(SweepPreset {
            base: "efficiency-relax-both",
            param: "algo.direction",
            values: vec!["high".into(), "low".into(), "both".into()],
        })),
        "sweep-minimal-delta" => Some(Preset::Sweep(SweepPreset {
            base: "minimal-negative-0.5",
            param: "algo.delta",
            values: vec!["0.5".into(), "0.8".into()],
        })),
        "bounds" => Some(Preset::Bounds(BoundsPreset {
            pairs: 10_000,
            vocabs: vec![2, 3, 4],
            horizons: vec![1, 2, 3, 4],
            seed: 0,
        })),
        _ => None,
    }
}

/// The experiment config of `name`, or a message listing what exists.
pub fn experiment(name: &str) -> anyhow::Result<ExperimentConfig> {
    match preset(name) {
        Some(Preset::Experiment(c)) => Ok(*c),
        Some(_) => anyhow::bail!("preset {name:?} is not a single experiment"),
        None => anyhow::bail!("unknown preset {name:?}; known presets: {}", PRESET_NAMES.join(", ")),
    }
}
