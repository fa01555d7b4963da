//! Experiment execution with on-disk outputs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use trustlab_core::policy::TabularPolicy;
use trustlab_core::trainer::{metrics_header, run_experiment, IterationMetrics, RunObserver, RunSummary};

use crate::config::{apply_overrides, ExperimentConfig};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const COMPARISON_FILE: &str = "comparison.csv";

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub metrics: Vec<IterationMetrics>,
    pub summary: RunSummary,
}

pub fn summary_line(s: &RunSummary) -> String {
    let itt = s.iterations_to_threshold.map(|i| i.to_string()).unwrap_or_else(|| "none".into());
    format!(
        "iterations={} final_reward={} peak_reward={} iterations_to_threshold={itt} threshold={}",
        s.iterations, s.final_reward, s.peak_reward, s.threshold
    )
}

struct FileObserver {
    dir: PathBuf,
    csv: BufWriter<File>,
    metrics: Vec<IterationMetrics>,
}

impl FileObserver {
    fn write_policy(&self, name: &str, policy: &TabularPolicy) -> trustlab_core::Result<()> {
        fs::write(self.dir.join(name), policy.to_text())?;
        Ok(())
    }
}

impl RunObserver for FileObserver {
    fn on_metrics(&mut self, m: &IterationMetrics) -> trustlab_core::Result<()> {
        writeln!(self.csv, "{}", m.csv_row())?;
        self.metrics.push(m.clone());
        Ok(())
    }

    fn on_snapshot(&mut self, iteration: usize, policy: &TabularPolicy) -> trustlab_core::Result<()> {
        self.write_policy(&format!("policy_{iteration:06}.txt"), policy)
    }

    fn on_failure(&mut self, iteration: usize, policy: &TabularPolicy, _error: &trustlab_core::Error) -> trustlab_core::Result<()> {
        self.csv.flush()?;
        self.write_policy(&format!("policy_failed_{iteration:06}.txt"), policy)
    }
}

/// Runs `cfg` and writes metrics.csv, config.toml, summary.txt and policy
/// snapshots into `cfg.out_dir`. The config must already validate.
pub fn run_to_dir(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let task = cfg.build_task()?;
    let train = cfg.train_config()?;
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_ECHO_FILE), cfg.to_toml()).with_context(|| format!("writing config echo in {}", dir.display()))?;
    let csv_path = dir.join(METRICS_FILE);
    let file = File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    let mut obs = FileObserver { dir: dir.clone(), csv: BufWriter::new(file), metrics: Vec::new() };
    writeln!(obs.csv, "{}", metrics_header())?;
    let result = run_experiment(&task, &train, cfg.train.snapshot_every, &mut obs);
    obs.csv.flush().with_context(|| format!("writing {}", csv_path.display()))?;
    result.with_context(|| format!("run failed; last good policy snapshot is in {}", dir.display()))?;
    let summary = RunSummary::from_metrics(&obs.metrics, cfg.train.reward_threshold);
    fs::write(dir.join(SUMMARY_FILE), summary_line(&summary) + "\n")?;
    Ok(RunOutput { dir, metrics: obs.metrics, summary })
}

fn dir_name(param: &str, value: &str) -> String {
    let clean = |s: &str| s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect::<String>();
    format!("{}={}", clean(param), clean(value))
}

pub const COMPARISON_HEADER: &str =
    "param,value,final_reward,peak_reward,iterations_to_threshold,final_entropy_mean,final_mismatch_mean,max_masked_fraction";

/// One config per value of `param`, each writing to `<out_dir>/<param>=<value>/`.
pub fn sweep_configs(base: &ExperimentConfig, param: &str, values: &[String]) -> Result<Vec<(String, ExperimentConfig)>> {
    if values.is_empty() {
        bail!("sweep over {param} needs at least one value");
    }
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut c = apply_overrides(base, &[format!("{param}={v}")]).with_context(|| format!("{param}={v}"))?;
        c.out_dir = base.out_dir.join(dir_name(param, v));
        c.validate().with_context(|| format!("{param}={v}"))?;
        configs.push((v.clone(), c));
    }
    Ok(configs)
}

/// Runs prepared sweep configs and writes `<out_dir>/comparison.csv`.
pub fn run_sweep_configs(out_dir: &Path, param: &str, configs: &[(String, ExperimentConfig)]) -> Result<Vec<(String, RunOutput)>> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut runs = Vec::with_capacity(configs.len());
    let mut table = String::from(COMPARISON_HEADER);
    table.push('\n');
    for (v, c) in configs {
        let out = run_to_dir(c)?;
        let last = out.metrics.last();
        let itt = out.summary.iterations_to_threshold.map(|i| i.to_string()).unwrap_or_default();
        let max_masked = out.metrics.iter().map(|m| m.masked_fraction).fold(0.0, f64::max);
        table.push_str(&format!(
            "{param},{v},{},{},{itt},{},{},{max_masked}\n",
            out.summary.final_reward,
            out.summary.peak_reward,
            last.map(|m| m.entropy_mean.to_string()).unwrap_or_default(),
            last.map(|m| m.mismatch_mean.to_string()).unwrap_or_default(),
        ));
        runs.push((v.clone(), out));
    }
    fs::write(out_dir.join(COMPARISON_FILE), table)?;
    Ok(runs)
}

/// [`sweep_configs`] followed by [`run_sweep_configs`].
pub fn run_sweep(base: &ExperimentConfig, param: &str, values: &[String]) -> Result<Vec<(String, RunOutput)>> {
    let configs = sweep_configs(base, param, values)?;
    run_sweep_configs(&base.out_dir, param, &configs)
}

/// Reads a metrics CSV written by [`run_to_dir`].
pub fn read_metrics_column(path: &Path, column: &str) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = headers.iter().position(|h| h == column).with_context(|| format!("{} has no column {column:?}", path.display()))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let x: f64 = rec.get(0).unwrap_or_default().parse().unwrap_or((i + 1) as f64);
        if let Ok(y) = rec.get(col).unwrap_or_default().parse::<f64>() {
            out.push((x, y));
        }
    }
    Ok(out)
}
