//! Subcommand bodies. Each prints its report to stdout and maps failures to
//! [`Failure`] variants.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use trustlab_core::Exec;

use crate::config::{apply_overrides, load_file, ExperimentConfig};
use crate::presets::{self, Preset};
use crate::reference::reference_markdown;
use crate::render::{line_chart, Series};
use crate::runner::{self, summary_line};
use crate::suites::{self, BoundsSweep, DivergenceSweep, BOUNDS_CSV_HEADER};
use crate::{CmdResult, Failure};

/// Where a config comes from, plus command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct ConfigSource {
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub set: Vec<String>,
}

fn usage(e: anyhow::Error) -> Failure {
    Failure::Usage(e)
}

/// Base config (file, preset or defaults) with `--set`, `--seed` and `--out` applied, validated.
pub fn resolve(src: &ConfigSource) -> Result<ExperimentConfig, Failure> {
    let base = match (&src.config, &src.preset) {
        (Some(_), Some(_)) => return Err(usage(anyhow!("give either --config or --preset, not both"))),
        (Some(path), None) => load_file(path).map_err(usage)?,
        (None, Some(name)) => presets::experiment(name).map_err(usage)?,
        (None, None) => ExperimentConfig::default(),
    };
    finish(base, src)
}

fn finish(base: ExperimentConfig, src: &ConfigSource) -> Result<ExperimentConfig, Failure> {
    let mut cfg = apply_overrides(&base, &src.set).map_err(usage)?;
    if let Some(seed) = src.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &src.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

pub fn cmd_run(src: &ConfigSource) -> CmdResult {
    let cfg = resolve(src)?;
    let out = runner::run_to_dir(&cfg).map_err(Failure::Runtime)?;
    println!("wrote {}", out.dir.join(runner::METRICS_FILE).display());
    println!("summary: {}", summary_line(&out.summary));
    Ok(())
}

pub fn cmd_sweep(src: &ConfigSource, param: Option<&str>, values: &[String]) -> CmdResult {
    let (base, param, values) = match src.preset.as_deref().map(|n| (n, presets::preset(n))) {
        Some((name, Some(Preset::Sweep(sp)))) => {
            if src.config.is_some() {
                return Err(usage(anyhow!("give either --config or --preset, not both")));
            }
            let mut base = presets::experiment(sp.base).map_err(usage)?;
            base.out_dir = PathBuf::from("runs").join(name);
            let param = param.unwrap_or(sp.param).to_string();
            let values = if values.is_empty() { sp.values.clone() } else { values.to_vec() };
            (finish(base, src)?, param, values)
        }
        _ => {
            let param = param.ok_or_else(|| usage(anyhow!("--param is required unless the preset is a sweep")))?;
            (resolve(src)?, param.to_string(), values.to_vec())
        }
    };
    if values.is_empty() {
        return Err(usage(anyhow!("sweep over {param} needs at least one value (--values)")));
    }
    let configs = runner::sweep_configs(&base, &param, &values).map_err(usage)?;
    let runs = runner::run_sweep_configs(&base.out_dir, &param, &configs).map_err(Failure::Runtime)?;
    for (v, out) in &runs {
        println!("{param}={v}: {}", summary_line(&out.summary));
    }
    println!("wrote {}", base.out_dir.join(runner::COMPARISON_FILE).display());
    Ok(())
}

#[derive(Debug, Clone)]
pub struct VerifyBoundsArgs {
    pub sweep: BoundsSweep,
    pub out: Option<PathBuf>,
}

/// Applies the `bounds` preset's sizes unless explicitly overridden.
pub fn bounds_preset_sweep() -> BoundsSweep {
    match presets::preset("bounds") {
        Some(Preset::Bounds(b)) => BoundsSweep {
            pairs: b.pairs,
            vocabs: b.vocabs,
            horizons: b.horizons,
            seed: b.seed,
            first_order_every: 50,
            ..Default::default()
        },
        _ => unreachable!("bounds preset is registered"),
    }
}

pub fn cmd_verify_bounds(args: &VerifyBoundsArgs) -> CmdResult {
    let s = &args.sweep;
    for &v in &s.vocabs {
        for &h in &s.horizons {
            let leaves = (v as f64).powi(h as i32) * s.prompts as f64;
            if v < 2 || h == 0 || leaves > trustlab_core::env::DEFAULT_ENUM_CAP as f64 {
                return Err(usage(anyhow!("vocab {v}, horizon {h} is outside the enumerable range")));
            }
        }
    }
    let outcome = suites::run_bounds_sweep(s).map_err(Failure::Runtime)?;
    if let Some(path) = &args.out {
        write_csv(path, BOUNDS_CSV_HEADER, outcome.rows.iter().map(|r| r.csv_row())).map_err(Failure::Runtime)?;
        println!("wrote {}", path.display());
    }
    println!(
        "pairs={} failures={} linear_tighter={} first_order_checks={} max_first_order_rel_err={:e} elapsed={:.2}s",
        outcome.rows.len(),
        outcome.failures,
        outcome.linear_tighter(),
        outcome.first_order_checks(),
        outcome.max_first_order_err(),
        outcome.elapsed.as_secs_f64()
    );
    match outcome.witness {
        Some(w) => Err(Failure::Violation(format!("{} of {} pairs failed; first witness:\n{w}", outcome.failures, outcome.rows.len()))),
        None => Ok(()),
    }
}

pub fn cmd_divergence_props(s: &DivergenceSweep) -> CmdResult {
    let o = suites::run_divergence_sweep(s).map_err(usage)?;
    println!(
        "pairs={} lower_bound_failures={} min_slack={:e} monotonicity_failures={} gap_bound_failures={} pinsker_failures={} full_support_failures={} equality_failures={} max_equality_err={:e} mc_failures={} elapsed={:.2}s",
        o.pairs,
        o.lower_bound_failures,
        o.min_slack,
        o.monotonicity_failures,
        o.gap_bound_failures,
        o.pinsker_failures,
        o.full_support_failures,
        o.equality_failures,
        o.max_equality_err,
        o.mc_failures,
        o.elapsed.as_secs_f64()
    );
    match o.witness {
        Some(w) if o.total_failures() > 0 => Err(Failure::Violation(w)),
        _ => Ok(()),
    }
}

pub fn cmd_render(inputs: &[PathBuf], column: &str, out: &Path, title: Option<&str>) -> CmdResult {
    if inputs.is_empty() {
        return Err(usage(anyhow!("render needs at least one --input CSV")));
    }
    let mut series = Vec::new();
    for p in inputs {
        let points = runner::read_metrics_column(p, column).map_err(usage)?;
        let label = p
            .parent()
            .and_then(|d| d.file_name())
            .or_else(|| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        series.push(Series { label, points });
    }
    let svg = line_chart(title.unwrap_or(column), column, &series);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(Failure::Runtime)?;
    }
    fs::write(out, svg).with_context(|| format!("writing {}", out.display())).map_err(Failure::Runtime)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_reference(out: Option<&Path>) -> CmdResult {
    let page = reference_markdown();
    match out {
        Some(p) => fs::write(p, page).with_context(|| format!("writing {}", p.display())).map_err(Failure::Runtime)?,
        None => print!("{page}"),
    }
    Ok(())
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn exec_for(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}
