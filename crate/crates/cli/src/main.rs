use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trustlab_cli::commands::{self, ConfigSource, VerifyBoundsArgs};
use trustlab_cli::suites::{BoundsSweep, DivergenceSweep};
use trustlab_cli::{CmdResult, Failure};

#[derive(Parser)]
#[command(name = "trustlab", version, about = "Trust-region experiments and property checks for token-level policy optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Source {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset (see `trustlab presets`).
    #[arg(long)]
    preset: Option<String>,
    /// Output directory (overrides out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config key, e.g. --set algo.c_cap=inf. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl From<Source> for ConfigSource {
    fn from(s: Source) -> Self {
        ConfigSource { config: s.config, preset: s.preset, out: s.out, seed: s.seed, set: s.set }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one training experiment.
    Run(Source),
    /// Run one experiment per value of a config key.
    Sweep {
        #[command(flatten)]
        source: Source,
        /// Dotted config key to vary (defaults to the sweep preset's).
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated values (defaults to the sweep preset's).
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Check the performance-difference identity and improvement bounds on random policy pairs.
    VerifyBounds {
        /// Use the `bounds` preset sizes.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        pairs: Option<usize>,
        /// Comma-separated vocabulary sizes.
        #[arg(long, value_delimiter = ',')]
        vocab: Vec<usize>,
        /// Comma-separated horizons.
        #[arg(long, value_delimiter = ',')]
        horizon: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        prompts: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Gradient check on every n-th pair (0 disables it).
        #[arg(long)]
        first_order_every: Option<usize>,
        /// CSV of per-pair reports.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
        /// Corrupt every report before checking (tests the failure path).
        #[arg(long, hide = true)]
        inject_bug: bool,
    },
    /// Check the divergence approximations' lower-bound and related properties.
    DivergenceProps {
        #[arg(long, default_value_t = 100_000)]
        pairs: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 64, 1024])]
        vocab: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        sequential: bool,
    },
    /// Render metrics CSV columns as an SVG line chart.
    Render {
        /// Metrics CSV; repeat for several series.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "reward_mean")]
        column: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
    /// Print the generated config reference page.
    Reference {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List preset names.
    Presets,
}

fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::Run(src) => commands::cmd_run(&src.into()),
        Command::Sweep { source, param, values } => commands::cmd_sweep(&source.into(), param.as_deref(), &values),
        Command::VerifyBounds { preset, pairs, vocab, horizon, prompts, seed, first_order_every, out, sequential, inject_bug } => {
            let mut sweep = match preset.as_deref() {
                None => BoundsSweep::default(),
                Some("bounds") => commands::bounds_preset_sweep(),
                Some(other) => return Err(Failure::Usage(anyhow::anyhow!("verify-bounds accepts only the `bounds` preset, got {other:?}"))),
            };
            if let Some(p) = pairs {
                sweep.pairs = p;
            }
            if !vocab.is_empty() {
                sweep.vocabs = vocab;
            }
            if !horizon.is_empty() {
                sweep.horizons = horizon;
            }
            if let Some(s) = seed {
                sweep.seed = s;
            }
            if let Some(n) = first_order_every {
                sweep.first_order_every = n;
            }
            sweep.prompts = prompts;
            sweep.inject_bug = inject_bug;
            sweep.exec = commands::exec_for(sequential);
            commands::cmd_verify_bounds(&VerifyBoundsArgs { sweep, out })
        }
        Command::DivergenceProps { pairs, vocab, seed, sequential } => commands::cmd_divergence_props(&DivergenceSweep {
            pairs,
            vocabs: vocab,
            seed,
            exec: commands::exec_for(sequential),
            ..Default::default()
        }),
        Command::Render { inputs, column, out, title } => commands::cmd_render(&inputs, &column, &out, title.as_deref()),
        Command::Reference { out } => commands::cmd_reference(out.as_deref()),
        Command::Presets => {
            let mut out = std::io::stdout().lock();
            for name in trustlab_cli::presets::PRESET_NAMES {
                if writeln!(out, "{name}").is_err() {
                    break;
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
