use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use mimic_sig::experiment::{self, Mode};

#[derive(Parser)]
#[command(name = "mimic-sig", version, about = "Signalling-game analysis and mimicry experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify the signalling-game results by enumeration.
    Theory(Common),
    /// Run the genetic algorithm in the gridworld.
    Evolve(Common),
    /// Train agents with multi-agent PPO.
    TrainRl(Common),
    /// Roll out a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (overrides `eval.checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Draw reward and mimicry-frequency curves as SVG.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Experiment directories to plot (overrides `plot.runs`).
        #[arg(long, num_args = 1..)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment spec.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset the spec is merged over.
    #[arg(long)]
    preset: Option<String>,
    /// Single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Half-open seed range `N..M`.
    #[arg(long)]
    seeds: Option<String>,
    /// Root of the run directories.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Experiment name (subdirectory of the output root).
    #[arg(long)]
    name: Option<String>,
}

fn build_spec(mode: Mode, common: &Common, extra: Value) -> anyhow::Result<experiment::ExperimentSpec> {
    let mut doc = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => json!({}),
    };
    if common.config.is_none() && common.preset.is_none() && extra.as_object().is_none_or(|o| o.is_empty()) {
        bail!("give --config or --preset (presets: {})", experiment::PRESETS.join(", "));
    }
    if doc.get("mode").is_none() && common.preset.is_none() && doc.get("preset").is_none() {
        doc["mode"] = json!(mode.name());
    }
    experiment::merge_json(&mut doc, extra);
    if let Some(seed) = common.seed {
        doc["seeds"] = json!([seed]);
    }
    if let Some(range) = &common.seeds {
        doc["seeds"] = json!(experiment::parse_seeds(range)?);
    }
    if let Some(out) = &common.out {
        doc["output_dir"] = json!(out);
    }
    if let Some(name) = &common.name {
        doc["name"] = json!(name);
    }
    let spec = experiment::spec_from_value(doc, common.preset.as_deref())?;
    if spec.mode != mode {
        bail!("the spec describes a `{}` experiment, not `{}`", spec.mode.name(), mode.name());
    }
    Ok(spec)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    experiment::configure_threads()?;
    let spec = match &cli.command {
        Command::Theory(c) => build_spec(Mode::Theory, c, json!({}))?,
        Command::Evolve(c) => build_spec(Mode::Evolve, c, json!({}))?,
        Command::TrainRl(c) => build_spec(Mode::TrainRl, c, json!({}))?,
        Command::Eval { common, checkpoint } => {
            let extra = match checkpoint {
                Some(p) => json!({"mode": "eval", "eval": {"checkpoint": p}}),
                None => json!({}),
            };
            build_spec(Mode::Eval, common, extra)?
        }
        Command::Plot { common, runs } => {
            let extra = if runs.is_empty() {
                json!({})
            } else {
                json!({"mode": "plot", "plot": {"runs": runs}})
            };
            build_spec(Mode::Plot, common, extra)?
        }
    };
    let summary = experiment::run(&spec)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    for s in &summary.seeds {
        if let Some(e) = &s.error {
            eprintln!("seed {} failed: {e}", s.seed);
        }
    }
    Ok(if summary.all_failed() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}
