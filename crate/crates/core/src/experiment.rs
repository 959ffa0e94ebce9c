//! Experiment specs, named presets, and run orchestration behind the CLI.
//!
//! A spec is a JSON document. When it names a `preset` (or one is given on the
//! command line) the document is deep-merged over that preset, so a file only
//! needs the keys it changes. Every run writes
//! `<output_dir>/<name>/<seed>/{config.json, metrics.csv, checkpoints/, report.json}`
//! and, for training modes, `<output_dir>/<name>/aggregate.csv`.
//!
//! Seeds are listed explicitly; `--seeds N..M` expands to `N, N+1, …, M-1`,
//! i.e. base seed `N` plus index. Each seed feeds the run's `seed` field, and
//! all internal streams are derived from it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::evolution::{run_ga, EvoConfig};
use crate::gridworld::GridConfig;
use crate::marl::{train, RlConfig};
use crate::metrics::{aggregate_runs, align_curves, mean_std, render_svg, PlotSeries, RunHistory, RunMetadata};
use crate::nnet::checkpoint::Checkpoint;
use crate::nnet::Network;
use crate::policy::{run_episodes, NetworkPolicy};
use crate::signal_game::theorems::{theory_report, SearchSettings};
use crate::signal_game::GameConfig;

pub const BUILD_ID: &str = concat!("mimic-sig-", env!("CARGO_PKG_VERSION"));

/// Caps the worker pool, read once at startup.
pub const THREADS_ENV: &str = "MIMIC_SIG_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Theory,
    Evolve,
    TrainRl,
    Eval,
    Plot,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Theory => "theory",
            Mode::Evolve => "evolve",
            Mode::TrainRl => "train-rl",
            Mode::Eval => "eval",
            Mode::Plot => "plot",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Overlap {
    /// Σ_A = Σ_res.
    Full,
    /// |Σ_A ∩ Σ_res| = 1.
    Partial,
    /// Σ_A ∩ Σ_res = ∅.
    None,
}

impl Overlap {
    pub fn check(self, env: &GridConfig) -> Result<()> {
        let shared = env.mimicable().len();
        let mut a = env.agent_signals.clone();
        let mut r = env.resource_signals.clone();
        a.sort_unstable();
        a.dedup();
        r.sort_unstable();
        r.dedup();
        let ok = match self {
            Overlap::Full => a == r,
            Overlap::Partial => shared == 1,
            Overlap::None => shared == 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "overlap {self:?} is inconsistent with agent symbols {a:?} and resource symbols {r:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySpec {
    pub game: GameConfig,
    #[serde(default)]
    pub search: SearchSettings,
}

fn d_eval_episodes() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub checkpoint: PathBuf,
    /// Taken from the run's `config.json` when absent.
    #[serde(default)]
    pub env: Option<GridConfig>,
    #[serde(default = "d_eval_episodes")]
    pub episodes: usize,
    /// Defaults to the training setting: greedy for evolved, sampled for RL.
    #[serde(default)]
    pub greedy: Option<bool>,
    /// Also write `trajectory.jsonl`.
    #[serde(default)]
    pub trajectory: bool,
}

fn d_sustain() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotSpec {
    /// Experiment directories, each holding one subdirectory per seed.
    pub runs: Vec<PathBuf>,
    /// Reward level the aligned plot shifts to iteration 0.
    #[serde(default)]
    pub threshold: f64,
    #[serde(default = "d_sustain")]
    pub sustain: usize,
}

fn d_seeds() -> Vec<u64> {
    vec![0]
}
fn d_output() -> PathBuf {
    PathBuf::from("runs")
}
fn d_window() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub name: Option<String>,
    pub mode: Mode,
    #[serde(default)]
    pub overlap: Option<Overlap>,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
    /// Trailing iterations averaged for final statistics.
    #[serde(default = "d_window")]
    pub final_window: usize,
    #[serde(default)]
    pub theory: Option<TheorySpec>,
    #[serde(default)]
    pub evo: Option<EvoConfig>,
    #[serde(default)]
    pub rl: Option<RlConfig>,
    #[serde(default)]
    pub eval: Option<EvalSpec>,
    #[serde(default)]
    pub plot: Option<PlotSpec>,
}

impl ExperimentSpec {
    pub fn name(&self) -> &str {
        self.name.as_deref().or(self.preset.as_deref()).unwrap_or("experiment")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.name())
    }

    pub fn validate(&self) -> Result<()> {
        let missing = |section: &str| {
            Err(Error::config(format!("mode {} needs a `{section}` section", self.mode.name())))
        };
        match self.mode {
            Mode::Theory => match &self.theory {
                Some(t) => t.game.validate()?,
                None => return missing("theory"),
            },
            Mode::Evolve => match &self.evo {
                Some(e) => e.validate()?,
                None => return missing("evo"),
            },
            Mode::TrainRl => match &self.rl {
                Some(r) => r.validate()?,
                None => return missing("rl"),
            },
            Mode::Eval => match &self.eval {
                Some(e) if e.episodes == 0 => return Err(Error::config("eval.episodes must be positive")),
                Some(_) => {}
                None => return missing("eval"),
            },
            Mode::Plot => match &self.plot {
                Some(p) if p.runs.is_empty() => return Err(Error::config("plot.runs is empty")),
                Some(_) => {}
                None => return missing("plot"),
            },
        }
        if let (Some(o), Some(env)) = (self.overlap, self.env()) {
            o.check(env)?;
        }
        if self.seeds.is_empty() && !matches!(self.mode, Mode::Plot) {
            return Err(Error::config("at least one seed is required"));
        }
        if self.final_window == 0 {
            return Err(Error::config("final_window must be positive"));
        }
        Ok(())
    }

    /// Environment of the active training section.
    pub fn env(&self) -> Option<&GridConfig> {
        match self.mode {
            Mode::Evolve => self.evo.as_ref().map(|e| &e.env),
            Mode::TrainRl => self.rl.as_ref().map(|r| &r.env),
            Mode::Eval => self.eval.as_ref().and_then(|e| e.env.as_ref()),
            _ => None,
        }
    }

    /// Snapshot for one seed with every default written out.
    pub fn resolved_for_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.name = Some(self.name().to_string());
        s.seeds = vec![seed];
        if let Some(t) = &mut s.theory {
            t.game = t.game.resolved();
            t.search.seed = seed;
        }
        if let Some(e) = &mut s.evo {
            *e = e.resolved();
            e.seed = seed;
        }
        if let Some(r) = &mut s.rl {
            *r = r.resolved();
            r.seed = seed;
        }
        if let Some(e) = &mut s.eval {
            e.env = e.env.as_ref().map(GridConfig::resolved);
        }
        s
    }
}

pub const PRESETS: [&str; 10] = [
    "theory-paper",
    "evo-paper",
    "evo-paper-none",
    "ga-smoke",
    "rl-paper-full",
    "rl-paper-partial",
    "rl-paper-none",
    "rl-smoke-full",
    "rl-smoke-partial",
    "rl-smoke-none",
];

/// Agent and resource alphabets for the RL overlap modes: five resource
/// symbols, five agent symbols sharing all, one, or none of them.
pub fn rl_alphabets(overlap: Overlap) -> (usize, Vec<usize>, Vec<usize>) {
    let res: Vec<usize> = (0..5).collect();
    match overlap {
        Overlap::Full => (5, res.clone(), res),
        Overlap::Partial => (9, (4..9).collect(), res),
        Overlap::None => (10, (5..10).collect(), res),
    }
}

fn rl_preset(overlap: Overlap, smoke: bool) -> Value {
    let (n, a, r) = rl_alphabets(overlap);
    let size = if smoke { 5 } else { 10 };
    let mut rl = RlConfig::new(GridConfig::new(size, size, n, a, r));
    let seeds: Vec<u64> = if smoke {
        rl.total_env_steps = 200_000;
        rl.n_envs = 16;
        rl.rollout_len = 64;
        (0..5).collect()
    } else {
        (0..10).collect()
    };
    json!({ "mode": "train-rl", "overlap": overlap, "seeds": seeds, "rl": rl })
}

/// The preset document for `name`.
pub fn preset(name: &str) -> Result<Value> {
    let v = match name {
        "theory-paper" => json!({
            "mode": "theory",
            "theory": { "game": GameConfig::new(3, 6, 3, 0.5)? },
        }),
        "evo-paper" | "evo-paper-none" => {
            // One resource symbol, inside the agent alphabet or disjoint from it.
            let (env, overlap) = if name == "evo-paper" {
                (GridConfig::new(5, 5, 5, (0..5).collect(), vec![0]), Overlap::Partial)
            } else {
                (GridConfig::new(5, 5, 6, (1..6).collect(), vec![0]), Overlap::None)
            };
            json!({
                "mode": "evolve",
                "overlap": overlap,
                "seeds": (0..10).collect::<Vec<u64>>(),
                "evo": EvoConfig::new(env),
            })
        }
        "ga-smoke" => {
            let mut evo = EvoConfig::new(GridConfig::signal_free(3, 3));
            evo.population_size = 64;
            evo.generations = 50;
            evo.arch.hidden_dim = 32;
            json!({ "mode": "evolve", "seeds": [0, 1, 2], "evo": evo })
        }
        "rl-paper-full" => rl_preset(Overlap::Full, false),
        "rl-paper-partial" => rl_preset(Overlap::Partial, false),
        "rl-paper-none" => rl_preset(Overlap::None, false),
        "rl-smoke-full" => rl_preset(Overlap::Full, true),
        "rl-smoke-partial" => rl_preset(Overlap::Partial, true),
        "rl-smoke-none" => rl_preset(Overlap::None, true),
        other => {
            return Err(Error::config(format!(
                "unknown preset `{other}`; known presets: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(v)
}

/// Recursively overlays `top` onto `base`; non-object values replace.
pub fn merge_json(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Builds a spec from a JSON document, merging it over its preset.
pub fn spec_from_value(doc: Value, preset_override: Option<&str>) -> Result<ExperimentSpec> {
    let named = doc.get("preset").and_then(Value::as_str).map(str::to_string);
    let preset_name = preset_override.map(str::to_string).or(named);
    let mut merged = match &preset_name {
        Some(p) => preset(p)?,
        None => json!({}),
    };
    merge_json(&mut merged, doc);
    if let Some(p) = &preset_name {
        merged["preset"] = json!(p);
    }
    let spec: ExperimentSpec = serde_path_to_error::deserialize(merged).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

pub fn parse_spec(text: &str, preset_override: Option<&str>) -> Result<ExperimentSpec> {
    let doc: Value = serde_json::from_str(text)?;
    spec_from_value(doc, preset_override)
}

pub fn load_spec(path: &Path, preset_override: Option<&str>) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_spec(&text, preset_override)
}

/// Parses `N` or `N..M` (half-open).
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::config(format!("cannot parse seeds `{s}`; expected N or N..M"));
    match s.split_once("..") {
        Some((a, b)) => {
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let b: u64 = b.trim().parse().map_err(|_| bad())?;
            if b <= a {
                return Err(bad());
            }
            Ok((a..b).collect())
        }
        None => Ok(vec![s.trim().parse().map_err(|_| bad())?]),
    }
}

/// Sets the global worker count from `MIMIC_SIG_THREADS`, if present.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        // A pool that already exists keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    /// `None` on success.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub seeds: Vec<SeedOutcome>,
    pub aggregate: Option<PathBuf>,
    /// Files written by `plot`.
    pub plots: Vec<PathBuf>,
}

impl RunSummary {
    /// Fails only when every seed failed.
    pub fn all_failed(&self) -> bool {
        !self.seeds.is_empty() && self.seeds.iter().all(|s| s.error.is_some())
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn metadata(kind: &str, seed: u64, snapshot: &ExperimentSpec) -> Result<RunMetadata> {
    let mut notes = BTreeMap::new();
    match kind {
        "evolve" => {
            notes.insert(
                "local_defaults".into(),
                "truncation_k, elite_count, mutation_sigma, episodes_per_eval and generations are local conventions".into(),
            );
            notes.insert(
                "mimicry_frequency".into(),
                "emits of the generation's best individual over its evaluation episodes".into(),
            );
            notes.insert("mean_reward".into(), "best individual's mean episodic team return".into());
        }
        "train-rl" => {
            notes.insert(
                "local_defaults".into(),
                "only lr_start and n_envs are reference values; gamma, gae_lambda, clip_eps, value_coef, entropy_coef, rollout_len, epochs, minibatches, max_grad_norm are local defaults".into(),
            );
            notes.insert("mimicry_frequency".into(), "training rollouts of the current iteration".into());
            notes.insert(
                "mean_reward".into(),
                "mean team return of episodes completed during the iteration's rollout".into(),
            );
        }
        _ => {}
    }
    Ok(RunMetadata {
        kind: kind.to_string(),
        seed,
        build_id: BUILD_ID.to_string(),
        config: serde_json::to_value(snapshot)?,
        notes,
    })
}

fn final_window_mean(history: &RunHistory, window: usize) -> f64 {
    let r = history.rewards();
    let tail = &r[r.len().saturating_sub(window)..];
    mean_std(tail).0
}

/// Runs one seed inside `dir`; returns the history for aggregation.
fn run_seed(spec: &ExperimentSpec, seed: u64, dir: &Path) -> Result<Option<RunHistory>> {
    create_dir(dir)?;
    let snapshot = spec.resolved_for_seed(seed);
    write_json(&dir.join("config.json"), &snapshot)?;
    let started = Instant::now();
    match spec.mode {
        Mode::Theory => {
            let t = snapshot.theory.as_ref().expect("validated");
            let report = theory_report(&t.game, &t.search)?;
            let mut v = serde_json::to_value(&report)?;
            v["status"] = json!("ok");
            v["seed"] = json!(seed);
            v["runtime_s"] = json!(started.elapsed().as_secs_f64());
            write_json(&dir.join("report.json"), &v)?;
            Ok(None)
        }
        Mode::Evolve => {
            let cfg = snapshot.evo.as_ref().expect("validated");
            let ckpt = dir.join("checkpoints");
            create_dir(&ckpt)?;
            let out = run_ga(cfg, Some(&ckpt), metadata("evolve", seed, &snapshot)?)?;
            out.history.write_csv(&dir.join("metrics.csv"))?;
            let max_best = out.history.rewards().into_iter().fold(f64::NEG_INFINITY, f64::max);
            write_json(
                &dir.join("report.json"),
                &json!({
                    "status": "ok",
                    "seed": seed,
                    "kind": "evolve",
                    "generations": out.history.records.len(),
                    "env_steps": out.history.records.last().map(|r| r.env_steps),
                    "final_best_fitness": out.best_fitness,
                    "max_best_fitness": max_best,
                    "final_window": spec.final_window,
                    "final_window_mean": final_window_mean(&out.history, spec.final_window),
                    "runtime_s": started.elapsed().as_secs_f64(),
                    "metadata": out.history.metadata,
                }),
            )?;
            Ok(Some(out.history))
        }
        Mode::TrainRl => {
            let cfg = snapshot.rl.as_ref().expect("validated");
            let ckpt = dir.join("checkpoints");
            create_dir(&ckpt)?;
            let out = train(cfg, Some(&ckpt), metadata("train-rl", seed, &snapshot)?)?;
            out.history.write_csv(&dir.join("metrics.csv"))?;
            let aborted: Vec<(usize, &String)> = out
                .updates
                .iter()
                .enumerate()
                .filter_map(|(i, u)| u.aborted.as_ref().map(|m| (i, m)))
                .collect();
            write_json(
                &dir.join("report.json"),
                &json!({
                    "status": "ok",
                    "seed": seed,
                    "kind": "train-rl",
                    "iterations": out.history.records.len(),
                    "env_steps": out.history.records.last().map(|r| r.env_steps),
                    "final_window": spec.final_window,
                    "final_window_mean": final_window_mean(&out.history, spec.final_window),
                    "final_update": out.updates.last(),
                    "aborted_updates": aborted,
                    "runtime_s": started.elapsed().as_secs_f64(),
                    "metadata": out.history.metadata,
                }),
            )?;
            Ok(Some(out.history))
        }
        Mode::Eval => {
            let e = snapshot.eval.as_ref().expect("validated");
            let report = evaluate_checkpoint(e, seed, dir)?;
            write_json(&dir.join("report.json"), &report)?;
            Ok(None)
        }
        Mode::Plot => unreachable!("plot has no per-seed runs"),
    }
}

/// Reads the training spec saved next to a checkpoint (`<run>/checkpoints/x.ckpt`).
fn training_spec_for(checkpoint: &Path) -> Option<ExperimentSpec> {
    let run = checkpoint.parent()?.parent()?;
    let text = fs::read_to_string(run.join("config.json")).ok()?;
    serde_json::from_str(&text).ok()
}

fn evaluate_checkpoint(e: &EvalSpec, seed: u64, dir: &Path) -> Result<Value> {
    let ck = Checkpoint::load(&e.checkpoint)?;
    let training = training_spec_for(&e.checkpoint);
    let env = match (&e.env, &training) {
        (Some(env), _) => env.clone(),
        (None, Some(t)) => match (&t.evo, &t.rl) {
            (Some(evo), _) => evo.env.clone(),
            (_, Some(rl)) => rl.env.clone(),
            _ => return Err(Error::config("training config.json has no environment")),
        },
        (None, None) => {
            return Err(Error::config(
                "eval.env is required when the checkpoint has no neighbouring config.json",
            ))
        }
    };
    let greedy = e
        .greedy
        .unwrap_or_else(|| training.as_ref().and_then(|t| t.evo.as_ref()).is_some_and(|evo| evo.greedy_actions));
    let actors: Vec<_> = ck
        .header
        .networks
        .iter()
        .zip(&ck.params)
        .filter(|(n, _)| n.role != "critic")
        .collect();
    if actors.is_empty() || actors.len() > 2 {
        return Err(Error::Checkpoint(format!("expected one or two policy networks, found {}", actors.len())));
    }
    let net = Network::new(actors[0].0.arch.clone())?;
    if net.arch.input_dim != env.observation_len() || net.arch.n_actions != env.n_actions() {
        return Err(Error::config(format!(
            "checkpoint network expects {} inputs / {} actions, environment gives {} / {}",
            net.arch.input_dim,
            net.arch.n_actions,
            env.observation_len(),
            env.n_actions()
        )));
    }
    let params: Vec<&[f32]> = actors.iter().map(|(_, p)| p.as_slice()).collect();
    let mut policy = NetworkPolicy::new(&net, params, greedy, seed)?;
    let mut lines = Vec::new();
    let stats = if e.trajectory {
        let mut record = |ep: usize, r: &crate::gridworld::TrajectoryRecord| {
            let mut v = serde_json::to_value(r).unwrap_or(Value::Null);
            v["episode"] = json!(ep);
            lines.push(v.to_string());
        };
        run_episodes(&mut policy, &env, e.episodes, seed, Some(&mut record))?
    } else {
        run_episodes(&mut policy, &env, e.episodes, seed, None)?
    };
    if e.trajectory {
        let path = dir.join("trajectory.jsonl");
        fs::write(&path, lines.join("\n") + "\n").map_err(|err| Error::io(&path, err))?;
    }
    Ok(json!({
        "status": "ok",
        "seed": seed,
        "kind": "eval",
        "checkpoint": e.checkpoint,
        "greedy": greedy,
        "episodes": e.episodes,
        "mean_return": stats.mean_return(),
        "std_return": stats.std_return(),
        "returns": stats.returns,
        "collections": stats.collections,
        "mimicry_frequency": stats.emits.frequency(),
        "emits": stats.emits,
    }))
}

/// Per-seed histories found under an experiment directory, sorted by seed.
pub fn read_histories(experiment_dir: &Path) -> Result<Vec<(u64, RunHistory)>> {
    let entries = fs::read_dir(experiment_dir).map_err(|e| Error::io(experiment_dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(experiment_dir, e))?;
        let Ok(seed) = entry.file_name().to_string_lossy().parse::<u64>() else {
            continue;
        };
        let csv = entry.path().join("metrics.csv");
        if csv.exists() {
            out.push((seed, RunHistory::read_csv(&csv)?));
        }
    }
    out.sort_by_key(|(s, _)| *s);
    Ok(out)
}

fn plot(spec: &PlotSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    let mut written = Vec::new();
    for run in &spec.runs {
        let label = run.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
        let histories = read_histories(run)?;
        if histories.is_empty() {
            return Err(Error::config(format!("no metrics.csv found under {}", run.display())));
        }
        let mut series: Vec<PlotSeries> = histories
            .iter()
            .map(|(seed, h)| PlotSeries {
                label: format!("seed {seed}"),
                points: h.records.iter().map(|r| (r.env_steps as f64, r.mean_reward)).collect(),
                secondary: false,
            })
            .collect();
        let only: Vec<RunHistory> = histories.iter().map(|(_, h)| h.clone()).collect();
        if only.len() > 1 {
            let agg = aggregate_runs(&only, 1)?;
            series.push(PlotSeries {
                label: "mean".into(),
                points: agg.points.iter().map(|p| (p.env_steps, p.mean_reward)).collect(),
                secondary: false,
            });
        }
        let path = out_dir.join(format!("{label}-reward.svg"));
        fs::write(&path, render_svg(&format!("{label}: mean reward"), "environment steps", &series))
            .map_err(|e| Error::io(&path, e))?;
        written.push(path);

        let aligned = align_curves(&only, spec.threshold, spec.sustain);
        let mut series = Vec::new();
        for (i, h) in &aligned.aligned {
            let seed = histories[*i].0;
            series.push(PlotSeries {
                label: format!("reward {seed}"),
                points: h.records.iter().map(|r| (r.iteration as f64, r.mean_reward)).collect(),
                secondary: false,
            });
            series.push(PlotSeries {
                label: format!("mimicry {seed}"),
                points: h.records.iter().map(|r| (r.iteration as f64, r.mimicry_frequency)).collect(),
                secondary: true,
            });
        }
        let path = out_dir.join(format!("{label}-aligned.svg"));
        let excluded: Vec<u64> = aligned.excluded.iter().map(|&i| histories[i].0).collect();
        let title = if excluded.is_empty() {
            format!("{label}: aligned at reward {}", spec.threshold)
        } else {
            format!("{label}: aligned at reward {} (never crossed: {excluded:?})", spec.threshold)
        };
        fs::write(&path, render_svg(&title, "iterations since crossing", &series)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Executes `spec`. Per-seed failures are recorded in that seed's
/// `report.json` rather than aborting the other seeds.
pub fn run(spec: &ExperimentSpec) -> Result<RunSummary> {
    spec.validate()?;
    let root = spec.run_dir();
    create_dir(&root)?;
    if let Mode::Plot = spec.mode {
        let plots = plot(spec.plot.as_ref().expect("validated"), &root)?;
        return Ok(RunSummary {
            dir: root,
            seeds: Vec::new(),
            aggregate: None,
            plots,
        });
    }
    let results: Vec<(SeedOutcome, Option<RunHistory>)> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let dir = root.join(seed.to_string());
            match run_seed(spec, seed, &dir) {
                Ok(h) => (SeedOutcome { seed, dir, error: None }, h),
                Err(e) => {
                    let msg = e.to_string();
                    let _ = create_dir(&dir)
                        .and_then(|_| write_json(&dir.join("report.json"), &json!({"status": "failed", "seed": seed, "error": msg})));
                    (SeedOutcome { seed, dir, error: Some(msg) }, None)
                }
            }
        })
        .collect();
    let histories: Vec<RunHistory> = results.iter().filter_map(|(_, h)| h.clone()).collect();
    let mut aggregate = None;
    if !histories.is_empty() {
        let agg = aggregate_runs(&histories, spec.final_window)?;
        let path = root.join("aggregate.csv");
        fs::write(&path, agg.to_csv_string()?).map_err(|e| Error::io(&path, e))?;
        write_json(&root.join("aggregate_final.json"), &agg.final_stats)?;
        aggregate = Some(path);
    }
    Ok(RunSummary {
        dir: root,
        seeds: results.into_iter().map(|(s, _)| s).collect(),
        aggregate,
        plots: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_loads() {
        for name in PRESETS {
            let spec = spec_from_value(json!({}), Some(name)).unwrap();
            assert_eq!(spec.name(), name);
        }
    }

    #[test]
    fn paper_presets() {
        let evo = spec_from_value(json!({"preset": "evo-paper"}), None).unwrap();
        let e = evo.evo.unwrap();
        assert_eq!((e.env.width, e.env.height), (5, 5));
        assert_eq!((e.env.agent_signals.len(), e.env.resource_signals.len()), (5, 1));
        assert_eq!(e.population_size, 256);

        let rl = spec_from_value(json!({"preset": "rl-paper-partial"}), None).unwrap();
        let r = rl.rl.unwrap();
        assert_eq!((r.env.width, r.env.height), (10, 10));
        assert_eq!(r.env.resource_signals.len(), 5);
        assert_eq!(r.env.mimicable().len(), 1);
        assert_eq!((r.n_envs, r.lr_start), (128, 2e-3));
    }

    #[test]
    fn overrides_merge_into_presets() {
        let spec = parse_spec(r#"{"preset": "ga-smoke", "evo": {"generations": 3}, "seeds": [7]}"#, None).unwrap();
        let e = spec.evo.unwrap();
        assert_eq!(e.generations, 3);
        assert_eq!(e.population_size, 64);
        assert_eq!(spec.seeds, vec![7]);
    }

    #[test]
    fn mismatched_overlap_is_rejected() {
        let err = spec_from_value(
            json!({"preset": "rl-smoke-full", "rl": {"env": {"agent_signals": [0, 1]}}}),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)), "{err}");
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let err = spec_from_value(json!({"preset": "ga-smoke", "evo": {"populaton_size": 3}}), None).unwrap_err();
        match err {
            Error::Schema { path, .. } => assert_eq!(path, "evo.populaton_size"),
            other => panic!("unexpected {other}"),
        }
        assert!(spec_from_value(json!({"mode": "evolve"}), None).is_err());
        assert!(spec_from_value(json!({}), Some("nope")).is_err());
    }

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seeds("3").unwrap(), vec![3]);
        assert_eq!(parse_seeds("2..5").unwrap(), vec![2, 3, 4]);
        assert!(parse_seeds("5..5").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn resolved_snapshot_has_no_implicit_defaults() {
        let spec = spec_from_value(json!({}), Some("ga-smoke")).unwrap();
        let snap = spec.resolved_for_seed(4);
        let e = snap.evo.unwrap();
        assert_eq!(e.seed, 4);
        assert_eq!(e.truncation_k, Some(8));
        assert!(e.env.v_agent.is_some());
    }
}
