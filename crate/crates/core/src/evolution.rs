//! Mutation-only genetic algorithm with truncation selection and elitism.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::GridConfig;
use crate::metrics::{mean_std, EmitCounts, Record, RunHistory, RunMetadata};
use crate::nnet::checkpoint::Checkpoint;
use crate::nnet::{NetArch, Network};
use crate::policy::{run_episodes, EpisodeStats, NetworkPolicy};
use crate::seeding::{derive_seed, stream_rng};

pub type Genome = Vec<f32>;

pub const GA_AUX_COLUMNS: [&str; 3] = ["population_mean", "population_std", "parent_mean"];

// Seed streams derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_BREED: u64 = 1 << 32;
const STREAM_EVAL: u64 = 2 << 32;

fn default_hidden() -> usize {
    128
}
fn default_n_ff() -> usize {
    3
}
fn default_true() -> bool {
    true
}

/// Hidden-layer shape; input and output sizes come from the environment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_n_ff")]
    pub n_feedforward: usize,
    #[serde(default = "default_true")]
    pub recurrent: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden_dim: default_hidden(),
            n_feedforward: default_n_ff(),
            recurrent: true,
        }
    }
}

impl ArchConfig {
    pub fn policy_arch(&self, env: &GridConfig) -> NetArch {
        NetArch {
            input_dim: env.observation_len(),
            hidden_dim: self.hidden_dim,
            n_feedforward: self.n_feedforward,
            recurrent: self.recurrent,
            n_actions: env.n_actions(),
            with_value_head: false,
        }
    }
}

fn default_population() -> usize {
    256
}
fn default_elite() -> usize {
    1
}
fn default_sigma() -> f64 {
    0.03
}
fn default_generations() -> usize {
    100
}
fn default_episodes() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvoConfig {
    #[serde(default = "default_population")]
    pub population_size: usize,
    #[serde(default = "default_elite")]
    pub elite_count: usize,
    /// Defaults to `population_size / 8`.
    #[serde(default)]
    pub truncation_k: Option<usize>,
    #[serde(default = "default_sigma")]
    pub mutation_sigma: f64,
    #[serde(default = "default_generations")]
    pub generations: usize,
    #[serde(default = "default_episodes")]
    pub episodes_per_eval: usize,
    pub env: GridConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub seed: u64,
    /// One network for both agents; otherwise a genome holds two networks.
    #[serde(default = "default_true")]
    pub shared_network: bool,
    /// Argmax actions during fitness evaluation; otherwise sampled.
    #[serde(default = "default_true")]
    pub greedy_actions: bool,
    /// Reuse one set of evaluation episodes for every generation.
    #[serde(default)]
    pub fixed_eval_seeds: bool,
    /// Save the best genome every this many generations; 0 saves only the last.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl EvoConfig {
    pub fn new(env: GridConfig) -> Self {
        Self {
            population_size: default_population(),
            elite_count: default_elite(),
            truncation_k: None,
            mutation_sigma: default_sigma(),
            generations: default_generations(),
            episodes_per_eval: default_episodes(),
            env,
            arch: ArchConfig::default(),
            seed: 0,
            shared_network: true,
            greedy_actions: true,
            fixed_eval_seeds: false,
            checkpoint_every: 0,
        }
    }

    pub fn truncation(&self) -> usize {
        self.truncation_k.unwrap_or((self.population_size / 8).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let k = self.truncation();
        if self.population_size == 0 {
            return Err(Error::config("population_size must be positive"));
        }
        if !(self.elite_count <= k && k <= self.population_size && k >= 1) {
            return Err(Error::config(format!(
                "need elite_count ≤ truncation_k ≤ population_size, got {} / {k} / {}",
                self.elite_count, self.population_size
            )));
        }
        if !(self.mutation_sigma > 0.0 && self.mutation_sigma.is_finite()) {
            return Err(Error::config("mutation_sigma must be positive"));
        }
        if self.episodes_per_eval == 0 {
            return Err(Error::config("episodes_per_eval must be positive"));
        }
        Network::new(self.arch.policy_arch(&self.env))?;
        Ok(())
    }

    /// Same config with optional fields written out.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.truncation_k = Some(self.truncation());
        c.env = self.env.resolved();
        c
    }

    pub fn network(&self) -> Result<Network> {
        Network::new(self.arch.policy_arch(&self.env))
    }

    pub fn genome_len(&self, net: &Network) -> usize {
        net.n_params() * if self.shared_network { 1 } else { 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fitness {
    pub mean: f64,
    pub std: f64,
    pub emits: EmitCounts,
}

impl From<EpisodeStats> for Fitness {
    fn from(s: EpisodeStats) -> Self {
        Self {
            mean: s.mean_return(),
            std: s.std_return(),
            emits: s.emits,
        }
    }
}

/// Mean episodic team return of `genome` over `episodes` episodes.
pub fn evaluate_fitness(
    genome: &[f32],
    net: &Network,
    env: &GridConfig,
    episodes: usize,
    eval_seed: u64,
    shared: bool,
    greedy: bool,
) -> Result<Fitness> {
    let params = NetworkPolicy::split_genome(net, genome, shared)?;
    let mut policy = NetworkPolicy::new(net, params, greedy, derive_seed(eval_seed, u64::MAX))?;
    Ok(run_episodes(&mut policy, env, episodes, eval_seed, None)?.into())
}

/// Indices of the `k` fittest individuals, best first; ties go to the lower index.
pub fn truncation_select(fitnesses: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..fitnesses.len()).collect();
    idx.sort_by(|&a, &b| {
        let (fa, fb) = (fitnesses[a], fitnesses[b]);
        let key = |f: f64| if f.is_nan() { f64::NEG_INFINITY } else { f };
        key(fb).total_cmp(&key(fa)).then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Adds `N(0, sigma²)` noise to every coordinate.
pub fn mutate(genome: &[f32], sigma: f64, rng: &mut ChaCha8Rng) -> Result<Genome> {
    if !(sigma > 0.0) {
        return Err(Error::config(format!("mutation sigma must be positive, got {sigma}")));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
    Ok(genome
        .iter()
        .map(|&g| (g as f64 + normal.sample(rng)) as f32)
        .collect())
}

fn init_genome(net: &Network, shared: bool, seed: u64) -> Genome {
    if shared {
        net.init_params(seed)
    } else {
        let mut g = net.init_params(derive_seed(seed, 0));
        g.extend(net.init_params(derive_seed(seed, 1)));
        g
    }
}

/// Fitness statistics of `n` freshly initialized genomes.
pub fn random_genome_baseline(config: &EvoConfig, n: usize, eval_seed: u64) -> Result<Vec<f64>> {
    let net = config.network()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let g = init_genome(&net, config.shared_network, derive_seed(eval_seed ^ 0xBA5E, i as u64));
            evaluate_fitness(
                &g,
                &net,
                &config.env,
                config.episodes_per_eval,
                eval_seed,
                config.shared_network,
                config.greedy_actions,
            )
            .map(|f| f.mean)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct GaOutcome {
    pub history: RunHistory,
    /// Fittest genome of the final generation.
    pub best_genome: Genome,
    pub best_fitness: f64,
    pub network: Network,
}

fn save_checkpoint(dir: &Path, name: &str, config: &EvoConfig, net: &Network, g: &[f32], generation: usize) -> Result<()> {
    let nets = if config.shared_network {
        vec![("policy".to_string(), net, g.to_vec())]
    } else {
        let n = net.n_params();
        vec![
            ("policy0".to_string(), net, g[..n].to_vec()),
            ("policy1".to_string(), net, g[n..].to_vec()),
        ]
    };
    Checkpoint::new(config.seed, generation as u64, nets)?.save(&dir.join(name))
}

/// Runs the GA. One metrics row per generation: `mean_reward`/`std_reward`
/// describe the generation's best individual over its evaluation episodes.
pub fn run_ga(config: &EvoConfig, checkpoint_dir: Option<&Path>, metadata: RunMetadata) -> Result<GaOutcome> {
    config.validate()?;
    let net = config.network()?;
    let pop_size = config.population_size;
    let k = config.truncation();
    let mut population: Vec<Genome> = (0..pop_size)
        .map(|i| init_genome(&net, config.shared_network, derive_seed(config.seed, STREAM_INIT + i as u64)))
        .collect();
    let mut breed_rng = stream_rng(config.seed, STREAM_BREED);
    let mut history = RunHistory::new(metadata, &GA_AUX_COLUMNS);
    let steps_per_gen = (pop_size * config.episodes_per_eval * config.env.episode_len) as u64;
    let mut best = (Vec::new(), f64::NEG_INFINITY);

    for gen in 0..config.generations {
        let eval_seed = derive_seed(
            config.seed,
            STREAM_EVAL + if config.fixed_eval_seeds { 0 } else { gen as u64 },
        );
        let fitness: Vec<Fitness> = population
            .par_iter()
            .map(|g| {
                evaluate_fitness(
                    g,
                    &net,
                    &config.env,
                    config.episodes_per_eval,
                    eval_seed,
                    config.shared_network,
                    config.greedy_actions,
                )
            })
            .collect::<Result<_>>()?;
        let means: Vec<f64> = fitness.iter().map(|f| f.mean).collect();
        let parents = truncation_select(&means, k);
        let top = &fitness[parents[0]];
        let (pop_mean, pop_std) = mean_std(&means);
        let parent_mean = parents.iter().map(|&i| means[i]).sum::<f64>() / k as f64;
        history.push(Record {
            iteration: gen as i64,
            env_steps: steps_per_gen * (gen as u64 + 1),
            mean_reward: top.mean,
            std_reward: top.std,
            mimicry_frequency: top.emits.frequency(),
            aux: vec![pop_mean, pop_std, parent_mean],
        })?;
        best = (population[parents[0]].clone(), top.mean);

        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && (gen + 1) % config.checkpoint_every == 0 {
                save_checkpoint(dir, &format!("gen_{gen:06}.ckpt"), config, &net, &best.0, gen)?;
            }
        }
        if gen + 1 == config.generations {
            break;
        }
        let mut next: Vec<Genome> = parents[..config.elite_count]
            .iter()
            .map(|&i| population[i].clone())
            .collect();
        while next.len() < pop_size {
            let p = parents[breed_rng.gen_range(0..k)];
            next.push(mutate(&population[p], config.mutation_sigma, &mut breed_rng)?);
        }
        population = next;
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(dir, "best.ckpt", config, &net, &best.0, config.generations.saturating_sub(1))?;
    }
    Ok(GaOutcome {
        history,
        best_genome: best.0,
        best_fitness: best.1,
        network: net,
    })
}
