//! Controllers for both agents and a lockstep episode runner.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gridworld::{AgentAction, GridConfig, GridState, Observation, TrajectoryRecord, N_AGENTS};
use crate::metrics::{mean_std, EmitCounts};
use crate::nnet::{argmax, sample_action, Network, Scratch};
use crate::seeding::{derive_seed, rng_from};

pub trait Policy {
    /// Called before the first step of `n_envs` fresh episodes.
    fn reset(&mut self, n_envs: usize);

    /// Writes one action index per agent for every environment.
    fn act(
        &mut self,
        envs: &[GridState],
        obs: &[[Observation; N_AGENTS]],
        config: &GridConfig,
        actions: &mut [[usize; N_AGENTS]],
    ) -> Result<()>;
}

/// Uniform over the action set.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self { rng: rng_from(seed) }
    }
}

impl Policy for RandomPolicy {
    fn reset(&mut self, _n_envs: usize) {}

    fn act(
        &mut self,
        _envs: &[GridState],
        _obs: &[[Observation; N_AGENTS]],
        config: &GridConfig,
        actions: &mut [[usize; N_AGENTS]],
    ) -> Result<()> {
        for a in actions.iter_mut().flatten() {
            *a = self.rng.gen_range(0..config.n_actions());
        }
        Ok(())
    }
}

/// Recurrent network policy driving both agents.
///
/// With one parameter vector both agents share the network and are told apart
/// by the agent-id bits of their observation; with two, agent `i` uses `params[i]`.
pub struct NetworkPolicy<'a> {
    net: &'a Network,
    params: Vec<&'a [f32]>,
    greedy: bool,
    rng: ChaCha8Rng,
    n_envs: usize,
    /// Agent-major: agent 0's rows for every env, then agent 1's.
    hidden: Vec<f32>,
    obs: Vec<f32>,
    logits: Vec<f32>,
    scratch: Scratch<f32>,
}

impl<'a> NetworkPolicy<'a> {
    pub fn new(net: &'a Network, params: Vec<&'a [f32]>, greedy: bool, seed: u64) -> Result<Self> {
        if params.is_empty() || params.len() > N_AGENTS {
            return Err(Error::config("a network policy needs one shared or two per-agent parameter vectors"));
        }
        for p in &params {
            if p.len() != net.n_params() {
                return Err(Error::ShapeMismatch {
                    what: "policy parameters",
                    expected: net.n_params(),
                    actual: p.len(),
                });
            }
        }
        Ok(Self {
            net,
            params,
            greedy,
            rng: rng_from(seed),
            n_envs: 0,
            hidden: Vec::new(),
            obs: Vec::new(),
            logits: Vec::new(),
            scratch: Scratch::default(),
        })
    }

    /// Splits a concatenated genome into per-agent parameter slices.
    pub fn split_genome(net: &Network, genome: &'a [f32], shared: bool) -> Result<Vec<&'a [f32]>> {
        let n = net.n_params();
        let copies = if shared { 1 } else { N_AGENTS };
        if genome.len() != n * copies {
            return Err(Error::ShapeMismatch {
                what: "genome",
                expected: n * copies,
                actual: genome.len(),
            });
        }
        Ok(genome.chunks_exact(n).collect())
    }
}

impl Policy for NetworkPolicy<'_> {
    fn reset(&mut self, n_envs: usize) {
        self.n_envs = n_envs;
        self.hidden.clear();
        self.hidden.resize(N_AGENTS * n_envs * self.net.arch.state_dim(), 0.0);
    }

    fn act(
        &mut self,
        _envs: &[GridState],
        obs: &[[Observation; N_AGENTS]],
        _config: &GridConfig,
        actions: &mut [[usize; N_AGENTS]],
    ) -> Result<()> {
        let e = self.n_envs;
        assert_eq!(obs.len(), e, "policy was reset for a different batch size");
        let arch = &self.net.arch;
        self.obs.clear();
        for i in 0..N_AGENTS {
            for o in obs {
                o[i].encode_into(&mut self.obs);
            }
        }
        let n_act = arch.n_actions;
        self.logits.resize(N_AGENTS * e * n_act, 0.0);
        let groups = if self.params.len() == 1 { 1 } else { N_AGENTS };
        let rows = N_AGENTS * e / groups;
        let (d, h) = (arch.input_dim, arch.state_dim());
        for g in 0..groups {
            self.net.forward_batch(
                self.params[g],
                &self.obs[g * rows * d..(g + 1) * rows * d],
                rows,
                &mut self.hidden[g * rows * h..(g + 1) * rows * h],
                &mut self.logits[g * rows * n_act..(g + 1) * rows * n_act],
                &mut [],
                &mut self.scratch,
            )?;
        }
        for i in 0..N_AGENTS {
            for (k, a) in actions.iter_mut().enumerate() {
                let row = &self.logits[(i * e + k) * n_act..(i * e + k + 1) * n_act];
                a[i] = if self.greedy {
                    argmax(row)
                } else {
                    sample_action(row, &mut self.rng)
                };
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeStats {
    pub returns: Vec<f64>,
    pub collections: Vec<usize>,
    pub emits: EmitCounts,
}

impl EpisodeStats {
    pub fn mean_return(&self) -> f64 {
        mean_std(&self.returns).0
    }

    pub fn std_return(&self) -> f64 {
        mean_std(&self.returns).1
    }
}

/// Runs `n_episodes` full episodes side by side. Episode `e` resets with
/// `derive_seed(seed, e)`. `on_step` sees every transition.
pub fn run_episodes(
    policy: &mut dyn Policy,
    config: &GridConfig,
    n_episodes: usize,
    seed: u64,
    mut on_step: Option<&mut dyn FnMut(usize, &TrajectoryRecord)>,
) -> Result<EpisodeStats> {
    config.validate()?;
    let mimicable = config.mimicable();
    let mut envs = Vec::with_capacity(n_episodes);
    let mut obs = Vec::with_capacity(n_episodes);
    for e in 0..n_episodes {
        let (s, o) = GridState::reset(config, derive_seed(seed, e as u64))?;
        envs.push(s);
        obs.push(o);
    }
    policy.reset(n_episodes);
    let mut stats = EpisodeStats {
        returns: vec![0.0; n_episodes],
        collections: vec![0; n_episodes],
        emits: EmitCounts::default(),
    };
    let mut actions = vec![[0usize; N_AGENTS]; n_episodes];
    for _ in 0..config.episode_len {
        policy.act(&envs, &obs, config, &mut actions)?;
        for (e, env) in envs.iter_mut().enumerate() {
            let joint = [
                AgentAction::from_index(actions[e][0], config)?,
                AgentAction::from_index(actions[e][1], config)?,
            ];
            for a in joint {
                stats.emits.add(a, &mimicable);
            }
            let out = env.step(joint, config)?;
            stats.returns[e] += out.reward;
            stats.collections[e] += out.collected;
            if let Some(f) = on_step.as_mut() {
                f(e, &TrajectoryRecord::after_step(env, joint, out.reward));
            }
            obs[e] = out.observations;
        }
    }
    Ok(stats)
}
