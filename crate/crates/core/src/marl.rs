//! Multi-agent PPO: decentralized recurrent actors on local observations,
//! a centralized critic on the global state.
//!
//! Batch rows are agent-major: within a step, row `i * n_envs + e` is agent
//! `i` in environment `e`. The team reward is shared, so both agents of an
//! environment receive that environment's advantage.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::ArchConfig;
use crate::gridworld::{global_state_into, AgentAction, GridConfig, GridState, Observation, N_AGENTS};
use crate::metrics::{mean_std, EmitCounts, Record, RunHistory, RunMetadata};
use crate::nnet::checkpoint::Checkpoint;
use crate::nnet::real::log_softmax_rows;
use crate::nnet::{sample_action, NetArch, Network, Scratch, Sequence, Tape, Var};
use crate::seeding::{derive_seed, stream_rng};

pub const RL_AUX_COLUMNS: [&str; 3] = ["entropy", "clip_fraction", "lr"];

const STREAM_ENV: u64 = 1 << 32;
const STREAM_ACT: u64 = 2 << 32;
const STREAM_SHUFFLE: u64 = 3 << 32;
const STREAM_ACTOR_INIT: u64 = 4 << 32;
const STREAM_CRITIC_INIT: u64 = 5 << 32;

fn default_critic_arch() -> ArchConfig {
    ArchConfig {
        recurrent: false,
        ..ArchConfig::default()
    }
}
fn d_n_envs() -> usize {
    128
}
fn d_rollout() -> usize {
    128
}
fn d_total() -> u64 {
    5_000_000
}
fn d_lr() -> f64 {
    2e-3
}
fn d_gamma() -> f64 {
    0.99
}
fn d_lambda() -> f64 {
    0.95
}
fn d_clip() -> f64 {
    0.2
}
fn d_value_coef() -> f64 {
    0.5
}
fn d_entropy_coef() -> f64 {
    0.01
}
fn d_epochs() -> usize {
    4
}
fn d_minibatches() -> usize {
    4
}
fn d_grad_norm() -> f64 {
    0.5
}
fn d_adam_eps() -> f64 {
    1e-5
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlConfig {
    pub env: GridConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    /// Feedforward by default; the global state already carries the time step.
    #[serde(default = "default_critic_arch")]
    pub critic_arch: ArchConfig,
    #[serde(default = "d_n_envs")]
    pub n_envs: usize,
    #[serde(default = "d_rollout")]
    pub rollout_len: usize,
    #[serde(default = "d_total")]
    pub total_env_steps: u64,
    #[serde(default = "d_lr")]
    pub lr_start: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_lambda")]
    pub gae_lambda: f64,
    #[serde(default = "d_clip")]
    pub clip_eps: f64,
    #[serde(default = "d_value_coef")]
    pub value_coef: f64,
    #[serde(default = "d_entropy_coef")]
    pub entropy_coef: f64,
    #[serde(default = "d_epochs")]
    pub epochs_per_update: usize,
    #[serde(default = "d_minibatches")]
    pub minibatches: usize,
    #[serde(default = "d_grad_norm")]
    pub max_grad_norm: f64,
    #[serde(default = "d_adam_eps")]
    pub adam_eps: f64,
    /// One actor for both agents; otherwise one per agent.
    #[serde(default = "d_true")]
    pub shared_actor: bool,
    #[serde(default)]
    pub seed: u64,
    /// Save networks every this many iterations; 0 saves only the last.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl RlConfig {
    pub fn new(env: GridConfig) -> Self {
        Self {
            env,
            arch: ArchConfig::default(),
            critic_arch: default_critic_arch(),
            n_envs: d_n_envs(),
            rollout_len: d_rollout(),
            total_env_steps: d_total(),
            lr_start: d_lr(),
            gamma: d_gamma(),
            gae_lambda: d_lambda(),
            clip_eps: d_clip(),
            value_coef: d_value_coef(),
            entropy_coef: d_entropy_coef(),
            epochs_per_update: d_epochs(),
            minibatches: d_minibatches(),
            max_grad_norm: d_grad_norm(),
            adam_eps: d_adam_eps(),
            shared_actor: true,
            seed: 0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if self.n_envs == 0 || self.rollout_len == 0 {
            return bad("n_envs and rollout_len must be positive");
        }
        if self.minibatches == 0 || self.minibatches > self.n_envs {
            return bad("minibatches must lie in 1..=n_envs");
        }
        if self.epochs_per_update == 0 {
            return bad("epochs_per_update must be positive");
        }
        if self.total_env_steps < self.steps_per_iteration() {
            return bad("total_env_steps is smaller than one iteration");
        }
        if !(self.lr_start >= 0.0 && self.max_grad_norm > 0.0 && self.adam_eps > 0.0) {
            return bad("lr_start, max_grad_norm and adam_eps must be non-negative/positive");
        }
        self.actor_network()?;
        self.critic_network()?;
        Ok(())
    }

    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.env = self.env.resolved();
        c
    }

    pub fn steps_per_iteration(&self) -> u64 {
        (self.n_envs * self.rollout_len) as u64
    }

    pub fn iterations(&self) -> u64 {
        self.total_env_steps / self.steps_per_iteration()
    }

    pub fn actor_network(&self) -> Result<Network> {
        Network::new(self.arch.policy_arch(&self.env))
    }

    pub fn critic_network(&self) -> Result<Network> {
        Network::new(NetArch {
            input_dim: self.env.global_state_len(),
            hidden_dim: self.critic_arch.hidden_dim,
            n_feedforward: self.critic_arch.n_feedforward,
            recurrent: self.critic_arch.recurrent,
            n_actions: 0,
            with_value_head: true,
        })
    }

    /// Learning rate after `steps_done` environment steps (linear decay to 0).
    pub fn lr_at(&self, steps_done: u64) -> f64 {
        self.lr_start * (1.0 - steps_done as f64 / self.total_env_steps as f64).max(0.0)
    }
}

/// GAE over one trajectory. `dones[t]` marks that the episode ended after
/// step `t`; `bootstrap` is the value of the state following the last step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    for (what, len) in [("values", values.len()), ("dones", dones.len())] {
        if len != n {
            return Err(Error::ShapeMismatch {
                what,
                expected: n,
                actual: len,
            });
        }
    }
    let mut adv = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 == n { bootstrap } else { values[t + 1] };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        gae = delta + gamma * lambda * live * gae;
        adv[t] = gae;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

#[derive(Clone, Debug)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub steps: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    /// `steps × 2·n_envs × obs_dim`.
    pub obs: Vec<f32>,
    /// `steps × 2·n_envs`.
    pub actions: Vec<usize>,
    pub log_probs: Vec<f32>,
    /// `steps × n_envs × state_dim`.
    pub global_states: Vec<f32>,
    /// `steps × n_envs`.
    pub values: Vec<f32>,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
    /// Hidden states were zeroed before this step.
    pub resets: Vec<bool>,
    /// Actor hidden at the window start, `2·n_envs × hidden`.
    pub actor_h0: Vec<f32>,
    pub critic_h0: Vec<f32>,
    pub bootstrap_values: Vec<f32>,
    pub completed_returns: Vec<f64>,
    pub emits: EmitCounts,
}

impl RolloutBatch {
    pub fn rows(&self) -> usize {
        N_AGENTS * self.n_envs
    }
}

/// Parallel environments with the recurrent state carried between rollouts.
pub struct Collector {
    config: GridConfig,
    seed: u64,
    envs: Vec<GridState>,
    obs: Vec<[Observation; N_AGENTS]>,
    episode_counter: Vec<u64>,
    running_returns: Vec<f64>,
    pending_reset: Vec<bool>,
    actor_hidden: Vec<f32>,
    critic_hidden: Vec<f32>,
    rng: ChaCha8Rng,
    scratch: Scratch<f32>,
    mimicable: Vec<usize>,
}

impl Collector {
    pub fn new(config: &GridConfig, n_envs: usize, actor: &Network, critic: &Network, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut envs = Vec::with_capacity(n_envs);
        let mut obs = Vec::with_capacity(n_envs);
        for e in 0..n_envs {
            let (s, o) = GridState::reset(config, derive_seed(derive_seed(seed, STREAM_ENV + e as u64), 0))?;
            envs.push(s);
            obs.push(o);
        }
        Ok(Self {
            config: config.clone(),
            seed,
            envs,
            obs,
            episode_counter: vec![0; n_envs],
            running_returns: vec![0.0; n_envs],
            pending_reset: vec![true; n_envs],
            actor_hidden: vec![0.0; N_AGENTS * n_envs * actor.arch.state_dim()],
            critic_hidden: vec![0.0; n_envs * critic.arch.state_dim()],
            rng: stream_rng(seed, STREAM_ACT),
            scratch: Scratch::default(),
            mimicable: config.mimicable(),
        })
    }

    pub fn n_envs(&self) -> usize {
        self.envs.len()
    }

    /// Runs every environment for `steps` steps, resetting finished episodes.
    pub fn collect_rollouts(
        &mut self,
        actors: &[&[f32]],
        actor: &Network,
        critic_params: &[f32],
        critic: &Network,
        steps: usize,
    ) -> Result<RolloutBatch> {
        let e_n = self.n_envs();
        let rows = N_AGENTS * e_n;
        let d = actor.arch.input_dim;
        let g = critic.arch.input_dim;
        let ha = actor.arch.state_dim();
        let hc = critic.arch.state_dim();
        let n_act = actor.arch.n_actions;
        let mut b = RolloutBatch {
            n_envs: e_n,
            steps,
            obs_dim: d,
            state_dim: g,
            obs: Vec::with_capacity(steps * rows * d),
            actions: Vec::with_capacity(steps * rows),
            log_probs: Vec::with_capacity(steps * rows),
            global_states: Vec::with_capacity(steps * e_n * g),
            values: Vec::with_capacity(steps * e_n),
            rewards: Vec::with_capacity(steps * e_n),
            dones: Vec::with_capacity(steps * e_n),
            resets: Vec::with_capacity(steps * e_n),
            actor_h0: Vec::new(),
            critic_h0: Vec::new(),
            bootstrap_values: Vec::new(),
            completed_returns: Vec::new(),
            emits: EmitCounts::default(),
        };
        self.apply_resets(ha, hc);
        b.actor_h0 = self.actor_hidden.clone();
        b.critic_h0 = self.critic_hidden.clone();
        let mut logits = vec![0.0f32; rows * n_act];
        let mut values = vec![0.0f32; e_n];
        let mut lsm = vec![0.0f32; n_act];

        for t in 0..steps {
            b.resets.extend_from_slice(&self.pending_reset);
            if t > 0 {
                self.apply_resets(ha, hc);
            }
            self.pending_reset.iter_mut().for_each(|r| *r = false);
            let obs_start = b.obs.len();
            for i in 0..N_AGENTS {
                for o in &self.obs {
                    o[i].encode_into(&mut b.obs);
                }
            }
            let gs_start = b.global_states.len();
            for env in &self.envs {
                global_state_into(env, &self.config, &mut b.global_states);
            }
            let groups = actors.len();
            let per = rows / groups;
            for (k, params) in actors.iter().enumerate() {
                actor.forward_batch(
                    params,
                    &b.obs[obs_start + k * per * d..obs_start + (k + 1) * per * d],
                    per,
                    &mut self.actor_hidden[k * per * ha..(k + 1) * per * ha],
                    &mut logits[k * per * n_act..(k + 1) * per * n_act],
                    &mut [],
                    &mut self.scratch,
                )?;
            }
            critic.forward_batch(
                critic_params,
                &b.global_states[gs_start..],
                e_n,
                &mut self.critic_hidden,
                &mut [],
                &mut values,
                &mut self.scratch,
            )?;
            b.values.extend_from_slice(&values);

            let mut joint = vec![[AgentAction::Stay; N_AGENTS]; e_n];
            for i in 0..N_AGENTS {
                for (e, j) in joint.iter_mut().enumerate() {
                    let row = &logits[(i * e_n + e) * n_act..(i * e_n + e + 1) * n_act];
                    let a = sample_action(row, &mut self.rng);
                    log_softmax_rows(row, n_act, &mut lsm);
                    b.actions.push(a);
                    b.log_probs.push(lsm[a]);
                    j[i] = AgentAction::from_index(a, &self.config)?;
                    b.emits.add(j[i], &self.mimicable);
                }
            }
            for (e, j) in joint.into_iter().enumerate() {
                let out = self.envs[e].step(j, &self.config)?;
                self.running_returns[e] += out.reward;
                b.rewards.push(out.reward as f32);
                b.dones.push(out.done);
                if out.done {
                    b.completed_returns.push(self.running_returns[e]);
                    self.running_returns[e] = 0.0;
                    self.episode_counter[e] += 1;
                    let seed = derive_seed(derive_seed(self.seed, STREAM_ENV + e as u64), self.episode_counter[e]);
                    let (s, o) = GridState::reset(&self.config, seed)?;
                    self.envs[e] = s;
                    self.obs[e] = o;
                    self.pending_reset[e] = true;
                } else {
                    self.obs[e] = out.observations;
                }
            }
        }

        // Value of the state after the window, without disturbing carried state.
        let mut gs = Vec::with_capacity(e_n * g);
        for env in &self.envs {
            global_state_into(env, &self.config, &mut gs);
        }
        let mut ch = self.critic_hidden.clone();
        for (e, &r) in self.pending_reset.iter().enumerate() {
            if r {
                ch[e * hc..(e + 1) * hc].fill(0.0);
            }
        }
        critic.forward_batch(critic_params, &gs, e_n, &mut ch, &mut [], &mut values, &mut self.scratch)?;
        b.bootstrap_values = values;
        Ok(b)
    }

    fn apply_resets(&mut self, ha: usize, hc: usize) {
        let e_n = self.n_envs();
        for (e, &r) in self.pending_reset.iter().enumerate() {
            if r {
                for i in 0..N_AGENTS {
                    let row = i * e_n + e;
                    self.actor_hidden[row * ha..(row + 1) * ha].fill(0.0);
                }
                self.critic_hidden[e * hc..(e + 1) * hc].fill(0.0);
            }
        }
    }
}

/// Advantages and return targets per `(step, env)`.
pub fn batch_gae(batch: &RolloutBatch, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (t_n, e_n) = (batch.steps, batch.n_envs);
    let mut adv = vec![0.0; t_n * e_n];
    let mut ret = vec![0.0; t_n * e_n];
    for e in 0..e_n {
        let col = |v: &[f32]| (0..t_n).map(|t| v[t * e_n + e] as f64).collect::<Vec<_>>();
        let dones: Vec<bool> = (0..t_n).map(|t| batch.dones[t * e_n + e]).collect();
        let (a, r) = compute_gae(
            &col(&batch.rewards),
            &col(&batch.values),
            &dones,
            batch.bootstrap_values[e] as f64,
            gamma,
            lambda,
        )?;
        for t in 0..t_n {
            adv[t * e_n + e] = a[t];
            ret[t * e_n + e] = r[t];
        }
    }
    Ok((adv, ret))
}

#[derive(Clone, Copy, Debug)]
pub struct PpoLoss {
    pub loss: Var,
    pub policy_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Clipped surrogate with entropy bonus:
/// `−mean(min(ρA, clip(ρ, 1−ε, 1+ε)A)) − c_H · mean(H(π))`.
pub fn ppo_policy_loss(
    tape: &mut Tape<f32>,
    logits: Var,
    actions: Vec<usize>,
    old_log_probs: &[f32],
    advantages: Vec<f32>,
    clip_eps: f32,
    entropy_coef: f32,
) -> PpoLoss {
    let ls = tape.log_softmax(logits);
    let lp = tape.gather(ls, actions);
    let neg_old: Vec<f32> = old_log_probs.iter().map(|v| -v).collect();
    let diff = tape.add_const(lp, &neg_old);
    let ratio = tape.exp(diff);
    let s1 = tape.mul_const(ratio, advantages.clone());
    let clipped = tape.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    let s2 = tape.mul_const(clipped, advantages.clone());
    let surr = tape.min(s1, s2);

    let n = advantages.len();
    let mut n_clipped = 0usize;
    for ((&s, &a), &r) in tape.value(surr).iter().zip(&advantages).zip(tape.value(ratio)) {
        let bound = a + clip_eps * a.abs();
        assert!(
            s <= bound + 1e-5 * (1.0 + bound.abs()),
            "surrogate {s} exceeds clipped bound {bound}"
        );
        if (r - 1.0).abs() > clip_eps {
            n_clipped += 1;
        }
    }
    let ms = tape.mean(surr);
    let policy_loss = tape.scale(ms, -1.0);
    let p = tape.exp(ls);
    let plogp = tape.mul(p, ls);
    let neg_ent_rows = tape.row_sum(plogp);
    let neg_ent = tape.mean(neg_ent_rows);
    let bonus = tape.scale(neg_ent, entropy_coef);
    let loss = tape.add(policy_loss, bonus);
    PpoLoss {
        loss,
        policy_loss: tape.scalar(policy_loss) as f64,
        entropy: -tape.scalar(neg_ent) as f64,
        clip_fraction: n_clipped as f64 / n.max(1) as f64,
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    eps: f64,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;

    pub fn new(n: usize, eps: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let g = g as f64;
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p = (*p as f64 - lr * (*m / c1) / ((*v / c2).sqrt() + self.eps)) as f32;
        }
    }
}

/// Scales `grad` so its Euclidean norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_grad_norm(grad: &mut [f32], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub minibatch_updates: usize,
    /// Set when a non-finite loss or gradient stopped the update early.
    pub aborted: Option<String>,
}

/// Learner state: actor parameters (one or two), critic, and optimizers.
#[derive(Clone, Debug)]
pub struct Learner {
    pub actor: Network,
    pub critic: Network,
    pub actor_params: Vec<Vec<f32>>,
    pub critic_params: Vec<f32>,
    actor_opt: Vec<Adam>,
    critic_opt: Adam,
}

impl Learner {
    pub fn new(config: &RlConfig) -> Result<Self> {
        let actor = config.actor_network()?;
        let critic = config.critic_network()?;
        let n_actors = if config.shared_actor { 1 } else { N_AGENTS };
        let actor_params: Vec<Vec<f32>> = (0..n_actors)
            .map(|k| actor.init_params(derive_seed(config.seed, STREAM_ACTOR_INIT + k as u64)))
            .collect();
        let critic_params = critic.init_params(derive_seed(config.seed, STREAM_CRITIC_INIT));
        Ok(Self {
            actor_opt: (0..n_actors).map(|_| Adam::new(actor.n_params(), config.adam_eps)).collect(),
            critic_opt: Adam::new(critic.n_params(), config.adam_eps),
            actor,
            critic,
            actor_params,
            critic_params,
        })
    }

    pub fn actor_slices(&self) -> Vec<&[f32]> {
        self.actor_params.iter().map(Vec::as_slice).collect()
    }

    /// PPO epochs over `batch`; minibatches are disjoint environment subsets
    /// with full-window sequences.
    pub fn ppo_update(
        &mut self,
        batch: &RolloutBatch,
        config: &RlConfig,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<UpdateStats> {
        let (t_n, e_n) = (batch.steps, batch.n_envs);
        let (adv_raw, returns) = batch_gae(batch, config.gamma, config.gae_lambda)?;
        let (m, s) = mean_std(&adv_raw);
        let adv: Vec<f32> = adv_raw.iter().map(|a| ((a - m) / (s + 1e-8)) as f32).collect();

        let d = batch.obs_dim;
        let g = batch.state_dim;
        let ha = self.actor.arch.state_dim();
        let hc = self.critic.arch.state_dim();
        let groups = self.actor_params.len();
        let mut stats = UpdateStats::default();
        let mut env_ids: Vec<usize> = (0..e_n).collect();

        for _ in 0..config.epochs_per_update {
            env_ids.shuffle(rng);
            for mb in 0..config.minibatches {
                let lo = mb * e_n / config.minibatches;
                let hi = (mb + 1) * e_n / config.minibatches;
                let envs = &env_ids[lo..hi];
                let m_n = envs.len();

                // Actor groups: all 2·m rows when shared, one agent's m rows otherwise.
                let mut pending = Vec::with_capacity(groups);
                for k in 0..groups {
                    let agents: Vec<usize> = if groups == 1 { (0..N_AGENTS).collect() } else { vec![k] };
                    let r_n = agents.len() * m_n;
                    let mut obs = Vec::with_capacity(t_n * r_n * d);
                    let mut actions = Vec::with_capacity(t_n * r_n);
                    let mut old = Vec::with_capacity(t_n * r_n);
                    let mut a = Vec::with_capacity(t_n * r_n);
                    let mut resets = Vec::with_capacity(t_n * r_n);
                    for t in 0..t_n {
                        for &i in &agents {
                            for &e in envs {
                                let row = t * N_AGENTS * e_n + i * e_n + e;
                                obs.extend_from_slice(&batch.obs[row * d..(row + 1) * d]);
                                actions.push(batch.actions[row]);
                                old.push(batch.log_probs[row]);
                                a.push(adv[t * e_n + e]);
                                resets.push(batch.resets[t * e_n + e]);
                            }
                        }
                    }
                    let mut h0 = Vec::with_capacity(r_n * ha);
                    for &i in &agents {
                        for &e in envs {
                            let row = i * e_n + e;
                            h0.extend_from_slice(&batch.actor_h0[row * ha..(row + 1) * ha]);
                        }
                    }
                    let mut tape = Tape::new();
                    let out = self.actor.forward_tape(
                        &mut tape,
                        &self.actor_params[k],
                        Sequence {
                            obs: &obs,
                            steps: t_n,
                            batch: r_n,
                            h0: Some(&h0),
                            resets: Some(&resets),
                        },
                    )?;
                    let logits = out.logits.expect("actor has a policy head");
                    let l = ppo_policy_loss(
                        &mut tape,
                        logits,
                        actions,
                        &old,
                        a,
                        config.clip_eps as f32,
                        config.entropy_coef as f32,
                    );
                    let loss_value = tape.scalar(l.loss);
                    let grad = tape.backward(l.loss, self.actor.n_params())?;
                    pending.push((loss_value, grad, l));
                }

                let mut gs = Vec::with_capacity(t_n * m_n * g);
                let mut ret = Vec::with_capacity(t_n * m_n);
                let mut resets = Vec::with_capacity(t_n * m_n);
                for t in 0..t_n {
                    for &e in envs {
                        let row = t * e_n + e;
                        gs.extend_from_slice(&batch.global_states[row * g..(row + 1) * g]);
                        ret.push(-(returns[row] as f32));
                        resets.push(batch.resets[row]);
                    }
                }
                let mut h0 = Vec::with_capacity(m_n * hc);
                for &e in envs {
                    h0.extend_from_slice(&batch.critic_h0[e * hc..(e + 1) * hc]);
                }
                let mut tape = Tape::new();
                let out = self.critic.forward_tape(
                    &mut tape,
                    &self.critic_params,
                    Sequence {
                        obs: &gs,
                        steps: t_n,
                        batch: m_n,
                        h0: Some(&h0),
                        resets: Some(&resets),
                    },
                )?;
                let v = out.values.expect("critic has a value head");
                let diff = tape.add_const(v, &ret);
                let sq = tape.square(diff);
                let ms = tape.mean(sq);
                let value_loss = tape.scalar(ms) as f64 * 0.5;
                let vl = tape.scale(ms, (0.5 * config.value_coef) as f32);
                let mut critic_grad = tape.backward(vl, self.critic.n_params())?;

                let finite = |x: f32, gr: &[f32]| x.is_finite() && gr.iter().all(|v| v.is_finite());
                if let Some((k, _)) = pending
                    .iter()
                    .enumerate()
                    .find(|(_, (lv, gr, _))| !finite(*lv, gr))
                {
                    stats.aborted = Some(format!("non-finite actor {k} loss or gradient"));
                    return Ok(finish(stats));
                }
                if !finite(tape.scalar(vl), &critic_grad) {
                    stats.aborted = Some("non-finite critic loss or gradient".into());
                    return Ok(finish(stats));
                }
                for (k, (_, mut grad, l)) in pending.into_iter().enumerate() {
                    clip_grad_norm(&mut grad, config.max_grad_norm);
                    self.actor_opt[k].step(&mut self.actor_params[k], &grad, lr);
                    stats.policy_loss += l.policy_loss / groups as f64;
                    stats.entropy += l.entropy / groups as f64;
                    stats.clip_fraction += l.clip_fraction / groups as f64;
                }
                clip_grad_norm(&mut critic_grad, config.max_grad_norm);
                self.critic_opt.step(&mut self.critic_params, &critic_grad, lr);
                stats.value_loss += value_loss;
                stats.minibatch_updates += 1;
            }
        }
        Ok(finish(stats))
    }
}

fn finish(mut s: UpdateStats) -> UpdateStats {
    if s.minibatch_updates > 0 {
        let n = s.minibatch_updates as f64;
        s.policy_loss /= n;
        s.value_loss /= n;
        s.entropy /= n;
        s.clip_fraction /= n;
    }
    s
}

#[derive(Clone, Debug)]
pub struct RlOutcome {
    pub history: RunHistory,
    pub learner: Learner,
    pub updates: Vec<UpdateStats>,
}

fn save_checkpoint(dir: &Path, name: &str, config: &RlConfig, learner: &Learner, iteration: u64) -> Result<()> {
    let mut nets: Vec<(String, &Network, Vec<f32>)> = Vec::new();
    if learner.actor_params.len() == 1 {
        nets.push(("actor".into(), &learner.actor, learner.actor_params[0].clone()));
    } else {
        for (k, p) in learner.actor_params.iter().enumerate() {
            nets.push((format!("actor{k}"), &learner.actor, p.clone()));
        }
    }
    nets.push(("critic".into(), &learner.critic, learner.critic_params.clone()));
    Checkpoint::new(config.seed, iteration, nets)?.save(&dir.join(name))
}

/// Collect → GAE → PPO update until `total_env_steps`, one metrics row per
/// iteration. `mean_reward`/`std_reward` summarize the episodes that finished
/// during that iteration's rollout; if none did, the previous row's values
/// are repeated (and the per-step mean reward × episode length before any).
pub fn train(config: &RlConfig, checkpoint_dir: Option<&Path>, metadata: RunMetadata) -> Result<RlOutcome> {
    config.validate()?;
    let mut learner = Learner::new(config)?;
    let mut collector = Collector::new(&config.env, config.n_envs, &learner.actor, &learner.critic, config.seed)?;
    let mut shuffle_rng = stream_rng(config.seed, STREAM_SHUFFLE);
    let mut history = RunHistory::new(metadata, &RL_AUX_COLUMNS);
    let mut updates = Vec::new();
    let per_iter = config.steps_per_iteration();
    let mut last = None;

    for it in 0..config.iterations() {
        let steps_done = it * per_iter;
        let lr = config.lr_at(steps_done);
        let batch = {
            let actors = learner.actor_slices();
            collector.collect_rollouts(&actors, &learner.actor, &learner.critic_params, &learner.critic, config.rollout_len)?
        };
        let (mean, std) = if batch.completed_returns.is_empty() {
            last.unwrap_or_else(|| {
                let r = batch.rewards.iter().map(|&r| r as f64).sum::<f64>() / batch.rewards.len() as f64;
                (r * config.env.episode_len as f64, 0.0)
            })
        } else {
            mean_std(&batch.completed_returns)
        };
        last = Some((mean, std));
        let stats = learner.ppo_update(&batch, config, lr, &mut shuffle_rng)?;
        history.push(Record {
            iteration: it as i64,
            env_steps: steps_done + per_iter,
            mean_reward: mean,
            std_reward: std,
            mimicry_frequency: batch.emits.frequency(),
            aux: vec![stats.entropy, stats.clip_fraction, lr],
        })?;
        updates.push(stats);
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every as u64 == 0 {
                save_checkpoint(dir, &format!("iter_{it:06}.ckpt"), config, &learner, it)?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(dir, "final.ckpt", config, &learner, config.iterations().saturating_sub(1))?;
    }
    Ok(RlOutcome {
        history,
        learner,
        updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;
    use rand::Rng;

    fn small_config() -> RlConfig {
        let mut c = RlConfig::new(GridConfig::new(4, 4, 2, vec![0, 1], vec![0, 1]));
        c.arch = ArchConfig {
            hidden_dim: 8,
            n_feedforward: 1,
            recurrent: true,
        };
        c.critic_arch = ArchConfig {
            hidden_dim: 8,
            n_feedforward: 1,
            recurrent: false,
        };
        c.n_envs = 4;
        c.rollout_len = 8;
        c.total_env_steps = 4 * 8 * 3;
        c.minibatches = 2;
        c.epochs_per_update = 2;
        c
    }

    fn brute_force(r: &[f64], v: &[f64], d: &[bool], boot: f64, g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        let next = |t: usize| if t + 1 == n { boot } else { v[t + 1] };
        let delta: Vec<f64> = (0..n)
            .map(|t| r[t] + g * next(t) * if d[t] { 0.0 } else { 1.0 } - v[t])
            .collect();
        (0..n)
            .map(|t| {
                let mut s = 0.0;
                let mut w = 1.0;
                for k in t..n {
                    s += w * delta[k];
                    if d[k] {
                        break;
                    }
                    w *= g * l;
                }
                s
            })
            .collect()
    }

    #[test]
    fn gae_examples() {
        let (a, r) = compute_gae(&[1.0], &[0.0], &[true], 0.0, 0.99, 0.95).unwrap();
        assert_eq!((a[0], r[0]), (1.0, 1.0));
        let rw = [0.5, -0.1, 2.0];
        let v = [0.2, 0.4, -0.3];
        let (a, _) = compute_gae(&rw, &v, &[false, false, false], 0.7, 0.9, 0.0).unwrap();
        for t in 0..3 {
            let next = if t == 2 { 0.7 } else { v[t + 1] };
            assert!((a[t] - (rw[t] + 0.9 * next - v[t])).abs() < 1e-12);
        }
        assert!(compute_gae(&rw, &v[..2], &[false; 3], 0.0, 0.9, 0.9).is_err());
    }

    #[test]
    fn gae_matches_direct_sum() {
        let mut rng = rng_from(4);
        for _ in 0..200 {
            let n = rng.gen_range(1..=6);
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            let boot = rng.gen_range(-1.0..1.0);
            let (a, ret) = compute_gae(&r, &v, &d, boot, 0.97, 0.9).unwrap();
            let oracle = brute_force(&r, &v, &d, boot, 0.97, 0.9);
            for t in 0..n {
                assert!((a[t] - oracle[t]).abs() < 1e-12);
                assert!((ret[t] - a[t] - v[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lr_schedule_is_linear() {
        let c = small_config();
        assert_eq!(c.lr_at(0), c.lr_start);
        assert!((c.lr_at(c.total_env_steps / 2) - c.lr_start / 2.0).abs() < 1e-15);
        assert_eq!(c.lr_at(c.total_env_steps), 0.0);
    }

    #[test]
    fn rollout_shapes_and_replay() {
        let c = small_config();
        let learner = Learner::new(&c).unwrap();
        let mut col = Collector::new(&c.env, c.n_envs, &learner.actor, &learner.critic, 1).unwrap();
        let b = col
            .collect_rollouts(&learner.actor_slices(), &learner.actor, &learner.critic_params, &learner.critic, 8)
            .unwrap();
        assert_eq!(b.actions.len(), 8 * 4 * 2);
        assert_eq!(b.obs.len(), 8 * 4 * 2 * c.env.observation_len());
        assert_eq!(b.values.len(), 8 * 4);
        assert_eq!(b.global_states.len(), 8 * 4 * c.env.global_state_len());
        assert!(b.log_probs.iter().all(|l| l.is_finite() && *l <= 0.0));

        // Re-evaluating the stored actions on the tape reproduces the log-probs.
        let row_resets: Vec<bool> = (0..8)
            .flat_map(|t| (0..2).flat_map(move |_| (0..4).map(move |e| t * 4 + e)))
            .map(|k| b.resets[k])
            .collect();
        let mut tape = Tape::new();
        let out = learner
            .actor
            .forward_tape(
                &mut tape,
                &learner.actor_params[0],
                Sequence {
                    obs: &b.obs,
                    steps: 8,
                    batch: 8,
                    h0: Some(&b.actor_h0),
                    resets: Some(&row_resets),
                },
            )
            .unwrap();
        let ls = tape.log_softmax(out.logits.unwrap());
        let lp = tape.gather(ls, b.actions.clone());
        for (x, y) in tape.value(lp).iter().zip(&b.log_probs) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn zero_params_sample_uniformly() {
        let c = small_config();
        let mut learner = Learner::new(&c).unwrap();
        learner.actor_params[0].iter_mut().for_each(|p| *p = 0.0);
        let mut col = Collector::new(&c.env, 25, &learner.actor, &learner.critic, 3).unwrap();
        let b = col
            .collect_rollouts(&learner.actor_slices(), &learner.actor, &learner.critic_params, &learner.critic, 200)
            .unwrap();
        let n = b.actions.len();
        assert_eq!(n, 10_000);
        let k = c.env.n_actions();
        let mut counts = vec![0usize; k];
        b.actions.iter().for_each(|&a| counts[a] += 1);
        let p = 1.0 / k as f64;
        let se = (n as f64 * p * (1.0 - p)).sqrt();
        for &cnt in &counts {
            assert!((cnt as f64 - n as f64 * p).abs() < 4.0 * se, "{counts:?}");
        }
    }

    #[test]
    fn first_minibatch_is_unclipped() {
        let c = small_config();
        let learner = Learner::new(&c).unwrap();
        let mut col = Collector::new(&c.env, c.n_envs, &learner.actor, &learner.critic, 2).unwrap();
        let b = col
            .collect_rollouts(&learner.actor_slices(), &learner.actor, &learner.critic_params, &learner.critic, 8)
            .unwrap();
        let mut one = c.clone();
        one.epochs_per_update = 1;
        one.minibatches = 1;
        let mut l2 = learner.clone();
        let stats = l2.ppo_update(&b, &one, 1e-3, &mut rng_from(0)).unwrap();
        assert_eq!(stats.clip_fraction, 0.0);
        assert_eq!(stats.minibatch_updates, 1);
        // Ratio 1 everywhere: the surrogate is the mean standardized advantage, i.e. 0.
        assert!(stats.policy_loss.abs() < 1e-5, "{}", stats.policy_loss);
    }

    #[test]
    fn zero_advantage_leaves_only_entropy_and_value() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.input(vec![0.3, -0.2, 0.1, 0.5], 2, 2);
        let l = ppo_policy_loss(&mut tape, logits, vec![0, 1], &[-0.5, -0.9], vec![0.0, 0.0], 0.2, 0.0);
        assert_eq!(l.policy_loss, 0.0);
        assert_eq!(tape.scalar(l.loss), 0.0);
    }

    #[test]
    fn toy_bandit_update_follows_policy_gradient() {
        // Two arms, constant input, linear policy: logits = W·1 + b.
        for (r0, r1) in [(1.0f32, 0.0f32), (0.0, 1.0)] {
            let net = Network::new(NetArch {
                input_dim: 1,
                hidden_dim: 1,
                n_feedforward: 0,
                recurrent: false,
                n_actions: 2,
                with_value_head: false,
            })
            .unwrap();
            let mut params = vec![0.0f32; net.n_params()];
            let mut rng = rng_from(5);
            let n = 2000;
            let actions: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let rewards: Vec<f32> = actions.iter().map(|&a| if a == 0 { r0 } else { r1 }).collect();
            let mean = rewards.iter().sum::<f32>() / n as f32;
            let adv: Vec<f32> = rewards.iter().map(|r| r - mean).collect();
            let old = vec![(0.5f32).ln(); n];
            let mut tape = Tape::new();
            let out = net
                .forward_tape(
                    &mut tape,
                    &params,
                    Sequence {
                        obs: &vec![1.0; n],
                        steps: 1,
                        batch: n,
                        h0: None,
                        resets: None,
                    },
                )
                .unwrap();
            let l = ppo_policy_loss(&mut tape, out.logits.unwrap(), actions, &old, adv, 0.2, 0.0);
            let g = tape.backward(l.loss, params.len()).unwrap();
            Adam::new(params.len(), 1e-8).step(&mut params, &g, 0.01);
            let pref0 = (params[0] + params[2]) - (params[1] + params[3]);
            // ∂E[r]/∂(θ0 − θ1) = π0 π1 (r0 − r1).
            assert_eq!(pref0.signum(), (r0 - r1).signum());
        }
    }

    #[test]
    fn shared_actor_is_symmetric_in_agent_id() {
        let c = small_config();
        let learner = Learner::new(&c).unwrap();
        let net = &learner.actor;
        let p = &learner.actor_params[0];
        let mut o0 = vec![0.0f32; c.env.observation_len()];
        o0[3] = 1.0;
        let mut o1 = o0.clone();
        let id = c.env.observation_len() - 2;
        o0[id] = 1.0;
        o1[id + 1] = 1.0;
        let h = crate::nnet::HiddenState::zeros(&net.arch);
        let (a0, _, _) = net.policy_forward(p, &o0, &h).unwrap();
        let (a1, _, _) = net.policy_forward(p, &o1, &h).unwrap();
        // Swapping which agent carries which id swaps their outputs.
        let mut batch = o1.clone();
        batch.extend(&o0);
        let mut hidden = vec![0.0; 2 * net.arch.state_dim()];
        let mut logits = vec![0.0; 2 * net.arch.n_actions];
        net.forward_batch(p, &batch, 2, &mut hidden, &mut logits, &mut [], &mut Scratch::default())
            .unwrap();
        assert_eq!(&logits[..a1.len()], &a1[..]);
        assert_eq!(&logits[a1.len()..], &a0[..]);
    }

    #[test]
    fn training_is_reproducible_and_row_count_matches() {
        let c = small_config();
        let a = train(&c, None, RunMetadata::default()).unwrap();
        let b = train(&c, None, RunMetadata::default()).unwrap();
        assert_eq!(a.history.records.len() as u64, c.total_env_steps / (c.n_envs * c.rollout_len) as u64);
        assert_eq!(a.history.to_csv_string().unwrap(), b.history.to_csv_string().unwrap());
        let lr = a.history.aux("lr").unwrap();
        assert_eq!(lr[0], c.lr_start);
        assert!(lr.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn independent_actors_train() {
        let mut c = small_config();
        c.shared_actor = false;
        let dir = tempfile::tempdir().unwrap();
        let out = train(&c, Some(dir.path()), RunMetadata::default()).unwrap();
        assert_eq!(out.learner.actor_params.len(), 2);
        let ck = Checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
        assert_eq!(ck.params.len(), 3);
    }
}
