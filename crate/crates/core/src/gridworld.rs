//! Two-agent cooperative resource collection with anonymous spatial signals.
//!
//! Coordinates: `x` grows to the right, `y` grows upwards, so "above" means a
//! larger `y`. Moves off the grid are clamped.
//!
//! A step resolves in this order: agent moves and emissions, collection and
//! respawn, resource emissions. Signals produced during a step are what the
//! observations returned by that step see, and they are replaced by the next
//! step's signals.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_from;

pub const N_AGENTS: usize = 2;
pub const N_SPATIAL_ACTIONS: usize = 5;

fn default_episode_len() -> usize {
    50
}
fn default_reward_collect() -> f64 {
    10.0
}
fn default_step_penalty() -> f64 {
    -0.1
}
fn default_p_res() -> f64 {
    0.5
}
fn default_v_res() -> u32 {
    3
}
fn default_n_resources() -> usize {
    1
}

/// World geometry, reward scheme, and signal alphabets.
///
/// The centralized-critic state vector ([`global_state`]) is laid out as:
/// agent positions `(x/(w-1), y/(h-1))` for both agents, resource positions
/// in the same form, one `|Σ|`-wide one-hot of the symbol each agent emitted
/// on the last step, one per resource likewise, and finally `t / episode_len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_episode_len")]
    pub episode_len: usize,
    #[serde(default = "default_reward_collect")]
    pub reward_collect: f64,
    #[serde(default = "default_step_penalty")]
    pub step_penalty: f64,
    pub alphabet_size: usize,
    /// Symbols agents can emit; one communicative action per entry.
    pub agent_signals: Vec<usize>,
    /// Symbols resources emit.
    pub resource_signals: Vec<usize>,
    #[serde(default = "default_p_res")]
    pub p_res: f64,
    #[serde(default = "default_v_res")]
    pub v_res: u32,
    /// Defaults to `v_res`.
    #[serde(default)]
    pub v_agent: Option<u32>,
    #[serde(default = "default_n_resources")]
    pub n_resources: usize,
    /// Append the agent's own normalized coordinates to its observation.
    #[serde(default)]
    pub observe_position: bool,
}

impl GridConfig {
    /// Grid with the default dynamics and the given alphabets.
    pub fn new(
        width: usize,
        height: usize,
        alphabet_size: usize,
        agent_signals: Vec<usize>,
        resource_signals: Vec<usize>,
    ) -> Self {
        Self {
            width,
            height,
            episode_len: default_episode_len(),
            reward_collect: default_reward_collect(),
            step_penalty: default_step_penalty(),
            alphabet_size,
            agent_signals,
            resource_signals,
            p_res: default_p_res(),
            v_res: default_v_res(),
            v_agent: None,
            n_resources: default_n_resources(),
            observe_position: false,
        }
    }

    /// No signals at all.
    pub fn signal_free(width: usize, height: usize) -> Self {
        let mut c = Self::new(width, height, 0, Vec::new(), Vec::new());
        c.p_res = 0.0;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let entities = N_AGENTS + self.n_resources;
        if self.width < 2 || self.height < 2 || self.width * self.height < entities {
            return Err(Error::GridTooSmall {
                width: self.width,
                height: self.height,
                entities,
            });
        }
        if self.episode_len == 0 {
            return Err(Error::config("episode_len must be positive"));
        }
        if self.n_resources == 0 {
            return Err(Error::config("n_resources must be at least 1"));
        }
        for (name, set) in [("agent_signals", &self.agent_signals), ("resource_signals", &self.resource_signals)] {
            if let Some(&bad) = set.iter().find(|&&s| s >= self.alphabet_size) {
                return Err(Error::config(format!(
                    "{name} contains symbol {bad} outside alphabet of size {}",
                    self.alphabet_size
                )));
            }
            let mut sorted = set.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != set.len() {
                return Err(Error::config(format!("{name} contains duplicates")));
            }
        }
        if !(0.0..=1.0).contains(&self.p_res) {
            return Err(Error::config(format!("p_res must lie in [0, 1], got {}", self.p_res)));
        }
        if self.v_res < 1 || self.v_agent.is_some_and(|v| v < 1) {
            return Err(Error::config("signal volumes must be at least 1"));
        }
        Ok(())
    }

    /// Same config with optional fields written out.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.v_agent = Some(self.agent_volume());
        c
    }

    pub fn agent_volume(&self) -> u32 {
        self.v_agent.unwrap_or(self.v_res)
    }

    pub fn n_actions(&self) -> usize {
        N_SPATIAL_ACTIONS + self.agent_signals.len()
    }

    pub fn observation_len(&self) -> usize {
        1 + 4 * self.alphabet_size + N_AGENTS + if self.observe_position { 2 } else { 0 }
    }

    pub fn global_state_len(&self) -> usize {
        2 * N_AGENTS + 2 * self.n_resources + (N_AGENTS + self.n_resources) * self.alphabet_size + 1
    }

    /// Symbols both agents and resources can produce.
    pub fn mimicable(&self) -> Vec<usize> {
        self.agent_signals
            .iter()
            .copied()
            .filter(|s| self.resource_signals.contains(s))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pos {
    pub x: usize,
    pub y: usize,
}

impl Pos {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Pos) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalOrigin {
    Agent(usize),
    Resource(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signal {
    pub source: Pos,
    pub symbol: usize,
    pub volume: u32,
    /// Bookkeeping for the critic and trajectory dumps; never observed.
    pub origin: SignalOrigin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentAction {
    Stay,
    Up,
    Down,
    Left,
    Right,
    Emit(usize),
}

impl AgentAction {
    /// Indices `0..5` are spatial; `5 + j` emits `agent_signals[j]`.
    pub fn from_index(index: usize, config: &GridConfig) -> Result<Self> {
        Ok(match index {
            0 => Self::Stay,
            1 => Self::Up,
            2 => Self::Down,
            3 => Self::Left,
            4 => Self::Right,
            i if i < config.n_actions() => Self::Emit(config.agent_signals[i - N_SPATIAL_ACTIONS]),
            i => {
                return Err(Error::ActionOutOfRange {
                    index: i,
                    n_actions: config.n_actions(),
                })
            }
        })
    }

    pub fn index(self, config: &GridConfig) -> Result<usize> {
        Ok(match self {
            Self::Stay => 0,
            Self::Up => 1,
            Self::Down => 2,
            Self::Left => 3,
            Self::Right => 4,
            Self::Emit(k) => {
                let j = config
                    .agent_signals
                    .iter()
                    .position(|&s| s == k)
                    .ok_or(Error::ActionOutOfRange {
                        index: N_SPATIAL_ACTIONS + k,
                        n_actions: config.n_actions(),
                    })?;
                N_SPATIAL_ACTIONS + j
            }
        })
    }

    fn apply(self, pos: Pos, config: &GridConfig) -> Pos {
        match self {
            Self::Up => Pos::new(pos.x, (pos.y + 1).min(config.height - 1)),
            Self::Down => Pos::new(pos.x, pos.y.saturating_sub(1)),
            Self::Left => Pos::new(pos.x.saturating_sub(1), pos.y),
            Self::Right => Pos::new((pos.x + 1).min(config.width - 1), pos.y),
            Self::Stay | Self::Emit(_) => pos,
        }
    }
}

/// Four directional detectors, each a bit per alphabet symbol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sensors {
    pub above: Vec<bool>,
    pub below: Vec<bool>,
    pub right: Vec<bool>,
    pub left: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub on_resource: bool,
    pub sensors: Sensors,
    pub agent_id: usize,
    /// Present only when `observe_position` is set.
    pub position: Option<(f32, f32)>,
}

impl Observation {
    /// `[on_resource | above | below | right | left | agent one-hot | position?]`.
    pub fn encode(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(1 + 4 * self.sensors.above.len() + N_AGENTS + 2);
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<f32>) {
        let bit = |b: bool| if b { 1.0 } else { 0.0 };
        out.push(bit(self.on_resource));
        for v in [&self.sensors.above, &self.sensors.below, &self.sensors.right, &self.sensors.left] {
            out.extend(v.iter().map(|&b| bit(b)));
        }
        for i in 0..N_AGENTS {
            out.push(bit(i == self.agent_id));
        }
        if let Some((x, y)) = self.position {
            out.push(x);
            out.push(y);
        }
    }
}

/// Bit `m` of a direction is set when a signal with symbol `m` came from that
/// side (strictly) and the Manhattan distance is strictly below its volume.
pub fn sensor_read(agent: Pos, signals: &[Signal], alphabet_size: usize) -> Sensors {
    let mut s = Sensors {
        above: vec![false; alphabet_size],
        below: vec![false; alphabet_size],
        right: vec![false; alphabet_size],
        left: vec![false; alphabet_size],
    };
    for sig in signals {
        if sig.symbol >= alphabet_size || agent.manhattan(sig.source) >= sig.volume as usize {
            continue;
        }
        let m = sig.symbol;
        s.above[m] |= sig.source.y > agent.y;
        s.below[m] |= sig.source.y < agent.y;
        s.right[m] |= sig.source.x > agent.x;
        s.left[m] |= sig.source.x < agent.x;
    }
    s
}

#[derive(Clone, Debug)]
pub struct GridState {
    pub agent_positions: [Pos; N_AGENTS],
    pub resource_positions: Vec<Pos>,
    /// Signals emitted during the previous step.
    pub active_signals: Vec<Signal>,
    pub t: usize,
    /// Resources collected so far this episode.
    pub collections: usize,
    rng: ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub observations: [Observation; N_AGENTS],
    pub reward: f64,
    pub done: bool,
    pub collected: usize,
}

impl GridState {
    /// Places agents and resources on distinct uniformly random tiles.
    pub fn reset(config: &GridConfig, seed: u64) -> Result<(Self, [Observation; N_AGENTS])> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let tiles = config.width * config.height;
        let picks = sample(&mut rng, tiles, N_AGENTS + config.n_resources).into_vec();
        let to_pos = |i: usize| Pos::new(i % config.width, i / config.width);
        let state = Self {
            agent_positions: [to_pos(picks[0]), to_pos(picks[1])],
            resource_positions: picks[N_AGENTS..].iter().map(|&i| to_pos(i)).collect(),
            active_signals: Vec::new(),
            t: 0,
            collections: 0,
            rng,
        };
        let obs = state.observations(config);
        Ok((state, obs))
    }

    pub fn observation(&self, agent: usize, config: &GridConfig) -> Observation {
        let pos = self.agent_positions[agent];
        Observation {
            on_resource: self.resource_positions.contains(&pos),
            sensors: sensor_read(pos, &self.active_signals, config.alphabet_size),
            agent_id: agent,
            position: config.observe_position.then(|| {
                (
                    pos.x as f32 / (config.width - 1) as f32,
                    pos.y as f32 / (config.height - 1) as f32,
                )
            }),
        }
    }

    pub fn observations(&self, config: &GridConfig) -> [Observation; N_AGENTS] {
        [self.observation(0, config), self.observation(1, config)]
    }

    pub fn is_done(&self, config: &GridConfig) -> bool {
        self.t >= config.episode_len
    }

    /// Step with raw action indices.
    pub fn step_indices(&mut self, actions: [usize; N_AGENTS], config: &GridConfig) -> Result<StepOutcome> {
        let joint = [
            AgentAction::from_index(actions[0], config)?,
            AgentAction::from_index(actions[1], config)?,
        ];
        self.step(joint, config)
    }

    pub fn step(&mut self, actions: [AgentAction; N_AGENTS], config: &GridConfig) -> Result<StepOutcome> {
        if self.is_done(config) {
            return Err(Error::EpisodeOver(self.t));
        }
        for a in actions {
            if let AgentAction::Emit(k) = a {
                if !config.agent_signals.contains(&k) {
                    return Err(Error::ActionOutOfRange {
                        index: N_SPATIAL_ACTIONS + k,
                        n_actions: config.n_actions(),
                    });
                }
            }
        }

        let mut signals = Vec::new();
        for (i, action) in actions.into_iter().enumerate() {
            let pos = self.agent_positions[i];
            if let AgentAction::Emit(k) = action {
                signals.push(Signal {
                    source: pos,
                    symbol: k,
                    volume: config.agent_volume(),
                    origin: SignalOrigin::Agent(i),
                });
            }
            self.agent_positions[i] = action.apply(pos, config);
        }

        let mut collected = 0;
        let [a0, a1] = self.agent_positions;
        if a0 == a1 {
            if let Some(j) = self.resource_positions.iter().position(|&r| r == a0) {
                collected += 1;
                self.respawn(j, config);
            }
        }

        if !config.resource_signals.is_empty() {
            for j in 0..self.resource_positions.len() {
                if self.rng.gen_bool(config.p_res) {
                    let k = config.resource_signals[self.rng.gen_range(0..config.resource_signals.len())];
                    signals.push(Signal {
                        source: self.resource_positions[j],
                        symbol: k,
                        volume: config.v_res,
                        origin: SignalOrigin::Resource(j),
                    });
                }
            }
        }

        self.active_signals = signals;
        self.t += 1;
        self.collections += collected;
        let reward = if collected > 0 {
            config.reward_collect * collected as f64
        } else {
            config.step_penalty
        };
        Ok(StepOutcome {
            observations: self.observations(config),
            reward,
            done: self.is_done(config),
            collected,
        })
    }

    fn respawn(&mut self, j: usize, config: &GridConfig) {
        let free: Vec<Pos> = (0..config.height)
            .flat_map(|y| (0..config.width).map(move |x| Pos::new(x, y)))
            .filter(|p| {
                !self.agent_positions.contains(p)
                    && !self
                        .resource_positions
                        .iter()
                        .enumerate()
                        .any(|(i, r)| i != j && r == p)
            })
            .collect();
        self.resource_positions[j] = free[self.rng.gen_range(0..free.len())];
    }
}

pub fn encode_observation(state: &GridState, agent: usize, config: &GridConfig) -> Vec<f32> {
    state.observation(agent, config).encode()
}

/// Flat state for the centralized critic; layout documented on [`GridConfig`].
pub fn global_state(state: &GridState, config: &GridConfig) -> Vec<f32> {
    let mut out = Vec::with_capacity(config.global_state_len());
    global_state_into(state, config, &mut out);
    out
}

pub fn global_state_into(state: &GridState, config: &GridConfig, out: &mut Vec<f32>) {
    let sx = (config.width - 1) as f32;
    let sy = (config.height - 1) as f32;
    for p in state.agent_positions.iter().chain(&state.resource_positions) {
        out.push(p.x as f32 / sx);
        out.push(p.y as f32 / sy);
    }
    let base = out.len();
    out.resize(base + (N_AGENTS + config.n_resources) * config.alphabet_size, 0.0);
    for sig in &state.active_signals {
        let slot = match sig.origin {
            SignalOrigin::Agent(i) => i,
            SignalOrigin::Resource(j) => N_AGENTS + j,
        };
        out[base + slot * config.alphabet_size + sig.symbol] = 1.0;
    }
    out.push(state.t as f32 / config.episode_len as f32);
}

/// One line of a trajectory dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub t: usize,
    pub positions: TrajectoryPositions,
    pub actions: [AgentAction; N_AGENTS],
    pub signals: Vec<Signal>,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPositions {
    pub agents: [Pos; N_AGENTS],
    pub resources: Vec<Pos>,
}

impl TrajectoryRecord {
    /// Record for the transition that produced `state`.
    pub fn after_step(state: &GridState, actions: [AgentAction; N_AGENTS], reward: f64) -> Self {
        Self {
            t: state.t,
            positions: TrajectoryPositions {
                agents: state.agent_positions,
                resources: state.resource_positions.clone(),
            },
            actions,
            signals: state.active_signals.clone(),
            reward,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory records always serialize")
    }
}
