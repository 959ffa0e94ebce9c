//! The analytic speaker–listener game.
//!
//! A speaker observes a latent `z` (uniform over `n_latent` values) and picks
//! one of `n_speaker_actions` actions. Actions `0..n_signals` are signals; the
//! rest are non-communicative and earn the team a fixed payoff `u`. The
//! listener sees either the signal or a silent symbol (row `n_signals` of its
//! policy) and guesses `z`, earning 1 when right.
//!
//! Every quantity here is computed by exact enumeration over the tabular
//! policies; nothing is sampled except in [`escape`].

pub mod escape;
pub mod theorems;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use escape::{
    escape_probability_estimate, EscapeEstimate, ListenerKind, MassRedistribution,
};
pub use theorems::{
    theory_report, verify_theorem_1, verify_theorem_2, SearchMode, SearchSettings,
    TheoremCheck, TheoryReport,
};

const ROW_TOL: f64 = 1e-9;

/// How the external source maps latents to signals, i.e. `P(m | z, S)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExternalCode {
    /// `signal[z]` is emitted with certainty for latent `z`.
    Deterministic(Vec<usize>),
    /// Row-stochastic table of shape `n_latent x n_signals`.
    Table(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    pub n_latent: usize,
    pub n_speaker_actions: usize,
    pub n_signals: usize,
    pub n_listener_actions: usize,
    /// Team payoff when the speaker does not signal.
    pub u: f64,
    /// Probability that a received signal came from the external source.
    #[serde(default)]
    pub p_external: f64,
    /// Defaults to `z -> z mod n_signals`.
    #[serde(default)]
    pub external_code: Option<ExternalCode>,
    /// Only the uniform prior is supported; anything else is rejected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_prior: Option<Vec<f64>>,
}

impl GameConfig {
    pub fn new(
        n_latent: usize,
        n_speaker_actions: usize,
        n_signals: usize,
        u: f64,
    ) -> Result<Self> {
        let config = Self {
            n_latent,
            n_speaker_actions,
            n_signals,
            n_listener_actions: n_latent,
            u,
            p_external: 0.0,
            external_code: None,
            latent_prior: None,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_external(mut self, p_external: f64, code: Option<ExternalCode>) -> Result<Self> {
        self.p_external = p_external;
        self.external_code = code;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_latent == 0 {
            return Err(Error::config("n_latent must be at least 1"));
        }
        if self.n_speaker_actions == 0 {
            return Err(Error::config("n_speaker_actions must be at least 1"));
        }
        if self.n_signals > self.n_speaker_actions {
            return Err(Error::config(format!(
                "n_signals ({}) exceeds n_speaker_actions ({})",
                self.n_signals, self.n_speaker_actions
            )));
        }
        if self.n_listener_actions != self.n_latent {
            return Err(Error::config(format!(
                "n_listener_actions ({}) must equal n_latent ({})",
                self.n_listener_actions, self.n_latent
            )));
        }
        if !(self.u.is_finite() && self.u >= 0.0) {
            return Err(Error::config(format!("u must be finite and >= 0, got {}", self.u)));
        }
        if !(0.0..=1.0).contains(&self.p_external) {
            return Err(Error::config(format!(
                "p_external must lie in [0, 1], got {}",
                self.p_external
            )));
        }
        if let Some(prior) = &self.latent_prior {
            let expected = 1.0 / self.n_latent as f64;
            if prior.len() != self.n_latent
                || prior.iter().any(|p| (p - expected).abs() > ROW_TOL)
            {
                return Err(Error::config("latent_prior must be uniform"));
            }
        }
        match &self.external_code {
            None => {
                if self.p_external > 0.0 && self.n_signals == 0 {
                    return Err(Error::config("p_external > 0 requires at least one signal"));
                }
            }
            Some(ExternalCode::Deterministic(map)) => {
                if map.len() != self.n_latent {
                    return Err(Error::config("external_code must have one entry per latent"));
                }
                if let Some(&bad) = map.iter().find(|&&m| m >= self.n_signals) {
                    return Err(Error::config(format!(
                        "external_code maps to signal {bad} but only {} signals exist",
                        self.n_signals
                    )));
                }
            }
            Some(ExternalCode::Table(rows)) => {
                check_stochastic(rows, self.n_latent, self.n_signals, "external_code")?;
            }
        }
        Ok(())
    }

    /// Same config with the default external code written out explicitly.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        if out.external_code.is_none() && self.n_signals > 0 {
            out.external_code = Some(ExternalCode::Deterministic(
                (0..self.n_latent).map(|z| z % self.n_signals).collect(),
            ));
        }
        out
    }

    /// `P(m | z, S)` as a dense `n_latent x n_signals` table.
    pub fn code_table(&self) -> Vec<Vec<f64>> {
        match &self.external_code {
            Some(ExternalCode::Table(rows)) => rows.clone(),
            Some(ExternalCode::Deterministic(map)) => map
                .iter()
                .map(|&m| one_hot(self.n_signals, m))
                .collect(),
            None if self.n_signals == 0 => vec![Vec::new(); self.n_latent],
            None => (0..self.n_latent)
                .map(|z| one_hot(self.n_signals, z % self.n_signals))
                .collect(),
        }
    }

    pub fn external_code_is_deterministic(&self) -> bool {
        self.code_table()
            .iter()
            .all(|row| row.iter().all(|&p| p == 0.0 || p == 1.0))
    }

    /// Listener input index for the silent symbol.
    pub fn silent(&self) -> usize {
        self.n_signals
    }

    /// Listener input produced by a speaker action.
    pub fn message_for(&self, speaker_action: usize) -> usize {
        if speaker_action < self.n_signals {
            speaker_action
        } else {
            self.n_signals
        }
    }

    pub fn prior(&self) -> f64 {
        1.0 / self.n_latent as f64
    }
}

fn one_hot(n: usize, idx: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[idx] = 1.0;
    v
}

fn check_stochastic(rows: &[Vec<f64>], n_rows: usize, n_cols: usize, what: &'static str) -> Result<()> {
    if rows.len() != n_rows {
        return Err(Error::ShapeMismatch {
            what,
            expected: n_rows,
            actual: rows.len(),
        });
    }
    for row in rows {
        if row.len() != n_cols {
            return Err(Error::ShapeMismatch {
                what,
                expected: n_cols,
                actual: row.len(),
            });
        }
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config(format!("{what}: entries must lie in [0, 1]")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_TOL {
            return Err(Error::config(format!("{what}: row sums to {sum}, not 1")));
        }
    }
    Ok(())
}

/// `pi^s(a | z)`, shape `n_latent x n_speaker_actions`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerPolicy {
    pub probs: Vec<Vec<f64>>,
}

impl SpeakerPolicy {
    pub fn new(probs: Vec<Vec<f64>>, config: &GameConfig) -> Result<Self> {
        let policy = Self { probs };
        policy.check(config)?;
        Ok(policy)
    }

    pub fn check(&self, config: &GameConfig) -> Result<()> {
        check_stochastic(&self.probs, config.n_latent, config.n_speaker_actions, "speaker policy")
    }

    /// Plays `actions[z]` with certainty.
    pub fn deterministic(config: &GameConfig, actions: &[usize]) -> Result<Self> {
        if actions.len() != config.n_latent {
            return Err(Error::ShapeMismatch {
                what: "speaker actions",
                expected: config.n_latent,
                actual: actions.len(),
            });
        }
        if let Some(&bad) = actions.iter().find(|&&a| a >= config.n_speaker_actions) {
            return Err(Error::ActionOutOfRange {
                index: bad,
                n_actions: config.n_speaker_actions,
            });
        }
        Ok(Self {
            probs: actions
                .iter()
                .map(|&a| one_hot(config.n_speaker_actions, a))
                .collect(),
        })
    }

    pub fn uniform(config: &GameConfig) -> Self {
        let p = 1.0 / config.n_speaker_actions as f64;
        Self {
            probs: vec![vec![p; config.n_speaker_actions]; config.n_latent],
        }
    }

    /// Always takes the first non-communicative action.
    pub fn never_signals(config: &GameConfig) -> Result<Self> {
        if config.n_signals == config.n_speaker_actions {
            return Err(Error::config("speaker has no non-communicative action"));
        }
        Self::deterministic(config, &vec![config.n_signals; config.n_latent])
    }

    /// Always sends signal 0.
    pub fn always_signals(config: &GameConfig) -> Result<Self> {
        if config.n_signals == 0 {
            return Err(Error::config("speaker has no signals"));
        }
        Self::deterministic(config, &vec![0; config.n_latent])
    }

    /// Sends signal `z` for latent `z`.
    pub fn perfect_code(config: &GameConfig) -> Result<Self> {
        if config.n_signals < config.n_latent {
            return Err(Error::config("a perfect code needs n_signals >= n_latent"));
        }
        Self::deterministic(config, &(0..config.n_latent).collect::<Vec<_>>())
    }
}

/// `pi^l(a | m)`, shape `(n_signals + 1) x n_listener_actions`; the last row
/// answers the silent symbol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ListenerPolicy {
    pub probs: Vec<Vec<f64>>,
}

impl ListenerPolicy {
    pub fn new(probs: Vec<Vec<f64>>, config: &GameConfig) -> Result<Self> {
        let policy = Self { probs };
        policy.check(config)?;
        Ok(policy)
    }

    pub fn check(&self, config: &GameConfig) -> Result<()> {
        check_stochastic(
            &self.probs,
            config.n_signals + 1,
            config.n_listener_actions,
            "listener policy",
        )
    }

    pub fn deterministic(config: &GameConfig, responses: &[usize]) -> Result<Self> {
        if responses.len() != config.n_signals + 1 {
            return Err(Error::ShapeMismatch {
                what: "listener responses",
                expected: config.n_signals + 1,
                actual: responses.len(),
            });
        }
        if let Some(&bad) = responses.iter().find(|&&a| a >= config.n_listener_actions) {
            return Err(Error::ActionOutOfRange {
                index: bad,
                n_actions: config.n_listener_actions,
            });
        }
        Ok(Self {
            probs: responses
                .iter()
                .map(|&a| one_hot(config.n_listener_actions, a))
                .collect(),
        })
    }

    pub fn uniform(config: &GameConfig) -> Self {
        let p = 1.0 / config.n_listener_actions as f64;
        Self {
            probs: vec![vec![p; config.n_listener_actions]; config.n_signals + 1],
        }
    }

    /// Maps signal `m` to action `m mod |A^l|` and silence to action 0.
    pub fn decoder(config: &GameConfig) -> Self {
        let mut responses: Vec<usize> = (0..config.n_signals)
            .map(|m| m % config.n_listener_actions)
            .collect();
        responses.push(0);
        Self::deterministic(config, &responses).expect("decoder responses are in range")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointStrategy {
    pub speaker: SpeakerPolicy,
    pub listener: ListenerPolicy,
}

impl JointStrategy {
    pub fn new(speaker: SpeakerPolicy, listener: ListenerPolicy) -> Self {
        Self { speaker, listener }
    }

    pub fn check(&self, config: &GameConfig) -> Result<()> {
        self.speaker.check(config)?;
        self.listener.check(config)
    }

    /// Speaker never signals; listener answers silence with action 0.
    pub fn optimal_non_communicative(config: &GameConfig) -> Result<Self> {
        let speaker = SpeakerPolicy::never_signals(config)?;
        let mut listener = ListenerPolicy::uniform(config);
        listener.probs[config.silent()] = one_hot(config.n_listener_actions, 0);
        Ok(Self::new(speaker, listener))
    }

    /// Speaker always signals; listener guesses uniformly.
    pub fn poorest_non_communicative(config: &GameConfig) -> Result<Self> {
        Ok(Self::new(
            SpeakerPolicy::always_signals(config)?,
            ListenerPolicy::uniform(config),
        ))
    }

    pub fn perfect_communicative(config: &GameConfig) -> Result<Self> {
        Ok(Self::new(
            SpeakerPolicy::perfect_code(config)?,
            ListenerPolicy::decoder(config),
        ))
    }
}

/// Selection gap of the optimal non-communicative strategy: `u + 1/|Z|`.
pub fn alpha(config: &GameConfig) -> f64 {
    config.u + 1.0 / config.n_latent as f64
}

/// Probabilities of the outcome classes of one play of the game.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutcomeBreakdown {
    pub p_signal: f64,
    pub p_silent: f64,
    /// `P(a^l = z)` overall.
    pub p_correct: f64,
    /// `P(a^l = z, a^s in Sigma)`.
    pub p_correct_and_signal: f64,
    /// `P(a^l = z, a^s not in Sigma)`.
    pub p_correct_and_silent: f64,
}

impl OutcomeBreakdown {
    pub fn accuracy_given_signal(&self) -> Option<f64> {
        (self.p_signal > 0.0).then(|| self.p_correct_and_signal / self.p_signal)
    }

    pub fn accuracy_given_silent(&self) -> Option<f64> {
        (self.p_silent > 0.0).then(|| self.p_correct_and_silent / self.p_silent)
    }
}

/// Enumerates every `(z, a^s, a^l)` outcome once.
pub fn outcome_breakdown(joint: &JointStrategy, config: &GameConfig) -> Result<OutcomeBreakdown> {
    check_shapes(joint, config)?;
    Ok(breakdown_unchecked(joint, config))
}

fn check_shapes(joint: &JointStrategy, config: &GameConfig) -> Result<()> {
    let s = &joint.speaker.probs;
    let l = &joint.listener.probs;
    if s.len() != config.n_latent {
        return Err(Error::ShapeMismatch {
            what: "speaker rows",
            expected: config.n_latent,
            actual: s.len(),
        });
    }
    if let Some(row) = s.iter().find(|r| r.len() != config.n_speaker_actions) {
        return Err(Error::ShapeMismatch {
            what: "speaker columns",
            expected: config.n_speaker_actions,
            actual: row.len(),
        });
    }
    if l.len() != config.n_signals + 1 {
        return Err(Error::ShapeMismatch {
            what: "listener rows",
            expected: config.n_signals + 1,
            actual: l.len(),
        });
    }
    if let Some(row) = l.iter().find(|r| r.len() != config.n_listener_actions) {
        return Err(Error::ShapeMismatch {
            what: "listener columns",
            expected: config.n_listener_actions,
            actual: row.len(),
        });
    }
    Ok(())
}

pub(crate) fn breakdown_unchecked(joint: &JointStrategy, config: &GameConfig) -> OutcomeBreakdown {
    let pz = config.prior();
    let mut out = OutcomeBreakdown {
        p_signal: 0.0,
        p_silent: 0.0,
        p_correct: 0.0,
        p_correct_and_signal: 0.0,
        p_correct_and_silent: 0.0,
    };
    for z in 0..config.n_latent {
        for (a_s, &ps) in joint.speaker.probs[z].iter().enumerate() {
            if ps == 0.0 {
                continue;
            }
            let w = pz * ps;
            let msg = config.message_for(a_s);
            let mut correct = 0.0;
            for (a_l, &pl) in joint.listener.probs[msg].iter().enumerate() {
                if a_l == z {
                    correct += w * pl;
                }
            }
            if msg == config.silent() {
                out.p_silent += w;
                out.p_correct_and_silent += correct;
            } else {
                out.p_signal += w;
                out.p_correct_and_signal += correct;
            }
        }
    }
    out.p_correct = out.p_correct_and_signal + out.p_correct_and_silent;
    out
}

/// `E[U | theta] = u P(a^s not in Sigma) + P(a^l = z)`, by enumeration.
/// Any external source is ignored here.
pub fn expected_utility(joint: &JointStrategy, config: &GameConfig) -> Result<f64> {
    let b = outcome_breakdown(joint, config)?;
    Ok(config.u * b.p_silent + b.p_correct)
}

pub fn signal_probability(joint: &JointStrategy, config: &GameConfig) -> Result<f64> {
    Ok(outcome_breakdown(joint, config)?.p_signal)
}

/// `P(a^l = z | a^s in Sigma)`.
pub fn guess_accuracy_given_signal(joint: &JointStrategy, config: &GameConfig) -> Result<f64> {
    outcome_breakdown(joint, config)?
        .accuracy_given_signal()
        .ok_or(Error::UndefinedConditional("the speaker never signals"))
}

/// Conditional accuracy a communicative strategy must beat to be selected
/// over a rival with expected utility `eu_rival`.
pub fn selection_threshold(eu_rival: f64, signal_prob: f64, alpha: f64) -> Result<f64> {
    if signal_prob <= 0.0 {
        return Err(Error::UndefinedConditional("signal probability is zero"));
    }
    Ok(alpha + (eu_rival - alpha) / signal_prob)
}

/// Strict improvement; ties are not selected.
pub fn is_selected(
    candidate: &JointStrategy,
    incumbent: &JointStrategy,
    config: &GameConfig,
) -> Result<bool> {
    Ok(expected_utility(candidate, config)? > expected_utility(incumbent, config)?)
}

/// `U(a | z)` indexed as `[action][latent]`.
pub type UtilityTable = Vec<Vec<f64>>;

/// `U(a | z) = 1[a = z]`.
pub fn indicator_utility(config: &GameConfig) -> UtilityTable {
    (0..config.n_listener_actions)
        .map(|a| (0..config.n_latent).map(|z| f64::from(u8::from(a == z))).collect())
        .collect()
}

fn check_utility(table: &UtilityTable, config: &GameConfig) -> Result<()> {
    if table.len() != config.n_listener_actions {
        return Err(Error::ShapeMismatch {
            what: "utility rows",
            expected: config.n_listener_actions,
            actual: table.len(),
        });
    }
    if let Some(row) = table.iter().find(|r| r.len() != config.n_latent) {
        return Err(Error::ShapeMismatch {
            what: "utility columns",
            expected: config.n_latent,
            actual: row.len(),
        });
    }
    Ok(())
}

/// Listener belief `P(z | m)` mixing the external source and the speaker.
///
/// Each branch is a Bayes posterior under its own likelihood and the weights
/// are `P(S)` and `1 - P(S)`. A branch that cannot produce `m` (zero total
/// likelihood) is dropped and the remaining weight renormalized.
pub fn listener_posterior(message: usize, speaker: &SpeakerPolicy, config: &GameConfig) -> Result<Vec<f64>> {
    if message >= config.n_signals {
        return Err(Error::ActionOutOfRange {
            index: message,
            n_actions: config.n_signals,
        });
    }
    speaker.check(config)?;
    let pz = config.prior();
    let code = config.code_table();

    let branch = |lik: &dyn Fn(usize) -> f64| -> Option<Vec<f64>> {
        let joint: Vec<f64> = (0..config.n_latent).map(|z| lik(z) * pz).collect();
        let total: f64 = joint.iter().sum();
        (total > 0.0).then(|| joint.into_iter().map(|j| j / total).collect())
    };

    let external = branch(&|z| code[z][message]);
    let internal = branch(&|z| speaker.probs[z][message]);

    let mut parts: Vec<(f64, Vec<f64>)> = Vec::with_capacity(2);
    if config.p_external > 0.0 {
        if let Some(post) = external {
            parts.push((config.p_external, post));
        }
    }
    if config.p_external < 1.0 {
        if let Some(post) = internal {
            parts.push((1.0 - config.p_external, post));
        }
    }
    let weight: f64 = parts.iter().map(|(w, _)| w).sum();
    if parts.is_empty() || weight <= 0.0 {
        return Err(Error::ImpossibleMessage(message));
    }
    let mut out = vec![0.0; config.n_latent];
    for (w, post) in &parts {
        for (o, p) in out.iter_mut().zip(post) {
            *o += w / weight * p;
        }
    }
    Ok(out)
}

/// `E[U(a | m)] = sum_z P(z | m) U(a | z)`.
pub fn listener_expected_utility(
    action: usize,
    message: usize,
    speaker: &SpeakerPolicy,
    config: &GameConfig,
    utility: &UtilityTable,
) -> Result<f64> {
    check_utility(utility, config)?;
    if action >= config.n_listener_actions {
        return Err(Error::ActionOutOfRange {
            index: action,
            n_actions: config.n_listener_actions,
        });
    }
    let post = listener_posterior(message, speaker, config)?;
    Ok(post.iter().zip(&utility[action]).map(|(p, u)| p * u).sum())
}

/// `E[U(m | z)] = sum_a pi^l(a | m) U(a | z)` for a speaker action `m`.
pub fn speaker_expected_utility(
    message: usize,
    z: usize,
    listener: &ListenerPolicy,
    config: &GameConfig,
    utility: &UtilityTable,
) -> Result<f64> {
    check_utility(utility, config)?;
    listener.check(config)?;
    if message >= config.n_speaker_actions {
        return Err(Error::ActionOutOfRange {
            index: message,
            n_actions: config.n_speaker_actions,
        });
    }
    if z >= config.n_latent {
        return Err(Error::ActionOutOfRange {
            index: z,
            n_actions: config.n_latent,
        });
    }
    let row = &listener.probs[config.message_for(message)];
    Ok(row.iter().zip(utility).map(|(p, u_a)| p * u_a[z]).sum())
}

/// Population variance over speakers of the listener's expected utility
/// `P(a^l = z)`.
pub fn listener_utility_variance(
    speakers: &[SpeakerPolicy],
    listener: &ListenerPolicy,
    config: &GameConfig,
) -> Result<f64> {
    if speakers.len() < 2 {
        return Err(Error::config("variance needs at least two speakers"));
    }
    let values = speakers
        .iter()
        .map(|s| {
            let joint = JointStrategy::new(s.clone(), listener.clone());
            outcome_breakdown(&joint, config).map(|b| b.p_correct)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok(values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
}
