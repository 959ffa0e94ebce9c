//! Enumeration and grid oracles for the local-optimum selection results.
//!
//! Both checks pit candidate strategies against a fixed non-communicative
//! incumbent and count candidates for which the stated conclusion fails.
//!
//! The selection-gap result rests on the silent branch being worth at most
//! chance (`P(a^l = z | silent) <= 1/|Z|`). A deterministic speaker that only
//! goes silent for some latents makes silence itself informative; such
//! strategies fall outside the result and are tallied separately in
//! [`TheoremCheck::outside_premise_violations`] instead of as counterexamples.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{alpha, breakdown_unchecked, GameConfig, JointStrategy, ListenerPolicy, SpeakerPolicy};
use crate::error::Result;
use crate::seeding::stream_rng;

/// Slack for treating two exactly-equal rationals as equal after rounding.
const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Every deterministic joint strategy.
    Enumeration,
    /// Seeded samples of mixed strategies on a simplex grid.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSettings {
    /// Largest deterministic joint-strategy count that is enumerated.
    pub enumeration_cap: u64,
    /// Probability resolution of grid samples (multiples of `1/grid_steps`).
    pub grid_steps: u32,
    pub grid_samples: u64,
    pub seed: u64,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            enumeration_cap: 1_000_000,
            grid_steps: 8,
            grid_samples: 200_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheck {
    pub strategies_checked: u64,
    /// Strategies that signal with positive probability.
    pub communicative: u64,
    /// Communicative strategies satisfying the result's hypotheses.
    pub candidates: u64,
    /// Candidates strictly preferred to the incumbent.
    pub selected: u64,
    pub counterexamples: u64,
    /// Strategies outside the hypotheses for which the conclusion fails anyway.
    pub outside_premise_violations: u64,
    pub incumbent_utility: f64,
}

/// Number of deterministic joint strategies, or `None` on overflow.
pub fn deterministic_count(config: &GameConfig) -> Option<u64> {
    let speakers = (config.n_speaker_actions as u64).checked_pow(config.n_latent as u32)?;
    let listeners = (config.n_listener_actions as u64).checked_pow(config.n_signals as u32 + 1)?;
    speakers.checked_mul(listeners)
}

pub fn search_mode(config: &GameConfig, settings: &SearchSettings) -> SearchMode {
    match deterministic_count(config) {
        Some(n) if n <= settings.enumeration_cap => SearchMode::Enumeration,
        _ => SearchMode::Grid,
    }
}

fn set_one_hot(row: &mut [f64], idx: usize) {
    row.iter_mut().for_each(|p| *p = 0.0);
    row[idx] = 1.0;
}

/// Advances a mixed-radix counter; returns false after the last value.
fn next_digits(digits: &mut [usize], radix: usize) -> bool {
    for d in digits.iter_mut() {
        *d += 1;
        if *d < radix {
            return true;
        }
        *d = 0;
    }
    false
}

fn for_each_deterministic(config: &GameConfig, mut visit: impl FnMut(&JointStrategy)) {
    let mut joint = JointStrategy::new(SpeakerPolicy::uniform(config), ListenerPolicy::uniform(config));
    let mut speaker = vec![0usize; config.n_latent];
    loop {
        for (z, &a) in speaker.iter().enumerate() {
            set_one_hot(&mut joint.speaker.probs[z], a);
        }
        let mut listener = vec![0usize; config.n_signals + 1];
        loop {
            for (m, &a) in listener.iter().enumerate() {
                set_one_hot(&mut joint.listener.probs[m], a);
            }
            visit(&joint);
            if !next_digits(&mut listener, config.n_listener_actions) {
                break;
            }
        }
        if !next_digits(&mut speaker, config.n_speaker_actions) {
            break;
        }
    }
}

/// A point on the probability simplex with mass in multiples of `1/steps`.
fn grid_point(n: usize, steps: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut counts = vec![0u32; n];
    for _ in 0..steps {
        counts[rng.gen_range(0..n)] += 1;
    }
    counts.into_iter().map(|c| f64::from(c) / f64::from(steps)).collect()
}

/// Draws a mixed strategy. With `shared_signal_mass`, every latent signals
/// with the same probability so silence carries no information about `z`.
fn sample_strategy(
    config: &GameConfig,
    steps: u32,
    rng: &mut ChaCha8Rng,
    shared_signal_mass: Option<f64>,
) -> JointStrategy {
    let n_sig = config.n_signals;
    let n_quiet = config.n_speaker_actions - n_sig;
    let speaker = (0..config.n_latent)
        .map(|_| match shared_signal_mass {
            None => grid_point(config.n_speaker_actions, steps, rng),
            Some(s) => {
                let s = if n_quiet == 0 { 1.0 } else if n_sig == 0 { 0.0 } else { s };
                let mut row = Vec::with_capacity(config.n_speaker_actions);
                if n_sig > 0 {
                    row.extend(grid_point(n_sig, steps, rng).into_iter().map(|p| p * s));
                }
                if n_quiet > 0 {
                    row.extend(grid_point(n_quiet, steps, rng).into_iter().map(|p| p * (1.0 - s)));
                }
                row
            }
        })
        .collect();
    let listener = (0..=n_sig)
        .map(|_| grid_point(config.n_listener_actions, steps, rng))
        .collect();
    JointStrategy::new(SpeakerPolicy { probs: speaker }, ListenerPolicy { probs: listener })
}

fn for_each_strategy(
    config: &GameConfig,
    settings: &SearchSettings,
    stream: u64,
    full_signal_only: bool,
    mut visit: impl FnMut(&JointStrategy),
) -> SearchMode {
    let mode = search_mode(config, settings);
    match mode {
        SearchMode::Enumeration => for_each_deterministic(config, visit),
        SearchMode::Grid => {
            let mut rng = stream_rng(settings.seed, stream);
            let steps = settings.grid_steps.max(1);
            for i in 0..settings.grid_samples {
                let shared = if full_signal_only {
                    Some(1.0)
                } else if i % 2 == 0 {
                    Some(f64::from(rng.gen_range(1..=steps)) / f64::from(steps))
                } else {
                    None
                };
                visit(&sample_strategy(config, steps, &mut rng, shared));
            }
        }
    }
    mode
}

/// Candidates against the optimal non-communicative strategy: whenever one is
/// selected, its accuracy given a signal must exceed alpha.
pub fn verify_theorem_1(config: &GameConfig, settings: &SearchSettings) -> Result<(SearchMode, TheoremCheck)> {
    config.validate()?;
    let a = alpha(config);
    let incumbent = match JointStrategy::optimal_non_communicative(config) {
        Ok(joint) => {
            let b = breakdown_unchecked(&joint, config);
            config.u * b.p_silent + b.p_correct
        }
        // Without a non-communicative action the incumbent is hypothetical.
        Err(_) => a,
    };
    let chance = 1.0 / config.n_latent as f64;
    let mut check = TheoremCheck {
        incumbent_utility: incumbent,
        ..TheoremCheck::default()
    };
    let mode = for_each_strategy(config, settings, 1, false, |joint| {
        check.strategies_checked += 1;
        let b = breakdown_unchecked(joint, config);
        let Some(accuracy) = b.accuracy_given_signal() else {
            return;
        };
        check.communicative += 1;
        let eu = config.u * b.p_silent + b.p_correct;
        let selected = eu - incumbent > TIE_TOL;
        let fails = selected && accuracy - a <= TIE_TOL;
        let premise = b.accuracy_given_silent().map_or(true, |acc| acc <= chance + TIE_TOL);
        if premise {
            check.candidates += 1;
            check.selected += u64::from(selected);
            check.counterexamples += u64::from(fails);
        } else {
            check.outside_premise_violations += u64::from(fails);
        }
    });
    Ok((mode, check))
}

/// Candidates against the poorest non-communicative strategy (always
/// signals, listener guesses uniformly): any candidate that signals at least
/// as often and is more accurate given a signal must be selected.
pub fn verify_theorem_2(config: &GameConfig, settings: &SearchSettings) -> Result<(SearchMode, TheoremCheck)> {
    config.validate()?;
    let mode = search_mode(config, settings);
    let Ok(poorest) = JointStrategy::poorest_non_communicative(config) else {
        return Ok((mode, TheoremCheck::default()));
    };
    let base = breakdown_unchecked(&poorest, config);
    let incumbent = config.u * base.p_silent + base.p_correct;
    let base_accuracy = base.accuracy_given_signal().unwrap_or(0.0);
    let mut check = TheoremCheck {
        incumbent_utility: incumbent,
        ..TheoremCheck::default()
    };
    let mode = for_each_strategy(config, settings, 2, true, |joint| {
        check.strategies_checked += 1;
        let b = breakdown_unchecked(joint, config);
        let Some(accuracy) = b.accuracy_given_signal() else {
            return;
        };
        check.communicative += 1;
        if accuracy - base_accuracy <= TIE_TOL {
            return;
        }
        let eu = config.u * b.p_silent + b.p_correct;
        let selected = eu - incumbent > TIE_TOL;
        if b.p_signal >= base.p_signal - TIE_TOL {
            check.candidates += 1;
            check.selected += u64::from(selected);
            check.counterexamples += u64::from(!selected);
        } else {
            check.outside_premise_violations += u64::from(!selected);
        }
    });
    Ok((mode, check))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalOptimum {
    Communicative,
    NonCommunicative,
    Tie,
}

/// Verification report written by the `theory` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub config: GameConfig,
    pub alpha: f64,
    /// Which of the two canonical strategies is better (`alpha < 1`).
    pub globally_optimal: GlobalOptimum,
    pub theorem1_counterexamples: u64,
    pub theorem2_counterexamples: u64,
    pub strategies_checked: u64,
    pub mode: SearchMode,
    pub external_code_deterministic: bool,
    pub theorem1: TheoremCheck,
    pub theorem2: TheoremCheck,
}

pub fn theory_report(config: &GameConfig, settings: &SearchSettings) -> Result<TheoryReport> {
    let (mode, t1) = verify_theorem_1(config, settings)?;
    let (_, t2) = verify_theorem_2(config, settings)?;
    let a = alpha(config);
    let globally_optimal = if a < 1.0 {
        GlobalOptimum::Communicative
    } else if a > 1.0 {
        GlobalOptimum::NonCommunicative
    } else {
        GlobalOptimum::Tie
    };
    Ok(TheoryReport {
        config: config.resolved(),
        alpha: a,
        globally_optimal,
        theorem1_counterexamples: t1.counterexamples,
        theorem2_counterexamples: t2.counterexamples,
        strategies_checked: t1.strategies_checked,
        mode,
        external_code_deterministic: config.external_code_is_deterministic(),
        theorem1: t1,
        theorem2: t2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n_latent: usize, n_actions: usize, n_signals: usize, u: f64) -> GameConfig {
        GameConfig::new(n_latent, n_actions, n_signals, u).unwrap()
    }

    #[test]
    fn enumerates_every_deterministic_strategy() {
        let c = cfg(2, 3, 1, 0.5);
        let mut seen = 0u64;
        for_each_deterministic(&c, |j| {
            j.check(&c).unwrap();
            seen += 1;
        });
        assert_eq!(Some(seen), deterministic_count(&c));
        assert_eq!(seen, 9 * 4);
    }

    #[test]
    fn theorem_1_holds_on_reference_configs() {
        for c in [cfg(3, 3, 3, 0.5), cfg(3, 6, 3, 0.5), cfg(2, 4, 2, 0.0)] {
            let (mode, check) = verify_theorem_1(&c, &SearchSettings::default()).unwrap();
            assert_eq!(mode, SearchMode::Enumeration);
            assert_eq!(check.counterexamples, 0, "{c:?}");
            assert!(check.selected > 0);
            assert_eq!(check.outside_premise_violations, 0);
        }
    }

    #[test]
    fn degenerate_signal_free_game_is_vacuous() {
        let c = cfg(3, 2, 0, 0.5);
        let (_, t1) = verify_theorem_1(&c, &SearchSettings::default()).unwrap();
        assert_eq!(t1.communicative, 0);
        assert_eq!(t1.counterexamples, 0);
        let (_, t2) = verify_theorem_2(&c, &SearchSettings::default()).unwrap();
        assert_eq!(t2.communicative, 0);
    }

    #[test]
    fn informative_silence_escapes_the_gap() {
        // |Z| = 4, u = 0.25: silence for one latent plus one shared signal for
        // the other three beats alpha with accuracy 1/3 < alpha = 0.5.
        let c = cfg(4, 5, 4, 0.25);
        let speaker = SpeakerPolicy::deterministic(&c, &[4, 0, 0, 0]).unwrap();
        let listener = ListenerPolicy::deterministic(&c, &[1, 0, 0, 0, 0]).unwrap();
        let joint = JointStrategy::new(speaker, listener);
        let b = breakdown_unchecked(&joint, &c);
        assert!(config_eu(&c, &b) > alpha(&c));
        assert!(b.accuracy_given_signal().unwrap() < alpha(&c));
        let (_, check) = verify_theorem_1(&c, &SearchSettings::default()).unwrap();
        assert_eq!(check.counterexamples, 0);
        assert!(check.outside_premise_violations > 0);
    }

    fn config_eu(c: &GameConfig, b: &super::super::OutcomeBreakdown) -> f64 {
        c.u * b.p_silent + b.p_correct
    }

    #[test]
    fn theorem_2_candidates_are_always_selected() {
        let c = cfg(3, 6, 3, 0.5);
        let (_, check) = verify_theorem_2(&c, &SearchSettings::default()).unwrap();
        assert!(check.candidates > 0);
        assert_eq!(check.counterexamples, 0);
        assert_eq!(check.selected, check.candidates);
        assert!((check.incumbent_utility - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn theorem_2_epsilon_improvement_is_selected() {
        let c = cfg(3, 6, 3, 0.5);
        let eps = 1e-3;
        let poorest = JointStrategy::poorest_non_communicative(&c).unwrap();
        let mut better = poorest.clone();
        // Signal 0 only for z = 0, signal 1 otherwise; tilt the answer to signal 0 towards z = 0.
        better.speaker = SpeakerPolicy::deterministic(&c, &[0, 1, 1]).unwrap();
        better.listener.probs[0] = vec![1.0 / 3.0 + eps, 1.0 / 3.0 - eps, 1.0 / 3.0];
        let acc = super::super::guess_accuracy_given_signal(&better, &c).unwrap();
        assert!((acc - (1.0 / 3.0 + eps / 3.0)).abs() < 1e-12);
        assert!(super::super::is_selected(&better, &poorest, &c).unwrap());
        let perfect = JointStrategy::perfect_communicative(&c).unwrap();
        assert!(super::super::is_selected(&perfect, &poorest, &c).unwrap());
    }

    #[test]
    fn large_games_switch_to_grid_mode() {
        let c = cfg(4, 8, 4, 0.25);
        let settings = SearchSettings {
            grid_samples: 4_000,
            ..SearchSettings::default()
        };
        let (mode, check) = verify_theorem_1(&c, &settings).unwrap();
        assert_eq!(mode, SearchMode::Grid);
        assert_eq!(check.strategies_checked, 4_000);
        assert_eq!(check.counterexamples, 0);
        let (_, again) = verify_theorem_1(&c, &settings).unwrap();
        assert_eq!(check, again);
        let (_, t2) = verify_theorem_2(&c, &settings).unwrap();
        assert_eq!(t2.counterexamples, 0);
    }

    #[test]
    fn report_fields() {
        let c = cfg(3, 6, 3, 0.5);
        let report = theory_report(&c, &SearchSettings::default()).unwrap();
        assert_eq!(report.globally_optimal, GlobalOptimum::Communicative);
        assert_eq!(report.strategies_checked, 6u64.pow(3) * 3u64.pow(4));
        let json = serde_json::to_value(&report).unwrap();
        for key in [
            "config",
            "alpha",
            "globally_optimal",
            "theorem1_counterexamples",
            "theorem2_counterexamples",
            "strategies_checked",
            "mode",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }
}
