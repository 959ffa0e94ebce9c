//! Monte-Carlo estimate of escaping the non-communicative optimum by mutation.
//!
//! The population sits at the optimal non-communicative strategy (every
//! latent mapped to the first quiet action). A mutation event hits a
//! conditional action distribution with probability `p` and moves it so that
//! a uniformly chosen target action holds mass `q ~ U[min(alpha, 1), 1]`.
//! Where the displaced mass goes is not pinned down, so two rules are run:
//! proportional rescaling of the other actions (the reported estimate) and a
//! uniform spread over them (reported alongside as a sensitivity check).
//!
//! An event escapes when, for the sampled latent, the listener's accuracy
//! given a signal exceeds alpha.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{alpha, GameConfig};
use crate::error::{Error, Result};
use crate::seeding::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ListenerKind {
    /// Responds uniformly regardless of the message.
    Uniform,
    /// Deterministic bijection from signals to actions (`f(m) = m`).
    Competent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassRedistribution {
    Proportional,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeEstimate {
    pub estimate: f64,
    pub std_error: f64,
    /// `p / |A^s|` for a competent listener, `p^2 / (|A^s| |A^l|)` for a uniform one.
    pub analytic: f64,
    pub analytic_is_upper_bound: bool,
    pub n_samples: u64,
    pub uniform_spread_estimate: f64,
    pub uniform_spread_std_error: f64,
}

fn mutate_row(row: &mut [f64], target: usize, floor: f64, rule: MassRedistribution, rng: &mut ChaCha8Rng) {
    let q = if floor >= 1.0 { 1.0 } else { rng.gen_range(floor..=1.0) };
    let old = row[target];
    let new = old.max(q);
    let rest = 1.0 - new;
    let n_other = row.len() - 1;
    match rule {
        MassRedistribution::Proportional => {
            let old_rest = 1.0 - old;
            for (i, p) in row.iter_mut().enumerate() {
                if i != target {
                    *p = if old_rest > 0.0 {
                        *p * rest / old_rest
                    } else {
                        rest / n_other as f64
                    };
                }
            }
        }
        MassRedistribution::Uniform => {
            for (i, p) in row.iter_mut().enumerate() {
                if i != target {
                    *p = rest / n_other as f64;
                }
            }
        }
    }
    row[target] = new;
}

fn simulate(
    config: &GameConfig,
    p: f64,
    kind: ListenerKind,
    n_samples: u64,
    rule: MassRedistribution,
    rng: &mut ChaCha8Rng,
) -> u64 {
    let a = alpha(config);
    let floor = a.min(1.0);
    let n_sig = config.n_signals;
    let quiet = n_sig;
    let mut hits = 0u64;
    let mut speaker = vec![0.0; config.n_speaker_actions];
    let mut listener = vec![vec![0.0; config.n_listener_actions]; n_sig];
    for _ in 0..n_samples {
        let z = rng.gen_range(0..config.n_latent);
        speaker.iter_mut().for_each(|x| *x = 0.0);
        speaker[quiet] = 1.0;
        if rng.gen_bool(p) {
            let target = rng.gen_range(0..config.n_speaker_actions);
            mutate_row(&mut speaker, target, floor, rule, rng);
        }
        match kind {
            ListenerKind::Competent => {
                for (m, row) in listener.iter_mut().enumerate() {
                    row.iter_mut().for_each(|x| *x = 0.0);
                    row[m] = 1.0;
                }
            }
            ListenerKind::Uniform => {
                let u = 1.0 / config.n_listener_actions as f64;
                for row in listener.iter_mut() {
                    row.iter_mut().for_each(|x| *x = u);
                }
                if rng.gen_bool(p) {
                    let r = rng.gen_range(0..n_sig);
                    let target = rng.gen_range(0..config.n_listener_actions);
                    mutate_row(&mut listener[r], target, floor, rule, rng);
                }
            }
        }
        let signal_mass: f64 = speaker[..n_sig].iter().sum();
        if signal_mass > 0.0 {
            let correct: f64 = (0..n_sig).map(|m| speaker[m] * listener[m][z]).sum();
            if correct / signal_mass > a {
                hits += 1;
            }
        }
    }
    hits
}

/// Estimated probability that a single round of mutation events yields a
/// communicative strategy that clears the selection gap.
pub fn escape_probability_estimate(
    config: &GameConfig,
    p: f64,
    kind: ListenerKind,
    n_samples: u64,
    seed: u64,
) -> Result<EscapeEstimate> {
    config.validate()?;
    if n_samples == 0 {
        return Err(Error::config("n_samples must be positive"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("mutation probability must lie in [0, 1], got {p}")));
    }
    if config.n_signals == 0 || config.n_signals == config.n_speaker_actions {
        return Err(Error::config(
            "escape analysis needs both signals and a non-communicative action",
        ));
    }
    if kind == ListenerKind::Competent && config.n_signals != config.n_listener_actions {
        return Err(Error::config("a competent listener needs |Sigma| = |A^l|"));
    }
    let n_as = config.n_speaker_actions as f64;
    let n_al = config.n_listener_actions as f64;
    let (analytic, bound) = match kind {
        ListenerKind::Competent => (p / n_as, false),
        ListenerKind::Uniform => (p * p / (n_as * n_al), true),
    };
    let n = n_samples as f64;
    let stats = |hits: u64| {
        let est = hits as f64 / n;
        (est, (est * (1.0 - est) / n).sqrt())
    };
    let mut rng = stream_rng(seed, 0);
    let (estimate, std_error) = stats(simulate(config, p, kind, n_samples, MassRedistribution::Proportional, &mut rng));
    let mut rng = stream_rng(seed, 1);
    let (spread, spread_se) = stats(simulate(config, p, kind, n_samples, MassRedistribution::Uniform, &mut rng));
    Ok(EscapeEstimate {
        estimate,
        std_error,
        analytic,
        analytic_is_upper_bound: bound,
        n_samples,
        uniform_spread_estimate: spread,
        uniform_spread_std_error: spread_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GameConfig {
        GameConfig::new(3, 6, 3, 0.5).unwrap()
    }

    #[test]
    fn competent_listener_matches_p_over_actions() {
        let est = escape_probability_estimate(&cfg(), 1.0, ListenerKind::Competent, 200_000, 11).unwrap();
        assert!((est.analytic - 1.0 / 6.0).abs() < 1e-15);
        assert!((est.estimate - est.analytic).abs() < 3.0 * est.std_error, "{est:?}");
        // Spreading the displaced mass onto other signals can only hurt.
        assert!(est.uniform_spread_estimate <= est.estimate + 3.0 * est.uniform_spread_std_error);
    }

    #[test]
    fn uniform_listener_respects_the_bound() {
        let est = escape_probability_estimate(&cfg(), 1.0, ListenerKind::Uniform, 200_000, 12).unwrap();
        assert!(est.analytic_is_upper_bound);
        assert!((est.analytic - 1.0 / 18.0).abs() < 1e-15);
        assert!(est.estimate <= est.analytic + 3.0 * est.std_error, "{est:?}");
    }

    #[test]
    fn no_mutation_no_escape() {
        for kind in [ListenerKind::Competent, ListenerKind::Uniform] {
            let est = escape_probability_estimate(&cfg(), 0.0, kind, 1_000, 3).unwrap();
            assert_eq!(est.estimate, 0.0);
            assert_eq!(est.uniform_spread_estimate, 0.0);
        }
    }

    #[test]
    fn rejects_empty_sample() {
        assert!(escape_probability_estimate(&cfg(), 0.5, ListenerKind::Uniform, 0, 0).is_err());
    }

    #[test]
    fn proportional_rescaling_preserves_ratios() {
        let mut rng = stream_rng(0, 0);
        let mut row = vec![0.5, 0.25, 0.25, 0.0];
        mutate_row(&mut row, 3, 0.9, MassRedistribution::Proportional, &mut rng);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row[3] >= 0.9);
        assert!((row[0] - 2.0 * row[1]).abs() < 1e-12);
    }
}
