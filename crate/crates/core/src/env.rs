//! Shared contracts for episodic sequential-stopping environments.
//!
//! Both trial environments share the same skeleton: an episode starts by
//! drawing the unknown truth from its prior, the agent repeatedly chooses
//! between continuing (enrolling one more cohort, paying a per-step cost)
//! and two terminal reports, and the episode return decomposes additively
//! so that the sum of per-step rewards equals the trial utility at the
//! stopping time.
//!
//! Two conventions apply everywhere:
//! - at `t = 0` no data has been observed and the only legal action is
//!   `Continue` (the trial always enrolls at least one cohort);
//! - at `t = t_max` continuation is masked and the agent must report.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decision taken after each cohort: continue sampling or stop with one of
/// two terminal reports. Encoded as 0/1/2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Continue = 0,
    Stop1 = 1,
    Stop2 = 2,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Continue, Action::Stop1, Action::Stop2];
    pub const STOPS: [Action; 2] = [Action::Stop1, Action::Stop2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        match i {
            0 => Some(Action::Continue),
            1 => Some(Action::Stop1),
            2 => Some(Action::Stop2),
            _ => None,
        }
    }

    pub fn is_stop(self) -> bool {
        !matches!(self, Action::Continue)
    }
}

/// Two-component summary vector; both environments admit a two-dimensional
/// summary of the history.
pub type Summary = [f64; 2];

/// One environment interaction, as stored in replay buffers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: Summary,
    pub action: Action,
    pub reward: f64,
    pub next_state: Summary,
    pub terminal: bool,
}

/// Observation produced by a `Continue` step: the outcome for the newly
/// enrolled cohort, plus the assigned dose where the environment has one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepObs {
    pub y: f64,
    pub dose: Option<f64>,
}

/// Key for a deterministic random stream.
///
/// Streams for distinct `stream_id`s are statistically independent, and the
/// same `(master_seed, stream_id)` pair reproduces the identical draw
/// sequence regardless of execution order or thread count. Episode i of a
/// run uses `stream_id = base + i`; solvers reserve disjoint bases for their
/// own internal randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        SeedSpec {
            master_seed,
            stream_id,
        }
    }

    /// Counter-based stream: ChaCha keyed by the master seed with the
    /// stream id selecting the stream.
    pub fn rng(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Environment identifier used in dataset metadata and file headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    Example1,
    Example2,
}

impl EnvId {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::Example1 => "example1",
            EnvId::Example2 => "example2",
        }
    }

    pub fn parse(s: &str) -> Result<EnvId> {
        match s {
            "example1" => Ok(EnvId::Example1),
            "example2" => Ok(EnvId::Example2),
            other => Err(Error::config(format!("unknown environment id `{other}`"))),
        }
    }
}

/// A sequential-stopping trial environment: immutable configuration that
/// can start independent episodes.
pub trait StoppingEnv: Sync {
    type Episode: EpisodeState;

    fn id(&self) -> EnvId;

    fn t_max(&self) -> u32;

    /// Hash of the environment id and configuration, used to pair datasets
    /// with the configuration that generated them.
    fn config_hash(&self) -> String;

    /// Draws the episode's truth from the prior and returns the episode in
    /// its `t = 0` state.
    fn start(&self, seed: SeedSpec) -> Self::Episode;

    /// Expected utility of stopping now with `action`, given only the
    /// summary (marginalized over the unknown truth). `action` must not be
    /// `Continue`.
    fn expected_stop_utility(&self, t: u32, summary: Summary, action: Action) -> f64;

    /// The better of the two terminal reports given only the summary; ties
    /// resolve to the lower action index.
    fn forced_stop_action(&self, t: u32, summary: Summary) -> Action {
        let u1 = self.expected_stop_utility(t, summary, Action::Stop1);
        let u2 = self.expected_stop_utility(t, summary, Action::Stop2);
        if u2 > u1 {
            Action::Stop2
        } else {
            Action::Stop1
        }
    }

    /// Realized utility of a completed episode that stopped at time `t`
    /// with `action`, for the episode truth `theta`. Equals the sum of
    /// per-step rewards along the episode.
    fn stop_utility(&self, t: u32, summary: Summary, action: Action, theta: [f64; 2]) -> f64;

    /// Bounded state encoding for function approximators.
    fn encode(&self, t: u32, summary: Summary) -> [f64; 2];
}

/// Per-episode mutable state. Confined to one worker at a time; concurrent
/// episodes each own their state and their random stream.
pub trait EpisodeState {
    /// Number of cohorts observed so far.
    fn t(&self) -> u32;

    fn summary(&self) -> Summary;

    /// The episode's draw of the unknown truth (two components; unused
    /// components are NaN).
    fn theta(&self) -> [f64; 2];

    fn is_terminal(&self) -> bool;

    /// Outcome of the most recent `Continue` step, if any.
    fn last_obs(&self) -> Option<StepObs>;

    /// Applies one action. `Continue` enrolls a cohort and yields the
    /// per-step cost as reward; a stop action yields the terminal reward.
    ///
    /// Errors: stepping a terminal episode, stopping at `t = 0`, or
    /// continuing at `t = t_max` are usage errors.
    fn step(&mut self, action: Action) -> Result<Transition>;
}

/// A stopping rule over summaries: the raw decision at each `t >= 1`.
///
/// Policies may return `Continue` at the horizon; whoever drives the
/// episode applies the environment's forced stop there.
pub trait StoppingPolicy {
    fn decide(&self, t: u32, summary: Summary) -> Action;
}

impl<F: Fn(u32, Summary) -> Action> StoppingPolicy for F {
    fn decide(&self, t: u32, summary: Summary) -> Action {
        self(t, summary)
    }
}

/// Checks the shared step preconditions; environments call this first.
pub(crate) fn check_step(t: u32, t_max: u32, terminal: bool, action: Action) -> Result<()> {
    if terminal {
        return Err(Error::usage("step on a terminal episode"));
    }
    if action == Action::Continue && t >= t_max {
        return Err(Error::usage(format!(
            "continuation is masked at the horizon t = {t_max}"
        )));
    }
    if action.is_stop() && t == 0 {
        return Err(Error::usage(
            "stopping before the first cohort is masked (t = 0 forces continuation)",
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn same_seed_spec_reproduces_stream() {
        let mut r1 = SeedSpec::new(42, 7).rng();
        let mut r2 = SeedSpec::new(42, 7).rng();
        let x1: Vec<u64> = (0..8).map(|_| r1.next_u64()).collect();
        let x2: Vec<u64> = (0..8).map(|_| r2.next_u64()).collect();
        assert_eq!(x1, x2);
    }

    #[test]
    fn distinct_streams_differ() {
        let mut r1 = SeedSpec::new(42, 0).rng();
        let mut r2 = SeedSpec::new(42, 1).rng();
        let x1: Vec<u64> = (0..8).map(|_| r1.next_u64()).collect();
        let x2: Vec<u64> = (0..8).map(|_| r2.next_u64()).collect();
        assert_ne!(x1, x2);
    }

    #[test]
    fn step_preconditions() {
        assert!(check_step(3, 50, true, Action::Continue).is_err());
        assert!(check_step(50, 50, false, Action::Continue).is_err());
        assert!(check_step(0, 50, false, Action::Stop1).is_err());
        assert!(check_step(0, 50, false, Action::Continue).is_ok());
        assert!(check_step(50, 50, false, Action::Stop2).is_ok());
    }
}
