//! Binary-hypothesis sequential trial: Bernoulli outcomes, a symmetric
//! two-point prior over the response rate, exact posterior updates, and an
//! exact dynamic-programming solution for small horizons.
//!
//! The summary statistic is `(t, k)` with `k` the success count; `p_t =
//! k/t` is sufficient for the posterior over the two candidate rates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{check_step, Action, EnvId, EpisodeState, SeedSpec, StepObs, StoppingEnv, Summary, Transition};
use crate::error::{Error, Result};

/// Trial configuration. The candidate rates, per-cohort cost, penalty for
/// reporting the wrong hypothesis, and horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ex1Config {
    pub theta1: f64,
    pub theta2: f64,
    pub cost: f64,
    pub penalty: f64,
    pub t_max: u32,
}

impl Default for Ex1Config {
    fn default() -> Self {
        Ex1Config {
            theta1: 0.4,
            theta2: 0.6,
            cost: 1.0,
            penalty: 100.0,
            t_max: 50,
        }
    }
}

impl Ex1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta1 > 0.0 && self.theta1 < 1.0 && self.theta2 > 0.0 && self.theta2 < 1.0) {
            return Err(Error::config(format!(
                "candidate rates must lie in (0,1): theta1={}, theta2={}",
                self.theta1, self.theta2
            )));
        }
        if !(self.theta1 < self.theta2) {
            return Err(Error::config(format!(
                "candidate rates must satisfy theta1 < theta2: theta1={}, theta2={}",
                self.theta1, self.theta2
            )));
        }
        if !(self.cost > 0.0) {
            return Err(Error::config(format!("cost must be positive: {}", self.cost)));
        }
        if !(self.penalty > 0.0) {
            return Err(Error::config(format!(
                "penalty must be positive: {}",
                self.penalty
            )));
        }
        if self.t_max < 1 {
            return Err(Error::config("t_max must be at least 1"));
        }
        Ok(())
    }
}

/// Summary statistic after `t` cohorts: the success count `k` (equivalently
/// the running fraction `k/t`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ex1Summary {
    pub t: u32,
    pub successes: u32,
}

impl Ex1Summary {
    pub fn new(t: u32, successes: u32) -> Self {
        debug_assert!(successes <= t);
        Ex1Summary { t, successes }
    }

    /// Running success fraction; 0.5 by convention before any data.
    pub fn fraction(&self) -> f64 {
        if self.t == 0 {
            0.5
        } else {
            self.successes as f64 / self.t as f64
        }
    }

    pub fn as_vec(&self) -> Summary {
        [self.t as f64, self.successes as f64]
    }

    pub fn from_vec(s: Summary) -> Self {
        Ex1Summary {
            t: s[0] as u32,
            successes: s[1] as u32,
        }
    }
}

/// Posterior probability of the lower rate `theta1`, computed in log space
/// so horizons up to a few hundred cohorts cannot underflow.
pub fn posterior_prob_theta1(summary: Ex1Summary, cfg: &Ex1Config) -> f64 {
    let (t, k) = (summary.t as f64, summary.successes as f64);
    let log_l1 = k * cfg.theta1.ln() + (t - k) * (1.0 - cfg.theta1).ln();
    let log_l2 = k * cfg.theta2.ln() + (t - k) * (1.0 - cfg.theta2).ln();
    1.0 / (1.0 + (log_l2 - log_l1).exp())
}

/// Expected utility of stopping now with `action`, marginalized over the
/// two-point posterior: `-cost * t - penalty * P(wrong report | summary)`.
pub fn expected_terminal_utility(summary: Ex1Summary, action: Action, cfg: &Ex1Config) -> Result<f64> {
    if !action.is_stop() {
        return Err(Error::usage(
            "expected_terminal_utility is defined for stop actions only",
        ));
    }
    let p1 = posterior_prob_theta1(summary, cfg);
    let p_wrong = match action {
        Action::Stop1 => 1.0 - p1,
        Action::Stop2 => p1,
        Action::Continue => unreachable!(),
    };
    Ok(-cfg.cost * summary.t as f64 - cfg.penalty * p_wrong)
}

/// Immediate reward of `action` under truth `theta`:
/// `-cost` for continuation, `-penalty` for a wrong report, 0 otherwise.
pub fn reward(action: Action, theta: f64, cfg: &Ex1Config) -> f64 {
    match action {
        Action::Continue => -cfg.cost,
        Action::Stop1 => {
            if theta == cfg.theta1 {
                0.0
            } else {
                -cfg.penalty
            }
        }
        Action::Stop2 => {
            if theta == cfg.theta2 {
                0.0
            } else {
                -cfg.penalty
            }
        }
    }
}

/// The binary-hypothesis environment.
#[derive(Debug, Clone)]
pub struct Ex1Env {
    cfg: Ex1Config,
}

impl Ex1Env {
    pub fn new(cfg: Ex1Config) -> Result<Self> {
        cfg.validate()?;
        Ok(Ex1Env { cfg })
    }

    pub fn config(&self) -> &Ex1Config {
        &self.cfg
    }
}

/// One live episode: the drawn rate plus the running summary.
#[derive(Debug, Clone)]
pub struct Ex1Episode {
    cfg: Ex1Config,
    theta: f64,
    summary: Ex1Summary,
    terminal: bool,
    last_obs: Option<StepObs>,
    rng: rand_chacha::ChaCha8Rng,
}

impl Ex1Episode {
    pub fn theta_value(&self) -> f64 {
        self.theta
    }

    pub fn summary_typed(&self) -> Ex1Summary {
        self.summary
    }
}

impl StoppingEnv for Ex1Env {
    type Episode = Ex1Episode;

    fn id(&self) -> EnvId {
        EnvId::Example1
    }

    fn t_max(&self) -> u32 {
        self.cfg.t_max
    }

    fn config_hash(&self) -> String {
        crate::forward::config_hash(EnvId::Example1, &self.cfg)
    }

    fn start(&self, seed: SeedSpec) -> Ex1Episode {
        let mut rng = seed.rng();
        let theta = if rng.random::<f64>() < 0.5 {
            self.cfg.theta1
        } else {
            self.cfg.theta2
        };
        Ex1Episode {
            cfg: self.cfg,
            theta,
            summary: Ex1Summary::new(0, 0),
            terminal: false,
            last_obs: None,
            rng,
        }
    }

    fn expected_stop_utility(&self, t: u32, summary: Summary, action: Action) -> f64 {
        let s = Ex1Summary { t, successes: summary[1] as u32 };
        expected_terminal_utility(s, action, &self.cfg).expect("stop action")
    }

    fn stop_utility(&self, t: u32, _summary: Summary, action: Action, theta: [f64; 2]) -> f64 {
        -self.cfg.cost * t as f64 + reward(action, theta[0], &self.cfg)
    }

    fn encode(&self, t: u32, summary: Summary) -> [f64; 2] {
        let s = Ex1Summary { t, successes: summary[1] as u32 };
        [t as f64 / self.cfg.t_max as f64, s.fraction()]
    }
}

impl EpisodeState for Ex1Episode {
    fn t(&self) -> u32 {
        self.summary.t
    }

    fn summary(&self) -> Summary {
        self.summary.as_vec()
    }

    fn theta(&self) -> [f64; 2] {
        [self.theta, f64::NAN]
    }

    fn is_terminal(&self) -> bool {
        self.terminal
    }

    fn last_obs(&self) -> Option<StepObs> {
        self.last_obs
    }

    fn step(&mut self, action: Action) -> Result<Transition> {
        check_step(self.summary.t, self.cfg.t_max, self.terminal, action)?;
        let state = self.summary.as_vec();
        let (reward_value, next) = match action {
            Action::Continue => {
                let y = if self.rng.random::<f64>() < self.theta {
                    1
                } else {
                    0
                };
                self.summary = Ex1Summary::new(self.summary.t + 1, self.summary.successes + y);
                self.last_obs = Some(StepObs {
                    y: y as f64,
                    dose: None,
                });
                (-self.cfg.cost, self.summary)
            }
            stop => {
                self.terminal = true;
                (reward(stop, self.theta, &self.cfg), self.summary)
            }
        };
        Ok(Transition {
            state,
            action,
            reward: reward_value,
            next_state: next.as_vec(),
            terminal: self.terminal,
        })
    }
}

/// Exact value and policy tables over all reachable `(t, k)` pairs.
///
/// Storage is triangular: index `t (t + 1) / 2 + k`. Continuation is
/// undefined (`NaN`) in the horizon column, and both stop actions are
/// undefined in the `t = 0` row where continuation is forced.
#[derive(Debug, Clone)]
pub struct ExactTables {
    pub t_max: u32,
    cost: f64,
    values: Vec<[f64; 3]>,
    policy: Vec<Action>,
}

impl ExactTables {
    fn idx(t: u32, k: u32) -> usize {
        debug_assert!(k <= t);
        (t as usize * (t as usize + 1)) / 2 + k as usize
    }

    /// Action value at `(t, k)`; NaN where the action is masked.
    pub fn value(&self, t: u32, k: u32, action: Action) -> f64 {
        self.values[Self::idx(t, k)][action.index()]
    }

    /// Value of the optimal action at `(t, k)`.
    pub fn optimal_value(&self, t: u32, k: u32) -> f64 {
        self.value(t, k, self.policy(t, k))
    }

    /// Reward-to-go form of the action value, as estimated by Q-learning:
    /// the total utility with the already-accrued sampling cost stripped.
    pub fn q_value(&self, t: u32, k: u32, action: Action) -> f64 {
        self.value(t, k, action) + self.cost * t as f64
    }

    pub fn policy(&self, t: u32, k: u32) -> Action {
        self.policy[Self::idx(t, k)]
    }

    /// Expected utility of the whole trial under the optimal policy.
    pub fn root_value(&self) -> f64 {
        self.optimal_value(0, 0)
    }
}

/// Upper bound on the number of `(t, k)` cells `exact_dp` will enumerate.
pub const EXACT_DP_MAX_CELLS: usize = 10_000;

/// Exact backward induction over the `(t, k)` lattice.
///
/// Values are total trial utilities: stop values are the exact expected
/// terminal utilities (which already charge for every enrolled cohort), and
/// the continuation value is the plain expectation of the successor's best
/// value over the posterior-predictive success probability
/// `P(Y=1 | t, k) = P(theta1 | t,k) theta1 + P(theta2 | t,k) theta2` --
/// no extra sampling cost is added because the successor's values charge
/// for the new cohort themselves. Continuation is masked at the horizon and
/// stopping is masked at `t = 0`.
pub fn exact_dp(cfg: &Ex1Config) -> Result<ExactTables> {
    cfg.validate()?;
    let t_max = cfg.t_max;
    let cells = (t_max as usize + 1) * (t_max as usize + 2) / 2;
    if cells > EXACT_DP_MAX_CELLS {
        return Err(Error::resource(format!(
            "exact_dp would enumerate {cells} cells (limit {EXACT_DP_MAX_CELLS}); reduce t_max"
        )));
    }
    let mut values = vec![[f64::NAN; 3]; cells];
    let mut policy = vec![Action::Stop1; cells];

    for t in (0..=t_max).rev() {
        for k in 0..=t {
            let idx = ExactTables::idx(t, k);
            let summary = Ex1Summary::new(t, k);
            let mut cell = [f64::NAN; 3];
            if t >= 1 {
                cell[Action::Stop1.index()] =
                    expected_terminal_utility(summary, Action::Stop1, cfg)?;
                cell[Action::Stop2.index()] =
                    expected_terminal_utility(summary, Action::Stop2, cfg)?;
            }
            if t < t_max {
                let p1 = posterior_prob_theta1(summary, cfg);
                let p_success = p1 * cfg.theta1 + (1.0 - p1) * cfg.theta2;
                let up = ExactTables::idx(t + 1, k + 1);
                let down = ExactTables::idx(t + 1, k);
                let best = |i: usize| -> f64 {
                    let v: &[f64; 3] = &values[i];
                    let mut b = f64::NEG_INFINITY;
                    for a in Action::ALL {
                        let x = v[a.index()];
                        if x.is_finite() && x > b {
                            b = x;
                        }
                    }
                    b
                };
                cell[Action::Continue.index()] =
                    p_success * best(up) + (1.0 - p_success) * best(down);
            }
            values[idx] = cell;
            let mut best_action = Action::Continue;
            let mut best_value = f64::NEG_INFINITY;
            for a in Action::ALL {
                let v = cell[a.index()];
                if v.is_finite() && v > best_value {
                    best_value = v;
                    best_action = a;
                }
            }
            policy[idx] = best_action;
        }
    }
    Ok(ExactTables {
        t_max,
        cost: cfg.cost,
        values,
        policy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EpisodeState;

    fn cfg10() -> Ex1Config {
        Ex1Config {
            t_max: 10,
            ..Ex1Config::default()
        }
    }

    #[test]
    fn config_validation_rejects_degenerate_rates() {
        let cfg = Ex1Config {
            theta1: 0.5,
            theta2: 0.5,
            ..Ex1Config::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn posterior_is_prior_before_data() {
        assert_eq!(
            posterior_prob_theta1(Ex1Summary::new(0, 0), &Ex1Config::default()),
            0.5
        );
    }

    #[test]
    fn posterior_symmetric_at_half_fraction() {
        // theta2 = 1 - theta1 and k = t/2 balance the likelihoods exactly.
        let p = posterior_prob_theta1(Ex1Summary::new(10, 5), &Ex1Config::default());
        assert!((p - 0.5).abs() < 1e-15);
    }

    #[test]
    fn posterior_matches_exact_likelihood_ratio() {
        // L1/L2 = (2/3)^(2k - t) = (2/3)^4 at t=10, k=7, so P1 = 16/97.
        let p = posterior_prob_theta1(Ex1Summary::new(10, 7), &Ex1Config::default());
        assert!((p - 16.0 / 97.0).abs() < 1e-12, "p = {p}");
    }

    #[test]
    fn posterior_decreasing_in_successes() {
        let cfg = Ex1Config::default();
        for t in 1..=50u32 {
            let mut prev = f64::INFINITY;
            for k in 0..=t {
                let p = posterior_prob_theta1(Ex1Summary::new(t, k), &cfg);
                assert!(p < prev, "t={t} k={k}");
                prev = p;
            }
        }
    }

    #[test]
    fn terminal_utility_reference_values() {
        let cfg = Ex1Config::default();
        let s = Ex1Summary::new(10, 7);
        let u1 = expected_terminal_utility(s, Action::Stop1, &cfg).unwrap();
        let u2 = expected_terminal_utility(s, Action::Stop2, &cfg).unwrap();
        assert!((u1 - (-10.0 - 100.0 * 81.0 / 97.0)).abs() < 1e-10, "u1={u1}");
        assert!((u2 - (-10.0 - 100.0 * 16.0 / 97.0)).abs() < 1e-10, "u2={u2}");
        let u0 = expected_terminal_utility(Ex1Summary::new(0, 0), Action::Stop1, &cfg).unwrap();
        assert!((u0 + 50.0).abs() < 1e-12);
        assert!(expected_terminal_utility(s, Action::Continue, &cfg).is_err());
    }

    #[test]
    fn stop_utilities_cross_once_per_column() {
        let cfg = Ex1Config::default();
        for t in 1..=50u32 {
            let mut sign_changes = 0;
            let mut prev = None;
            for k in 0..=t {
                let s = Ex1Summary::new(t, k);
                let diff = expected_terminal_utility(s, Action::Stop1, &cfg).unwrap()
                    - expected_terminal_utility(s, Action::Stop2, &cfg).unwrap();
                if let Some(p) = prev {
                    if (diff > 0.0) != (p > 0.0) {
                        sign_changes += 1;
                    }
                }
                prev = Some(diff);
            }
            assert!(sign_changes <= 1, "t={t}");
        }
    }

    #[test]
    fn reward_reference_values() {
        let cfg = Ex1Config::default();
        assert_eq!(reward(Action::Continue, cfg.theta1, &cfg), -1.0);
        assert_eq!(reward(Action::Stop2, cfg.theta2, &cfg), 0.0);
        assert_eq!(reward(Action::Stop2, cfg.theta1, &cfg), -100.0);
        assert_eq!(reward(Action::Stop1, cfg.theta1, &cfg), 0.0);
    }

    #[test]
    fn episode_determinism_and_masking() {
        let env = Ex1Env::new(Ex1Config::default()).unwrap();
        let seed = SeedSpec::new(99, 3);
        let mut a = env.start(seed);
        let mut b = env.start(seed);
        assert_eq!(a.theta_value(), b.theta_value());
        for _ in 0..10 {
            let ta = a.step(Action::Continue).unwrap();
            let tb = b.step(Action::Continue).unwrap();
            assert_eq!(ta, tb);
        }
        // Stop is masked at t = 0.
        let mut c = env.start(SeedSpec::new(99, 4));
        assert!(c.step(Action::Stop1).is_err());
        // Continue is masked at the horizon.
        let mut d = env.start(SeedSpec::new(99, 5));
        for _ in 0..env.t_max() {
            d.step(Action::Continue).unwrap();
        }
        assert!(d.step(Action::Continue).is_err());
        let tr = d.step(Action::Stop2).unwrap();
        assert!(tr.terminal);
        assert!(d.step(Action::Stop1).is_err());
    }

    #[test]
    fn continue_reward_is_minus_cost() {
        let env = Ex1Env::new(Ex1Config::default()).unwrap();
        let mut ep = env.start(SeedSpec::new(7, 0));
        let tr = ep.step(Action::Continue).unwrap();
        assert_eq!(tr.reward, -1.0);
        assert!(!tr.terminal);
    }

    #[test]
    fn correct_report_has_zero_terminal_reward() {
        let env = Ex1Env::new(Ex1Config::default()).unwrap();
        for stream in 0..20 {
            let mut ep = env.start(SeedSpec::new(1234, stream));
            ep.step(Action::Continue).unwrap();
            let correct = if ep.theta_value() == env.config().theta1 {
                Action::Stop1
            } else {
                Action::Stop2
            };
            let tr = ep.step(correct).unwrap();
            assert_eq!(tr.reward, 0.0);
        }
    }

    /// Replays full episodes under a few policies and checks that the summed
    /// per-step rewards equal the direct utility evaluation.
    #[test]
    fn rewards_decompose_total_utility() {
        let env = Ex1Env::new(cfg10()).unwrap();
        for stream in 0..200u64 {
            let mut ep = env.start(SeedSpec::new(5150, stream));
            let mut total = 0.0;
            let stop_at = 1 + (stream % 10) as u32;
            let stop_action = if stream % 2 == 0 {
                Action::Stop1
            } else {
                Action::Stop2
            };
            loop {
                let t = ep.t();
                let action = if t >= stop_at { stop_action } else { Action::Continue };
                let tr = ep.step(action).unwrap();
                total += tr.reward;
                if tr.terminal {
                    let direct =
                        env.stop_utility(ep.t(), ep.summary(), action, ep.theta());
                    assert!(
                        (total - direct).abs() < 1e-12,
                        "stream {stream}: replay {total} vs direct {direct}"
                    );
                    break;
                }
            }
        }
    }

    #[test]
    fn exact_dp_stop_values_match_terminal_utilities() {
        let cfg = cfg10();
        let tables = exact_dp(&cfg).unwrap();
        for t in 1..=cfg.t_max {
            for k in 0..=t {
                let s = Ex1Summary::new(t, k);
                let want = expected_terminal_utility(s, Action::Stop1, &cfg).unwrap();
                assert_eq!(tables.value(t, k, Action::Stop1), want);
            }
        }
    }

    #[test]
    fn exact_dp_masks_horizon_and_root() {
        let cfg = cfg10();
        let tables = exact_dp(&cfg).unwrap();
        for k in 0..=cfg.t_max {
            assert!(tables.value(cfg.t_max, k, Action::Continue).is_nan());
            assert!(tables.policy(cfg.t_max, k).is_stop());
        }
        assert!(tables.value(0, 0, Action::Stop1).is_nan());
        assert_eq!(tables.policy(0, 0), Action::Continue);
    }

    #[test]
    fn exact_dp_bellman_residual_is_zero() {
        // Total-utility convention: the successor's values already include
        // the cost of the newly enrolled cohort.
        let cfg = cfg10();
        let tables = exact_dp(&cfg).unwrap();
        for t in 0..cfg.t_max {
            for k in 0..=t {
                let p1 = posterior_prob_theta1(Ex1Summary::new(t, k), &cfg);
                let ps = p1 * cfg.theta1 + (1.0 - p1) * cfg.theta2;
                let expect = ps * tables.optimal_value(t + 1, k + 1)
                    + (1.0 - ps) * tables.optimal_value(t + 1, k);
                let got = tables.value(t, k, Action::Continue);
                assert!((got - expect).abs() < 1e-12, "t={t} k={k}");
            }
        }
    }

    #[test]
    fn q_values_shift_by_accrued_cost() {
        let cfg = cfg10();
        let tables = exact_dp(&cfg).unwrap();
        // Reward-to-go form: q(t,k,d) = value(t,k,d) + cost * t. Check the
        // recursion q(t,k,0) = -c + E[max_d q(t+1,.,d)] holds.
        for t in 1..cfg.t_max {
            for k in 0..=t {
                let p1 = posterior_prob_theta1(Ex1Summary::new(t, k), &cfg);
                let ps = p1 * cfg.theta1 + (1.0 - p1) * cfg.theta2;
                let best_next = |kk: u32| -> f64 {
                    Action::ALL
                        .iter()
                        .map(|a| tables.q_value(t + 1, kk, *a))
                        .filter(|v| v.is_finite())
                        .fold(f64::NEG_INFINITY, f64::max)
                };
                let expect = -cfg.cost + ps * best_next(k + 1) + (1.0 - ps) * best_next(k);
                let got = tables.q_value(t, k, Action::Continue);
                assert!((got - expect).abs() < 1e-10, "t={t} k={k}");
            }
        }
    }

    #[test]
    fn exact_dp_rejects_large_horizons() {
        let cfg = Ex1Config {
            t_max: 200,
            ..Ex1Config::default()
        };
        assert!(matches!(exact_dp(&cfg), Err(Error::Resource(_))));
    }

    /// Independent oracle: enumerate all 2^t_max outcome sequences under
    /// both candidate rates, follow the DP policy, and accumulate the
    /// exactly weighted utility. Must reproduce the DP root value.
    #[test]
    fn exact_dp_agrees_with_full_enumeration() {
        let cfg = cfg10();
        let tables = exact_dp(&cfg).unwrap();
        let mut total = 0.0;
        for (theta, correct) in [(cfg.theta1, Action::Stop1), (cfg.theta2, Action::Stop2)] {
            for bits in 0u32..(1 << cfg.t_max) {
                // Weight by the probability of the full sequence; the
                // utility is determined by the prefix up to the stop.
                let mut prob = 0.5; // prior weight
                let mut k = 0u32;
                let mut utility = None;
                for t in 1..=cfg.t_max {
                    let y = (bits >> (t - 1)) & 1;
                    prob *= if y == 1 { theta } else { 1.0 - theta };
                    k += y;
                    if utility.is_none() {
                        let action = tables.policy(t, k);
                        if action.is_stop() {
                            let penalty = if action == correct { 0.0 } else { cfg.penalty };
                            utility = Some(-cfg.cost * t as f64 - penalty);
                        }
                    }
                }
                let u = utility.expect("horizon forces a stop");
                total += prob * u;
            }
        }
        let root = tables.root_value();
        assert!(
            (total - root).abs() < 1e-9,
            "enumeration {total} vs dp {root}"
        );
    }

    #[test]
    fn encode_scales_to_unit_square() {
        let env = Ex1Env::new(Ex1Config::default()).unwrap();
        assert_eq!(env.encode(0, [0.0, 0.0]), [0.0, 0.5]);
        assert_eq!(env.encode(25, [25.0, 10.0]), [0.5, 0.4]);
        assert_eq!(env.encode(50, [50.0, 50.0]), [1.0, 1.0]);
    }
}
