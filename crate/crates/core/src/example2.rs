//! Emax dose-finding trial: nonlinear dose-response sampling, a grid
//! marginal posterior over (b, q), ED95/delta95 summaries, the capped
//! dose-escalation rule, and terminal utilities through the pivotal-trial
//! numerics.
//!
//! The unknowns are the maximum placebo-adjusted effect `b` and the dose of
//! half-maximal effect `q`. Conditional on a grid node for `q`, the model
//! is normal linear regression in `b`, so the conditional posterior of `b`
//! is available in closed form and the `q` marginal follows from the exact
//! normal marginal likelihood. The episode summary is the posterior mean
//! and standard deviation of `delta95 = 0.95 b`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{check_step, Action, EnvId, EpisodeState, SeedSpec, StepObs, StoppingEnv, Summary, Transition};
use crate::error::{Error, Result};
use crate::pivotal::{pivotal_result, PivotalConfig};

/// Dose achieving 95% of the asymptotic effect when the Hill exponent is 1:
/// x/(q + x) = 0.95 solves to x = 19 q.
pub const ED95_DOSE_FACTOR: f64 = 19.0;

/// Fraction of the asymptotic effect defining the target dose.
pub const ED95_EFFECT_FACTOR: f64 = 0.95;

/// Dose-finding trial configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ex2Config {
    /// Response at placebo; the posterior machinery requires 0.
    pub offset_a: f64,
    /// Hill exponent; the posterior machinery and the ED95 closed forms
    /// require 1.
    pub hill_r: f64,
    /// Outcome standard deviation.
    pub sigma: f64,
    pub prior_mean_b: f64,
    pub prior_mean_q: f64,
    pub prior_sd_b: f64,
    pub prior_sd_q: f64,
    /// Lower truncation of the prior on q.
    pub q_min: f64,
    /// Maximum dose escalation between cohorts (xi).
    pub dose_step: f64,
    pub dose_max: f64,
    /// Per-cohort recruitment cost in the learning trial (c1).
    pub cost_stage1: f64,
    /// Per-patient cost in the confirmatory trial (c2).
    pub cost_stage2: f64,
    /// Prize for rejecting the null in the confirmatory trial (K).
    pub prize: f64,
    pub alpha: f64,
    pub beta: f64,
    pub t_max: u32,
    /// Number of log-spaced grid nodes for the q marginal.
    pub q_grid_bins: u32,
    /// Upper end of the q grid.
    pub q_grid_hi: f64,
    /// Smallest effect assumed in the confirmatory power calculation.
    pub delta_floor: f64,
    /// Cap on the confirmatory sample size.
    pub n_max: u32,
}

impl Default for Ex2Config {
    fn default() -> Self {
        Ex2Config {
            offset_a: 0.0,
            hill_r: 1.0,
            sigma: 1.0,
            prior_mean_b: 0.5,
            prior_mean_q: 1.0,
            prior_sd_b: 1.0,
            prior_sd_q: 1.0,
            q_min: 0.1,
            dose_step: 1.0,
            dose_max: 10.0,
            cost_stage1: 1.0,
            cost_stage2: 1.0,
            prize: 100.0,
            alpha: 0.05,
            beta: 0.2,
            t_max: 50,
            q_grid_bins: 200,
            q_grid_hi: 8.0,
            delta_floor: 0.05,
            n_max: 2000,
        }
    }
}

impl Ex2Config {
    pub fn validate(&self) -> Result<()> {
        if self.offset_a != 0.0 {
            return Err(Error::config("offset_a must be 0 (posterior assumes no placebo drift)"));
        }
        if self.hill_r != 1.0 {
            return Err(Error::config("hill_r must be 1 (ED95 closed forms assume it)"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config(format!("sigma must be positive: {}", self.sigma)));
        }
        if !(self.prior_sd_b > 0.0 && self.prior_sd_q > 0.0) {
            return Err(Error::config("prior standard deviations must be positive"));
        }
        if !(self.q_min > 0.0) {
            return Err(Error::config(format!("q_min must be positive: {}", self.q_min)));
        }
        if !(self.q_grid_hi > self.q_min) {
            return Err(Error::config("q_grid_hi must exceed q_min"));
        }
        if self.q_grid_bins < 2 {
            return Err(Error::config("q_grid_bins must be at least 2"));
        }
        if !(self.dose_step > 0.0) {
            return Err(Error::config(format!(
                "dose_step must be positive: {}",
                self.dose_step
            )));
        }
        if !(self.dose_max > 0.0) {
            return Err(Error::config(format!(
                "dose_max must be positive: {}",
                self.dose_max
            )));
        }
        if !(self.cost_stage1 > 0.0 && self.cost_stage2 > 0.0 && self.prize > 0.0) {
            return Err(Error::config("costs and prize must be positive"));
        }
        if self.t_max < 1 {
            return Err(Error::config("t_max must be at least 1"));
        }
        self.pivotal().validate()
    }

    /// Confirmatory-trial parameters carried by this configuration.
    pub fn pivotal(&self) -> PivotalConfig {
        PivotalConfig {
            alpha: self.alpha,
            beta: self.beta,
            delta_floor: self.delta_floor,
            n_max: self.n_max,
        }
    }
}

/// The unknown dose-response parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaxTheta {
    /// Maximum placebo-adjusted effect.
    pub b: f64,
    /// Dose of half-maximal effect.
    pub q: f64,
}

/// Mean response at dose `x`: `a + b x^r / (q^r + x^r)`.
pub fn emax_mean(x: f64, theta: EmaxTheta, cfg: &Ex2Config) -> f64 {
    debug_assert!(x >= 0.0);
    if x == 0.0 {
        return cfg.offset_a;
    }
    let xr = x.powf(cfg.hill_r);
    cfg.offset_a + theta.b * xr / (theta.q.powf(cfg.hill_r) + xr)
}

/// The target dose and effect: `x95 = 19 q` clipped to the dose range for
/// assignment, and the unclipped effect `delta95 = 0.95 b` used by the
/// summaries and utilities.
pub fn ed95_and_delta95(theta: EmaxTheta, cfg: &Ex2Config) -> (f64, f64) {
    let x95 = (ED95_DOSE_FACTOR * theta.q).clamp(0.0, cfg.dose_max);
    (x95, ED95_EFFECT_FACTOR * theta.b)
}

/// Dose/response history in time order.
#[derive(Debug, Clone, Default)]
pub struct DoseHistory {
    pub pairs: Vec<(f64, f64)>,
}

impl DoseHistory {
    pub fn push(&mut self, dose: f64, response: f64) {
        self.pairs.push((dose, response));
    }
}

/// Grid-marginal posterior: normalized masses on the q nodes plus the
/// conditional normal for b at each node.
#[derive(Debug, Clone)]
pub struct PosteriorGrid {
    pub q_nodes: Vec<f64>,
    pub q_weights: Vec<f64>,
    pub b_mean: Vec<f64>,
    pub b_var: Vec<f64>,
}

impl PosteriorGrid {
    /// Posterior mean of q.
    pub fn mean_q(&self) -> f64 {
        self.q_nodes
            .iter()
            .zip(&self.q_weights)
            .map(|(q, w)| q * w)
            .sum()
    }

    /// Two-step posterior draw: a q node from the marginal masses, then b
    /// from the conditional normal at that node.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> EmaxTheta {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut j = self.q_nodes.len() - 1;
        for (i, w) in self.q_weights.iter().enumerate() {
            acc += w;
            if u < acc {
                j = i;
                break;
            }
        }
        let z: f64 = rng.sample(StandardNormal);
        EmaxTheta {
            b: self.b_mean[j] + self.b_var[j].sqrt() * z,
            q: self.q_nodes[j],
        }
    }
}

/// Posterior summary: mean and standard deviation of delta95.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ex2Summary {
    pub delta95_mean: f64,
    pub delta95_sd: f64,
}

impl Ex2Summary {
    pub fn as_vec(&self) -> Summary {
        [self.delta95_mean, self.delta95_sd]
    }

    pub fn from_vec(s: Summary) -> Self {
        Ex2Summary {
            delta95_mean: s[0],
            delta95_sd: s[1],
        }
    }
}

/// Normalizes log weights in place to probabilities, in log space: the
/// result is invariant to adding any constant to all entries.
pub(crate) fn normalize_log_weights(logw: &mut [f64]) -> Result<()> {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::numeric(
            "posterior weights underflowed: no finite log weight on the q grid",
        ));
    }
    let mut sum = 0.0;
    for w in logw.iter_mut() {
        *w = (*w - max).exp();
        sum += *w;
    }
    for w in logw.iter_mut() {
        *w /= sum;
    }
    Ok(())
}

/// The running per-node sufficient statistics for the grid posterior.
///
/// Conditional on node `q_j`, the regression of y on `g_j(x) = x / (q_j +
/// x)` needs only `sum g^2` and `sum g y`; observations enter one at a
/// time.
#[derive(Debug, Clone)]
struct GridEngine {
    q_nodes: Vec<f64>,
    /// Prior log mass per node: truncated-normal density times the cell
    /// width of the log-spaced grid (constants dropped).
    log_prior_mass: Vec<f64>,
    sum_gg: Vec<f64>,
    sum_gy: Vec<f64>,
}

impl GridEngine {
    fn new(cfg: &Ex2Config) -> Self {
        let n = cfg.q_grid_bins as usize;
        let (lo, hi) = (cfg.q_min, cfg.q_grid_hi);
        let log_step = (hi / lo).ln() / (n - 1) as f64;
        let q_nodes: Vec<f64> = (0..n).map(|j| lo * (log_step * j as f64).exp()).collect();
        // Cell widths from geometric midpoints between nodes.
        let mut log_prior_mass = Vec::with_capacity(n);
        for j in 0..n {
            let left = if j == 0 {
                q_nodes[0]
            } else {
                (q_nodes[j - 1] * q_nodes[j]).sqrt()
            };
            let right = if j == n - 1 {
                q_nodes[n - 1]
            } else {
                (q_nodes[j] * q_nodes[j + 1]).sqrt()
            };
            let z = (q_nodes[j] - cfg.prior_mean_q) / cfg.prior_sd_q;
            log_prior_mass.push(-0.5 * z * z + (right - left).ln());
        }
        GridEngine {
            q_nodes,
            log_prior_mass,
            sum_gg: vec![0.0; n],
            sum_gy: vec![0.0; n],
        }
    }

    fn observe(&mut self, x: f64, y: f64) {
        if x == 0.0 {
            return; // placebo carries no information about (b, q)
        }
        for (j, q) in self.q_nodes.iter().enumerate() {
            let g = x / (q + x);
            self.sum_gg[j] += g * g;
            self.sum_gy[j] += g * y;
        }
    }

    /// Materializes the posterior grid from the running statistics.
    ///
    /// The node weight combines the prior mass with the exact normal
    /// marginal likelihood, evaluated through the identity
    /// `p(H|q) = p(H|b,q) p(b) / p(b|q,H)` at `b = 0`, whose only
    /// node-dependent part is `log N(0; m_j, v_j)`.
    fn posterior(&self, cfg: &Ex2Config) -> Result<PosteriorGrid> {
        let n = self.q_nodes.len();
        let prior_prec = 1.0 / (cfg.prior_sd_b * cfg.prior_sd_b);
        let noise_prec = 1.0 / (cfg.sigma * cfg.sigma);
        let mut b_mean = Vec::with_capacity(n);
        let mut b_var = Vec::with_capacity(n);
        let mut logw = Vec::with_capacity(n);
        for j in 0..n {
            let prec = prior_prec + self.sum_gg[j] * noise_prec;
            let v = 1.0 / prec;
            let m = v * (cfg.prior_mean_b * prior_prec + self.sum_gy[j] * noise_prec);
            b_mean.push(m);
            b_var.push(v);
            logw.push(self.log_prior_mass[j] + 0.5 * v.ln() + m * m / (2.0 * v));
        }
        normalize_log_weights(&mut logw)?;
        Ok(PosteriorGrid {
            q_nodes: self.q_nodes.clone(),
            q_weights: logw,
            b_mean,
            b_var,
        })
    }
}

/// Posterior over (b, q) given a dose/response history; an empty history
/// returns the prior-induced grid.
pub fn posterior_update(history: &DoseHistory, cfg: &Ex2Config) -> Result<PosteriorGrid> {
    let mut engine = GridEngine::new(cfg);
    for &(x, y) in &history.pairs {
        engine.observe(x, y);
    }
    engine.posterior(cfg)
}

/// Mixture-of-normals moments for b, scaled to delta95. A tiny negative
/// variance from round-off clamps to zero.
pub fn summarize(grid: &PosteriorGrid) -> Ex2Summary {
    let mut mean = 0.0;
    let mut second = 0.0;
    for j in 0..grid.q_nodes.len() {
        let w = grid.q_weights[j];
        let m = grid.b_mean[j];
        mean += w * m;
        second += w * (grid.b_var[j] + m * m);
    }
    let var = (second - mean * mean).max(0.0);
    Ex2Summary {
        delta95_mean: ED95_EFFECT_FACTOR * mean,
        delta95_sd: ED95_EFFECT_FACTOR * var.sqrt(),
    }
}

/// Next assigned dose: escalate by at most `dose_step` toward the current
/// ED95 estimate `19 E[q | H_t]`, clipped to the dose range.
pub fn next_dose(current: f64, grid: &PosteriorGrid, cfg: &Ex2Config) -> f64 {
    let x95_hat = ED95_DOSE_FACTOR * grid.mean_q();
    (current + cfg.dose_step).min(x95_hat).clamp(0.0, cfg.dose_max)
}

/// Terminal utility at time `t`: stopping for futility costs only the
/// accrued recruitment; stopping for a confirmatory trial adds its cost and
/// the expected prize.
pub fn terminal_utility(summary: Ex2Summary, action: Action, t: u32, cfg: &Ex2Config) -> f64 {
    debug_assert!(action.is_stop());
    let accrued = -cfg.cost_stage1 * t as f64;
    match action {
        Action::Stop1 => accrued,
        Action::Stop2 => {
            let r = pivotal_result(summary.delta95_mean, summary.delta95_sd, &cfg.pivotal());
            accrued - cfg.cost_stage2 * r.n_total as f64 + cfg.prize * r.rejection_prob
        }
        Action::Continue => unreachable!(),
    }
}

/// The dose-finding environment.
#[derive(Debug, Clone)]
pub struct Ex2Env {
    cfg: Ex2Config,
    prior_engine: GridEngine,
    prior_grid: PosteriorGrid,
    prior_summary: Ex2Summary,
}

impl Ex2Env {
    pub fn new(cfg: Ex2Config) -> Result<Self> {
        cfg.validate()?;
        let prior_engine = GridEngine::new(&cfg);
        let prior_grid = prior_engine.posterior(&cfg)?;
        let prior_summary = summarize(&prior_grid);
        Ok(Ex2Env {
            cfg,
            prior_engine,
            prior_grid,
            prior_summary,
        })
    }

    pub fn config(&self) -> &Ex2Config {
        &self.cfg
    }

    pub fn prior_summary(&self) -> Ex2Summary {
        self.prior_summary
    }

    pub fn prior_grid(&self) -> &PosteriorGrid {
        &self.prior_grid
    }
}

/// One live episode: truth draw, running posterior statistics, and the
/// staged dose.
#[derive(Debug, Clone)]
pub struct Ex2Episode {
    cfg: Ex2Config,
    theta: EmaxTheta,
    engine: GridEngine,
    summary: Ex2Summary,
    t: u32,
    /// Dose the next cohort would receive.
    next_dose: f64,
    terminal: bool,
    last_obs: Option<StepObs>,
    rng: rand_chacha::ChaCha8Rng,
}

impl Ex2Episode {
    pub fn theta_typed(&self) -> EmaxTheta {
        self.theta
    }

    pub fn summary_typed(&self) -> Ex2Summary {
        self.summary
    }

    pub fn posterior(&self) -> Result<PosteriorGrid> {
        self.engine.posterior(&self.cfg)
    }
}

impl StoppingEnv for Ex2Env {
    type Episode = Ex2Episode;

    fn id(&self) -> EnvId {
        EnvId::Example2
    }

    fn t_max(&self) -> u32 {
        self.cfg.t_max
    }

    fn config_hash(&self) -> String {
        crate::forward::config_hash(EnvId::Example2, &self.cfg)
    }

    fn start(&self, seed: SeedSpec) -> Ex2Episode {
        let mut rng = seed.rng();
        let b = self.cfg.prior_mean_b + self.cfg.prior_sd_b * rng.sample::<f64, _>(StandardNormal);
        let q = loop {
            let cand =
                self.cfg.prior_mean_q + self.cfg.prior_sd_q * rng.sample::<f64, _>(StandardNormal);
            if cand >= self.cfg.q_min {
                break cand;
            }
        };
        Ex2Episode {
            cfg: self.cfg,
            theta: EmaxTheta { b, q },
            engine: self.prior_engine.clone(),
            summary: self.prior_summary,
            t: 0,
            next_dose: 0.0, // the first cohort receives placebo
            terminal: false,
            last_obs: None,
            rng,
        }
    }

    fn expected_stop_utility(&self, t: u32, summary: Summary, action: Action) -> f64 {
        terminal_utility(Ex2Summary::from_vec(summary), action, t, &self.cfg)
    }

    fn stop_utility(&self, t: u32, summary: Summary, action: Action, _theta: [f64; 2]) -> f64 {
        // The utility depends on the truth only through the summary.
        terminal_utility(Ex2Summary::from_vec(summary), action, t, &self.cfg)
    }

    fn encode(&self, _t: u32, summary: Summary) -> [f64; 2] {
        summary
    }
}

impl EpisodeState for Ex2Episode {
    fn t(&self) -> u32 {
        self.t
    }

    fn summary(&self) -> Summary {
        self.summary.as_vec()
    }

    fn theta(&self) -> [f64; 2] {
        [self.theta.b, self.theta.q]
    }

    fn is_terminal(&self) -> bool {
        self.terminal
    }

    fn last_obs(&self) -> Option<StepObs> {
        self.last_obs
    }

    fn step(&mut self, action: Action) -> Result<Transition> {
        check_step(self.t, self.cfg.t_max, self.terminal, action)?;
        let state = self.summary.as_vec();
        let reward = match action {
            Action::Continue => {
                let x = self.next_dose;
                let eps: f64 = self.rng.sample(StandardNormal);
                let y = emax_mean(x, self.theta, &self.cfg) + self.cfg.sigma * eps;
                self.engine.observe(x, y);
                let grid = self.engine.posterior(&self.cfg)?;
                self.summary = summarize(&grid);
                self.t += 1;
                self.next_dose = next_dose(x, &grid, &self.cfg);
                self.last_obs = Some(StepObs { y, dose: Some(x) });
                -self.cfg.cost_stage1
            }
            stop => {
                self.terminal = true;
                match stop {
                    Action::Stop1 => 0.0,
                    Action::Stop2 => {
                        let r = pivotal_result(
                            self.summary.delta95_mean,
                            self.summary.delta95_sd,
                            &self.cfg.pivotal(),
                        );
                        -self.cfg.cost_stage2 * r.n_total as f64 + self.cfg.prize * r.rejection_prob
                    }
                    Action::Continue => unreachable!(),
                }
            }
        };
        Ok(Transition {
            state,
            action,
            reward,
            next_state: self.summary.as_vec(),
            terminal: self.terminal,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EpisodeState;

    fn theta(b: f64, q: f64) -> EmaxTheta {
        EmaxTheta { b, q }
    }

    #[test]
    fn emax_reference_values() {
        let cfg = Ex2Config::default();
        assert_eq!(emax_mean(0.0, theta(1.0, 1.0), &cfg), 0.0);
        assert!((emax_mean(1.0, theta(1.0, 1.0), &cfg) - 0.5).abs() < 1e-15);
        assert!((emax_mean(9.5, theta(2.0, 0.5), &cfg) - 1.9).abs() < 1e-12);
    }

    #[test]
    fn ed95_closed_forms() {
        let cfg = Ex2Config::default();
        let (x95, d95) = ed95_and_delta95(theta(1.0, 1.0), &cfg);
        assert_eq!(x95, cfg.dose_max); // 19 clipped to 10
        assert!((d95 - 0.95).abs() < 1e-15);
        let (x95, _) = ed95_and_delta95(theta(1.0, 0.4), &cfg);
        assert!((x95 - 7.6).abs() < 1e-12);
        let (_, d95) = ed95_and_delta95(theta(0.0, 1.0), &cfg);
        assert_eq!(d95, 0.0);
    }

    #[test]
    fn empty_history_recovers_prior() {
        let cfg = Ex2Config::default();
        let grid = posterior_update(&DoseHistory::default(), &cfg).unwrap();
        let sum: f64 = grid.q_weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-10);
        for j in 0..grid.q_nodes.len() {
            assert_eq!(grid.b_mean[j], cfg.prior_mean_b);
            assert_eq!(grid.b_var[j], cfg.prior_sd_b * cfg.prior_sd_b);
            assert!(grid.b_var[j] > 0.0);
        }
        let s = summarize(&grid);
        // Prior summary: 0.95 * (b mean, b sd), independent of the q grid.
        assert!((s.delta95_mean - 0.475).abs() < 1e-12, "{s:?}");
        assert!((s.delta95_sd - 0.95).abs() < 1e-12, "{s:?}");
    }

    #[test]
    fn placebo_observation_is_uninformative() {
        let cfg = Ex2Config::default();
        let prior = posterior_update(&DoseHistory::default(), &cfg).unwrap();
        let mut h = DoseHistory::default();
        h.push(0.0, 1.7);
        let post = posterior_update(&h, &cfg).unwrap();
        assert_eq!(prior.q_weights, post.q_weights);
        assert_eq!(prior.b_mean, post.b_mean);
    }

    #[test]
    fn summarize_single_and_two_node_mixtures() {
        let one = PosteriorGrid {
            q_nodes: vec![1.0],
            q_weights: vec![1.0],
            b_mean: vec![0.5],
            b_var: vec![1.0],
        };
        let s = summarize(&one);
        assert!((s.delta95_mean - 0.475).abs() < 1e-15);
        assert!((s.delta95_sd - 0.95).abs() < 1e-15);

        let two = PosteriorGrid {
            q_nodes: vec![1.0, 2.0],
            q_weights: vec![0.5, 0.5],
            b_mean: vec![0.0, 1.0],
            b_var: vec![0.0, 0.0],
        };
        let s = summarize(&two);
        assert!((s.delta95_mean - 0.475).abs() < 1e-15);
        assert!((s.delta95_sd - 0.475).abs() < 1e-15);
    }

    #[test]
    fn log_weight_normalization_shift_invariant() {
        let mut a = vec![-700.0, -701.5, -698.2, -712.0];
        let mut b: Vec<f64> = a.iter().map(|x| x + 650.0).collect();
        normalize_log_weights(&mut a).unwrap();
        normalize_log_weights(&mut b).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
        let mut bad = vec![f64::NEG_INFINITY, f64::NEG_INFINITY];
        assert!(normalize_log_weights(&mut bad).is_err());
    }

    #[test]
    fn next_dose_rule() {
        let cfg = Ex2Config::default();
        let grid_with_mean_q = |mq: f64| PosteriorGrid {
            q_nodes: vec![mq],
            q_weights: vec![1.0],
            b_mean: vec![0.5],
            b_var: vec![1.0],
        };
        // Escalation cap binds.
        assert!((next_dose(2.0, &grid_with_mean_q(1.0), &cfg) - 3.0).abs() < 1e-12);
        // ED95 estimate binds.
        assert!((next_dose(5.0, &grid_with_mean_q(0.2), &cfg) - 3.8).abs() < 1e-12);
        // Dose range clips.
        assert_eq!(next_dose(cfg.dose_max, &grid_with_mean_q(5.0), &cfg), cfg.dose_max);
    }

    #[test]
    fn terminal_utility_reference_values() {
        let cfg = Ex2Config::default();
        let s = Ex2Summary {
            delta95_mean: 0.6,
            delta95_sd: 0.1,
        };
        assert_eq!(
            terminal_utility(s, Action::Stop1, 12, &cfg),
            -12.0
        );
        let u = terminal_utility(s, Action::Stop2, 10, &cfg);
        let expect = -10.0 - 100.0 + 100.0 * crate::pivotal::rejection_prob(0.6, 0.1, 100.0, 0.05);
        assert!((u - expect).abs() < 1e-12);
        assert!((u - (-21.27)).abs() < 0.01, "u = {u}");
        // Weak evidence: the capped confirmatory size dominates.
        let weak = Ex2Summary {
            delta95_mean: 0.05,
            delta95_sd: 0.2,
        };
        let u = terminal_utility(weak, Action::Stop2, 10, &cfg);
        assert!(u < -1900.0, "u = {u}");
    }

    #[test]
    fn episode_reset_gives_prior_summary_and_placebo_start() {
        let env = Ex2Env::new(Ex2Config::default()).unwrap();
        let ep = env.start(SeedSpec::new(5, 0));
        assert_eq!(ep.t(), 0);
        let s = ep.summary_typed();
        assert!((s.delta95_mean - 0.475).abs() < 1e-12);
        assert!((s.delta95_sd - 0.95).abs() < 1e-12);
        assert!(ep.theta_typed().q >= env.config().q_min);
        assert_eq!(ep.next_dose, 0.0);
    }

    #[test]
    fn episode_determinism_and_dose_escalation_bounds() {
        let env = Ex2Env::new(Ex2Config::default()).unwrap();
        let seed = SeedSpec::new(21, 9);
        let mut a = env.start(seed);
        let mut b = env.start(seed);
        let mut prev_dose = 0.0f64;
        for _ in 0..env.t_max() {
            let ta = a.step(Action::Continue).unwrap();
            let tb = b.step(Action::Continue).unwrap();
            assert_eq!(ta, tb);
            let obs = a.last_obs().unwrap();
            let x = obs.dose.unwrap();
            assert!(x <= prev_dose + env.config().dose_step + 1e-12);
            assert!(x <= env.config().dose_max);
            assert!(x >= 0.0);
            prev_dose = x;
        }
        assert!(a.step(Action::Continue).is_err());
        let tr = a.step(Action::Stop1).unwrap();
        assert!(tr.terminal);
        assert_eq!(tr.reward, 0.0);
    }

    #[test]
    fn rewards_decompose_total_utility() {
        let env = Ex2Env::new(Ex2Config::default()).unwrap();
        for stream in 0..50u64 {
            let mut ep = env.start(SeedSpec::new(31337, stream));
            let stop_at = 1 + (stream % 12) as u32;
            let action = if stream % 2 == 0 {
                Action::Stop1
            } else {
                Action::Stop2
            };
            let mut total = 0.0;
            loop {
                let a = if ep.t() >= stop_at { action } else { Action::Continue };
                let tr = ep.step(a).unwrap();
                total += tr.reward;
                if tr.terminal {
                    let direct = env.stop_utility(ep.t(), ep.summary(), a, ep.theta());
                    assert!(
                        (total - direct).abs() < 1e-10,
                        "stream {stream}: {total} vs {direct}"
                    );
                    break;
                }
            }
        }
    }

    #[test]
    fn incremental_posterior_matches_batch() {
        let cfg = Ex2Config::default();
        let env = Ex2Env::new(cfg).unwrap();
        let mut ep = env.start(SeedSpec::new(404, 2));
        let mut history = DoseHistory::default();
        for _ in 0..20 {
            ep.step(Action::Continue).unwrap();
            let obs = ep.last_obs().unwrap();
            history.push(obs.dose.unwrap(), obs.y);
        }
        let batch = posterior_update(&history, &cfg).unwrap();
        let live = ep.posterior().unwrap();
        for j in 0..batch.q_nodes.len() {
            assert!((batch.q_weights[j] - live.q_weights[j]).abs() < 1e-12);
            assert!((batch.b_mean[j] - live.b_mean[j]).abs() < 1e-12);
        }
        let s1 = summarize(&batch);
        let s2 = ep.summary_typed();
        assert!((s1.delta95_mean - s2.delta95_mean).abs() < 1e-12);
    }

    #[test]
    fn posterior_concentrates_near_truth() {
        let cfg = Ex2Config::default();
        // Synthetic history from b = 1, q = 1 with informative doses.
        let mut rng = SeedSpec::new(777, 0).rng();
        let truth = theta(1.0, 1.0);
        let mut h = DoseHistory::default();
        for i in 0..20 {
            let x = 0.5 + (i % 10) as f64;
            let y = emax_mean(x, truth, &cfg) + rng.sample::<f64, _>(StandardNormal);
            h.push(x, y);
        }
        let grid = posterior_update(&h, &cfg).unwrap();
        let s = summarize(&grid);
        let b_mean = s.delta95_mean / ED95_EFFECT_FACTOR;
        let b_sd = s.delta95_sd / ED95_EFFECT_FACTOR;
        assert!(
            (b_mean - 1.0).abs() < 3.0 * b_sd,
            "b posterior ({b_mean:.3} +- {b_sd:.3}) missed the truth"
        );
    }

    #[test]
    fn posterior_sd_shrinks_in_expectation() {
        let env = Ex2Env::new(Ex2Config::default()).unwrap();
        let m = 1000;
        let mut sd_at_5 = 0.0;
        let mut sd_at_30 = 0.0;
        for stream in 0..m {
            let mut ep = env.start(SeedSpec::new(2024, stream));
            for _ in 0..30 {
                ep.step(Action::Continue).unwrap();
                if ep.t() == 5 {
                    sd_at_5 += ep.summary_typed().delta95_sd;
                }
            }
            sd_at_30 += ep.summary_typed().delta95_sd;
        }
        let (at5, at30) = (sd_at_5 / m as f64, sd_at_30 / m as f64);
        assert!(at30 < at5, "mean sd at 30 = {at30} vs at 5 = {at5}");
    }

    #[test]
    fn two_step_sampler_tracks_mixture_moments() {
        let cfg = Ex2Config::default();
        let mut rng = SeedSpec::new(31, 0).rng();
        let truth = theta(0.8, 0.7);
        let mut h = DoseHistory::default();
        for i in 0..15 {
            let x = 0.5 * (1 + i % 8) as f64;
            let y = emax_mean(x, truth, &cfg) + rng.sample::<f64, _>(StandardNormal);
            h.push(x, y);
        }
        let grid = posterior_update(&h, &cfg).unwrap();
        let s = summarize(&grid);
        let n = 200_000;
        let mut mean = 0.0;
        for _ in 0..n {
            mean += grid.sample(&mut rng).b;
        }
        mean /= n as f64;
        let mc_se = (s.delta95_sd / ED95_EFFECT_FACTOR) / (n as f64).sqrt();
        let want = s.delta95_mean / ED95_EFFECT_FACTOR;
        assert!(
            (mean - want).abs() < 4.0 * mc_se,
            "sampler mean {mean} vs mixture mean {want} (se {mc_se})"
        );
    }

    /// Independent oracle: dense 2-D quadrature of the joint posterior over
    /// (b, q) by direct likelihood evaluation, no conditional-normal
    /// algebra. Moments of delta95 must match within 1e-2 absolute.
    #[test]
    fn grid_posterior_matches_quadrature_oracle() {
        let cfg = Ex2Config::default();
        let mut rng = SeedSpec::new(91, 0).rng();
        for case in 0..10 {
            let truth = EmaxTheta {
                b: cfg.prior_mean_b + rng.sample::<f64, _>(StandardNormal),
                q: loop {
                    let c = cfg.prior_mean_q + rng.sample::<f64, _>(StandardNormal);
                    if c >= cfg.q_min {
                        break c;
                    }
                },
            };
            let n_obs = 5 + (case * 2) as usize;
            let mut h = DoseHistory::default();
            let mut x = 0.0;
            for i in 0..n_obs {
                if i % 3 == 0 {
                    x = rng.random::<f64>() * cfg.dose_max;
                } else {
                    x = (x + cfg.dose_step).min(cfg.dose_max);
                }
                let y = emax_mean(x, truth, &cfg) + cfg.sigma * rng.sample::<f64, _>(StandardNormal);
                h.push(x, y);
            }
            let s = summarize(&posterior_update(&h, &cfg).unwrap());
            let (om, osd) = quadrature_moments(&h, &cfg);
            assert!(
                (s.delta95_mean - om).abs() < 1e-2,
                "case {case}: mean {} vs oracle {om}",
                s.delta95_mean
            );
            assert!(
                (s.delta95_sd - osd).abs() < 1e-2,
                "case {case}: sd {} vs oracle {osd}",
                s.delta95_sd
            );
        }
    }

    /// Brute-force 200 x 200 quadrature of the joint posterior.
    fn quadrature_moments(h: &DoseHistory, cfg: &Ex2Config) -> (f64, f64) {
        let nb = 200;
        let nq = 200;
        let b_lo = cfg.prior_mean_b - 8.0 * cfg.prior_sd_b;
        let b_hi = cfg.prior_mean_b + 8.0 * cfg.prior_sd_b;
        let q_lo = cfg.q_min;
        let q_hi = 10.0;
        let mut logp = vec![0.0f64; nb * nq];
        let mut max = f64::NEG_INFINITY;
        for i in 0..nb {
            let b = b_lo + (i as f64 + 0.5) / nb as f64 * (b_hi - b_lo);
            let zb = (b - cfg.prior_mean_b) / cfg.prior_sd_b;
            for j in 0..nq {
                let q = q_lo + (j as f64 + 0.5) / nq as f64 * (q_hi - q_lo);
                let zq = (q - cfg.prior_mean_q) / cfg.prior_sd_q;
                let mut lp = -0.5 * (zb * zb + zq * zq);
                for &(x, y) in &h.pairs {
                    let r = (y - emax_mean(x, EmaxTheta { b, q }, cfg)) / cfg.sigma;
                    lp -= 0.5 * r * r;
                }
                logp[i * nq + j] = lp;
                max = max.max(lp);
            }
        }
        let mut mass = 0.0;
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for i in 0..nb {
            let b = b_lo + (i as f64 + 0.5) / nb as f64 * (b_hi - b_lo);
            let d = ED95_EFFECT_FACTOR * b;
            for j in 0..nq {
                let w = (logp[i * nq + j] - max).exp();
                mass += w;
                m1 += w * d;
                m2 += w * d * d;
            }
        }
        m1 /= mass;
        m2 /= mass;
        (m1, (m2 - m1 * m1).max(0.0).sqrt())
    }
}
