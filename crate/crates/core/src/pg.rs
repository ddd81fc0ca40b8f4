//! Softmax-policy gradient training (score-function estimator with an
//! optional batch-mean baseline) over the dose-finding summary state, plus
//! decision-region extraction with a visitation mask.
//!
//! The gradient estimate is the episode average of
//! `(sum_t grad log pi(a_t | s_t)) * (G - baseline)`: the full-episode
//! return multiplies the summed score exactly; reward-to-go weighting is
//! available as an option but off by default.

use rand::Rng;

use crate::env::{Action, EpisodeState, SeedSpec, StoppingEnv, StoppingPolicy, Summary};
use crate::error::{Error, Result};
use crate::forward::fmt_f64;
use crate::grid::{AxisSpec, GridSpec};
use crate::nn::{Adam, Grads, Mlp, OutputActivation};

const EVAL_STREAM_BASE: u64 = (1 << 62) + (1 << 20);
const INIT_STREAM: u64 = (1 << 62) + (1 << 21);
const STATS_STREAM_BASE: u64 = (1 << 62) + (1 << 22);
const REGION_STREAM_BASE: u64 = (1 << 62) + (1 << 23);

/// Frozen per-component location/scale for network inputs, estimated from
/// a no-stopping forward pass before training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardizer {
    pub mean: [f64; 2],
    pub scale: [f64; 2],
}

impl Standardizer {
    pub fn apply(&self, raw: [f64; 2]) -> [f64; 2] {
        [
            (raw[0] - self.mean[0]) / self.scale[0],
            (raw[1] - self.mean[1]) / self.scale[1],
        ]
    }
}

/// Fits the input standardizer and a percentile-fitted summary grid from
/// one shared forward pass.
pub fn fit_state_stats<E: StoppingEnv>(
    env: &E,
    episodes: u32,
    master_seed: u64,
    bins: [u32; 2],
) -> (Standardizer, GridSpec) {
    let mut all: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for i in 0..episodes {
        let mut ep = env.start(SeedSpec::new(master_seed, STATS_STREAM_BASE + i as u64));
        for _ in 0..env.t_max() {
            ep.step(Action::Continue).expect("forward pass");
            let enc = env.encode(ep.t(), ep.summary());
            all[0].push(enc[0]);
            all[1].push(enc[1]);
        }
    }
    let mut mean = [0.0; 2];
    let mut scale = [1.0; 2];
    for c in 0..2 {
        let n = all[c].len() as f64;
        let m = all[c].iter().sum::<f64>() / n;
        let var = all[c].iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean[c] = m;
        scale[c] = var.sqrt().max(1e-6);
    }
    // Percentile grid over the raw axis values (axis 0 is the sweep axis:
    // the sd component for the dose-finding trial).
    let axis = |values: &mut Vec<f64>, bins: u32| {
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let lo = values[(n - 1) / 100];
        let hi = values[(n - 1) * 99 / 100];
        if hi > lo {
            AxisSpec::new(lo, hi, bins)
        } else {
            AxisSpec::new(lo - 0.5, hi + 0.5, bins)
        }
    };
    // encode() for the dose-finding trial is the raw (mean, sd) summary;
    // grid axes are (sd, mean).
    let mut sd_vals: Vec<f64> = all[1].clone();
    let mut mean_vals: Vec<f64> = all[0].clone();
    let grid = GridSpec::example2(axis(&mut sd_vals, bins[0]), axis(&mut mean_vals, bins[1]));
    (Standardizer { mean, scale }, grid)
}

/// A trained stochastic policy: the logits network plus its frozen input
/// standardizer.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub net: Mlp,
    pub standardizer: Standardizer,
}

impl PolicyNet {
    pub fn inputs<E: StoppingEnv>(&self, env: &E, t: u32, summary: Summary) -> [f64; 2] {
        self.standardizer.apply(env.encode(t, summary))
    }

    fn logits(&self, inputs: [f64; 2]) -> Vec<f64> {
        let cache = self.net.forward(&inputs);
        cache.pre_logits()
    }

    /// Mode (argmax) action under the masked softmax.
    pub fn mode_action<E: StoppingEnv>(&self, env: &E, t: u32, summary: Summary) -> Action {
        let logits = self.logits(self.inputs(env, t, summary));
        crate::qlearn::masked_argmax(&logits, t >= env.t_max())
    }
}

/// Mode-action stopping rule of a trained policy.
pub struct PgModePolicy<'a, E: StoppingEnv> {
    pub policy: &'a PolicyNet,
    pub env: &'a E,
}

impl<E: StoppingEnv> StoppingPolicy for PgModePolicy<'_, E> {
    fn decide(&self, t: u32, summary: Summary) -> Action {
        self.policy.mode_action(self.env, t, summary)
    }
}

/// One logged decision: the standardized input the network saw, the
/// sampled action, its log probability, and whether continuation was
/// masked.
#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub inputs: [f64; 2],
    pub action: Action,
    pub log_prob: f64,
    pub masked: bool,
    /// Reward received for this action (used by reward-to-go weighting).
    pub reward: f64,
}

/// One logged episode with its total return.
#[derive(Debug, Clone)]
pub struct EpisodeLog {
    pub steps: Vec<StepLog>,
    pub ret: f64,
}

/// A batch of rollouts under one policy snapshot.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub episodes: Vec<EpisodeLog>,
}

impl RolloutBatch {
    pub fn mean_return(&self) -> f64 {
        self.episodes.iter().map(|e| e.ret).sum::<f64>() / self.episodes.len() as f64
    }
}

/// Masked softmax probabilities from logits; the continuation entry is
/// zero when masked.
pub fn masked_probs(logits: &[f64], mask_continue: bool) -> [f64; 3] {
    let start = usize::from(mask_continue);
    let max = logits[start..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs = [0.0; 3];
    let mut sum = 0.0;
    for i in start..3 {
        let e = (logits[i] - max).exp();
        probs[i] = e;
        sum += e;
    }
    for p in &mut probs[start..] {
        *p /= sum;
    }
    probs
}

fn sample_action<R: Rng>(probs: &[f64; 3], rng: &mut R) -> Action {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for a in Action::ALL {
        acc += probs[a.index()];
        if u < acc {
            return a;
        }
    }
    Action::Stop2
}

/// Samples `episodes` trajectories from the stochastic policy; episode `i`
/// uses stream `stream_base + i` of the master seed. The forced first
/// cohort is not a decision and is not logged, but its cost is part of the
/// return.
pub fn rollout<E: StoppingEnv>(
    env: &E,
    policy: &PolicyNet,
    episodes: u32,
    master_seed: u64,
    stream_base: u64,
) -> Result<RolloutBatch> {
    let t_max = env.t_max();
    let mut out = Vec::with_capacity(episodes as usize);
    for i in 0..episodes {
        let seed = SeedSpec::new(master_seed, stream_base + i as u64);
        let mut ep = env.start(seed);
        // Action sampling shares the episode's stream via a derived
        // sub-stream so rollouts stay reproducible per episode.
        let mut action_rng = SeedSpec::new(master_seed ^ 0x9e3779b97f4a7c15, stream_base + i as u64).rng();
        let mut steps = Vec::new();
        let mut ret = 0.0;
        let tr = ep.step(Action::Continue)?;
        ret += tr.reward;
        loop {
            let t = ep.t();
            let inputs = policy.inputs(env, t, ep.summary());
            let logits = policy.logits(inputs);
            let masked = t >= t_max;
            let probs = masked_probs(&logits, masked);
            let action = sample_action(&probs, &mut action_rng);
            let log_prob = probs[action.index()].ln();
            if !log_prob.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite log probability at t={t} (p={})",
                    probs[action.index()]
                )));
            }
            let tr = ep.step(action)?;
            ret += tr.reward;
            steps.push(StepLog {
                inputs,
                action,
                log_prob,
                masked,
                reward: tr.reward,
            });
            if tr.terminal {
                break;
            }
        }
        out.push(EpisodeLog { steps, ret });
    }
    Ok(RolloutBatch { episodes: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    None,
    BatchMean,
}

/// Score-function gradient of the expected return, in ascent orientation,
/// with an optional entropy bonus. Returns the gradient and the mean
/// per-step policy entropy.
///
/// `advantage_scale` divides the centered returns (pass the batch return
/// standard deviation to normalize advantages, or 1.0 for the raw
/// estimator).
pub fn pg_gradient(
    batch: &RolloutBatch,
    net: &Mlp,
    baseline: Baseline,
    entropy_coef: f64,
    reward_to_go: bool,
    advantage_scale: f64,
) -> Result<(Grads, f64)> {
    if batch.episodes.is_empty() {
        return Err(Error::usage("empty rollout batch"));
    }
    if !(advantage_scale > 0.0) {
        return Err(Error::usage("advantage scale must be positive"));
    }
    let b = match baseline {
        Baseline::None => 0.0,
        Baseline::BatchMean => batch.mean_return(),
    };
    let n_ep = batch.episodes.len() as f64;
    let total_steps: usize = batch.episodes.iter().map(|e| e.steps.len()).sum();
    let mut inputs = Vec::with_capacity(total_steps * 2);
    let mut coefs = Vec::with_capacity(total_steps);
    let mut masks = Vec::with_capacity(total_steps);
    let mut actions = Vec::with_capacity(total_steps);
    for ep in &batch.episodes {
        // Reward-to-go per step: the sum of rewards from each decision on
        // (rewards before a decision cannot depend on it).
        let mut togo = vec![0.0; ep.steps.len()];
        let mut acc = 0.0;
        for (i, s) in ep.steps.iter().enumerate().rev() {
            acc += s.reward;
            togo[i] = acc;
        }
        for (idx, s) in ep.steps.iter().enumerate() {
            if !s.log_prob.is_finite() {
                return Err(Error::numeric("non-finite log probability in batch"));
            }
            inputs.extend_from_slice(&s.inputs);
            let weight = if reward_to_go {
                togo[idx] - b
            } else {
                ep.ret - b
            };
            coefs.push(weight / advantage_scale / n_ep);
            masks.push(s.masked);
            actions.push(s.action);
        }
    }
    let n_out = net.n_outputs();
    let cache = net.forward(&inputs);
    let logits = cache.pre_logits();
    let mut d_logits = vec![0.0; total_steps * n_out];
    let mut entropy_sum = 0.0;
    for row in 0..total_steps {
        let row_logits = &logits[row * n_out..(row + 1) * n_out];
        let start = usize::from(masks[row]);
        let max = row_logits[start..]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut probs = vec![0.0; n_out];
        let mut sum = 0.0;
        for i in start..n_out {
            let e = (row_logits[i] - max).exp();
            probs[i] = e;
            sum += e;
        }
        for p in &mut probs[start..] {
            *p /= sum;
        }
        let a = actions[row].index();
        // Ascent on log pi(a): onehot - probs.
        for i in start..n_out {
            let onehot = if i == a { 1.0 } else { 0.0 };
            d_logits[row * n_out + i] += coefs[row] * (onehot - probs[i]);
        }
        // Entropy bonus: dH/dz_k = -p_k (ln p_k + H).
        let mut h = 0.0;
        for &p in &probs {
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        entropy_sum += h;
        if entropy_coef > 0.0 {
            for i in start..n_out {
                let p = probs[i];
                if p > 0.0 {
                    d_logits[row * n_out + i] += entropy_coef / n_ep * (-p * (p.ln() + h));
                }
            }
        }
    }
    let grads = net.backward_from_logits(&cache, &d_logits)?;
    Ok((grads, entropy_sum / total_steps as f64))
}

#[derive(Debug, Clone)]
pub struct PgConfig {
    pub batches: u32,
    pub episodes_per_batch: u32,
    pub learning_rate: f64,
    pub baseline: Baseline,
    pub entropy_coef: f64,
    pub reward_to_go: bool,
    /// Divide centered returns by the batch return standard deviation.
    /// The dose-finding utilities span three orders of magnitude (a
    /// confirmatory trial on weak evidence costs the capped sample size),
    /// and raw-scale advantages annihilate the success report before the
    /// policy ever sees where it pays off.
    pub normalize_advantages: bool,
    /// Initial logit bias on the continuation action. Starting near the
    /// never-stop policy samples the whole summary funnel from the first
    /// batch; a near-uniform start collapses onto immediate stopping
    /// before the late success region is ever visited.
    pub initial_continue_logit: f64,
    pub eval_period: u32,
    pub eval_episodes: u32,
    pub hidden: Vec<usize>,
    /// Forward episodes used to freeze the input standardizer.
    pub stats_episodes: u32,
    pub seed: u64,
}

impl Default for PgConfig {
    fn default() -> Self {
        PgConfig {
            batches: 400,
            episodes_per_batch: 32,
            learning_rate: 3e-3,
            baseline: Baseline::BatchMean,
            entropy_coef: 0.01,
            reward_to_go: false,
            normalize_advantages: true,
            initial_continue_logit: 2.0,
            eval_period: 20,
            eval_episodes: 200,
            hidden: vec![64, 64],
            stats_episodes: 200,
            seed: 13,
        }
    }
}

impl PgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batches == 0
            || self.episodes_per_batch == 0
            || self.eval_period == 0
            || self.eval_episodes == 0
            || self.stats_episodes == 0
        {
            return Err(Error::config("all policy-gradient budgets must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.entropy_coef < 0.0 {
            return Err(Error::config("entropy coefficient must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PgTracePoint {
    pub batch: u32,
    pub mean_return: f64,
    pub se: f64,
    pub entropy: f64,
}

pub fn pg_trace_csv(trace: &[PgTracePoint]) -> String {
    let mut out = String::from("batch,mean_return,se,entropy\n");
    for p in trace {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.batch,
            fmt_f64(p.mean_return),
            fmt_f64(p.se),
            fmt_f64(p.entropy)
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct PgResult {
    pub best: PolicyNet,
    pub best_eval: PgTracePoint,
    pub final_policy: PolicyNet,
    pub trace: Vec<PgTracePoint>,
    pub diverged: Option<String>,
}

/// Mode-action mean return over a fixed evaluation stream set.
fn evaluate_mode<E: StoppingEnv>(
    env: &E,
    policy: &PolicyNet,
    episodes: u32,
    master_seed: u64,
) -> (f64, f64) {
    let mut returns = Vec::with_capacity(episodes as usize);
    for i in 0..episodes {
        let mut ep = env.start(SeedSpec::new(master_seed, EVAL_STREAM_BASE + i as u64));
        let mut total = 0.0;
        loop {
            let action = if ep.t() == 0 {
                Action::Continue
            } else {
                policy.mode_action(env, ep.t(), ep.summary())
            };
            let tr = ep.step(action).expect("legal action");
            total += tr.reward;
            if tr.terminal {
                break;
            }
        }
        returns.push(total);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Batch policy-gradient training: rollout, gradient, ascent step, with
/// periodic mode-action evaluation and best-checkpoint tracking.
pub fn train<E: StoppingEnv>(env: &E, cfg: &PgConfig) -> Result<PgResult> {
    cfg.validate()?;
    let (standardizer, _) = fit_state_stats(env, cfg.stats_episodes, cfg.seed, [50, 50]);
    let mut sizes = vec![2usize];
    sizes.extend(cfg.hidden.iter().copied());
    sizes.push(3);
    let mut net = Mlp::new(
        &sizes,
        OutputActivation::Softmax,
        SeedSpec::new(cfg.seed, INIT_STREAM),
    )?;
    net.set_output_bias(Action::Continue.index(), cfg.initial_continue_logit);
    let mut policy = PolicyNet { net, standardizer };
    let mut opt = Adam::new(&policy.net, cfg.learning_rate);
    let mut trace = Vec::new();
    let mut best: Option<(PolicyNet, PgTracePoint)> = None;
    let mut diverged = None;

    for batch_idx in 0..cfg.batches {
        let stream_base = batch_idx as u64 * cfg.episodes_per_batch as u64;
        let outcome: Result<f64> = (|| {
            let batch = rollout(env, &policy, cfg.episodes_per_batch, cfg.seed, stream_base)?;
            let scale = if cfg.normalize_advantages {
                let mean = batch.mean_return();
                let var = batch
                    .episodes
                    .iter()
                    .map(|e| (e.ret - mean) * (e.ret - mean))
                    .sum::<f64>()
                    / batch.episodes.len() as f64;
                var.sqrt().max(1e-8)
            } else {
                1.0
            };
            let (mut grads, entropy) = pg_gradient(
                &batch,
                &policy.net,
                cfg.baseline,
                cfg.entropy_coef,
                cfg.reward_to_go,
                scale,
            )?;
            grads.scale(-1.0); // ascend
            opt.step(&mut policy.net, &grads)?;
            Ok(entropy)
        })();
        let entropy = match outcome {
            Ok(e) => e,
            Err(Error::Numeric(msg)) => {
                diverged = Some(format!("{msg} at batch {batch_idx}"));
                break;
            }
            Err(e) => return Err(e),
        };
        if (batch_idx + 1) % cfg.eval_period == 0 || batch_idx + 1 == cfg.batches {
            let (mean, se) = evaluate_mode(env, &policy, cfg.eval_episodes, cfg.seed);
            let point = PgTracePoint {
                batch: batch_idx + 1,
                mean_return: mean,
                se,
                entropy,
            };
            trace.push(point);
            if best.as_ref().map(|(_, b)| mean > b.mean_return).unwrap_or(true) {
                best = Some((policy.clone(), point));
            }
        }
    }

    if trace.is_empty() {
        let (mean, se) = evaluate_mode(env, &policy, cfg.eval_episodes, cfg.seed);
        trace.push(PgTracePoint {
            batch: 0,
            mean_return: mean,
            se,
            entropy: f64::NAN,
        });
    }
    let best = best.unwrap_or_else(|| (policy.clone(), *trace.last().expect("nonempty")));
    Ok(PgResult {
        best: best.0,
        best_eval: best.1,
        final_policy: policy,
        trace,
        diverged,
    })
}

/// Mode action per grid node plus a visitation count from a reference
/// rollout set, so sparsely supported regions are flagged rather than
/// trusted.
#[derive(Debug, Clone)]
pub struct RegionTable {
    pub grid: GridSpec,
    pub mode: Vec<Action>,
    pub visits: Vec<u32>,
}

impl RegionTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i0,i1,c0,c1,mode_action,visits\n");
        for cell in 0..self.mode.len() {
            let (b0, b1) = self.grid.bins_of_cell(cell);
            let c = self.grid.center(cell);
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                b0,
                b1,
                fmt_f64(c[0]),
                fmt_f64(c[1]),
                self.mode[cell].index(),
                self.visits[cell]
            ));
        }
        out
    }
}

/// Evaluates the mode action on every node of `grid` and bins a reference
/// rollout set for the visitation mask.
///
/// Nodes are decided at a mid-trial cohort count so the horizon mask does
/// not apply; the dose-finding policy reads only the summary.
pub fn extract_regions<E: StoppingEnv>(
    env: &E,
    policy: &PolicyNet,
    grid: &GridSpec,
    reference_episodes: u32,
    master_seed: u64,
) -> Result<RegionTable> {
    let mut mode = Vec::with_capacity(grid.n_cells());
    for cell in 0..grid.n_cells() {
        let center = grid.center(cell);
        // Axis order is (sd, mean); summaries are (mean, sd).
        let summary = [center[1], center[0]];
        mode.push(policy.mode_action(env, 1, summary));
    }
    let mut visits = vec![0u32; grid.n_cells()];
    let batch = rollout(env, policy, reference_episodes, master_seed, REGION_STREAM_BASE)?;
    for ep in &batch.episodes {
        for s in &ep.steps {
            // Undo standardization to recover the raw summary.
            let raw = [
                s.inputs[0] * policy.standardizer.scale[0] + policy.standardizer.mean[0],
                s.inputs[1] * policy.standardizer.scale[1] + policy.standardizer.mean[1],
            ];
            let cell = grid.cell(GridSpec::axis_values(env.id(), raw));
            visits[cell] += 1;
        }
    }
    Ok(RegionTable {
        grid: *grid,
        mode,
        visits,
    })
}

/// Fraction of axis-0 rows (restricted to visited nodes) whose mode
/// actions are ordered along axis 1 as Stop1, then Continue, then Stop2.
pub fn banding_fraction(regions: &RegionTable) -> f64 {
    let rows = regions.grid.axes[0].bins;
    let cols = regions.grid.axes[1].bins;
    let mut counted = 0u32;
    let mut banded = 0u32;
    for r in 0..rows {
        let mut max_rank_seen = 0u8;
        let mut any = false;
        let mut ok = true;
        for c in 0..cols {
            let cell = regions.grid.cell_of_bins(r, c);
            if regions.visits[cell] == 0 {
                continue;
            }
            any = true;
            let rank = match regions.mode[cell] {
                Action::Stop1 => 1,
                Action::Continue => 2,
                Action::Stop2 => 3,
            };
            if rank < max_rank_seen {
                ok = false;
                break;
            }
            max_rank_seen = rank;
        }
        if any {
            counted += 1;
            if ok {
                banded += 1;
            }
        }
    }
    if counted == 0 {
        0.0
    } else {
        banded as f64 / counted as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example2::{Ex2Config, Ex2Env};

    fn tiny_env(t_max: u32) -> Ex2Env {
        Ex2Env::new(Ex2Config {
            t_max,
            ..Ex2Config::default()
        })
        .unwrap()
    }

    fn unit_standardizer() -> Standardizer {
        Standardizer {
            mean: [0.0, 0.0],
            scale: [1.0, 1.0],
        }
    }

    /// Policy whose continue logit is huge: follows "always continue"
    /// until the mask forces a stop.
    fn continue_biased_policy() -> PolicyNet {
        let mut net = zeroed_net();
        set_bias(&mut net, 0, 40.0);
        PolicyNet {
            net,
            standardizer: unit_standardizer(),
        }
    }

    /// A 2 -> 3 softmax net with all parameters zeroed (uniform policy),
    /// built through the byte representation.
    fn zeroed_net() -> Mlp {
        let net = Mlp::new(&[2, 3], OutputActivation::Softmax, SeedSpec::new(1, 0)).unwrap();
        let mut z = net.to_bytes();
        let header = 6 + 1 + 4 + 8;
        for b in z[header..].iter_mut() {
            *b = 0;
        }
        Mlp::from_bytes(&z).unwrap()
    }

    fn set_bias(net: &mut Mlp, output: usize, value: f64) {
        let mut bytes = net.to_bytes();
        let header = 6 + 1 + 4 + 8;
        let w_len = 2 * 3 * 8;
        let off = header + w_len + output * 8;
        bytes[off..off + 8].copy_from_slice(&value.to_le_bytes());
        *net = Mlp::from_bytes(&bytes).unwrap();
    }

    #[test]
    fn deterministic_equivalent_policy_follows_rule() {
        let env = tiny_env(6);
        let policy = continue_biased_policy();
        let batch = rollout(&env, &policy, 20, 33, 0).unwrap();
        for ep in &batch.episodes {
            // Never stops until the forced horizon; last action is a stop.
            assert_eq!(ep.steps.len(), 6);
            for s in &ep.steps[..5] {
                assert_eq!(s.action, Action::Continue);
            }
            let last = ep.steps.last().unwrap();
            assert!(last.masked);
            assert!(last.action.is_stop());
        }
    }

    #[test]
    fn uniform_policy_samples_uniformly_at_first_decision() {
        let env = tiny_env(6);
        let policy = PolicyNet {
            net: zeroed_net(),
            standardizer: unit_standardizer(),
        };
        let batch = rollout(&env, &policy, 10_000, 35, 0).unwrap();
        let mut counts = [0u32; 3];
        for ep in &batch.episodes {
            counts[ep.steps[0].action.index()] += 1;
        }
        let n = batch.episodes.len() as f64;
        let se = (n * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!(
                (c as f64 - n / 3.0).abs() < 3.0 * se,
                "counts {counts:?}"
            );
        }
    }

    #[test]
    fn returns_match_replayed_utility() {
        let env = tiny_env(8);
        let policy = PolicyNet {
            net: zeroed_net(),
            standardizer: unit_standardizer(),
        };
        let batch = rollout(&env, &policy, 50, 37, 0).unwrap();
        for (i, ep) in batch.episodes.iter().enumerate() {
            // Replay the episode and compare the accumulated rewards.
            let seed = SeedSpec::new(37, i as u64);
            let mut live = env.start(seed);
            let mut total = 0.0;
            let tr = live.step(Action::Continue).unwrap();
            total += tr.reward;
            for s in &ep.steps {
                let tr = live.step(s.action).unwrap();
                total += tr.reward;
            }
            assert!((total - ep.ret).abs() < 1e-12, "episode {i}");
        }
    }

    #[test]
    fn no_continue_sampled_at_horizon() {
        let env = tiny_env(5);
        let policy = continue_biased_policy();
        let batch = rollout(&env, &policy, 200, 39, 0).unwrap();
        for ep in &batch.episodes {
            for s in &ep.steps {
                if s.masked {
                    assert!(s.action.is_stop());
                }
            }
        }
    }

    #[test]
    fn centered_returns_give_zero_gradient() {
        let env = tiny_env(4);
        let policy = PolicyNet {
            net: zeroed_net(),
            standardizer: unit_standardizer(),
        };
        let mut batch = rollout(&env, &policy, 16, 41, 0).unwrap();
        for ep in &mut batch.episodes {
            ep.ret = -7.5; // all equal: batch mean baseline centers to zero
        }
        let (grads, _) = pg_gradient(&batch, &policy.net, Baseline::BatchMean, 0.0, false, 1.0).unwrap();
        for g in grads.dw.iter().chain(grads.db.iter()) {
            for v in g {
                assert_eq!(*v, 0.0);
            }
        }
    }

    /// Closed-form two-action softmax bandit: J = p1 r1 + p2 r2 with
    /// grad_z1 J = p1 p2 (r1 - r2). The estimator over 1e5 episodes must
    /// land within 5% of it, the baseline must not shift it beyond noise,
    /// and the bare score mean must vanish.
    #[test]
    fn bandit_gradient_matches_closed_form() {
        let rewards = [2.0, -1.0];
        // Logits network: 1 input -> 2 outputs; fix parameters so the
        // probabilities are known exactly.
        let mut net = Mlp::new(&[1, 2], OutputActivation::Softmax, SeedSpec::new(51, 0)).unwrap();
        {
            let mut bytes = net.to_bytes();
            let header = 6 + 1 + 4 + 8;
            // w = [0.4, -0.3], b = [0, 0] -> logits (0.4, -0.3) at x = 1.
            for (i, v) in [0.4f64, -0.3].iter().enumerate() {
                let off = header + i * 8;
                bytes[off..off + 8].copy_from_slice(&v.to_le_bytes());
            }
            for i in 0..2 {
                let off = header + 2 * 8 + i * 8;
                bytes[off..off + 8].copy_from_slice(&0.0f64.to_le_bytes());
            }
            net = Mlp::from_bytes(&bytes).unwrap();
        }
        let logits = {
            let cache = net.forward(&[1.0]);
            cache.pre_logits()
        };
        let z = [logits[0], logits[1]];
        let e0 = z[0].exp();
        let e1 = z[1].exp();
        let p = [e0 / (e0 + e1), e1 / (e0 + e1)];
        let closed_form = p[0] * p[1] * (rewards[0] - rewards[1]);

        // Sample 1e5 single-step episodes by hand into a RolloutBatch with
        // a 3-action layout (third action unused, probability zero).
        let n = 100_000u32;
        let mut rng = SeedSpec::new(53, 0).rng();
        let mut episodes = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let u: f64 = rng.random();
            let a = if u < p[0] { 0usize } else { 1usize };
            episodes.push(EpisodeLog {
                steps: vec![StepLog {
                    inputs: [1.0, 0.0],
                    action: Action::from_index(a).unwrap(),
                    log_prob: p[a].ln(),
                    masked: false,
                    reward: rewards[a],
                }],
                ret: rewards[a],
            });
        }
        // Bandit net takes 1 input; embed as a 2-input net by adding a
        // zero-weight second column.
        let net2 = {
            let mut wide = Mlp::new(&[2, 2], OutputActivation::Softmax, SeedSpec::new(54, 0)).unwrap();
            let mut bytes = wide.to_bytes();
            let header = 6 + 1 + 4 + 8;
            let vals = [0.4f64, 0.0, -0.3, 0.0, 0.0, 0.0]; // w row-major then b
            for (i, v) in vals.iter().enumerate() {
                let off = header + i * 8;
                bytes[off..off + 8].copy_from_slice(&v.to_le_bytes());
            }
            wide = Mlp::from_bytes(&bytes).unwrap();
            wide
        };
        let batch = RolloutBatch { episodes };

        // Mean estimate without baseline.
        let (grads, _) = pg_gradient(&batch, &net2, Baseline::None, 0.0, false, 1.0).unwrap();
        let est = grads.dw[0][0]; // d/d w00 with x = (1, 0): equals dz1
        let rel = (est - closed_form).abs() / closed_form.abs();
        assert!(
            rel < 0.05,
            "estimate {est} vs closed form {closed_form} (rel {rel:.3})"
        );

        // Baseline shifts the estimate only within Monte Carlo noise.
        let (grads_b, _) = pg_gradient(&batch, &net2, Baseline::BatchMean, 0.0, false, 1.0).unwrap();
        let est_b = grads_b.dw[0][0];
        // Per-episode score sd for component z1 is sqrt(p1 p2); the
        // baseline term's sd is |b| times that.
        let b = batch.mean_return();
        let se = 3.0 * b.abs() * (p[0] * p[1]).sqrt() / (n as f64).sqrt();
        assert!(
            (est_b - est).abs() < se.max(0.01 * closed_form.abs()) * 3.0,
            "baseline moved the estimate: {est} vs {est_b}"
        );

        // Score-function mean: returns replaced by 1, no baseline.
        let mut unit = batch.clone();
        for ep in &mut unit.episodes {
            ep.ret = 1.0;
        }
        let (grads_u, _) = pg_gradient(&unit, &net2, Baseline::None, 0.0, false, 1.0).unwrap();
        let score_mean = grads_u.dw[0][0];
        let score_se = (p[0] * p[1]).sqrt() / (n as f64).sqrt();
        assert!(
            score_mean.abs() < 3.0 * score_se,
            "score mean {score_mean} exceeds 3 se {score_se}"
        );
    }

    #[test]
    fn training_is_deterministic_and_improves_on_tiny_budget() {
        let env = tiny_env(10);
        let cfg = PgConfig {
            batches: 30,
            episodes_per_batch: 16,
            eval_period: 10,
            eval_episodes: 50,
            hidden: vec![16],
            stats_episodes: 50,
            ..PgConfig::default()
        };
        let a = train(&env, &cfg).unwrap();
        let b = train(&env, &cfg).unwrap();
        assert!(a.diverged.is_none());
        assert_eq!(pg_trace_csv(&a.trace), pg_trace_csv(&b.trace));
        assert_eq!(a.best.net.to_bytes(), b.best.net.to_bytes());
        assert!(!a.trace.is_empty());
        for p in &a.trace {
            assert!(a.best_eval.mean_return >= p.mean_return);
        }
    }

    #[test]
    fn non_finite_learning_step_sets_divergence_flag() {
        // A step size at the floating-point ceiling pushes the parameters
        // out of range on the first update; the subsequent rollout sees
        // non-finite log probabilities and the trainer must abort with the
        // flag set rather than propagate junk.
        let env = tiny_env(6);
        let cfg = PgConfig {
            batches: 10,
            episodes_per_batch: 8,
            learning_rate: 1e308,
            eval_period: 5,
            eval_episodes: 20,
            hidden: vec![8],
            stats_episodes: 20,
            ..PgConfig::default()
        };
        let result = train(&env, &cfg).unwrap();
        assert!(result.diverged.is_some(), "trace: {:?}", result.trace.len());
    }

    #[test]
    fn rollout_rejects_non_finite_policy() {
        let env = tiny_env(6);
        let mut net = zeroed_net();
        set_bias(&mut net, 1, f64::NAN);
        let policy = PolicyNet {
            net,
            standardizer: unit_standardizer(),
        };
        let err = rollout(&env, &policy, 4, 3, 0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn regions_from_constant_policy_are_single_action() {
        let env = tiny_env(5);
        let policy = continue_biased_policy();
        let (_, grid) = fit_state_stats(&env, 30, 61, [10, 10]);
        let regions = extract_regions(&env, &policy, &grid, 20, 61).unwrap();
        assert_eq!(regions.mode.len(), 100);
        for a in &regions.mode {
            assert_eq!(*a, Action::Continue);
        }
        // Some nodes are visited, some are not; the mask records both.
        let visited: u32 = regions.visits.iter().sum();
        assert!(visited > 0);
        assert!(regions.visits.iter().any(|&v| v == 0));
        let csv = regions.to_csv();
        assert_eq!(csv.lines().count(), 101);
    }

    #[test]
    fn banding_fraction_on_synthetic_regions() {
        let grid = GridSpec {
            axes: [AxisSpec::new(0.0, 2.0, 2), AxisSpec::new(0.0, 3.0, 3)],
            sweep: crate::grid::SweepDir::Axis0Asc,
        };
        // Row 0: Stop1, Continue, Stop2 (banded). Row 1: Stop2, Stop1, -
        // (not banded).
        let mode = vec![
            Action::Stop1,
            Action::Continue,
            Action::Stop2,
            Action::Stop2,
            Action::Stop1,
            Action::Continue,
        ];
        let visits = vec![1, 1, 1, 1, 1, 0];
        let regions = RegionTable { grid, mode, visits };
        assert!((banding_fraction(&regions) - 0.5).abs() < 1e-12);
    }
}
