//! Tabular Q-learning on the discretized belief state of the binary trial,
//! and a small deep Q-network trainer with experience replay, a frozen
//! target network, and epsilon-greedy exploration.
//!
//! Both learners estimate reward-to-go action values: the continuation
//! target is `r + max_d Q(s', d)` with the bootstrap dropped on terminal
//! transitions, and continuation is masked at the horizon during acting and
//! target computation alike.

use rand::Rng;

use crate::env::{Action, EpisodeState, SeedSpec, StoppingEnv, StoppingPolicy, Summary};
use crate::error::{Error, Result};
use crate::example1::Ex1Env;
use crate::forward::fmt_f64;
use crate::grid::GridSpec;
use crate::nn::{Adam, Grads, Mlp, OutputActivation};

/// Stream bases reserved for trainer-internal randomness, disjoint from
/// the per-episode streams 0..episodes.
const EXPLORE_STREAM: u64 = 1 << 62;
const EVAL_STREAM_BASE: u64 = (1 << 62) + (1 << 20);
const INIT_STREAM: u64 = (1 << 62) + (1 << 21);

/// Exponent of the visit-count step-size schedule `(1 + n)^-pow`.
const VISIT_POW: f64 = 0.85;

fn epsilon_at(progress: f64, initial: f64, final_eps: f64, decay_frac: f64) -> f64 {
    if decay_frac <= 0.0 || progress >= decay_frac {
        final_eps
    } else {
        initial + (final_eps - initial) * (progress / decay_frac)
    }
}

/// Uniform choice among the actions legal at cohort count `t`.
fn explore_action<R: Rng>(rng: &mut R, t: u32, t_max: u32) -> Action {
    if t >= t_max {
        if rng.random::<f64>() < 0.5 {
            Action::Stop1
        } else {
            Action::Stop2
        }
    } else {
        match (rng.random::<f64>() * 3.0) as usize {
            0 => Action::Continue,
            1 => Action::Stop1,
            _ => Action::Stop2,
        }
    }
}

// ---------------------------------------------------------------------------
// Tabular Q-learning
// ---------------------------------------------------------------------------

/// Action values and visit counts over the binary trial's (t, fraction)
/// grid. Continuation holds a negative-infinity surrogate in the horizon
/// column so it can never be selected there.
#[derive(Debug, Clone)]
pub struct QTable {
    pub grid: GridSpec,
    pub t_max: u32,
    q: Vec<[f64; 3]>,
    visits: Vec<[u32; 3]>,
}

impl QTable {
    pub fn new(t_max: u32, p_bins: u32) -> QTable {
        let grid = GridSpec::example1(t_max, p_bins);
        let n = grid.n_cells();
        let mut q = vec![[0.0f64; 3]; n];
        for b1 in 0..p_bins {
            q[grid.cell_of_bins(t_max - 1, b1)][Action::Continue.index()] = f64::NEG_INFINITY;
        }
        QTable {
            grid,
            t_max,
            q,
            visits: vec![[0u32; 3]; n],
        }
    }

    pub fn cell(&self, summary: Summary) -> usize {
        self.grid
            .cell(GridSpec::axis_values(crate::env::EnvId::Example1, summary))
    }

    pub fn q(&self, cell: usize, action: Action) -> f64 {
        self.q[cell][action.index()]
    }

    pub fn visit_count(&self, cell: usize, action: Action) -> u32 {
        self.visits[cell][action.index()]
    }

    pub fn total_visits(&self, cell: usize) -> u32 {
        self.visits[cell].iter().sum()
    }

    /// Greedy action; ties resolve to the lowest action index.
    pub fn greedy(&self, cell: usize) -> Action {
        let mut best = Action::Continue;
        let mut best_v = f64::NEG_INFINITY;
        for a in Action::ALL {
            let v = self.q[cell][a.index()];
            if v > best_v {
                best_v = v;
                best = a;
            }
        }
        best
    }

    pub fn max_q(&self, cell: usize) -> f64 {
        self.q[cell].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// The moving-average update `Q <- (1 - a) Q + a target`; the target is
    /// `reward + max_d Q(next, d)` for continuation transitions and the
    /// bare reward for terminal ones. Returns the applied step size.
    ///
    /// Default step sizes: terminal targets are plain samples, so stop
    /// actions use the running mean 1/(1+n); continuation targets
    /// bootstrap, and the linear schedule averages over the entire
    /// bootstrap transient (impractically slow through multi-step
    /// backups), so continuation uses the polynomial Robbins-Monro
    /// schedule (1+n)^-0.85.
    pub fn update(
        &mut self,
        cell: usize,
        action: Action,
        reward: f64,
        next_cell: Option<usize>,
        alpha: Option<f64>,
    ) -> f64 {
        let target = match next_cell {
            Some(next) => reward + self.max_q(next),
            None => reward,
        };
        let n = self.visits[cell][action.index()] as f64;
        let a = alpha.unwrap_or_else(|| match action {
            Action::Continue => (1.0 + n).powf(-VISIT_POW),
            _ => 1.0 / (1.0 + n),
        });
        let q = &mut self.q[cell][action.index()];
        *q = (1.0 - a) * *q + a * target;
        self.visits[cell][action.index()] += 1;
        a
    }

    /// Table CSV in the shared grid-table schema; the policy column is the
    /// greedy action and the count column the total visits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i0,i1,c0,c1,v_continue,v_stop1,v_stop2,policy,count\n");
        for cell in 0..self.q.len() {
            let (b0, b1) = self.grid.bins_of_cell(cell);
            let center = self.grid.center(cell);
            let val = |v: f64| {
                if v.is_finite() {
                    fmt_f64(v)
                } else {
                    String::new()
                }
            };
            let policy = if self.total_visits(cell) > 0 {
                self.greedy(cell).index().to_string()
            } else {
                String::new()
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                b0,
                b1,
                fmt_f64(center[0]),
                fmt_f64(center[1]),
                val(self.q[cell][0]),
                val(self.q[cell][1]),
                val(self.q[cell][2]),
                policy,
                self.total_visits(cell)
            ));
        }
        out
    }
}

/// Greedy stopping rule read off a Q-table.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    pub table: QTable,
}

impl StoppingPolicy for TabularPolicy {
    fn decide(&self, _t: u32, summary: Summary) -> Action {
        self.table.greedy(self.table.cell(summary))
    }
}

/// Tabular training configuration.
#[derive(Debug, Clone)]
pub struct TabularConfig {
    pub episodes: u64,
    pub epsilon_initial: f64,
    pub epsilon_final: f64,
    /// Fraction of episodes over which epsilon decays linearly.
    pub epsilon_decay_frac: f64,
    /// Fixed step size; `None` uses the visit-count schedule 1/(1+n).
    pub learning_rate: Option<f64>,
    pub p_bins: u32,
    pub seed: u64,
}

impl Default for TabularConfig {
    fn default() -> Self {
        TabularConfig {
            episodes: 200_000,
            epsilon_initial: 1.0,
            epsilon_final: 0.05,
            epsilon_decay_frac: 0.2,
            learning_rate: None,
            p_bins: 100,
            seed: 7,
        }
    }
}

/// Q-learning with an epsilon-greedy behavior policy over the live table.
///
/// The forced continuation out of `t = 0` is not a decision and is not
/// recorded in the table; learning starts from the first real summary.
pub fn run_tabular(env: &Ex1Env, cfg: &TabularConfig) -> Result<QTable> {
    if cfg.episodes == 0 {
        return Err(Error::config("episodes must be positive"));
    }
    if !(0.0..=1.0).contains(&cfg.epsilon_initial) || !(0.0..=1.0).contains(&cfg.epsilon_final) {
        return Err(Error::config("epsilon must lie in [0, 1]"));
    }
    let t_max = env.t_max();
    let mut table = QTable::new(t_max, cfg.p_bins);
    let mut explore = SeedSpec::new(cfg.seed, EXPLORE_STREAM).rng();
    for episode in 0..cfg.episodes {
        let eps = epsilon_at(
            episode as f64 / cfg.episodes as f64,
            cfg.epsilon_initial,
            cfg.epsilon_final,
            cfg.epsilon_decay_frac,
        );
        let mut ep = env.start(SeedSpec::new(cfg.seed, episode));
        ep.step(Action::Continue)?; // forced first cohort
        loop {
            let t = ep.t();
            let cell = table.cell(ep.summary());
            let action = if explore.random::<f64>() < eps {
                explore_action(&mut explore, t, t_max)
            } else {
                table.greedy(cell)
            };
            let tr = ep.step(action)?;
            let next_cell = if tr.terminal {
                None
            } else {
                Some(table.cell(tr.next_state))
            };
            table.update(cell, action, tr.reward, next_cell, cfg.learning_rate);
            if tr.terminal {
                break;
            }
        }
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Replay buffer
// ---------------------------------------------------------------------------

/// One encoded transition as stored for minibatch regression.
#[derive(Debug, Clone, Copy)]
pub struct BufferItem {
    pub state: [f64; 2],
    pub action: Action,
    pub reward: f64,
    pub next_state: [f64; 2],
    pub terminal: bool,
    /// Next state sits at the horizon, so its continuation value is masked.
    pub next_at_horizon: bool,
}

/// Bounded FIFO of transitions with uniform with-replacement sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<BufferItem>,
    capacity: usize,
    next: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        assert!(capacity > 0);
        ReplayBuffer {
            items: Vec::with_capacity(capacity),
            capacity,
            next: 0,
            inserted: 0,
        }
    }

    pub fn push(&mut self, item: BufferItem) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn get(&self, i: usize) -> &BufferItem {
        &self.items[i]
    }

    pub fn sample_indices<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| (rng.random::<f64>() * self.items.len() as f64) as usize % self.items.len())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// DQN
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DqnConfig {
    pub total_steps: u64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epsilon_initial: f64,
    pub epsilon_final: f64,
    pub epsilon_decay_frac: f64,
    pub target_sync_period: u64,
    /// Transitions gathered with a fully random policy before any learning.
    pub warmup_steps: u64,
    pub eval_period: u64,
    pub eval_episodes: u32,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            total_steps: 200_000,
            buffer_capacity: 50_000,
            batch_size: 64,
            // The action values span the penalty scale (~100); 1e-4 cannot
            // traverse it inside the desk-scale budget.
            learning_rate: 1e-3,
            epsilon_initial: 1.0,
            epsilon_final: 0.05,
            epsilon_decay_frac: 0.2,
            target_sync_period: 1000,
            warmup_steps: 1000,
            eval_period: 10_000,
            eval_episodes: 1000,
            hidden: vec![64, 64],
            seed: 11,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0
            || self.buffer_capacity == 0
            || self.batch_size == 0
            || self.target_sync_period == 0
            || self.eval_period == 0
            || self.eval_episodes == 0
        {
            return Err(Error::config("all DQN budgets must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.epsilon_initial) || !(0.0..=1.0).contains(&self.epsilon_final)
        {
            return Err(Error::config("epsilon must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One point of the periodic greedy evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EvalPoint {
    pub step: u64,
    pub mean_return: f64,
    pub se: f64,
    pub epsilon: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct DqnResult {
    /// Checkpoint with the best evaluation mean return.
    pub best: Mlp,
    pub best_eval: EvalPoint,
    pub final_net: Mlp,
    pub trace: Vec<EvalPoint>,
    pub steps_run: u64,
    /// Set when training aborted on a non-finite loss; the trace still
    /// covers everything up to the abort.
    pub diverged: Option<String>,
}

pub fn trace_csv(trace: &[EvalPoint]) -> String {
    let mut out = String::from("step,mean_return,se,epsilon,loss\n");
    for p in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.step,
            fmt_f64(p.mean_return),
            fmt_f64(p.se),
            fmt_f64(p.epsilon),
            fmt_f64(p.loss)
        ));
    }
    out
}

/// Greedy rule read off an action-value network; continuation is masked at
/// the horizon.
pub struct NetPolicy<'a, E: StoppingEnv> {
    pub net: &'a Mlp,
    pub env: &'a E,
}

impl<E: StoppingEnv> NetPolicy<'_, E> {
    fn greedy(&self, t: u32, summary: Summary) -> Action {
        let q = self.net.predict(&self.env.encode(t, summary));
        masked_argmax(&q, t >= self.env.t_max())
    }
}

impl<E: StoppingEnv> StoppingPolicy for NetPolicy<'_, E> {
    fn decide(&self, t: u32, summary: Summary) -> Action {
        self.greedy(t, summary)
    }
}

/// Argmax over action values with ties to the lowest index; optionally
/// excluding continuation. Total even for non-finite values (a diverging
/// network still has to act until the loss check aborts training).
pub fn masked_argmax(q: &[f64], mask_continue: bool) -> Action {
    let mut best = None;
    let mut best_v = f64::NEG_INFINITY;
    for a in Action::ALL {
        if mask_continue && a == Action::Continue {
            continue;
        }
        let v = q[a.index()];
        if v > best_v {
            best_v = v;
            best = Some(a);
        }
    }
    best.unwrap_or(if mask_continue {
        Action::Stop1
    } else {
        Action::Continue
    })
}

/// Greedy mean return over a fixed set of evaluation streams.
fn evaluate_greedy<E: StoppingEnv>(
    env: &E,
    net: &Mlp,
    episodes: u32,
    master_seed: u64,
) -> (f64, f64) {
    let policy = NetPolicy { net, env };
    let mut returns = Vec::with_capacity(episodes as usize);
    for i in 0..episodes {
        let mut ep = env.start(SeedSpec::new(master_seed, EVAL_STREAM_BASE + i as u64));
        let mut total = 0.0;
        loop {
            let action = if ep.t() == 0 {
                Action::Continue
            } else {
                policy.greedy(ep.t(), ep.summary())
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

/// Computes the minibatch loss and its output-side gradients against a
/// frozen target network. The gradients are omitted when the loss is
/// already non-finite.
fn batch_loss_and_grads(
    net: &Mlp,
    target_net: &Mlp,
    buffer: &ReplayBuffer,
    indices: &[usize],
) -> Result<(f64, Option<Grads>)> {
    let n = indices.len();
    let mut states = Vec::with_capacity(n * 2);
    let mut next_states = Vec::with_capacity(n * 2);
    for &i in indices {
        let item = buffer.get(i);
        states.extend_from_slice(&item.state);
        next_states.extend_from_slice(&item.next_state);
    }
    let next_q = target_net.predict(&next_states);
    let cache = net.forward(&states);
    let q = cache.outputs();
    let mut d_outputs = vec![0.0; n * 3];
    let mut loss = 0.0;
    for (row, &i) in indices.iter().enumerate() {
        let item = buffer.get(i);
        let target = if item.terminal {
            item.reward
        } else {
            let row_q = &next_q[row * 3..(row + 1) * 3];
            let best = if item.next_at_horizon {
                row_q[1].max(row_q[2])
            } else {
                row_q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            item.reward + best
        };
        let predicted = q[row * 3 + item.action.index()];
        let err = predicted - target;
        loss += err * err / n as f64;
        d_outputs[row * 3 + item.action.index()] = 2.0 * err / n as f64;
    }
    if !loss.is_finite() {
        return Ok((loss, None));
    }
    let grads = net.backward(&cache, &d_outputs)?;
    Ok((loss, Some(grads)))
}

/// Minibatch Q-learning with replay and a periodically synced frozen
/// target.
pub fn dqn_train<E: StoppingEnv>(env: &E, cfg: &DqnConfig) -> Result<DqnResult> {
    cfg.validate()?;
    let t_max = env.t_max();
    let mut sizes = vec![2usize];
    sizes.extend(cfg.hidden.iter().copied());
    sizes.push(3);
    let mut net = Mlp::new(
        &sizes,
        OutputActivation::Linear,
        SeedSpec::new(cfg.seed, INIT_STREAM),
    )?;
    let mut target_net = net.clone();
    let mut opt = Adam::new(&net, cfg.learning_rate);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut explore = SeedSpec::new(cfg.seed, EXPLORE_STREAM).rng();

    let mut trace: Vec<EvalPoint> = Vec::new();
    let mut best: Option<(Mlp, EvalPoint)> = None;
    let mut diverged = None;
    let mut last_loss = f64::NAN;
    let mut step: u64 = 0;
    let mut episode_index: u64 = 0;

    'outer: while step < cfg.total_steps {
        let mut ep = env.start(SeedSpec::new(cfg.seed, episode_index));
        episode_index += 1;
        while !ep.is_terminal() && step < cfg.total_steps {
            let t = ep.t();
            let eps = epsilon_at(
                step as f64 / cfg.total_steps as f64,
                cfg.epsilon_initial,
                cfg.epsilon_final,
                cfg.epsilon_decay_frac,
            );
            let action = if t == 0 {
                Action::Continue
            } else if step < cfg.warmup_steps || explore.random::<f64>() < eps {
                explore_action(&mut explore, t, t_max)
            } else {
                let q = net.predict(&env.encode(t, ep.summary()));
                masked_argmax(&q, t >= t_max)
            };
            let state = env.encode(t, ep.summary());
            let tr = ep.step(action)?;
            step += 1;
            buffer.push(BufferItem {
                state,
                action,
                reward: tr.reward,
                next_state: env.encode(ep.t(), tr.next_state),
                terminal: tr.terminal,
                next_at_horizon: ep.t() >= t_max,
            });

            if step >= cfg.warmup_steps && buffer.len() >= cfg.batch_size {
                let indices = buffer.sample_indices(&mut explore, cfg.batch_size);
                let learned: Result<f64> = (|| {
                    let (loss, grads) = batch_loss_and_grads(&net, &target_net, &buffer, &indices)?;
                    if let Some(grads) = grads {
                        opt.step(&mut net, &grads)?;
                    }
                    Ok(loss)
                })();
                match learned {
                    Ok(loss) if loss.is_finite() => last_loss = loss,
                    Ok(loss) => {
                        diverged = Some(format!("non-finite loss {loss} at step {step}"));
                        break 'outer;
                    }
                    Err(Error::Numeric(msg)) => {
                        diverged = Some(format!("{msg} at step {step}"));
                        break 'outer;
                    }
                    Err(e) => return Err(e),
                }
            }
            if step % cfg.target_sync_period == 0 {
                target_net = net.clone();
            }
            if step % cfg.eval_period == 0 || step == cfg.total_steps {
                let (mean, se) = evaluate_greedy(env, &net, cfg.eval_episodes, cfg.seed);
                let point = EvalPoint {
                    step,
                    mean_return: mean,
                    se,
                    epsilon: eps,
                    loss: last_loss,
                };
                trace.push(point);
                if best.as_ref().map(|(_, b)| mean > b.mean_return).unwrap_or(true) {
                    best = Some((net.clone(), point));
                }
            }
        }
    }

    if trace.is_empty() {
        let (mean, se) = evaluate_greedy(env, &net, cfg.eval_episodes, cfg.seed);
        trace.push(EvalPoint {
            step,
            mean_return: mean,
            se,
            epsilon: cfg.epsilon_final,
            loss: last_loss,
        });
    }
    let best = best.unwrap_or_else(|| (net.clone(), *trace.last().expect("nonempty")));
    Ok(DqnResult {
        best: best.0,
        best_eval: best.1,
        final_net: net,
        trace,
        steps_run: step,
        diverged,
    })
}

/// Greedy actions of a value network over the binary trial's grid, one row
/// per cohort count.
pub fn net_policy_grid(env: &Ex1Env, net: &Mlp, p_bins: u32) -> Vec<Vec<Action>> {
    let t_max = env.t_max();
    let grid = GridSpec::example1(t_max, p_bins);
    let policy = NetPolicy { net, env };
    (1..=t_max)
        .map(|t| {
            (0..p_bins)
                .map(|b| {
                    let p = grid.axes[1].center(b);
                    policy.greedy(t, [t as f64, p * t as f64])
                })
                .collect()
        })
        .collect()
}

/// Q-values of a network over the binary trial's grid in the shared table
/// schema (counts are zero: the table reports the network surface, not
/// visit statistics).
pub fn net_table_csv(env: &Ex1Env, net: &Mlp, p_bins: u32) -> String {
    let t_max = env.t_max();
    let grid = GridSpec::example1(t_max, p_bins);
    let mut out = String::from("i0,i1,c0,c1,v_continue,v_stop1,v_stop2,policy,count\n");
    for t in 1..=t_max {
        for b in 0..p_bins {
            let p = grid.axes[1].center(b);
            let q = net.predict(&env.encode(t, [t as f64, p * t as f64]));
            let masked = t >= t_max;
            let policy = masked_argmax(&q, masked);
            let v0 = if masked { String::new() } else { fmt_f64(q[0]) };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},0\n",
                t - 1,
                b,
                fmt_f64(t as f64),
                fmt_f64(p),
                v0,
                fmt_f64(q[1]),
                fmt_f64(q[2]),
                policy.index()
            ));
        }
    }
    out
}
