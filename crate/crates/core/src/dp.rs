//! Constrained backward induction on the summary grid.
//!
//! Decisions are restricted to depend on the history only through the
//! gridded summary statistic. Forward simulations are binned once into
//! per-cell membership sets; stop values are membership averages of
//! realized terminal utilities, and continuation values are membership
//! averages of the successor cells' current best values (total-utility
//! convention, so no per-step cost is added here). The policy table is then
//! iterated to a fixed point, sweeping the horizon-side order class first.

use rayon::prelude::*;

use crate::env::{Action, EnvId, StoppingEnv, Summary};
use crate::error::{Error, Result};
use crate::forward::{bin_summary, fmt_f64, TrajectoryDataset};
use crate::grid::GridSpec;

/// Per-cell membership: which (episode, step) pairs land in each grid cell.
#[derive(Debug, Clone)]
pub struct Membership {
    pub grid: GridSpec,
    pub t_max: u32,
    /// Members per flat cell index, as (episode, step with t >= 1).
    pub members: Vec<Vec<(u32, u32)>>,
    /// Flat cell index per (episode * t_max + (t - 1)).
    pub cell_of: Vec<u32>,
}

impl Membership {
    /// Bins every step of every episode. The dataset must come from the
    /// same configuration the solver runs under, enforced by hash.
    pub fn build(ds: &TrajectoryDataset, expected_config_hash: &str) -> Result<Membership> {
        ds.check_config(expected_config_hash)?;
        let grid = ds.meta.grid;
        let t_max = ds.meta.t_max;
        let env = ds.meta.env_id;
        let cell_of: Vec<u32> = ds
            .episodes
            .par_iter()
            .flat_map_iter(|ep| {
                ep.steps
                    .iter()
                    .map(move |s| bin_summary(s.summary, env, &grid) as u32)
            })
            .collect();
        let mut members: Vec<Vec<(u32, u32)>> = vec![Vec::new(); grid.n_cells()];
        for m in 0..ds.episodes.len() {
            for t in 1..=t_max {
                let cell = cell_of[m * t_max as usize + (t - 1) as usize];
                members[cell as usize].push((m as u32, t));
            }
        }
        Ok(Membership {
            grid,
            t_max,
            members,
            cell_of,
        })
    }

    pub fn cell_of_step(&self, episode: u32, t: u32) -> usize {
        debug_assert!(t >= 1 && t <= self.t_max);
        self.cell_of[episode as usize * self.t_max as usize + (t - 1) as usize] as usize
    }

    pub fn total_members(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }
}

/// Options for the fixed-point iteration.
#[derive(Debug, Clone, Copy)]
pub struct DpOptions {
    pub max_iterations: u32,
    /// Stop when a sweep changes at most this many cell policies.
    pub change_threshold: u32,
    /// Value-stability tolerance entering the convergence check.
    pub value_tol: f64,
    /// Iterate cells in the reverse of the canonical sweep order (used to
    /// check order invariance of the fixed point).
    pub reverse_sweep: bool,
}

impl Default for DpOptions {
    fn default() -> Self {
        DpOptions {
            max_iterations: 100,
            change_threshold: 0,
            value_tol: 1e-9,
            reverse_sweep: false,
        }
    }
}

const UNVISITED: u8 = u8::MAX;

/// Grid-indexed expected-utility estimates and the induced policy.
#[derive(Debug, Clone)]
pub struct GridValuePolicy {
    pub grid: GridSpec,
    pub env_id: EnvId,
    pub t_max: u32,
    values: Vec<[f64; 3]>,
    se: Vec<[f64; 3]>,
    policy: Vec<u8>,
    counts: Vec<u32>,
    pub iterations: u32,
    pub converged: bool,
    /// Policy changes per sweep.
    pub trace: Vec<u32>,
}

impl GridValuePolicy {
    pub fn value(&self, cell: usize, action: Action) -> f64 {
        self.values[cell][action.index()]
    }

    pub fn std_error(&self, cell: usize, action: Action) -> f64 {
        self.se[cell][action.index()]
    }

    pub fn count(&self, cell: usize) -> u32 {
        self.counts[cell]
    }

    pub fn is_visited(&self, cell: usize) -> bool {
        self.policy[cell] != UNVISITED
    }

    pub fn policy_at(&self, cell: usize) -> Option<Action> {
        if self.is_visited(cell) {
            Action::from_index(self.policy[cell] as usize)
        } else {
            None
        }
    }

    pub fn visited_cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.policy.len()).filter(move |&c| self.policy[c] != UNVISITED)
    }

    /// Best stop-action value of a cell (the forced-stop value).
    fn terminal_best(&self, cell: usize) -> (Action, f64) {
        let v1 = self.values[cell][Action::Stop1.index()];
        let v2 = self.values[cell][Action::Stop2.index()];
        if v2 > v1 {
            (Action::Stop2, v2)
        } else {
            (Action::Stop1, v1)
        }
    }

    /// Nearest visited cell in the same axis-0 class, expanding to
    /// neighboring classes only if the whole class is unvisited.
    fn nearest_visited(&self, cell: usize) -> Option<usize> {
        let (row, col) = self.grid.bins_of_cell(cell);
        let rows = self.grid.axes[0].bins as i64;
        let cols = self.grid.axes[1].bins as i64;
        for row_off in 0..rows {
            for row_sign in [0i64, 1] {
                let r = if row_sign == 0 {
                    row as i64 - row_off
                } else {
                    row as i64 + row_off
                };
                if row_off == 0 && row_sign == 1 {
                    continue;
                }
                if r < 0 || r >= rows {
                    continue;
                }
                for col_off in 0..cols {
                    for col_sign in [0i64, 1] {
                        if col_off == 0 && col_sign == 1 {
                            continue;
                        }
                        let c = if col_sign == 0 {
                            col as i64 - col_off
                        } else {
                            col as i64 + col_off
                        };
                        if c < 0 || c >= cols {
                            continue;
                        }
                        let cand = self.grid.cell_of_bins(r as u32, c as u32);
                        if self.is_visited(cand) {
                            return Some(cand);
                        }
                    }
                }
            }
        }
        None
    }

    /// Decision for a fresh summary. Unvisited cells fall back to the
    /// terminal-only argmax of the nearest visited cell in the same sweep
    /// class.
    pub fn decide_summary(&self, summary: Summary) -> Action {
        let cell = bin_summary(summary, self.env_id, &self.grid);
        if let Some(a) = self.policy_at(cell) {
            return a;
        }
        match self.nearest_visited(cell) {
            Some(c) => self.terminal_best(c).0,
            None => Action::Stop1,
        }
    }

    /// Table rows as CSV: cell coordinates, the three action values, the
    /// argmax, and the member count. Masked or unvisited entries are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i0,i1,c0,c1,v_continue,v_stop1,v_stop2,policy,count\n");
        let val = |v: f64| if v.is_nan() { String::new() } else { fmt_f64(v) };
        for cell in 0..self.values.len() {
            let (b0, b1) = self.grid.bins_of_cell(cell);
            let center = self.grid.center(cell);
            let policy = match self.policy_at(cell) {
                Some(a) => (a.index()).to_string(),
                None => String::new(),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                b0,
                b1,
                fmt_f64(center[0]),
                fmt_f64(center[1]),
                val(self.values[cell][0]),
                val(self.values[cell][1]),
                val(self.values[cell][2]),
                policy,
                self.counts[cell]
            ));
        }
        out
    }
}

impl crate::env::StoppingPolicy for GridValuePolicy {
    fn decide(&self, _t: u32, summary: Summary) -> Action {
        self.decide_summary(summary)
    }
}

/// Runs constrained backward induction for an environment over its dataset.
pub fn solve<E: StoppingEnv>(
    env: &E,
    ds: &TrajectoryDataset,
    opts: &DpOptions,
) -> Result<GridValuePolicy> {
    if ds.meta.env_id != env.id() {
        return Err(Error::config(format!(
            "dataset is for {}, solver configured for {}",
            ds.meta.env_id.as_str(),
            env.id().as_str()
        )));
    }
    let membership = Membership::build(ds, &env.config_hash())?;
    solve_with_membership(env, ds, &membership, opts)
}

/// As [`solve`], reusing a prebuilt membership index.
pub fn solve_with_membership<E: StoppingEnv>(
    env: &E,
    ds: &TrajectoryDataset,
    membership: &Membership,
    opts: &DpOptions,
) -> Result<GridValuePolicy> {
    let grid = membership.grid;
    let n_cells = grid.n_cells();
    let t_max = membership.t_max;
    let mut values = vec![[f64::NAN; 3]; n_cells];
    let mut se = vec![[f64::NAN; 3]; n_cells];
    let mut policy = vec![UNVISITED; n_cells];
    let mut counts = vec![0u32; n_cells];

    // Terminal values: membership averages of realized stop utilities.
    for cell in 0..n_cells {
        let members = &membership.members[cell];
        counts[cell] = members.len() as u32;
        if members.is_empty() {
            continue;
        }
        for action in Action::STOPS {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for &(m, t) in members {
                let ep = &ds.episodes[m as usize];
                let s = ep.steps[(t - 1) as usize];
                let u = env.stop_utility(t, s.summary, action, ep.theta);
                sum += u;
                sumsq += u * u;
            }
            let n = members.len() as f64;
            let mean = sum / n;
            values[cell][action.index()] = mean;
            se[cell][action.index()] = if members.len() > 1 {
                ((sumsq - n * mean * mean).max(0.0) / (n - 1.0) / n).sqrt()
            } else {
                f64::INFINITY
            };
        }
        // Initial policy: best terminal action.
        let v1 = values[cell][Action::Stop1.index()];
        let v2 = values[cell][Action::Stop2.index()];
        policy[cell] = if v2 > v1 {
            Action::Stop2 as u8
        } else {
            Action::Stop1 as u8
        };
    }

    let order: Vec<usize> = if opts.reverse_sweep {
        let mut v: Vec<usize> = grid.sweep_order().collect();
        v.reverse();
        v
    } else {
        grid.sweep_order().collect()
    };

    let mut iterations = 0;
    let mut converged = false;
    let mut trace = Vec::new();
    while iterations < opts.max_iterations {
        iterations += 1;
        let mut changes = 0u32;
        let mut max_delta = 0.0f64;
        for &cell in &order {
            let members = &membership.members[cell];
            if members.is_empty() {
                continue;
            }
            // Continuation value: average of successor best values; members
            // already at the horizon contribute this cell's forced-stop
            // value.
            let mut all_at_horizon = true;
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for &(m, t) in members {
                let contrib = if t < t_max {
                    all_at_horizon = false;
                    let next_cell = membership.cell_of_step(m, t + 1);
                    let a = policy[next_cell];
                    debug_assert!(a != UNVISITED, "successor cells are always visited");
                    values[next_cell][a as usize]
                } else {
                    let v1 = values[cell][Action::Stop1.index()];
                    let v2 = values[cell][Action::Stop2.index()];
                    v1.max(v2)
                };
                sum += contrib;
                sumsq += contrib * contrib;
            }
            if !all_at_horizon {
                let n = members.len() as f64;
                let mean = sum / n;
                let old = values[cell][Action::Continue.index()];
                if old.is_finite() {
                    max_delta = max_delta.max((mean - old).abs());
                } else {
                    max_delta = f64::INFINITY;
                }
                values[cell][Action::Continue.index()] = mean;
                se[cell][Action::Continue.index()] = if members.len() > 1 {
                    ((sumsq - n * mean * mean).max(0.0) / (n - 1.0) / n).sqrt()
                } else {
                    f64::INFINITY
                };
            }
            // Re-argmax; ties resolve to the lower action index.
            let mut best = UNVISITED;
            let mut best_v = f64::NEG_INFINITY;
            for a in Action::ALL {
                let v = values[cell][a.index()];
                if v.is_finite() && v > best_v {
                    best_v = v;
                    best = a as u8;
                }
            }
            if best != policy[cell] {
                policy[cell] = best;
                changes += 1;
            }
        }
        trace.push(changes);
        if changes <= opts.change_threshold && max_delta <= opts.value_tol {
            converged = true;
            break;
        }
    }

    Ok(GridValuePolicy {
        grid,
        env_id: ds.meta.env_id,
        t_max,
        values,
        se,
        policy,
        counts,
        iterations,
        converged,
        trace,
    })
}
