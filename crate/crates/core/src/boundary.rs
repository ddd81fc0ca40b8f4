//! Parametric stopping boundaries, policy-value estimation by trajectory
//! truncation, grid search over boundary parameters, and quadratic
//! response-surface maximization.
//!
//! The same forward simulations evaluate every candidate boundary: each
//! episode is walked to its first stop under the candidate rule (or the
//! forced stop at the horizon) and scored with the realized utility.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Action, StoppingEnv, StoppingPolicy, Summary};
use crate::error::{Error, Result};
use crate::forward::{fmt_f64, TrajectoryDataset};

/// Binary-trial boundary: a funnel over the success fraction, linear in
/// `sqrt(t - 1)` and parameterized by a single `phi` in (0, 1).
///
/// `omega1(t) = phi sqrt((t-1)/(T-1))`, `omega2(t) = 1 - (1-phi)
/// sqrt((t-1)/(T-1))`; report low if the fraction falls below `omega1`,
/// high if above `omega2`. Both bounds meet (0, 1) at t = 1, so the rule
/// always continues there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ex1Boundary {
    pub phi: f64,
}

impl Ex1Boundary {
    pub fn new(phi: f64) -> Result<Self> {
        if !(phi > 0.0 && phi < 1.0) {
            return Err(Error::config(format!("phi must lie in (0, 1): {phi}")));
        }
        Ok(Ex1Boundary { phi })
    }

    pub fn bounds(&self, t: u32, t_max: u32) -> (f64, f64) {
        let s = if t_max > 1 {
            ((t - 1) as f64 / (t_max - 1) as f64).sqrt()
        } else {
            0.0
        };
        (self.phi * s, 1.0 - (1.0 - self.phi) * s)
    }

    /// The raw boundary rule; ties (fraction exactly on a bound) continue.
    pub fn decide(&self, t: u32, fraction: f64, t_max: u32) -> Action {
        let (lo, hi) = self.bounds(t, t_max);
        if fraction < lo {
            Action::Stop1
        } else if fraction > hi {
            Action::Stop2
        } else {
            Action::Continue
        }
    }

    /// Adapter binding the horizon so the rule can act as a policy over
    /// raw summaries.
    pub fn policy(self, t_max: u32) -> Ex1BoundaryPolicy {
        Ex1BoundaryPolicy {
            boundary: self,
            t_max,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Ex1BoundaryPolicy {
    boundary: Ex1Boundary,
    t_max: u32,
}

impl StoppingPolicy for Ex1BoundaryPolicy {
    fn decide(&self, t: u32, summary: Summary) -> Action {
        let fraction = if t > 0 { summary[1] / t as f64 } else { 0.5 };
        self.boundary.decide(t, fraction, self.t_max)
    }
}

/// Dose-finding boundary: two lines over the posterior sd of delta95,
/// `omega1(s) = -b1 s + c` and `omega2(s) = b2 s + c`, splitting the
/// (sd, mean) plane into a futility wedge, a continuation wedge, and a
/// success wedge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ex2Boundary {
    pub b1: f64,
    pub b2: f64,
    pub c: f64,
}

impl Ex2Boundary {
    pub fn new(b1: f64, b2: f64, c: f64) -> Result<Self> {
        if !(b1 >= 0.0 && b2 >= 0.0) {
            return Err(Error::config(format!(
                "boundary slopes must be nonnegative: b1={b1}, b2={b2}"
            )));
        }
        Ok(Ex2Boundary { b1, b2, c })
    }

    /// The raw boundary rule over (mean, sd); ties continue.
    pub fn decide(&self, summary: crate::example2::Ex2Summary) -> Action {
        let lo = -self.b1 * summary.delta95_sd + self.c;
        let hi = self.b2 * summary.delta95_sd + self.c;
        if summary.delta95_mean < lo {
            Action::Stop1
        } else if summary.delta95_mean > hi {
            Action::Stop2
        } else {
            Action::Continue
        }
    }
}

impl StoppingPolicy for Ex2Boundary {
    fn decide(&self, _t: u32, summary: Summary) -> Action {
        Ex2Boundary::decide(self, crate::example2::Ex2Summary::from_vec(summary))
    }
}

/// Monte Carlo estimate of a policy's expected utility on a dataset.
#[derive(Debug, Clone)]
pub struct PolicyValue {
    pub mean: f64,
    pub se: f64,
    /// Per-episode utilities, in episode order (for paired comparisons).
    pub utilities: Vec<f64>,
}

impl PolicyValue {
    fn from_utilities(utilities: Vec<f64>) -> PolicyValue {
        let n = utilities.len() as f64;
        let mean = utilities.iter().sum::<f64>() / n;
        let se = if utilities.len() > 1 {
            let var = utilities.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        PolicyValue {
            mean,
            se,
            utilities,
        }
    }
}

/// Walks every stored trajectory to its first stop under `policy` (or the
/// forced stop at the horizon) and averages the realized utilities. No
/// re-simulation: the same dataset serves every candidate policy.
pub fn evaluate_policy_value<E: StoppingEnv>(
    env: &E,
    ds: &TrajectoryDataset,
    policy: &(impl StoppingPolicy + Sync),
) -> Result<PolicyValue> {
    ds.check_config(&env.config_hash())?;
    let t_max = ds.meta.t_max;
    let utilities: Vec<f64> = ds
        .episodes
        .par_iter()
        .map(|ep| {
            for t in 1..=t_max {
                let summary = ep.steps[(t - 1) as usize].summary;
                let mut action = policy.decide(t, summary);
                if t == t_max && action == Action::Continue {
                    action = env.forced_stop_action(t, summary);
                }
                if action.is_stop() {
                    return env.stop_utility(t, summary, action, ep.theta);
                }
            }
            unreachable!("the horizon forces a stop")
        })
        .collect();
    Ok(PolicyValue::from_utilities(utilities))
}

/// A grid of evaluated boundary parameters.
#[derive(Debug, Clone)]
pub struct ParamTable {
    pub names: Vec<String>,
    pub points: Vec<ParamPoint>,
}

#[derive(Debug, Clone)]
pub struct ParamPoint {
    pub params: Vec<f64>,
    pub mean: f64,
    pub se: f64,
}

impl ParamTable {
    pub fn best_index(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.points.iter().enumerate() {
            if p.mean > self.points[best].mean {
                best = i;
            }
        }
        best
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.names.join(",");
        out.push_str(",value,se\n");
        for p in &self.points {
            for v in &p.params {
                out.push_str(&fmt_f64(*v));
                out.push(',');
            }
            out.push_str(&fmt_f64(p.mean));
            out.push(',');
            out.push_str(&fmt_f64(p.se));
            out.push('\n');
        }
        out
    }
}

/// Evaluates a policy family over a list of parameter nodes; deterministic
/// and parallel over nodes.
pub fn grid_search<E, P, F>(
    env: &E,
    ds: &TrajectoryDataset,
    names: &[&str],
    nodes: &[Vec<f64>],
    build: F,
) -> Result<ParamTable>
where
    E: StoppingEnv,
    P: StoppingPolicy + Sync,
    F: Fn(&[f64]) -> Result<P> + Sync,
{
    if nodes.is_empty() {
        return Err(Error::config("parameter grid is empty"));
    }
    ds.check_config(&env.config_hash())?;
    let points: Vec<Result<ParamPoint>> = nodes
        .par_iter()
        .map(|params| {
            let policy = build(params)?;
            let value = evaluate_policy_value(env, ds, &policy)?;
            Ok(ParamPoint {
                params: params.clone(),
                mean: value.mean,
                se: value.se,
            })
        })
        .collect();
    let points = points.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(ParamTable {
        names: names.iter().map(|s| s.to_string()).collect(),
        points,
    })
}

/// Uniformly spaced nodes, inclusive of both ends.
pub fn linspace(lo: f64, hi: f64, n: u32) -> Vec<f64> {
    debug_assert!(n >= 2 && hi > lo);
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Full-factorial nodes from per-dimension levels.
pub fn cartesian(levels: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut nodes = vec![Vec::new()];
    for level in levels {
        let mut next = Vec::with_capacity(nodes.len() * level.len());
        for node in &nodes {
            for v in level {
                let mut n = node.clone();
                n.push(*v);
                next.push(n);
            }
        }
        nodes = next;
    }
    nodes
}

/// Fitted quadratic response surface over p parameters: intercept, linear
/// terms, then quadratic terms (i <= j) in lexicographic order.
#[derive(Debug, Clone)]
pub struct ResponseSurface {
    pub names: Vec<String>,
    pub coeffs: Vec<f64>,
}

impl ResponseSurface {
    fn n_params(&self) -> usize {
        self.names.len()
    }

    fn design_row(x: &[f64]) -> Vec<f64> {
        let p = x.len();
        let mut row = Vec::with_capacity(1 + p + p * (p + 1) / 2);
        row.push(1.0);
        row.extend_from_slice(x);
        for i in 0..p {
            for j in i..p {
                row.push(x[i] * x[j]);
            }
        }
        row
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        Self::design_row(x)
            .iter()
            .zip(&self.coeffs)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Splits the coefficients into the linear part and the symmetric
    /// quadratic form Q (so the surface is `c0 + b.x + x'Qx`).
    fn linear_and_quadratic(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let p = self.n_params();
        let b = self.coeffs[1..=p].to_vec();
        let mut q = vec![vec![0.0; p]; p];
        let mut idx = p + 1;
        for i in 0..p {
            for j in i..p {
                if i == j {
                    q[i][j] = self.coeffs[idx];
                } else {
                    q[i][j] = self.coeffs[idx] / 2.0;
                    q[j][i] = self.coeffs[idx] / 2.0;
                }
                idx += 1;
            }
        }
        (b, q)
    }

    /// Stationary point `-Q^{-1} b / 2` when Q is negative definite.
    fn maximizer(&self) -> Option<Vec<f64>> {
        let (b, q) = self.linear_and_quadratic();
        // Solve (-2Q) x = b by Cholesky; success certifies Q negative
        // definite.
        let p = b.len();
        let mut a = vec![vec![0.0; p]; p];
        for i in 0..p {
            for j in 0..p {
                a[i][j] = -2.0 * q[i][j];
            }
        }
        cholesky_solve(&a, &b)
    }

    pub fn term_names(&self) -> Vec<String> {
        let p = self.n_params();
        let mut terms = vec!["1".to_string()];
        for name in &self.names {
            terms.push(name.clone());
        }
        for i in 0..p {
            for j in i..p {
                if i == j {
                    terms.push(format!("{}^2", self.names[i]));
                } else {
                    terms.push(format!("{}*{}", self.names[i], self.names[j]));
                }
            }
        }
        terms
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("term,coefficient\n");
        for (t, c) in self.term_names().iter().zip(&self.coeffs) {
            out.push_str(&format!("{t},{}\n", fmt_f64(*c)));
        }
        out
    }
}

/// Outcome of the response-surface maximization.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: Vec<f64>,
    /// Surface-predicted value at `params` (the observed value when the
    /// fallback triggered).
    pub value: f64,
    /// True when the stationary point was rejected and the best grid node
    /// is returned instead.
    pub fallback: bool,
    pub note: String,
    pub surface: ResponseSurface,
}

/// Fraction of each parameter range kept around the best node when the
/// global fit is rejected and the surface is refit locally.
const LOCAL_WINDOW_FRAC: f64 = 0.15;

/// Fits a least-squares quadratic to the evaluated grid and returns its
/// maximizer.
///
/// The utility surface is usually only locally quadratic, so the fit is
/// layered: first over every node; if that stationary point is rejected
/// (quadratic form not negative definite, point outside the grid box, or
/// prediction below what the grid already observed minus 2 standard
/// errors), refit within a window around the best node; if that also
/// fails, fall back to the best grid node with a diagnostic.
pub fn fit_and_maximize(table: &ParamTable, bounds: &[(f64, f64)]) -> Result<FitOutcome> {
    let p = table.names.len();
    if bounds.len() != p {
        return Err(Error::config("one (lo, hi) bound per parameter required"));
    }
    let n_terms = 1 + p + p * (p + 1) / 2;
    if table.points.len() < n_terms {
        return Err(Error::config(format!(
            "need at least {n_terms} grid nodes to fit a quadratic in {p} parameters, got {}",
            table.points.len()
        )));
    }
    let best = table.points[table.best_index()].clone();
    let grid_floor = table
        .points
        .iter()
        .map(|pt| pt.mean - 2.0 * pt.se)
        .fold(f64::NEG_INFINITY, f64::max);

    let global = try_fit(&table.points, &table.names, bounds, grid_floor)?;
    let (surface, rejection) = match global {
        FitAttempt::Accepted(out) => return Ok(out),
        FitAttempt::Rejected { surface, note } => (surface, note),
    };

    // Local refit around the best node.
    let windows: Vec<(f64, f64)> = best
        .params
        .iter()
        .zip(bounds)
        .map(|(&c, &(lo, hi))| {
            let half = LOCAL_WINDOW_FRAC * (hi - lo);
            (c - half, c + half)
        })
        .collect();
    let local_points: Vec<ParamPoint> = table
        .points
        .iter()
        .filter(|pt| {
            pt.params
                .iter()
                .zip(&windows)
                .all(|(&v, &(lo, hi))| v >= lo && v <= hi)
        })
        .cloned()
        .collect();
    if local_points.len() >= n_terms {
        let local_floor = local_points
            .iter()
            .map(|pt| pt.mean - 2.0 * pt.se)
            .fold(f64::NEG_INFINITY, f64::max);
        if let FitAttempt::Accepted(mut out) =
            try_fit(&local_points, &table.names, &windows, local_floor)?
        {
            out.note = format!("local refit around the best node ({rejection})");
            return Ok(out);
        }
    }

    Ok(FitOutcome {
        params: best.params.clone(),
        value: best.mean,
        fallback: true,
        note: rejection,
        surface,
    })
}

enum FitAttempt {
    Accepted(FitOutcome),
    Rejected { surface: ResponseSurface, note: String },
}

fn try_fit(
    points: &[ParamPoint],
    names: &[String],
    bounds: &[(f64, f64)],
    floor: f64,
) -> Result<FitAttempt> {
    let rows: Vec<Vec<f64>> = points
        .iter()
        .map(|pt| ResponseSurface::design_row(&pt.params))
        .collect();
    let y: Vec<f64> = points.iter().map(|pt| pt.mean).collect();
    let coeffs = least_squares(&rows, &y)?;
    let surface = ResponseSurface {
        names: names.to_vec(),
        coeffs,
    };
    let Some(x) = surface.maximizer() else {
        return Ok(FitAttempt::Rejected {
            surface,
            note: "quadratic form is not negative definite".into(),
        });
    };
    for (i, (&xi, &(lo, hi))) in x.iter().zip(bounds).enumerate() {
        if !(xi >= lo && xi <= hi) {
            return Ok(FitAttempt::Rejected {
                surface,
                note: format!(
                    "stationary point leaves the fit box in {} ({xi:.4} not in [{lo:.4}, {hi:.4}])",
                    names[i]
                ),
            });
        }
    }
    let predicted = surface.eval(&x);
    if predicted < floor {
        return Ok(FitAttempt::Rejected {
            surface,
            note: format!(
                "surface optimum {predicted:.4} is below the observed floor {floor:.4}"
            ),
        });
    }
    Ok(FitAttempt::Accepted(FitOutcome {
        params: x,
        value: predicted,
        fallback: false,
        note: String::new(),
        surface,
    }))
}

/// Least squares by normal equations with partial-pivot elimination.
fn least_squares(rows: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    let n = rows[0].len();
    let mut ata = vec![vec![0.0; n]; n];
    let mut aty = vec![0.0; n];
    for (row, &yi) in rows.iter().zip(y) {
        for i in 0..n {
            aty[i] += row[i] * yi;
            for j in 0..n {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    solve_linear(ata, aty)
}

fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    let scale: f64 = a
        .iter()
        .flat_map(|r| r.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot_row][col].abs() <= 1e-12 * scale.max(1.0) {
            return Err(Error::numeric(format!(
                "rank-deficient design: pivot {col} vanished (collinear or duplicated grid nodes)"
            )));
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// Solves `A x = b` for symmetric positive definite A; `None` if A is not
/// positive definite.
fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    // Forward then back substitution.
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut acc = b[i];
        for k in 0..i {
            acc -= l[i][k] * z[k];
        }
        z[i] = acc / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = z[i];
        for k in (i + 1)..n {
            acc -= l[k][i] * x[k];
        }
        x[i] = acc / l[i][i];
    }
    Some(x)
}
