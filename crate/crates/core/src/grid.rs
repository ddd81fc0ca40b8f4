//! Two-axis grids over summary statistics.
//!
//! Axis 0 is the sweep axis of the backward-induction iteration: the cohort
//! count for the binary trial (swept descending) and the posterior sd for
//! the dose-finding trial (swept ascending). Bins are left-closed with the
//! last bin closed; out-of-range values clamp to the edge bins.

use serde::{Deserialize, Serialize};

use crate::env::EnvId;

/// One grid axis: `bins` equal-width cells on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: u32,
}

impl AxisSpec {
    pub fn new(lo: f64, hi: f64, bins: u32) -> Self {
        debug_assert!(hi > lo && bins >= 1);
        AxisSpec { lo, hi, bins }
    }

    /// Bin index of `v`: `floor((v - lo) * bins / (hi - lo))` clamped to
    /// the valid range. Multiplying before dividing keeps integer-valued
    /// axes (like the cohort count) exact.
    pub fn bin(&self, v: f64) -> u32 {
        let r = (v - self.lo) * self.bins as f64 / (self.hi - self.lo);
        if r <= 0.0 {
            0
        } else if r >= self.bins as f64 {
            self.bins - 1
        } else {
            r.floor() as u32
        }
    }

    /// Center of bin `i`.
    pub fn center(&self, i: u32) -> f64 {
        self.lo + (i as f64 + 0.5) * (self.hi - self.lo) / self.bins as f64
    }
}

/// Direction of the backward-induction sweep along axis 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepDir {
    /// Highest axis-0 bins first (time columns from the horizon down).
    Axis0Desc,
    /// Lowest axis-0 bins first (smallest posterior sd rows first).
    Axis0Asc,
}

/// A two-axis grid with its sweep direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: [AxisSpec; 2],
    pub sweep: SweepDir,
}

impl GridSpec {
    /// Canonical binary-trial grid: one column per cohort count 1..=t_max,
    /// `p_bins` cells for the running success fraction.
    pub fn example1(t_max: u32, p_bins: u32) -> Self {
        GridSpec {
            axes: [
                AxisSpec::new(1.0, t_max as f64 + 1.0, t_max),
                AxisSpec::new(0.0, 1.0, p_bins),
            ],
            sweep: SweepDir::Axis0Desc,
        }
    }

    /// Dose-finding grid over (posterior sd, posterior mean) of delta95
    /// with explicit ranges (normally percentile-fitted to a forward
    /// sample).
    pub fn example2(sd_axis: AxisSpec, mean_axis: AxisSpec) -> Self {
        GridSpec {
            axes: [sd_axis, mean_axis],
            sweep: SweepDir::Axis0Asc,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.axes[0].bins as usize * self.axes[1].bins as usize
    }

    /// Flat cell index from per-axis bins.
    pub fn cell_of_bins(&self, b0: u32, b1: u32) -> usize {
        b0 as usize * self.axes[1].bins as usize + b1 as usize
    }

    /// Flat cell index of an axis-value pair.
    pub fn cell(&self, v: [f64; 2]) -> usize {
        self.cell_of_bins(self.axes[0].bin(v[0]), self.axes[1].bin(v[1]))
    }

    /// Per-axis bins of a flat cell index.
    pub fn bins_of_cell(&self, cell: usize) -> (u32, u32) {
        let b1 = self.axes[1].bins as usize;
        ((cell / b1) as u32, (cell % b1) as u32)
    }

    /// Cell center in axis coordinates.
    pub fn center(&self, cell: usize) -> [f64; 2] {
        let (b0, b1) = self.bins_of_cell(cell);
        [self.axes[0].center(b0), self.axes[1].center(b1)]
    }

    /// Maps an environment summary to this grid's axis coordinates.
    ///
    /// The binary trial grids (t, success fraction); the dose-finding trial
    /// grids (sd, mean), note the component swap relative to its summary.
    pub fn axis_values(env: EnvId, summary: [f64; 2]) -> [f64; 2] {
        match env {
            EnvId::Example1 => {
                let t = summary[0];
                let p = if t > 0.0 { summary[1] / t } else { 0.5 };
                [t, p]
            }
            EnvId::Example2 => [summary[1], summary[0]],
        }
    }

    /// Cells in sweep order: all cells of the first order class, then the
    /// next, and so on.
    pub fn sweep_order(&self) -> impl Iterator<Item = usize> + '_ {
        let rows = self.axes[0].bins as usize;
        let cols = self.axes[1].bins as usize;
        let desc = self.sweep == SweepDir::Axis0Desc;
        (0..rows)
            .map(move |r| if desc { rows - 1 - r } else { r })
            .flat_map(move |r| (0..cols).map(move |c| r * cols + c))
    }
}
