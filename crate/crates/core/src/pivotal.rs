//! Pivotal-trial computations: standard-normal CDF and quantile, the
//! confirmatory-trial sample size, and the posterior predictive probability
//! of rejecting the null in that trial.
//!
//! The confirmatory trial randomizes `n/2` patients to placebo and `n/2` to
//! the estimated ED95 and rejects when the standardized mean difference
//! exceeds the upper-alpha cutoff. All functions here are pure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard normal CDF, accurate to well below 1e-10 absolute error.
///
/// Evaluated through a rational-Chebyshev erf/erfc pair (Cody's method),
/// with Phi(x) = erfc(-x / sqrt(2)) / 2.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile (inverse CDF), accurate to well below 1e-8.
///
/// Acklam's rational approximation refined by one Halley step against
/// `normal_cdf`, which drives the round-trip error near machine precision.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::usage(format!(
            "normal_quantile requires p in (0, 1), got {p}"
        )));
    }
    let mut x = acklam_quantile(p);
    // Halley refinement: r = (Phi(x) - p) / phi(x); x <- x - r / (1 + x r / 2).
    for _ in 0..2 {
        let err = normal_cdf(x) - p;
        if err == 0.0 {
            break;
        }
        let pdf = normal_pdf(x);
        if pdf == 0.0 {
            break;
        }
        let r = err / pdf;
        x -= r / (1.0 + 0.5 * x * r);
    }
    Ok(x)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_68;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

// Cody-style rational approximations for erf/erfc. Relative error is a few
// ulps over the whole range, far inside what the CDF contract needs.
fn erf(x: f64) -> f64 {
    if x.abs() < 0.5 {
        erf_small(x)
    } else {
        let sign = if x < 0.0 { -1.0 } else { 1.0 };
        sign * (1.0 - erfc_core(x.abs()))
    }
}

fn erfc(x: f64) -> f64 {
    if x < -0.5 {
        2.0 - erfc_core(-x)
    } else if x < 0.5 {
        1.0 - erf_small(x)
    } else {
        erfc_core(x)
    }
}

/// erf on |x| < 0.5 via the rational approximation erf(x) ~ x * P(x^2)/Q(x^2).
fn erf_small(x: f64) -> f64 {
    const P: [f64; 5] = [
        3.209377589138469472562e3,
        3.774852376853020208137e2,
        1.138641541510501556495e2,
        3.161123743870565596947e0,
        1.857777061846031526730e-1,
    ];
    const Q: [f64; 5] = [
        2.844236833439170622273e3,
        1.282616526077372275645e3,
        2.440246379344441733056e2,
        2.360129095234412093499e1,
        1.0,
    ];
    let z = x * x;
    let mut num = P[4];
    let mut den = Q[4];
    for i in (0..4).rev() {
        num = num * z + P[i];
        den = den * z + Q[i];
    }
    x * num / den
}

/// erfc on x >= 0.5.
fn erfc_core(x: f64) -> f64 {
    debug_assert!(x >= 0.5);
    if x > 26.5 {
        return 0.0; // below the smallest positive normal
    }
    let z = (-x * x).exp();
    if x < 4.0 {
        const P: [f64; 9] = [
            1.23033935479799725272e3,
            2.05107837782607146532e3,
            1.71204761263407058314e3,
            8.81952221241769090411e2,
            2.98635138197400131132e2,
            6.61191906371416294775e1,
            8.88314979438837594118e0,
            5.64188496988670089180e-1,
            2.15311535474403846343e-8,
        ];
        const Q: [f64; 9] = [
            1.23033935480374942043e3,
            3.43936767414372163696e3,
            4.36261909014324715820e3,
            3.29079923573345962678e3,
            1.62138957456669018874e3,
            5.37181101862009857509e2,
            1.17693950891312499305e2,
            1.57449261107098347253e1,
            1.0,
        ];
        let mut num = P[8];
        let mut den = Q[8];
        for i in (0..8).rev() {
            num = num * x + P[i];
            den = den * x + Q[i];
        }
        z * num / den
    } else {
        const R: [f64; 6] = [
            -6.58749161529837803157e-4,
            -1.60837851487422766278e-2,
            -1.25781726111229246204e-1,
            -3.60344899949804439429e-1,
            -3.05326634961232344035e-1,
            -1.63153871373020978498e-2,
        ];
        const S: [f64; 6] = [
            2.33520497626869185443e-3,
            6.05183413124413191178e-2,
            5.27905102951428412248e-1,
            1.87295284992346047209e0,
            2.56852019228982242072e0,
            1.0,
        ];
        let inv2 = 1.0 / (x * x);
        let mut num = R[5];
        let mut den = S[5];
        for i in (0..5).rev() {
            num = num * inv2 + R[i];
            den = den * inv2 + S[i];
        }
        const INV_SQRT_PI: f64 = 0.564_189_583_547_756_29;
        z * (INV_SQRT_PI + inv2 * num / den) / x
    }
}

/// Acklam's rational approximation to the normal quantile (|error| < 1.2e-9
/// before refinement).
fn acklam_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239e0,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838e0,
        -2.549732539343734e0,
        4.374664141464968e0,
        2.938163982698783e0,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996e0,
        3.754408661907416e0,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Guards for the sample-size formula, which is undefined or explosive when
/// the posterior effect estimate is weak or negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PivotalConfig {
    /// One-sided test size.
    pub alpha: f64,
    /// Type-II error rate (power is `1 - beta`).
    pub beta: f64,
    /// Smallest effect the power calculation is allowed to assume.
    pub delta_floor: f64,
    /// Hard cap on the confirmatory-trial size.
    pub n_max: u32,
}

impl Default for PivotalConfig {
    fn default() -> Self {
        PivotalConfig {
            alpha: 0.05,
            beta: 0.2,
            delta_floor: 0.05,
            n_max: 2000,
        }
    }
}

impl PivotalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must be in (0,1): {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::config(format!("beta must be in (0,1): {}", self.beta)));
        }
        if !(self.delta_floor > 0.0) {
            return Err(Error::config(format!(
                "delta_floor must be positive: {}",
                self.delta_floor
            )));
        }
        if self.n_max < 2 {
            return Err(Error::config(format!("n_max must be >= 2: {}", self.n_max)));
        }
        Ok(())
    }
}

/// Result of the confirmatory-trial sizing for a given posterior summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PivotalResult {
    /// Total patients, even, split equally between placebo and the ED95 arm.
    pub n_total: u32,
    /// Effect size the power calculation assumed.
    pub delta_star: f64,
    /// Posterior predictive probability of rejecting the null.
    pub rejection_prob: f64,
}

/// Confirmatory-trial sample size for a posterior summary of the ED95
/// effect.
///
/// Powers the test at `delta_star = max(delta95_mean - delta95_sd,
/// delta_floor)`; the bound `4 ((q_alpha + q_beta) / delta_star)^2` is
/// rounded up to the next even integer (half per arm) and capped at `n_max`.
pub fn sample_size(delta95_mean: f64, delta95_sd: f64, cfg: &PivotalConfig) -> (u32, f64) {
    let delta_star = (delta95_mean - delta95_sd).max(cfg.delta_floor);
    let q_alpha = normal_quantile(1.0 - cfg.alpha).expect("alpha validated");
    let q_beta = normal_quantile(1.0 - cfg.beta).expect("beta validated");
    let bound = 4.0 * ((q_alpha + q_beta) / delta_star).powi(2);
    let n = next_even_at_least(bound).min(cfg.n_max as u64).max(2) as u32;
    (n & !1, delta_star)
}

fn next_even_at_least(x: f64) -> u64 {
    let n = x.ceil().max(2.0) as u64;
    if n % 2 == 0 {
        n
    } else {
        n + 1
    }
}

/// Posterior predictive probability that the confirmatory trial of total
/// size `n` rejects the null, given the posterior mean and sd of the ED95
/// effect:
///
///   Phi[ (mean * sqrt(n/4) - q_alpha) / sqrt(1 + (n/4) sd^2) ]
///
/// `n` is real-valued so the identity with the unrounded sample size can be
/// checked exactly; callers normally pass the even integer size.
pub fn rejection_prob(delta95_mean: f64, delta95_sd: f64, n: f64, alpha: f64) -> f64 {
    let q_alpha = normal_quantile(1.0 - alpha).expect("alpha in (0,1)");
    let half_se = (n / 4.0).sqrt();
    normal_cdf((delta95_mean * half_se - q_alpha) / (1.0 + n / 4.0 * delta95_sd * delta95_sd).sqrt())
}

/// Sample size and rejection probability bundled, as used by the
/// dose-finding terminal utility.
pub fn pivotal_result(delta95_mean: f64, delta95_sd: f64, cfg: &PivotalConfig) -> PivotalResult {
    let (n_total, delta_star) = sample_size(delta95_mean, delta95_sd, cfg);
    let rejection_prob = rejection_prob(delta95_mean, delta95_sd, n_total as f64, cfg.alpha);
    PivotalResult {
        n_total,
        delta_star,
        rejection_prob,
    }
}

// Re-export erf for the posterior quadrature oracle in tests.
#[doc(hidden)]
pub fn erf_impl(x: f64) -> f64 {
    erf(x)
}
