//! Nonnegative basis families for the baseline hazard.
//!
//! Two families are supported:
//!
//! * M-splines of order `o` on a clamped knot vector. Each M-spline integrates
//!   to one over its support, and its cumulative (the I-spline) is evaluated
//!   in closed form as a tail sum of order `o + 1` B-splines.
//! * Truncated Gaussian densities centred at the knots, normalised over the
//!   knot range so that each cumulative reaches exactly one at the right
//!   boundary.
//!
//! Basis indices are zero-based throughout: `u` ranges over `0..m`.
//! For M-splines `m = n_interior + order`.

use crate::quad;
use crate::survdata::{CensorKind, Dataset};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

/// Relative slack when checking that `t` lies in the knot range.
const RANGE_SLACK: f64 = 1e-12;
/// Lower bound on Gaussian scales, relative to the knot range.
pub const GAUSSIAN_SCALE_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("endpoint pool has {found} distinct values, need at least {needed}")]
    TooFewDistinct { needed: usize, found: usize },
    #[error("knots must be strictly increasing and finite")]
    KnotsNotIncreasing,
    #[error("at least one interior knot must be requested")]
    NoInteriorKnots,
    #[error("basis index {u} out of range (m = {m})")]
    IndexOutOfRange { u: usize, m: usize },
    #[error("time {t} outside basis range [{lo}, {hi}]")]
    OutsideSupport { t: f64, lo: f64, hi: f64 },
    #[error("M-spline order must be at least 1")]
    InvalidOrder,
    #[error("Gaussian scale must be positive, got {0}")]
    InvalidScale(f64),
    #[error("expected {expected} Gaussian scales, got {found}")]
    ScaleCount { expected: usize, found: usize },
    #[error("coverage fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("endpoint pool is empty")]
    EmptyPool,
    #[error("operation requires the {0} basis family")]
    WrongFamily(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotSequence {
    knots: Vec<f64>,
}

impl KnotSequence {
    pub fn new(knots: Vec<f64>) -> Result<Self, BasisError> {
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(BasisError::KnotsNotIncreasing);
        }
        if knots.len() < 2 {
            return Err(BasisError::KnotsNotIncreasing);
        }
        Ok(KnotSequence { knots })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn n_interior(&self) -> usize {
        self.knots.len() - 2
    }

    pub fn boundary(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }
}

/// Type-7 sample quantile (linear interpolation between order statistics)
/// of an ascending slice.
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty slice");
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

fn distinct_count(sorted: &[f64]) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    1 + sorted.windows(2).filter(|w| w[1] > w[0]).count()
}

fn collapse(mut knots: Vec<f64>, requested: usize) -> Result<KnotSequence, BasisError> {
    knots.dedup_by(|b, a| (*b - *a).abs() <= RANGE_SLACK * a.abs().max(b.abs()));
    if knots.len() - 2 < requested {
        log::warn!(
            "collapsed duplicate knots: {} interior knots instead of {}",
            knots.len().saturating_sub(2),
            requested
        );
    }
    KnotSequence::new(knots)
}

/// Knots at equally spaced quantiles of the (ascending) endpoint pool with
/// boundary knots at the pool extremes. Duplicate quantiles are collapsed.
pub fn quantile_knots(pool: &[f64], n_interior: usize) -> Result<KnotSequence, BasisError> {
    if n_interior == 0 {
        return Err(BasisError::NoInteriorKnots);
    }
    let mut sorted = pool.to_vec();
    sorted.sort_by(f64::total_cmp);
    let found = distinct_count(&sorted);
    if found < n_interior + 2 {
        return Err(BasisError::TooFewDistinct {
            needed: n_interior + 2,
            found,
        });
    }
    let knots = (0..=n_interior + 1)
        .map(|k| quantile(&sorted, k as f64 / (n_interior + 1) as f64))
        .collect();
    collapse(knots, n_interior)
}

/// Quantile knots for a dataset. When a left-censored observation ends at
/// the smallest pooled endpoint the lower boundary moves to zero, since a
/// hazard supported on `[min, max]` would give that observation probability 0.
pub fn data_knots(data: &Dataset, n_interior: usize) -> Result<KnotSequence, BasisError> {
    let knots = quantile_knots(&data.endpoint_pool(), n_interior)?;
    Ok(anchor_at_origin(data, knots))
}

/// Moves the lower boundary knot to zero if some left-censored observation
/// would otherwise have zero probability.
pub fn anchor_at_origin(data: &Dataset, knots: KnotSequence) -> KnotSequence {
    let lo = knots.boundary().0;
    let needs = data
        .observations()
        .iter()
        .any(|o| o.kind == CensorKind::Left && o.t_right <= lo);
    if !needs || lo <= 0.0 {
        return knots;
    }
    log::info!("left-censored observation at the first knot {lo}; lower boundary moved to 0");
    let mut k = knots.knots;
    k[0] = 0.0;
    KnotSequence { knots: k }
}

/// Equally spaced interior knots between the pool extremes.
pub fn equidistant_knots(lo: f64, hi: f64, n_interior: usize) -> Result<KnotSequence, BasisError> {
    if n_interior == 0 {
        return Err(BasisError::NoInteriorKnots);
    }
    let step = (hi - lo) / (n_interior + 1) as f64;
    KnotSequence::new((0..=n_interior + 1).map(|k| lo + k as f64 * step).collect())
}

/// Per-knot Gaussian scales: the smallest `sigma` such that
/// `[knot - 2 sigma, knot + 2 sigma]` holds at least a fraction of the pool
/// (`zeta_interior` for interior knots, `zeta_boundary` for the two ends),
/// floored at `1e-3` of the knot range.
pub fn gaussian_scales(
    pool: &[f64],
    knots: &KnotSequence,
    zeta_interior: f64,
    zeta_boundary: f64,
) -> Result<Vec<f64>, BasisError> {
    for z in [zeta_interior, zeta_boundary] {
        if !(z > 0.0 && z < 1.0) {
            return Err(BasisError::InvalidFraction(z));
        }
    }
    if pool.is_empty() {
        return Err(BasisError::EmptyPool);
    }
    let (lo, hi) = knots.boundary();
    let floor = GAUSSIAN_SCALE_FLOOR * (hi - lo);
    let last = knots.knots().len() - 1;
    Ok(knots
        .knots()
        .iter()
        .enumerate()
        .map(|(u, &centre)| {
            let zeta = if u == 0 || u == last {
                zeta_boundary
            } else {
                zeta_interior
            };
            let mut dist: Vec<f64> = pool.iter().map(|a| (a - centre).abs()).collect();
            dist.sort_by(f64::total_cmp);
            let need = ((zeta * dist.len() as f64 - 1e-9).ceil() as usize).clamp(1, dist.len());
            (dist[need - 1] / 2.0).max(floor)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BasisFamily {
    MSpline { order: usize },
    Gaussian { scales: Vec<f64> },
}

/// A knot sequence together with a basis family. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSystem {
    family: BasisFamily,
    knots: KnotSequence,
    /// Clamped knot vector for the order `o` B-splines (boundary multiplicity `o`).
    padded: Vec<f64>,
    /// Clamped knot vector for the order `o + 1` B-splines used by I-splines.
    extended: Vec<f64>,
    /// Truncation masses of the Gaussian family.
    masses: Vec<f64>,
}

fn pad(knots: &[f64], extra: usize) -> Vec<f64> {
    let (lo, hi) = (knots[0], knots[knots.len() - 1]);
    let mut v = vec![lo; extra];
    v.extend_from_slice(knots);
    v.extend(std::iter::repeat_n(hi, extra));
    v
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Index `s` of the knot span containing `t` for B-splines of order `order`
/// on a clamped knot vector. `t` equal to the right boundary maps to the last
/// nonempty span.
fn find_span(knots: &[f64], order: usize, t: f64) -> usize {
    let count = knots.partition_point(|&k| k <= t);
    count
        .saturating_sub(1)
        .clamp(order - 1, knots.len() - order - 1)
}

/// Values of the `order` nonzero B-splines `B_{span-order+1..=span}` at `t`.
fn bspline_local(knots: &[f64], span: usize, order: usize, t: f64) -> Vec<f64> {
    let mut n = vec![0.0; order];
    let mut left = vec![0.0; order];
    let mut right = vec![0.0; order];
    n[0] = 1.0;
    for j in 1..order {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    n
}

/// All `knots.len() - order` B-splines of `order` at `t`, where spans are
/// located as for the clamping order `clamp`.
fn bspline_all(knots: &[f64], clamp: usize, order: usize, t: f64) -> Vec<f64> {
    let mut out = vec![0.0; knots.len() - order];
    let span = find_span(knots, clamp, t);
    let local = bspline_local(knots, span, order, t);
    for (r, v) in local.into_iter().enumerate() {
        out[span + 1 - order + r] = v;
    }
    out
}

/// Derivative of order `nder` of every B-spline of `order`.
fn bspline_deriv_all(knots: &[f64], clamp: usize, order: usize, t: f64, nder: usize) -> Vec<f64> {
    if nder == 0 {
        return bspline_all(knots, clamp, order, t);
    }
    if nder >= order {
        return vec![0.0; knots.len() - order];
    }
    let lower = bspline_deriv_all(knots, clamp, order - 1, t, nder - 1);
    let k = order as f64 - 1.0;
    (0..knots.len() - order)
        .map(|j| {
            let d1 = knots[j + order - 1] - knots[j];
            let d2 = knots[j + order] - knots[j + 1];
            let a = if d1 > 0.0 { lower[j] / d1 } else { 0.0 };
            let b = if d2 > 0.0 { lower[j + 1] / d2 } else { 0.0 };
            k * (a - b)
        })
        .collect()
}

impl BasisSystem {
    pub fn mspline(knots: KnotSequence, order: usize) -> Result<Self, BasisError> {
        if order == 0 {
            return Err(BasisError::InvalidOrder);
        }
        let padded = pad(knots.knots(), order - 1);
        let extended = pad(knots.knots(), order);
        Ok(BasisSystem {
            family: BasisFamily::MSpline { order },
            knots,
            padded,
            extended,
            masses: Vec::new(),
        })
    }

    pub fn gaussian(knots: KnotSequence, scales: Vec<f64>) -> Result<Self, BasisError> {
        if scales.len() != knots.knots().len() {
            return Err(BasisError::ScaleCount {
                expected: knots.knots().len(),
                found: scales.len(),
            });
        }
        if let Some(&bad) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(BasisError::InvalidScale(bad));
        }
        let (lo, hi) = knots.boundary();
        let masses = knots
            .knots()
            .iter()
            .zip(&scales)
            .map(|(&c, &s)| normal_cdf((hi - c) / s) - normal_cdf((lo - c) / s))
            .collect();
        Ok(BasisSystem {
            family: BasisFamily::Gaussian { scales },
            knots,
            padded: Vec::new(),
            extended: Vec::new(),
            masses,
        })
    }

    pub fn family(&self) -> &BasisFamily {
        &self.family
    }

    pub fn knots(&self) -> &KnotSequence {
        &self.knots
    }

    /// Number of basis functions.
    pub fn m(&self) -> usize {
        match &self.family {
            BasisFamily::MSpline { order } => self.knots.knots().len() + order - 2,
            BasisFamily::Gaussian { .. } => self.knots.knots().len(),
        }
    }

    pub fn range(&self) -> (f64, f64) {
        self.knots.boundary()
    }

    /// Support `[lo, hi]` of basis `u` (the whole range for Gaussians).
    pub fn support(&self, u: usize) -> (f64, f64) {
        match &self.family {
            BasisFamily::MSpline { order } => (self.padded[u], self.padded[u + order]),
            BasisFamily::Gaussian { .. } => self.range(),
        }
    }

    fn check(&self, u: usize, t: f64) -> Result<(), BasisError> {
        let m = self.m();
        if u >= m {
            return Err(BasisError::IndexOutOfRange { u, m });
        }
        let (lo, hi) = self.range();
        let slack = RANGE_SLACK * (hi - lo).max(hi.abs());
        if !(t >= lo - slack && t <= hi + slack) {
            return Err(BasisError::OutsideSupport { t, lo, hi });
        }
        Ok(())
    }

    /// Basis value `psi_u(t)`; `t` must lie in the knot range.
    pub fn eval(&self, u: usize, t: f64) -> Result<f64, BasisError> {
        self.check(u, t)?;
        Ok(self.eval_all(t)[u])
    }

    /// Cumulative basis value `Psi_u(t)`; `t` must lie in the knot range.
    pub fn cumulative(&self, u: usize, t: f64) -> Result<f64, BasisError> {
        self.check(u, t)?;
        Ok(self.cumulative_all(t)[u])
    }

    /// Every `psi_u(t)`. Outside the knot range all values are zero.
    pub fn eval_all(&self, t: f64) -> Vec<f64> {
        let (lo, hi) = self.range();
        let m = self.m();
        if !(t >= lo && t <= hi) {
            return vec![0.0; m];
        }
        match &self.family {
            BasisFamily::MSpline { order } => {
                let o = *order;
                let b = bspline_all(&self.padded, o, o, t);
                b.iter()
                    .enumerate()
                    .map(|(u, v)| v * o as f64 / (self.padded[u + o] - self.padded[u]))
                    .collect()
            }
            BasisFamily::Gaussian { scales } => self
                .knots
                .knots()
                .iter()
                .zip(scales)
                .zip(&self.masses)
                .map(|((&c, &s), &mass)| normal_pdf((t - c) / s) / (s * mass))
                .collect(),
        }
    }

    /// Every `Psi_u(t)`: zero left of the range, one right of it.
    pub fn cumulative_all(&self, t: f64) -> Vec<f64> {
        let (lo, hi) = self.range();
        let m = self.m();
        if t <= lo {
            return vec![0.0; m];
        }
        if t >= hi {
            return vec![1.0; m];
        }
        match &self.family {
            BasisFamily::MSpline { order } => {
                let o = *order;
                // Psi_u = sum_{j > u} B_{j, o+1} on the extended knot vector.
                let b = bspline_all(&self.extended, o + 1, o + 1, t);
                let mut out = vec![0.0; m];
                let mut tail = 0.0;
                for u in (0..m).rev() {
                    tail += b[u + 1];
                    out[u] = if t >= self.padded[u + o] { 1.0 } else { tail.min(1.0) };
                }
                out
            }
            BasisFamily::Gaussian { scales } => self
                .knots
                .knots()
                .iter()
                .zip(scales)
                .zip(&self.masses)
                .map(|((&c, &s), &mass)| {
                    ((normal_cdf((t - c) / s) - normal_cdf((lo - c) / s)) / mass).clamp(0.0, 1.0)
                })
                .collect(),
        }
    }

    /// Every `psi_u''(t)` (zero outside the range).
    pub fn second_derivative_all(&self, t: f64) -> Vec<f64> {
        let (lo, hi) = self.range();
        let m = self.m();
        if !(t >= lo && t <= hi) {
            return vec![0.0; m];
        }
        match &self.family {
            BasisFamily::MSpline { order } => {
                let o = *order;
                let d = bspline_deriv_all(&self.padded, o, o, t, 2);
                d.iter()
                    .enumerate()
                    .map(|(u, v)| v * o as f64 / (self.padded[u + o] - self.padded[u]))
                    .collect()
            }
            BasisFamily::Gaussian { scales } => self
                .knots
                .knots()
                .iter()
                .zip(scales)
                .zip(&self.masses)
                .map(|((&c, &s), &mass)| {
                    let z = (t - c) / s;
                    normal_pdf(z) * (z * z - 1.0) / (s * s * s * mass)
                })
                .collect(),
        }
    }

    /// Roughness penalty matrix `r_uv = integral of psi_u'' psi_v''`.
    pub fn penalty_matrix(&self) -> PenaltyMatrix {
        let m = self.m();
        let mut r = DMatrix::zeros(m, m);
        match &self.family {
            BasisFamily::MSpline { order } if *order < 3 => {}
            BasisFamily::MSpline { order } => {
                // psi'' is a polynomial of degree o - 3 per span, so o - 2
                // Gauss nodes integrate the products exactly.
                let (nodes, weights) = quad::gauss_legendre(order - 2);
                for span in self.knots.knots().windows(2) {
                    let (a, b) = (span[0], span[1]);
                    let half = 0.5 * (b - a);
                    for (x, w) in nodes.iter().zip(&weights) {
                        let d2 = self.second_derivative_all(a + half * (x + 1.0));
                        for u in 0..m {
                            if d2[u] == 0.0 {
                                continue;
                            }
                            for v in 0..m {
                                r[(u, v)] += w * half * d2[u] * d2[v];
                            }
                        }
                    }
                }
            }
            BasisFamily::Gaussian { .. } => {
                let knots = self.knots.knots();
                let piecewise = |f: &dyn Fn(f64) -> f64, abs_tol: f64| -> f64 {
                    knots
                        .windows(2)
                        .map(|w| quad::integrate(f, w[0], w[1], 1e-12, abs_tol))
                        .sum()
                };
                let diag: Vec<f64> = (0..m)
                    .map(|u| piecewise(&|t| self.second_derivative_all(t)[u].powi(2), 0.0))
                    .collect();
                for u in 0..m {
                    r[(u, u)] = diag[u];
                    for v in 0..u {
                        let tol = 1e-12 * (diag[u] * diag[v]).sqrt();
                        let val = piecewise(
                            &|t| {
                                let d = self.second_derivative_all(t);
                                d[u] * d[v]
                            },
                            tol,
                        );
                        r[(u, v)] = val;
                        r[(v, u)] = val;
                    }
                }
            }
        }
        // Exact symmetry.
        let sym = (&r + r.transpose()) * 0.5;
        PenaltyMatrix(sym)
    }

    /// Coefficients representing the hazard `intercept + slope * t` exactly,
    /// when the family can (M-splines of order >= 2, or order 1 with zero slope).
    pub fn linear_coefficients(&self, intercept: f64, slope: f64) -> Option<Vec<f64>> {
        let BasisFamily::MSpline { order } = &self.family else {
            return None;
        };
        let o = *order;
        if o == 1 && slope != 0.0 {
            return None;
        }
        Some(
            (0..self.m())
                .map(|u| {
                    let greville = if o == 1 {
                        0.0
                    } else {
                        self.padded[u + 1..u + o].iter().sum::<f64>() / (o - 1) as f64
                    };
                    (intercept + slope * greville) * (self.padded[u + o] - self.padded[u])
                        / o as f64
                })
                .collect(),
        )
    }
}

fn expect_mspline(system: &BasisSystem) -> Result<(), BasisError> {
    match system.family {
        BasisFamily::MSpline { .. } => Ok(()),
        BasisFamily::Gaussian { .. } => Err(BasisError::WrongFamily("M-spline")),
    }
}

fn expect_gaussian(system: &BasisSystem) -> Result<(), BasisError> {
    match system.family {
        BasisFamily::Gaussian { .. } => Ok(()),
        BasisFamily::MSpline { .. } => Err(BasisError::WrongFamily("Gaussian")),
    }
}

/// M-spline value `psi_u(t)`.
pub fn mspline_eval(system: &BasisSystem, u: usize, t: f64) -> Result<f64, BasisError> {
    expect_mspline(system)?;
    system.eval(u, t)
}

/// I-spline value `Psi_u(t)`, the integral of the M-spline from the left boundary.
pub fn ispline_eval(system: &BasisSystem, u: usize, t: f64) -> Result<f64, BasisError> {
    expect_mspline(system)?;
    system.cumulative(u, t)
}

pub fn gaussian_eval(system: &BasisSystem, u: usize, t: f64) -> Result<f64, BasisError> {
    expect_gaussian(system)?;
    system.eval(u, t)
}

pub fn gaussian_cumulative(system: &BasisSystem, u: usize, t: f64) -> Result<f64, BasisError> {
    expect_gaussian(system)?;
    system.cumulative(u, t)
}

/// Symmetric positive semidefinite roughness penalty matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix(pub DMatrix<f64>);

impl PenaltyMatrix {
    pub fn zeros(m: usize) -> Self {
        PenaltyMatrix(DMatrix::zeros(m, m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// `R theta`.
    pub fn apply(&self, theta: &[f64]) -> Vec<f64> {
        let v = &self.0 * DVector::from_column_slice(theta);
        v.as_slice().to_vec()
    }

    /// `theta' R theta`.
    pub fn quadratic_form(&self, theta: &[f64]) -> f64 {
        self.apply(theta)
            .iter()
            .zip(theta)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.0.amax()
    }
}
