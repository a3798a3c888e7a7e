//! Constrained maximum penalized likelihood by alternating a Newton step in
//! `beta` with a multiplicative-iterative (MI) step in `theta`, each guarded
//! by Armijo backtracking.

use crate::likelihood::{Infeasible, LikelihoodError, ModelState, Problem};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error("initial state is infeasible: {0}")]
    InfeasibleStart(Infeasible),
    #[error("invalid fit options: {0}")]
    InvalidOptions(String),
}

/// How `theta` is initialised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ThetaInit {
    /// Uniform weights scaled so `H0(median endpoint) = ln 2`.
    MedianCumulative,
    Uniform(f64),
    Given(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_outer_iter: usize,
    /// Absolute KKT tolerance; `None` uses `1e-6 (1 + |Phi| / n)`.
    pub kkt_tol: Option<f64>,
    pub armijo_c: f64,
    pub armijo_shrink: f64,
    pub max_halvings: usize,
    pub xi: f64,
    pub theta_init: ThetaInit,
    pub beta_init: Option<Vec<f64>>,
    /// Follow each Newton/MI pair with a projected Newton step on the free
    /// coordinates of `(theta, beta)`.
    pub accelerate: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_outer_iter: 5000,
            kkt_tol: None,
            armijo_c: 1e-4,
            armijo_shrink: 0.5,
            max_halvings: 50,
            xi: 1e-6,
            theta_init: ThetaInit::MedianCumulative,
            beta_init: None,
            accelerate: true,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |msg: &str| Err(FitError::InvalidOptions(msg.to_string()));
        if let Some(tol) = self.kkt_tol {
            if !(tol > 0.0) {
                return bad("kkt_tol must be positive");
            }
        }
        if !(self.armijo_shrink > 0.0 && self.armijo_shrink < 1.0) {
            return bad("armijo_shrink must lie in (0, 1)");
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return bad("armijo_c must lie in (0, 1)");
        }
        if !(self.xi >= 0.0) {
            return bad("xi must be nonnegative");
        }
        Ok(())
    }
}

/// Diagnostics of one line-searched step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub omega: f64,
    pub halvings: usize,
    /// The search ran out of halvings and no step was taken.
    pub exhausted: bool,
    /// A ridge or gradient fallback replaced the plain Newton direction.
    pub regularized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub state: ModelState,
    pub converged: bool,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
    /// Smallest `theta_u` over the states visited in each iteration, aligned
    /// with `objective_trace`.
    pub min_theta_trace: Vec<f64>,
    pub kkt_residual: f64,
    pub kkt_tol: f64,
    pub active_set: Vec<usize>,
    pub exhausted_searches: usize,
    pub regularized_steps: usize,
    /// Convergence was declared at a stall with the residual below
    /// [`resolution_floor`] rather than below `kkt_tol`.
    pub precision_limited: bool,
}

impl FitResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

/// Threshold below which `theta_u` counts as sitting on the boundary.
pub fn boundary_eps(theta: &[f64]) -> f64 {
    1e-8 * theta.iter().copied().fold(1.0, f64::max)
}

/// Default KKT tolerance for an objective value over `n` observations.
pub fn default_kkt_tol(objective: f64, n: usize) -> f64 {
    1e-6 * (1.0 + objective.abs() / n.max(1) as f64)
}

/// Smallest gradient a line search can still act on: a step removing
/// gradient `g` along curvature `c` gains `g^2 / 2c`, which must exceed the
/// rounding of `Phi`. The penalty curvature is bounded by `2 lambda m max|R|`.
pub fn resolution_floor(problem: &Problem, lambda: f64, objective: f64) -> f64 {
    let curvature = 2.0 * lambda * problem.m() as f64 * problem.penalty().max_abs();
    (2.0 * curvature * (1.0 + objective.abs()) * f64::EPSILON).sqrt()
}

/// KKT residual from gradients: largest `|grad|` over `beta` and free
/// `theta`, and largest positive part of the gradient over boundary `theta`.
pub fn kkt_residual_from(theta: &[f64], grad_theta: &[f64], grad_beta: &[f64]) -> f64 {
    let eps = boundary_eps(theta);
    let th = theta.iter().zip(grad_theta).map(|(t, g)| {
        if *t > eps {
            g.abs()
        } else {
            g.max(0.0)
        }
    });
    grad_beta.iter().map(|g| g.abs()).chain(th).fold(0.0, f64::max)
}

pub fn kkt_residual(problem: &Problem, state: &ModelState) -> Result<f64, FitError> {
    let (gb, gt) = problem.score(state)?;
    Ok(kkt_residual_from(&state.theta, &gt, &gb))
}

/// Indices with `theta_u` at the boundary.
pub fn boundary_set(theta: &[f64]) -> Vec<usize> {
    let eps = boundary_eps(theta);
    (0..theta.len()).filter(|&u| theta[u] <= eps).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Backtracks from `omega = 1` until `Phi(trial(omega)) >= phi0 + c omega slope`.
fn armijo<F: Fn(f64) -> ModelState>(
    problem: &Problem,
    phi0: f64,
    slope: f64,
    opts: &FitOptions,
    trial: F,
) -> (ModelState, f64, StepInfo) {
    let mut omega = 1.0;
    for halvings in 0..=opts.max_halvings {
        let candidate = trial(omega);
        let phi = problem.objective(&candidate);
        if phi.is_finite() && phi >= phi0 + opts.armijo_c * omega * slope {
            let info = StepInfo {
                omega,
                halvings,
                exhausted: false,
                regularized: false,
            };
            return (candidate, phi, info);
        }
        omega *= opts.armijo_shrink;
    }
    let info = StepInfo {
        omega: 0.0,
        halvings: opts.max_halvings,
        exhausted: true,
        regularized: false,
    };
    (trial(0.0), phi0, info)
}

/// Ascent direction `(-H)^{-1} g` for a symmetric block `H`, with ridge
/// regularisation and a scaled-gradient fallback.
fn newton_direction(hess: &DMatrix<f64>, grad: &[f64]) -> (Vec<f64>, bool) {
    let p = grad.len();
    let neg = -hess;
    let g = DVector::from_column_slice(grad);
    if let Some(ch) = neg.clone().cholesky() {
        let d = ch.solve(&g);
        if d.iter().all(|v| v.is_finite()) {
            return (d.as_slice().to_vec(), false);
        }
    }
    let scale = (neg.trace() / p as f64).abs().max(f64::MIN_POSITIVE);
    let mut ridge = 1e-8;
    while ridge <= 1e-2 * (1.0 + 1e-12) {
        let shifted = &neg + DMatrix::identity(p, p) * (ridge * scale);
        if let Some(ch) = shifted.cholesky() {
            let d = ch.solve(&g);
            if d.iter().all(|v| v.is_finite()) {
                return (d.as_slice().to_vec(), true);
            }
        }
        ridge *= 10.0;
    }
    (g.iter().map(|v| v / scale).collect(), true)
}

/// One damped Newton update of `beta` with `theta` held fixed.
pub fn newton_beta_step(
    problem: &Problem,
    state: &ModelState,
    opts: &FitOptions,
) -> Result<(ModelState, StepInfo), FitError> {
    let phi0 = problem.objective(state);
    let (grad, _) = problem.score(state)?;
    if grad.iter().all(|g| *g == 0.0) {
        let info = StepInfo {
            omega: 1.0,
            halvings: 0,
            exhausted: false,
            regularized: false,
        };
        return Ok((state.clone(), info));
    }
    let hess = problem.beta_hessian(state)?;
    let (dir, regularized) = newton_direction(&hess, &grad);
    let slope = dot(&grad, &dir);
    let (next, _, mut info) = armijo(problem, phi0, slope, opts, |omega| {
        let mut s = state.clone();
        for (b, d) in s.beta.iter_mut().zip(&dir) {
            *b += omega * d;
        }
        s
    });
    info.regularized = regularized;
    Ok((next, info))
}

/// One MI update `theta + omega D grad` with `D = diag(theta_u / d_u)`.
pub fn mi_theta_step(
    problem: &Problem,
    state: &ModelState,
    opts: &FitOptions,
) -> Result<(ModelState, StepInfo), FitError> {
    let phi0 = problem.objective(state);
    let parts = problem.score_parts(state)?;
    let step: Vec<f64> = state
        .theta
        .iter()
        .zip(&parts.grad_theta)
        .zip(&parts.denom)
        .map(|((t, g), d)| {
            let d = d + opts.xi;
            if *t == 0.0 || d <= 0.0 {
                0.0
            } else {
                t / d * g
            }
        })
        .collect();
    let slope = dot(&parts.grad_theta, &step);
    let (next, _, info) = armijo(problem, phi0, slope, opts, |omega| {
        let mut s = state.clone();
        for (t, d) in s.theta.iter_mut().zip(&step) {
            *t = (*t + omega * d).max(0.0);
        }
        s
    });
    Ok((next, info))
}

/// `A^{-1} g` for symmetric `A` with eigenvalues replaced by their absolute
/// values (floored relative to the largest), so the result is an ascent
/// direction even where the objective is not concave.
fn modified_newton(a: DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let eig = a.symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let floor = (64.0 * f64::EPSILON * top).max(f64::MIN_POSITIVE);
    let coords = eig.eigenvectors.transpose() * g;
    let scaled = DVector::from_iterator(
        coords.len(),
        coords
            .iter()
            .zip(eig.eigenvalues.iter())
            .map(|(c, l)| c / l.abs().max(floor)),
    );
    &eig.eigenvectors * scaled
}

/// Armijo search along `state + omega delta` with `theta` clipped at zero,
/// starting from `omega_max`. `delta` is indexed like `eta = (theta, beta)`.
fn search_step(
    problem: &Problem,
    state: &ModelState,
    grad: &DVector<f64>,
    delta: &DVector<f64>,
    omega_max: f64,
    opts: &FitOptions,
) -> Option<(ModelState, f64, StepInfo)> {
    let m = problem.m();
    let phi0 = problem.objective(state);
    let mut omega = omega_max;
    for halvings in 0..=opts.max_halvings.min(30) {
        let mut cand = state.clone();
        for (k, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            if k < m {
                cand.theta[k] = (state.theta[k] + omega * d).max(0.0);
            } else {
                cand.beta[k - m] += omega * d;
            }
        }
        let gain: f64 = (0..delta.len())
            .map(|k| {
                let moved = if k < m {
                    cand.theta[k] - state.theta[k]
                } else {
                    cand.beta[k - m] - state.beta[k - m]
                };
                grad[k] * moved
            })
            .sum();
        let phi = problem.objective(&cand);
        if phi.is_finite() && phi >= phi0 && phi >= phi0 + opts.armijo_c * gain {
            let info = StepInfo {
                omega,
                halvings,
                exhausted: false,
                regularized: false,
            };
            return Some((cand, phi, info));
        }
        omega *= opts.armijo_shrink;
    }
    None
}

/// Newton step with the `bound` coordinates of `theta` sent to zero:
/// `delta_Z = -theta_Z` and `(-H_FF) delta_F = g_F + H_FZ delta_Z`.
fn bounded_newton(
    hess: &DMatrix<f64>,
    grad: &DVector<f64>,
    theta: &[f64],
    free: &[usize],
    bound: &[usize],
) -> Option<DVector<f64>> {
    let mut delta = DVector::zeros(grad.len());
    for &z in bound {
        delta[z] = -theta[z];
    }
    if free.is_empty() {
        return Some(delta);
    }
    let sub = DMatrix::from_fn(free.len(), free.len(), |i, j| -hess[(free[i], free[j])]);
    let rhs = DVector::from_iterator(
        free.len(),
        free.iter().map(|&f| {
            grad[f] + bound.iter().map(|&z| hess[(f, z)] * delta[z]).sum::<f64>()
        }),
    );
    let dir = modified_newton(sub, &rhs);
    if !dir.iter().all(|v| v.is_finite()) {
        return None;
    }
    for (i, &f) in free.iter().enumerate() {
        delta[f] = dir[i];
    }
    Some(delta)
}

/// Projected Newton step on the joint parameter. Coordinates with `theta_u`
/// near zero and a negative gradient are projected onto the boundary and the
/// rest follow the Newton direction. Two searches are tried and the better
/// one kept: the full direction truncated just before the first `theta_u`
/// reaches zero, and the direction re-solved with every coordinate it would
/// drive negative sent to the boundary. A step is taken only if it passes the
/// Armijo test.
pub fn projected_newton_step(
    problem: &Problem,
    state: &ModelState,
    opts: &FitOptions,
) -> Result<(ModelState, StepInfo), FitError> {
    let skip = StepInfo {
        omega: 0.0,
        halvings: 0,
        exhausted: true,
        regularized: false,
    };
    let m = problem.m();
    let grad = problem.gradient(state)?;
    let theta = &state.theta;
    let max_theta = theta.iter().copied().fold(0.0, f64::max);
    let spread = (0..m)
        .map(|u| (theta[u] - (theta[u] + grad[u]).max(0.0)).abs())
        .fold(0.0, f64::max);
    let eps = (1e-2 * max_theta).min(spread).max(boundary_eps(theta));
    let mut free: Vec<usize> = (0..grad.len())
        .filter(|&k| k >= m || theta[k] > eps || grad[k] > 0.0)
        .collect();
    let mut bound: Vec<usize> = (0..m)
        .filter(|&u| !free.contains(&u) && theta[u] > 0.0)
        .collect();
    let hess = problem.hessian(state)?;
    let Some(full) = bounded_newton(&hess, &grad, theta, &free, &bound) else {
        return Ok((state.clone(), skip));
    };
    let mut best: Option<(ModelState, f64, StepInfo)> = None;

    // Ratio test along the full direction.
    let ratio = free
        .iter()
        .filter(|&&k| k < m && full[k] < 0.0)
        .map(|&k| theta[k] / -full[k])
        .fold(f64::INFINITY, f64::min);
    let omega_max = if ratio < 1.0 { 0.995 * ratio } else { 1.0 };
    if omega_max > 1e-12 {
        best = search_step(problem, state, &grad, &full, omega_max, opts);
    }

    // Coordinates the step would drive below zero join the boundary set and
    // the rest is re-solved.
    let mut delta = full;
    loop {
        let crossing: Vec<usize> = free
            .iter()
            .copied()
            .filter(|&k| k < m && theta[k] + delta[k] <= 0.0)
            .collect();
        if crossing.is_empty() {
            break;
        }
        free.retain(|k| !crossing.contains(k));
        bound.extend(crossing.into_iter().filter(|&k| theta[k] > 0.0));
        match bounded_newton(&hess, &grad, theta, &free, &bound) {
            Some(d) => delta = d,
            None => return Ok(best.map_or((state.clone(), skip), |b| (b.0, b.2))),
        }
    }
    if let Some(reduced) = search_step(problem, state, &grad, &delta, 1.0, opts) {
        if best.as_ref().is_none_or(|b| reduced.1 > b.1) {
            best = Some(reduced);
        }
    }
    Ok(match best {
        Some((s, _, info)) => (s, info),
        None => (state.clone(), skip),
    })
}

/// Starting `theta` for a problem.
pub fn initial_theta(problem: &Problem, init: &ThetaInit) -> Result<Vec<f64>, FitError> {
    let m = problem.m();
    match init {
        ThetaInit::Given(theta) => {
            if theta.len() != m {
                return Err(LikelihoodError::ThetaLength {
                    expected: m,
                    found: theta.len(),
                }
                .into());
            }
            Ok(theta.clone())
        }
        ThetaInit::Uniform(v) => Ok(vec![*v; m]),
        ThetaInit::MedianCumulative => {
            let cum: f64 = problem
                .system()
                .cumulative_all(problem.median_endpoint())
                .iter()
                .sum();
            let c = if cum > 0.0 { 2f64.ln() / cum } else { 1.0 };
            Ok(vec![c; m])
        }
    }
}

/// Maximises `Phi = l - lambda theta' R theta` subject to `theta >= 0`.
pub fn fit(problem: &Problem, lambda: f64, opts: &FitOptions) -> Result<FitResult, FitError> {
    opts.validate()?;
    let beta = match &opts.beta_init {
        Some(b) => b.clone(),
        None => vec![0.0; problem.p()],
    };
    let theta = initial_theta(problem, &opts.theta_init)?;
    let mut state = ModelState::new(beta, theta, lambda)?;
    problem.check_state(&state)?;
    if let Err(why) = problem.try_log_likelihood(&state) {
        return Err(FitError::InfeasibleStart(why));
    }
    let n = problem.n();
    let mut phi = problem.objective(&state);
    let mut trace = vec![phi];
    let min_theta = |s: &ModelState| s.theta.iter().copied().fold(f64::INFINITY, f64::min);
    let mut theta_trace = vec![min_theta(&state)];
    let mut exhausted = 0;
    let mut regularized = 0;
    let mut residual = kkt_residual(problem, &state)?;
    let tol_for = |phi: f64| opts.kkt_tol.unwrap_or_else(|| default_kkt_tol(phi, n));
    let mut converged = residual < tol_for(phi);
    let mut iterations = 0;
    let mut precision_limited = false;
    while !converged && iterations < opts.max_outer_iter {
        iterations += 1;
        let before = state.clone();
        if problem.p() > 0 {
            let (next, info) = newton_beta_step(problem, &state, opts)?;
            exhausted += info.exhausted as usize;
            regularized += info.regularized as usize;
            state = next;
        }
        let (next, info) = mi_theta_step(problem, &state, opts)?;
        exhausted += info.exhausted as usize;
        state = next;
        let mut lowest = min_theta(&state);
        if opts.accelerate {
            state = projected_newton_step(problem, &state, opts)?.0;
            lowest = lowest.min(min_theta(&state));
        }
        phi = problem.objective(&state);
        trace.push(phi);
        theta_trace.push(lowest);
        residual = kkt_residual(problem, &state)?;
        converged = residual < tol_for(phi);
        if !converged && state == before {
            let floor = resolution_floor(problem, lambda, phi);
            if residual < floor {
                converged = true;
                precision_limited = true;
            } else {
                log::debug!("optimizer stalled after {iterations} iterations");
            }
            break;
        }
    }
    Ok(FitResult {
        active_set: boundary_set(&state.theta),
        kkt_tol: tol_for(phi),
        state,
        converged,
        iterations,
        objective_trace: trace,
        min_theta_trace: theta_trace,
        kkt_residual: residual,
        exhausted_searches: exhausted,
        regularized_steps: regularized,
        precision_limited,
    })
}
