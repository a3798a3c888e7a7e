//! Automatic choice of the smoothing parameter by the Laplace-approximated
//! marginal likelihood, treating `theta ~ N(0, sigma2 R^-)` and iterating the
//! fixed-point update `sigma2 = theta' R theta / (m - nu)`.

use crate::basis::PenaltyMatrix;
use crate::inference::{detect_active, ActiveSet};
use crate::likelihood::{LikelihoodError, Problem};
use crate::optimizer::{boundary_eps, fit, FitError, FitOptions, FitResult};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SIGMA2_FLOOR: f64 = 1e-10;
pub const SIGMA2_CAP: f64 = 1e10;
/// `nu` closer than this to `m` saturates the update.
const SATURATION_GAP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmoothingError {
    #[error("penalty saturated: nu = {nu} is too close to m = {m}")]
    Saturated { nu: f64, m: usize },
    #[error("free block of G + Q is singular")]
    Singular,
    #[error("matrix dimensions do not match: {0}")]
    Dimension(String),
    #[error("invalid smoothing options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
}

/// Variance of the `theta` prior and its matching smoothing value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingState {
    pub sigma2: f64,
    pub lambda: f64,
    pub nu: f64,
    pub iteration: usize,
}

impl SmoothingState {
    /// State for a given `sigma2`, clamped to `[SIGMA2_FLOOR, SIGMA2_CAP]`.
    pub fn from_sigma2(sigma2: f64, nu: f64, iteration: usize) -> Self {
        let (sigma2, lambda) = paired(sigma2.clamp(SIGMA2_FLOOR, SIGMA2_CAP));
        SmoothingState {
            sigma2,
            lambda,
            nu,
            iteration,
        }
    }

    pub fn from_lambda(lambda: f64, nu: f64, iteration: usize) -> Self {
        Self::from_sigma2(0.5 / lambda, nu, iteration)
    }
}

/// Picks `(sigma2, lambda)` next to the requested variance such that
/// `lambda * 2 * sigma2 == 1` holds exactly in floating point.
pub fn paired(sigma2: f64) -> (f64, f64) {
    let mut s = sigma2;
    for k in 0..64 {
        let lambda = 1.0 / (2.0 * s);
        for l in [lambda, lambda.next_up(), lambda.next_down()] {
            if l * 2.0 * s == 1.0 {
                return (s, l);
            }
        }
        // alternate outward: +1, -2, +3, ... ulps
        for _ in 0..=k {
            s = if k % 2 == 0 { s.next_up() } else { s.next_down() };
        }
    }
    let p = sigma2.log2().round();
    (p.exp2(), (-p - 1.0).exp2())
}

/// `Q` in the `(beta, theta)` display layout: zero block then `R / sigma2`.
pub fn q_display(penalty: &PenaltyMatrix, sigma2: f64, p: usize) -> DMatrix<f64> {
    let m = penalty.dim();
    let mut q = DMatrix::zeros(p + m, p + m);
    q.view_mut((p, p), (m, m))
        .copy_from(&(penalty.matrix() / sigma2));
    q
}

/// Reorders a `(beta, theta)` matrix into the `(theta, beta)` order used by
/// the likelihood.
pub fn display_to_eta(a: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    let d = a.nrows();
    let m = d - p;
    let idx = |k: usize| if k < m { p + k } else { k - m };
    DMatrix::from_fn(d, d, |i, j| a[(idx(i), idx(j))])
}

/// `Q` in `(theta, beta)` order.
pub fn q_eta(penalty: &PenaltyMatrix, sigma2: f64, p: usize) -> DMatrix<f64> {
    display_to_eta(&q_display(penalty, sigma2, p), p)
}

fn restrict(a: &DMatrix<f64>, free: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(free.len(), free.len(), |i, j| a[(free[i], free[j])])
}

/// Model degrees of freedom `tr{U (U'(G + Q)U)^-1 U' Q}` where `g_hat` is the
/// negative log-likelihood Hessian in `(theta, beta)` order and `U` selects
/// the free coordinates.
pub fn model_df(
    g_hat: &DMatrix<f64>,
    penalty: &PenaltyMatrix,
    sigma2: f64,
    free: &[usize],
) -> Result<f64, SmoothingError> {
    let d = g_hat.nrows();
    let m = penalty.dim();
    if g_hat.ncols() != d || m > d || free.iter().any(|&k| k >= d) {
        return Err(SmoothingError::Dimension(format!(
            "G is {}x{}, penalty {m}x{m}",
            d,
            g_hat.ncols()
        )));
    }
    if free.is_empty() {
        return Ok(0.0);
    }
    let q = q_eta(penalty, sigma2, d - m);
    let a = restrict(&(g_hat + &q), free);
    let qf = restrict(&q, free);
    // tr{U A^-1 U' Q} = tr{A^-1 U' Q U}
    let lu = a.lu();
    let sol = lu.solve(&qf).ok_or(SmoothingError::Singular)?;
    let nu = sol.trace();
    if !nu.is_finite() {
        return Err(SmoothingError::Singular);
    }
    Ok(nu)
}

/// Fixed-point update `theta' R theta / (m - nu)`. Returns the clamped value
/// and whether the floor was hit because the numerator vanished.
pub fn sigma2_update(
    theta: &[f64],
    penalty: &PenaltyMatrix,
    nu: f64,
) -> Result<(f64, bool), SmoothingError> {
    let m = penalty.dim();
    if nu >= m as f64 - SATURATION_GAP {
        return Err(SmoothingError::Saturated { nu, m });
    }
    let num = penalty.quadratic_form(theta).max(0.0);
    if num == 0.0 {
        return Ok((SIGMA2_FLOOR, true));
    }
    let s = num / (m as f64 - nu);
    Ok((s.clamp(SIGMA2_FLOOR, SIGMA2_CAP), s < SIGMA2_FLOOR))
}

/// Laplace approximation of the log marginal likelihood of `sigma2`, with
/// the determinant taken over the free coordinates.
pub fn laplace_marginal(
    loglik: f64,
    theta: &[f64],
    g_hat: &DMatrix<f64>,
    penalty: &PenaltyMatrix,
    sigma2: f64,
    free: &[usize],
) -> f64 {
    let m = penalty.dim();
    let q = q_eta(penalty, sigma2, g_hat.nrows() - m);
    let a = restrict(&(g_hat + &q), free);
    let logdet = match a.clone().cholesky() {
        Some(c) => 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
        None => a.symmetric_eigen().eigenvalues.iter().map(|v| v.abs().ln()).sum(),
    };
    -0.5 * m as f64 * sigma2.ln() + loglik - penalty.quadratic_form(theta) / (2.0 * sigma2) - 0.5 * logdet
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingOptions {
    pub initial_lambda: f64,
    pub df_tol: f64,
    pub max_iter: usize,
    pub fit: FitOptions,
}

impl Default for SmoothingOptions {
    fn default() -> Self {
        SmoothingOptions {
            initial_lambda: 1.0,
            df_tol: 1e-2,
            max_iter: 50,
            fit: FitOptions::default(),
        }
    }
}

/// One pass of the loop: the fit at `lambda` and the quantities derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingStep {
    pub iteration: usize,
    pub sigma2: f64,
    pub lambda: f64,
    pub nu: f64,
    pub marginal_loglik: f64,
    pub active: usize,
    pub fit_converged: bool,
    pub fit_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoFit {
    pub fit: FitResult,
    /// Smoothing state of the returned fit.
    pub state: SmoothingState,
    pub trace: Vec<SmoothingStep>,
    /// `nu` changed by less than `df_tol` between the last two passes.
    pub stabilized: bool,
    /// The variance floor was hit at some pass.
    pub floored: bool,
    /// Whether the marginal likelihood was nondecreasing over the last three
    /// passes; reported, never enforced.
    pub marginal_monotone_tail: bool,
    pub active: ActiveSet,
}

/// Alternates fits at fixed `lambda` with the variance update until `nu`
/// stabilizes. Each inner fit starts from the default initial state so the
/// result at the selected `lambda` matches a direct fit at that value.
pub fn auto_fit(problem: &Problem, opts: &SmoothingOptions) -> Result<AutoFit, SmoothingError> {
    if !(opts.initial_lambda > 0.0 && opts.initial_lambda.is_finite()) {
        return Err(SmoothingError::InvalidOptions("initial_lambda must be positive".into()));
    }
    if !(opts.df_tol > 0.0) || opts.max_iter == 0 {
        return Err(SmoothingError::InvalidOptions(
            "df_tol must be positive and max_iter at least 1".into(),
        ));
    }
    let mut current = SmoothingState::from_lambda(opts.initial_lambda, f64::NAN, 0);
    let mut trace: Vec<SmoothingStep> = Vec::new();
    let mut best: Option<(f64, FitResult, SmoothingState, ActiveSet)> = None;
    let mut floored = false;
    let mut last: Option<(FitResult, SmoothingState, ActiveSet)> = None;
    let mut stabilized = false;
    for iteration in 1..=opts.max_iter {
        let res = fit(problem, current.lambda, &opts.fit)?;
        let (_, grad_theta) = problem.score(&res.state)?;
        let active = detect_active(
            &res.state.theta,
            &grad_theta,
            problem.p(),
            boundary_eps(&res.state.theta),
        );
        let g_hat = -problem.loglik_hessian(&res.state)?;
        let nu = model_df(&g_hat, problem.penalty(), current.sigma2, &active.free)?;
        let marginal = laplace_marginal(
            problem.log_likelihood(&res.state),
            &res.state.theta,
            &g_hat,
            problem.penalty(),
            current.sigma2,
            &active.free,
        );
        let here = SmoothingState {
            nu,
            iteration,
            ..current
        };
        trace.push(SmoothingStep {
            iteration,
            sigma2: here.sigma2,
            lambda: here.lambda,
            nu,
            marginal_loglik: marginal,
            active: active.active.len(),
            fit_converged: res.converged,
            fit_iterations: res.iterations,
        });
        log::debug!(
            "smoothing pass {iteration}: lambda = {:.6e}, nu = {nu:.6}, marginal = {marginal:.6}",
            here.lambda
        );
        if marginal.is_finite() && best.as_ref().is_none_or(|b| marginal > b.0) {
            best = Some((marginal, res.clone(), here, active.clone()));
        }
        let prev_nu = current.nu;
        last = Some((res, here, active));
        if (nu - prev_nu).abs() < opts.df_tol {
            stabilized = true;
            break;
        }
        if iteration == opts.max_iter {
            break;
        }
        let theta = &last.as_ref().expect("just set").0.state.theta;
        let (s2, hit_floor) = sigma2_update(theta, problem.penalty(), nu)?;
        floored |= hit_floor;
        current = SmoothingState::from_sigma2(s2, nu, iteration);
    }
    let (fit, state, active) = if stabilized {
        last.expect("at least one pass")
    } else {
        log::warn!("smoothing did not stabilize in {} passes", opts.max_iter);
        match best {
            Some((_, f, s, a)) => (f, s, a),
            None => last.expect("at least one pass"),
        }
    };
    let tail: Vec<f64> = trace.iter().rev().take(3).map(|s| s.marginal_loglik).collect();
    let marginal_monotone_tail = tail.windows(2).all(|w| w[0] >= w[1]);
    if !marginal_monotone_tail {
        log::debug!("marginal likelihood not monotone over the final passes");
    }
    Ok(AutoFit {
        fit,
        state,
        trace,
        stabilized,
        floored,
        marginal_monotone_tail,
        active,
    })
}
