//! Log-likelihood, penalized objective, score and Hessian of the
//! proportional hazards model `h(t|x) = h0(t) exp(x beta)` with
//! `h0(t) = sum_u theta_u psi_u(t)`.
//!
//! Parameters are stacked as `eta = (theta, beta)`: the first `m` entries of
//! every gradient and Hessian refer to `theta`, the last `p` to `beta`.

use crate::basis::{BasisError, BasisSystem, PenaltyMatrix};
use crate::survdata::{CensorKind, Dataset, Observation};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Linear predictors beyond this magnitude mark the state as infeasible.
pub const LP_CLAMP: f64 = 500.0;
/// Smallest left/interval probability treated as positive.
pub const MIN_PROBABILITY: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikelihoodError {
    #[error("theta has length {found}, basis has {expected} functions")]
    ThetaLength { expected: usize, found: usize },
    #[error("beta has length {found}, data has {expected} covariates")]
    BetaLength { expected: usize, found: usize },
    #[error("theta[{0}] is negative or not finite")]
    InvalidTheta(usize),
    #[error("smoothing parameter must be finite and nonnegative, got {0}")]
    InvalidLambda(f64),
    #[error("penalty matrix is {found}x{found}, expected {expected}x{expected}")]
    PenaltyDim { expected: usize, found: usize },
    #[error("objective is not finite at this state: {0}")]
    Infeasible(Infeasible),
    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// Why an objective evaluation returned negative infinity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Infeasible {
    ZeroEventHazard { obs: usize },
    ProbabilityUnderflow { obs: usize },
    PredictorClamped { obs: usize },
}

impl std::fmt::Display for Infeasible {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Infeasible::ZeroEventHazard { obs } => write!(f, "zero hazard at event {obs}"),
            Infeasible::ProbabilityUnderflow { obs } => {
                write!(f, "censoring probability underflow at observation {obs}")
            }
            Infeasible::PredictorClamped { obs } => {
                write!(f, "linear predictor exceeds {LP_CLAMP} at observation {obs}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub lambda: f64,
}

impl ModelState {
    pub fn new(beta: Vec<f64>, theta: Vec<f64>, lambda: f64) -> Result<Self, LikelihoodError> {
        let state = ModelState {
            beta,
            theta,
            lambda,
        };
        state.validate_values()?;
        Ok(state)
    }

    fn validate_values(&self) -> Result<(), LikelihoodError> {
        if let Some(u) = self.theta.iter().position(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(LikelihoodError::InvalidTheta(u));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LikelihoodError::InvalidLambda(self.lambda));
        }
        Ok(())
    }

    fn check(&self, m: usize, p: usize) -> Result<(), LikelihoodError> {
        if self.theta.len() != m {
            return Err(LikelihoodError::ThetaLength {
                expected: m,
                found: self.theta.len(),
            });
        }
        if self.beta.len() != p {
            return Err(LikelihoodError::BetaLength {
                expected: p,
                found: self.beta.len(),
            });
        }
        self.validate_values()
    }

    /// Stacked parameter vector `(theta, beta)`.
    pub fn eta(&self) -> Vec<f64> {
        self.theta.iter().chain(&self.beta).copied().collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_theta(state: &ModelState, system: &BasisSystem) -> Result<(), LikelihoodError> {
    if state.theta.len() != system.m() {
        return Err(LikelihoodError::ThetaLength {
            expected: system.m(),
            found: state.theta.len(),
        });
    }
    Ok(())
}

/// `h0(t)`; `t` must lie in the basis range.
pub fn baseline_hazard(
    state: &ModelState,
    system: &BasisSystem,
    t: f64,
) -> Result<f64, LikelihoodError> {
    check_theta(state, system)?;
    system.eval(0, t)?;
    Ok(dot(&state.theta, &system.eval_all(t)).max(0.0))
}

/// `H0(t)`; `t` must lie in the basis range.
pub fn cumulative_baseline(
    state: &ModelState,
    system: &BasisSystem,
    t: f64,
) -> Result<f64, LikelihoodError> {
    check_theta(state, system)?;
    system.cumulative(0, t)?;
    Ok(dot(&state.theta, &system.cumulative_all(t)).max(0.0))
}

/// `S(t|x) = exp(-H0(t) exp(x beta))`, with the linear predictor clamped to
/// `[-LP_CLAMP, LP_CLAMP]`.
pub fn survival(
    state: &ModelState,
    system: &BasisSystem,
    x: &[f64],
    t: f64,
) -> Result<f64, LikelihoodError> {
    if x.len() != state.beta.len() {
        return Err(LikelihoodError::BetaLength {
            expected: x.len(),
            found: state.beta.len(),
        });
    }
    let lp = dot(x, &state.beta).clamp(-LP_CLAMP, LP_CLAMP);
    Ok((-cumulative_baseline(state, system, t)? * lp.exp()).exp())
}

/// State-independent basis values for one observation.
#[derive(Debug, Clone)]
struct CachedObs {
    kind: CensorKind,
    x: Vec<f64>,
    /// `psi(t)` at an event time; empty otherwise.
    psi: Vec<f64>,
    /// `Psi(t_left)` (events, right and interval censoring).
    cum_left: Vec<f64>,
    /// `Psi(t_right)` (left and interval censoring).
    cum_right: Vec<f64>,
}

/// Per-observation quantities at a given state.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodWorkspace {
    pub linear_predictor: Vec<f64>,
    /// `h0(t)` at events, NaN elsewhere.
    pub hazard: Vec<f64>,
    /// `H0(t_left)`, zero where `t_left` is zero.
    pub cum_left: Vec<f64>,
    /// `H0(t_right)`, infinite where `t_right` is infinite.
    pub cum_right: Vec<f64>,
    pub surv_left: Vec<f64>,
    pub surv_right: Vec<f64>,
}

/// Gradient of the penalized objective split into nonnegative parts,
/// `grad_theta = numer - denom`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreParts {
    pub grad_theta: Vec<f64>,
    pub grad_beta: Vec<f64>,
    pub numer: Vec<f64>,
    pub denom: Vec<f64>,
}

/// A dataset bound to a basis system and its penalty, with basis values cached.
#[derive(Debug, Clone)]
pub struct Problem {
    system: BasisSystem,
    penalty: PenaltyMatrix,
    /// `B` with `R = B' B`, from the eigendecomposition of `R`. Evaluating
    /// the penalty as `|B theta|^2` avoids the cancellation of the plain
    /// quadratic form, whose rounding error scales with `|R| |theta|^2` and
    /// swamps line-search gains once `lambda` is large.
    penalty_root: DMatrix<f64>,
    obs: Vec<CachedObs>,
    p: usize,
    median_endpoint: f64,
}

fn symmetric_root(r: &DMatrix<f64>) -> DMatrix<f64> {
    let m = r.nrows();
    if m == 0 || r.iter().all(|v| *v == 0.0) {
        return DMatrix::zeros(0, m);
    }
    let eig = ((r + r.transpose()) * 0.5).symmetric_eigen();
    let rows: Vec<usize> = (0..m).filter(|&k| eig.eigenvalues[k] > 0.0).collect();
    DMatrix::from_fn(rows.len(), m, |i, j| {
        eig.eigenvalues[rows[i]].sqrt() * eig.eigenvectors[(j, rows[i])]
    })
}

/// First and second derivatives of one observation's cumulative hazard
/// `e * theta . Psi(t)` with respect to `eta`, in compact form.
struct CumTerms<'a> {
    /// Basis cumulatives at the time point.
    cum: &'a [f64],
    /// `exp(x beta)`.
    e: f64,
    /// Cumulative hazard including the covariate factor.
    h: f64,
}

impl Problem {
    pub fn new(system: BasisSystem, data: &Dataset) -> Result<Self, LikelihoodError> {
        let penalty = system.penalty_matrix();
        Self::with_penalty(system, penalty, data)
    }

    pub fn with_penalty(
        system: BasisSystem,
        penalty: PenaltyMatrix,
        data: &Dataset,
    ) -> Result<Self, LikelihoodError> {
        Self::from_observations(system, penalty, data.observations(), data.p())
    }

    /// Binds raw observations without the dataset-level checks, so that for
    /// example a single right-censored observation can be evaluated.
    pub fn from_observations(
        system: BasisSystem,
        penalty: PenaltyMatrix,
        observations: &[Observation],
        p: usize,
    ) -> Result<Self, LikelihoodError> {
        let m = system.m();
        if let Some(o) = observations.iter().find(|o| o.covariates.len() != p) {
            return Err(LikelihoodError::BetaLength {
                expected: p,
                found: o.covariates.len(),
            });
        }
        if penalty.dim() != m {
            return Err(LikelihoodError::PenaltyDim {
                expected: m,
                found: penalty.dim(),
            });
        }
        let obs = observations
            .iter()
            .map(|o| {
                let (psi, cum_left, cum_right) = match o.kind {
                    CensorKind::Event => (
                        system.eval_all(o.t_left),
                        system.cumulative_all(o.t_left),
                        Vec::new(),
                    ),
                    CensorKind::Right => (Vec::new(), system.cumulative_all(o.t_left), Vec::new()),
                    CensorKind::Left => (Vec::new(), Vec::new(), system.cumulative_all(o.t_right)),
                    CensorKind::Interval => (
                        Vec::new(),
                        system.cumulative_all(o.t_left),
                        system.cumulative_all(o.t_right),
                    ),
                };
                CachedObs {
                    kind: o.kind,
                    x: o.covariates.clone(),
                    psi,
                    cum_left,
                    cum_right,
                }
            })
            .collect();
        let mut pool: Vec<f64> = observations
            .iter()
            .flat_map(|o| o.finite_endpoints())
            .collect();
        pool.sort_by(f64::total_cmp);
        let median_endpoint = if pool.is_empty() {
            let (lo, hi) = system.range();
            0.5 * (lo + hi)
        } else {
            crate::basis::quantile(&pool, 0.5)
        };
        Ok(Problem {
            system,
            penalty_root: symmetric_root(penalty.matrix()),
            penalty,
            obs,
            p,
            median_endpoint,
        })
    }

    pub fn system(&self) -> &BasisSystem {
        &self.system
    }

    pub fn penalty(&self) -> &PenaltyMatrix {
        &self.penalty
    }

    pub fn n(&self) -> usize {
        self.obs.len()
    }

    pub fn m(&self) -> usize {
        self.system.m()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Median of the finite positive observed endpoints.
    pub fn median_endpoint(&self) -> f64 {
        self.median_endpoint
    }

    pub fn check_state(&self, state: &ModelState) -> Result<(), LikelihoodError> {
        state.check(self.m(), self.p)
    }

    fn lp(&self, i: usize, state: &ModelState) -> Result<f64, Infeasible> {
        let lp = dot(&self.obs[i].x, &state.beta);
        if lp.abs() > LP_CLAMP || lp.is_nan() {
            return Err(Infeasible::PredictorClamped { obs: i });
        }
        Ok(lp)
    }

    fn contribution(&self, i: usize, state: &ModelState) -> Result<f64, Infeasible> {
        let o = &self.obs[i];
        let lp = self.lp(i, state)?;
        let e = lp.exp();
        let theta = &state.theta;
        let floor = MIN_PROBABILITY.ln();
        match o.kind {
            CensorKind::Event => {
                let h = dot(theta, &o.psi);
                if h <= 0.0 {
                    return Err(Infeasible::ZeroEventHazard { obs: i });
                }
                Ok(h.ln() + lp - e * dot(theta, &o.cum_left))
            }
            CensorKind::Right => Ok(-e * dot(theta, &o.cum_left)),
            CensorKind::Left => {
                let v = (-(-e * dot(theta, &o.cum_right)).exp_m1()).ln();
                if v < floor || v.is_nan() {
                    return Err(Infeasible::ProbabilityUnderflow { obs: i });
                }
                Ok(v)
            }
            CensorKind::Interval => {
                let hl = e * dot(theta, &o.cum_left);
                let hr = e * dot(theta, &o.cum_right);
                let v = -hl + (-(-(hr - hl)).exp_m1()).ln();
                if v < floor || v.is_nan() {
                    return Err(Infeasible::ProbabilityUnderflow { obs: i });
                }
                Ok(v)
            }
        }
    }

    /// Log-likelihood, or the reason it is negative infinity.
    pub fn try_log_likelihood(&self, state: &ModelState) -> Result<f64, Infeasible> {
        let mut total = 0.0;
        for i in 0..self.obs.len() {
            total += self.contribution(i, state)?;
        }
        Ok(total)
    }

    /// Log-likelihood; negative infinity flags an infeasible state.
    pub fn log_likelihood(&self, state: &ModelState) -> f64 {
        self.try_log_likelihood(state).unwrap_or(f64::NEG_INFINITY)
    }

    /// Per-observation log-likelihood contributions.
    pub fn contributions(&self, state: &ModelState) -> Vec<f64> {
        (0..self.obs.len())
            .map(|i| self.contribution(i, state).unwrap_or(f64::NEG_INFINITY))
            .collect()
    }

    /// Roughness `theta' R theta`.
    pub fn roughness(&self, theta: &[f64]) -> f64 {
        (&self.penalty_root * DVector::from_column_slice(theta)).norm_squared()
    }

    /// `R theta` through the penalty root.
    pub fn penalty_gradient(&self, theta: &[f64]) -> Vec<f64> {
        let b_theta = &self.penalty_root * DVector::from_column_slice(theta);
        (self.penalty_root.transpose() * b_theta).as_slice().to_vec()
    }

    /// `Phi = l - lambda theta' R theta`.
    pub fn objective(&self, state: &ModelState) -> f64 {
        let ll = self.log_likelihood(state);
        if state.lambda == 0.0 {
            return ll;
        }
        ll - state.lambda * self.roughness(&state.theta)
    }

    pub fn workspace(&self, state: &ModelState) -> Result<LikelihoodWorkspace, LikelihoodError> {
        self.check_state(state)?;
        let n = self.obs.len();
        let mut ws = LikelihoodWorkspace {
            linear_predictor: Vec::with_capacity(n),
            hazard: Vec::with_capacity(n),
            cum_left: Vec::with_capacity(n),
            cum_right: Vec::with_capacity(n),
            surv_left: Vec::with_capacity(n),
            surv_right: Vec::with_capacity(n),
        };
        for o in &self.obs {
            let lp = dot(&o.x, &state.beta).clamp(-LP_CLAMP, LP_CLAMP);
            let e = lp.exp();
            let (hl, hr) = match o.kind {
                CensorKind::Event => {
                    let h = dot(&state.theta, &o.cum_left);
                    (h, h)
                }
                CensorKind::Right => (dot(&state.theta, &o.cum_left), f64::INFINITY),
                CensorKind::Left => (0.0, dot(&state.theta, &o.cum_right)),
                CensorKind::Interval => (
                    dot(&state.theta, &o.cum_left),
                    dot(&state.theta, &o.cum_right),
                ),
            };
            ws.linear_predictor.push(lp);
            ws.hazard.push(if o.kind == CensorKind::Event {
                dot(&state.theta, &o.psi)
            } else {
                f64::NAN
            });
            ws.cum_left.push(hl);
            ws.cum_right.push(hr);
            ws.surv_left.push((-hl * e).exp());
            ws.surv_right.push((-hr * e).exp());
        }
        Ok(ws)
    }

    /// Score of the penalized objective with its nonnegative split.
    pub fn score_parts(&self, state: &ModelState) -> Result<ScoreParts, LikelihoodError> {
        self.check_state(state)?;
        let (m, p) = (self.m(), self.p);
        let mut numer = vec![0.0; m];
        let mut denom = vec![0.0; m];
        let mut grad_beta = vec![0.0; p];
        let theta = &state.theta;
        for (i, o) in self.obs.iter().enumerate() {
            let lp = self.lp(i, state).map_err(LikelihoodError::Infeasible)?;
            let e = lp.exp();
            // d l / d beta = x * cb
            let cb = match o.kind {
                CensorKind::Event => {
                    let h = dot(theta, &o.psi);
                    if h <= 0.0 {
                        return Err(LikelihoodError::Infeasible(Infeasible::ZeroEventHazard {
                            obs: i,
                        }));
                    }
                    let hc = e * dot(theta, &o.cum_left);
                    for u in 0..m {
                        numer[u] += o.psi[u] / h;
                        denom[u] += e * o.cum_left[u];
                    }
                    1.0 - hc
                }
                CensorKind::Right => {
                    for u in 0..m {
                        denom[u] += e * o.cum_left[u];
                    }
                    -e * dot(theta, &o.cum_left)
                }
                CensorKind::Left => {
                    let hr = e * dot(theta, &o.cum_right);
                    let g = 1.0 / hr.exp_m1();
                    if !g.is_finite() {
                        return Err(LikelihoodError::Infeasible(
                            Infeasible::ProbabilityUnderflow { obs: i },
                        ));
                    }
                    for u in 0..m {
                        numer[u] += g * e * o.cum_right[u];
                    }
                    g * hr
                }
                CensorKind::Interval => {
                    let hl = e * dot(theta, &o.cum_left);
                    let hr = e * dot(theta, &o.cum_right);
                    let (a, b) = interval_weights(hr - hl);
                    if !(a.is_finite() && b.is_finite()) {
                        return Err(LikelihoodError::Infeasible(
                            Infeasible::ProbabilityUnderflow { obs: i },
                        ));
                    }
                    for u in 0..m {
                        numer[u] += b * e * o.cum_right[u];
                        denom[u] += a * e * o.cum_left[u];
                    }
                    -a * hl + b * hr
                }
            };
            for (g, x) in grad_beta.iter_mut().zip(&o.x) {
                *g += cb * x;
            }
        }
        if state.lambda > 0.0 {
            let r_theta = self.penalty_gradient(theta);
            for u in 0..m {
                let v = 2.0 * state.lambda * r_theta[u];
                if v > 0.0 {
                    denom[u] += v;
                } else {
                    numer[u] -= v;
                }
            }
        }
        let grad_theta = numer.iter().zip(&denom).map(|(a, b)| a - b).collect();
        Ok(ScoreParts {
            grad_theta,
            grad_beta,
            numer,
            denom,
        })
    }

    /// `(grad_beta, grad_theta)` of the penalized objective.
    pub fn score(&self, state: &ModelState) -> Result<(Vec<f64>, Vec<f64>), LikelihoodError> {
        let parts = self.score_parts(state)?;
        Ok((parts.grad_beta, parts.grad_theta))
    }

    /// Gradient of the penalized objective in `(theta, beta)` order.
    pub fn gradient(&self, state: &ModelState) -> Result<DVector<f64>, LikelihoodError> {
        let parts = self.score_parts(state)?;
        Ok(DVector::from_iterator(
            self.m() + self.p,
            parts.grad_theta.into_iter().chain(parts.grad_beta),
        ))
    }

    /// Hessian of the log-likelihood (no penalty) in `(theta, beta)` order.
    pub fn loglik_hessian(&self, state: &ModelState) -> Result<DMatrix<f64>, LikelihoodError> {
        self.check_state(state)?;
        let (m, p) = (self.m(), self.p);
        let d = m + p;
        let mut hess = DMatrix::zeros(d, d);
        let theta = &state.theta;
        let infeasible = LikelihoodError::Infeasible;
        for (i, o) in self.obs.iter().enumerate() {
            let lp = self.lp(i, state).map_err(infeasible)?;
            let e = lp.exp();
            match o.kind {
                CensorKind::Event => {
                    let h = dot(theta, &o.psi);
                    if h <= 0.0 {
                        return Err(infeasible(Infeasible::ZeroEventHazard { obs: i }));
                    }
                    for u in 0..m {
                        for v in 0..m {
                            hess[(u, v)] -= o.psi[u] * o.psi[v] / (h * h);
                        }
                    }
                    let c = self.cum_terms(&o.cum_left, e, theta);
                    add_cum_hessian(&mut hess, -1.0, &c, &o.x, m);
                }
                CensorKind::Right => {
                    let c = self.cum_terms(&o.cum_left, e, theta);
                    add_cum_hessian(&mut hess, -1.0, &c, &o.x, m);
                }
                CensorKind::Left => {
                    let c = self.cum_terms(&o.cum_right, e, theta);
                    let g1 = 1.0 / c.h.exp_m1();
                    if !g1.is_finite() {
                        return Err(infeasible(Infeasible::ProbabilityUnderflow { obs: i }));
                    }
                    let g2 = -g1 * (1.0 + g1);
                    let grad = cum_gradient(&c, &o.x, m);
                    hess.ger(g2, &grad, &grad, 1.0);
                    add_cum_hessian(&mut hess, g1, &c, &o.x, m);
                }
                CensorKind::Interval => {
                    let cl = self.cum_terms(&o.cum_left, e, theta);
                    let cr = self.cum_terms(&o.cum_right, e, theta);
                    let (a, b) = interval_weights(cr.h - cl.h);
                    if !(a.is_finite() && b.is_finite()) {
                        return Err(infeasible(Infeasible::ProbabilityUnderflow { obs: i }));
                    }
                    let gl = cum_gradient(&cl, &o.x, m);
                    let gr = cum_gradient(&cr, &o.x, m);
                    let gll = &gr * b - &gl * a;
                    hess.ger(a, &gl, &gl, 1.0);
                    add_cum_hessian(&mut hess, -a, &cl, &o.x, m);
                    hess.ger(-b, &gr, &gr, 1.0);
                    add_cum_hessian(&mut hess, b, &cr, &o.x, m);
                    hess.ger(-1.0, &gll, &gll, 1.0);
                }
            }
        }
        Ok(symmetrize(hess))
    }

    /// The `beta`-`beta` block of the Hessian, without assembling the rest.
    pub fn beta_hessian(&self, state: &ModelState) -> Result<DMatrix<f64>, LikelihoodError> {
        self.check_state(state)?;
        let p = self.p;
        let mut hess = DMatrix::zeros(p, p);
        let theta = &state.theta;
        let infeasible = LikelihoodError::Infeasible;
        for (i, o) in self.obs.iter().enumerate() {
            let e = self.lp(i, state).map_err(infeasible)?.exp();
            let w = match o.kind {
                CensorKind::Event | CensorKind::Right => -e * dot(theta, &o.cum_left),
                CensorKind::Left => {
                    let h = e * dot(theta, &o.cum_right);
                    let g1 = 1.0 / h.exp_m1();
                    if !g1.is_finite() {
                        return Err(infeasible(Infeasible::ProbabilityUnderflow { obs: i }));
                    }
                    g1 * h - g1 * (1.0 + g1) * h * h
                }
                CensorKind::Interval => {
                    let hl = e * dot(theta, &o.cum_left);
                    let hr = e * dot(theta, &o.cum_right);
                    let (a, b) = interval_weights(hr - hl);
                    if !(a.is_finite() && b.is_finite()) {
                        return Err(infeasible(Infeasible::ProbabilityUnderflow { obs: i }));
                    }
                    let g = b * hr - a * hl;
                    a * (hl * hl - hl) - b * (hr * hr - hr) - g * g
                }
            };
            for j in 0..p {
                for k in 0..p {
                    hess[(j, k)] += w * o.x[j] * o.x[k];
                }
            }
        }
        Ok(hess)
    }

    /// Hessian of the penalized objective in `(theta, beta)` order.
    pub fn hessian(&self, state: &ModelState) -> Result<DMatrix<f64>, LikelihoodError> {
        let mut hess = self.loglik_hessian(state)?;
        if state.lambda > 0.0 {
            let m = self.m();
            let mut block = hess.view_mut((0, 0), (m, m));
            block -= self.penalty.matrix() * (2.0 * state.lambda);
        }
        Ok(hess)
    }

    fn cum_terms<'a>(&self, cum: &'a [f64], e: f64, theta: &[f64]) -> CumTerms<'a> {
        CumTerms {
            cum,
            e,
            h: e * dot(theta, cum),
        }
    }
}

/// `S_L / D` and `S_R / D` for an interval with cumulative hazard increment `delta`.
fn interval_weights(delta: f64) -> (f64, f64) {
    (1.0 / -(-delta).exp_m1(), 1.0 / delta.exp_m1())
}

fn cum_gradient(c: &CumTerms<'_>, x: &[f64], m: usize) -> DVector<f64> {
    DVector::from_iterator(
        m + x.len(),
        c.cum.iter().map(|v| c.e * v).chain(x.iter().map(|xj| xj * c.h)),
    )
}

/// Adds `coef` times the Hessian of the cumulative hazard.
fn add_cum_hessian(hess: &mut DMatrix<f64>, coef: f64, c: &CumTerms<'_>, x: &[f64], m: usize) {
    for (j, xj) in x.iter().enumerate() {
        for (u, cu) in c.cum.iter().enumerate() {
            let v = coef * xj * c.e * cu;
            hess[(u, m + j)] += v;
            hess[(m + j, u)] += v;
        }
        for (k, xk) in x.iter().enumerate() {
            hess[(m + j, m + k)] += coef * xj * xk * c.h;
        }
    }
}

fn symmetrize(h: DMatrix<f64>) -> DMatrix<f64> {
    (&h + h.transpose()) * 0.5
}
