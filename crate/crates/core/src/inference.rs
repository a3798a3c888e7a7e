//! Sandwich covariance under active nonnegativity constraints, regression
//! tables and pointwise bands for the baseline hazard and survival curves.

use crate::basis::{BasisSystem, PenaltyMatrix};
use crate::likelihood::{LikelihoodError, ModelState, Problem};
use crate::optimizer::{boundary_eps, FitResult};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;
use thiserror::Error;

/// Relative eigenvalue threshold below which the free block counts as singular.
const SINGULAR_RCOND: f64 = 1e-13;
/// Relative slack for the positive semidefiniteness check.
const PSD_SLACK: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("free block of the information matrix is singular (condition estimate {condition:.3e})")]
    Singular { condition: f64 },
    #[error("covariance is not positive semidefinite (smallest eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },
    #[error("matrix dimensions do not match: {0}")]
    Dimension(String),
    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
}

/// Partition of `eta = (theta, beta)` into active and free coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveSet {
    /// `theta` indices at the boundary with a negative gradient.
    pub active: Vec<usize>,
    /// Indices into `eta` that stay free, `beta` included.
    pub free: Vec<usize>,
    /// `theta` indices at the boundary with a positive gradient.
    pub kkt_violations: Vec<usize>,
}

/// Active set `{u : theta_u <= eps, grad_u < 0}` for `p` regression coefficients.
pub fn detect_active(theta: &[f64], grad_theta: &[f64], p: usize, eps: f64) -> ActiveSet {
    let m = theta.len();
    let mut active = Vec::new();
    let mut violations = Vec::new();
    for u in 0..m {
        if theta[u] <= eps {
            if grad_theta[u] < 0.0 {
                active.push(u);
            } else if grad_theta[u] > 0.0 {
                violations.push(u);
            }
        }
    }
    if !violations.is_empty() {
        log::warn!("KKT violated at boundary coordinates {violations:?}");
    }
    let free = (0..m + p).filter(|k| !active.contains(k)).collect();
    ActiveSet {
        active,
        free,
        kkt_violations: violations,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceReport {
    /// Covariance of `(theta, beta)`; active rows and columns are zero.
    pub cov_eta: DMatrix<f64>,
    pub active: ActiveSet,
    pub se_theta: Vec<f64>,
    pub se_beta: Vec<f64>,
    /// Condition estimate of the inverted free block.
    pub condition: f64,
}

impl CovarianceReport {
    pub fn m(&self) -> usize {
        self.se_theta.len()
    }

    pub fn p(&self) -> usize {
        self.se_beta.len()
    }

    pub fn cov_theta(&self) -> DMatrix<f64> {
        let m = self.m();
        self.cov_eta.view((0, 0), (m, m)).clone_owned()
    }

    pub fn cov_beta(&self) -> DMatrix<f64> {
        let (m, p) = (self.m(), self.p());
        self.cov_eta.view((m, m), (p, p)).clone_owned()
    }
}

fn free_block(a: &DMatrix<f64>, free: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(free.len(), free.len(), |i, j| a[(free[i], free[j])])
}

/// Inverse of `F = G + P` on the free coordinates, where `P` is the penalty
/// curvature on the free `theta` block. The `theta` block is rotated into the
/// eigenbasis of `P`, where the penalty is exactly diagonal, and the rotated
/// matrix is Jacobi-scaled before inversion. Large `lambda` makes `F` badly
/// conditioned only along the range of `R`, which this removes. Returns the
/// inverse and the condition estimate of the scaled matrix.
fn free_inverse(
    g: &DMatrix<f64>,
    penalty: &PenaltyMatrix,
    lambda: f64,
    free: &[usize],
) -> Result<(DMatrix<f64>, f64), InferenceError> {
    let m = penalty.dim();
    let nf = free.len();
    let ft: Vec<usize> = free.iter().copied().filter(|&k| k < m).collect();
    let k = ft.len();
    let p_block = DMatrix::from_fn(k, k, |i, j| 2.0 * lambda * penalty.matrix()[(ft[i], ft[j])]);
    let eig = ((&p_block + p_block.transpose()) * 0.5).symmetric_eigen();
    let mut t = DMatrix::zeros(nf, nf);
    t.view_mut((0, 0), (k, k)).copy_from(&eig.eigenvectors);
    for i in k..nf {
        t[(i, i)] = 1.0;
    }
    let gf = free_block(g, free);
    let mut rotated = t.transpose() * &gf * &t;
    for i in 0..k {
        rotated[(i, i)] += eig.eigenvalues[i].max(0.0);
    }
    let rotated = (&rotated + rotated.transpose()) * 0.5;
    if rotated.diagonal().iter().any(|d| !(*d > 0.0)) {
        return Err(InferenceError::Singular {
            condition: f64::INFINITY,
        });
    }
    let d = rotated.diagonal().map(|v| 1.0 / v.sqrt());
    let scaled = DMatrix::from_fn(nf, nf, |i, j| d[i] * rotated[(i, j)] * d[j]);
    let se = scaled.symmetric_eigen();
    let top = se.eigenvalues.amax();
    let low = se.eigenvalues.iter().fold(f64::INFINITY, |a, b| a.min(b.abs()));
    let condition = if low > 0.0 { top / low } else { f64::INFINITY };
    if !(top > 0.0) || low <= SINGULAR_RCOND * top {
        return Err(InferenceError::Singular { condition });
    }
    let inv_vals = DMatrix::from_diagonal(&se.eigenvalues.map(|l| 1.0 / l));
    let scaled_inv = &se.eigenvectors * inv_vals * se.eigenvectors.transpose();
    let rotated_inv = DMatrix::from_fn(nf, nf, |i, j| d[i] * scaled_inv[(i, j)] * d[j]);
    Ok((&t * rotated_inv * t.transpose(), condition))
}

/// Sandwich covariance `F~^{-1} G F~^{-1}` with `G = -H` (the negative
/// log-likelihood Hessian) and `F = G + 2 lambda R` on the `theta` block,
/// inverted on the free coordinates and zero-padded. Scaling `F` and `G` by
/// `1/n` cancels, so `n` is not needed.
pub fn sandwich_covariance(
    hessian_ll: &DMatrix<f64>,
    penalty: &PenaltyMatrix,
    lambda: f64,
    active: &ActiveSet,
) -> Result<CovarianceReport, InferenceError> {
    let d = hessian_ll.nrows();
    let m = penalty.dim();
    if hessian_ll.ncols() != d || m > d || active.free.iter().any(|&k| k >= d) {
        return Err(InferenceError::Dimension(format!(
            "Hessian {}x{}, penalty {m}x{m}",
            d,
            hessian_ll.ncols()
        )));
    }
    let p = d - m;
    let g = -hessian_ll;
    let free = &active.free;
    let mut cov = DMatrix::zeros(d, d);
    let mut condition = 1.0;
    if !free.is_empty() {
        let (f_inv, cond) = free_inverse(&g, penalty, lambda, free)?;
        condition = cond;
        let gf = free_block(&g, free);
        let c = &f_inv * gf * &f_inv;
        let c = (&c + c.transpose()) * 0.5;
        let ceig = c.clone().symmetric_eigen();
        let scale = ceig.eigenvalues.amax();
        let min_eig = ceig.eigenvalues.min();
        if min_eig < -PSD_SLACK * scale || c.diagonal().iter().any(|v| *v < 0.0) {
            return Err(InferenceError::NotPositiveSemidefinite {
                min_eigenvalue: min_eig,
            });
        }
        for (i, &a) in free.iter().enumerate() {
            for (j, &b) in free.iter().enumerate() {
                cov[(a, b)] = c[(i, j)];
            }
        }
    }
    let se: Vec<f64> = (0..d).map(|k| cov[(k, k)].max(0.0).sqrt()).collect();
    Ok(CovarianceReport {
        cov_eta: cov,
        active: active.clone(),
        se_theta: se[..m].to_vec(),
        se_beta: se[m..m + p].to_vec(),
        condition,
    })
}

/// Covariance at a fitted state, with the active set taken from the score.
pub fn fit_covariance(problem: &Problem, state: &ModelState) -> Result<CovarianceReport, InferenceError> {
    let (_, grad_theta) = problem.score(state)?;
    let active = detect_active(
        &state.theta,
        &grad_theta,
        problem.p(),
        boundary_eps(&state.theta),
    );
    let hess = problem.loglik_hessian(state)?;
    sandwich_covariance(&hess, problem.penalty(), state.lambda, &active)
}

/// Two-sided normal quantile for a confidence level.
pub fn z_quantile(level: f64) -> Result<f64, InferenceError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(InferenceError::InvalidLevel(level));
    }
    if level == 0.95 {
        return Ok(1.959964);
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub hazard_ratio: f64,
    pub hr_lower: f64,
    pub hr_upper: f64,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSummary {
    pub level: f64,
    pub rows: Vec<CoefficientRow>,
}

/// Hazard ratios with Wald intervals and two-sided p-values.
pub fn regression_summary(
    fit: &FitResult,
    cov: &CovarianceReport,
    names: &[String],
    level: f64,
) -> Result<RegressionSummary, InferenceError> {
    let z = z_quantile(level)?;
    let beta = &fit.state.beta;
    if beta.len() != cov.p() || names.len() != beta.len() {
        return Err(InferenceError::Dimension(format!(
            "{} coefficients, {} standard errors, {} names",
            beta.len(),
            cov.p(),
            names.len()
        )));
    }
    let rows = beta
        .iter()
        .zip(&cov.se_beta)
        .zip(names)
        .map(|((&b, &se), name)| {
            let stat = if se > 0.0 {
                b / se
            } else if b == 0.0 {
                0.0
            } else {
                b.signum() * f64::INFINITY
            };
            CoefficientRow {
                name: name.clone(),
                estimate: b,
                se,
                hazard_ratio: b.exp(),
                hr_lower: (b - z * se).exp(),
                hr_upper: (b + z * se).exp(),
                z: stat,
                p_value: erfc(stat.abs() / std::f64::consts::SQRT_2),
            }
        })
        .collect();
    Ok(RegressionSummary { level, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardBandPoint {
    pub t: f64,
    pub h0: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

fn quad_form(cov: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (v.transpose() * cov * v)[(0, 0)].max(0.0)
}

fn check_state(state: &ModelState, cov: &CovarianceReport) -> Result<(), InferenceError> {
    if state.theta.len() != cov.m() || state.beta.len() != cov.p() {
        return Err(InferenceError::Dimension(format!(
            "state has m = {}, p = {}; covariance has m = {}, p = {}",
            state.theta.len(),
            state.beta.len(),
            cov.m(),
            cov.p()
        )));
    }
    Ok(())
}

/// Pointwise band `h0 +- z se` truncated at zero. Times outside the basis
/// range have `h0 = 0`.
pub fn baseline_hazard_band(
    state: &ModelState,
    cov: &CovarianceReport,
    system: &BasisSystem,
    grid: &[f64],
    level: f64,
) -> Result<Vec<HazardBandPoint>, InferenceError> {
    check_state(state, cov)?;
    let z = z_quantile(level)?;
    let cov_theta = cov.cov_theta();
    Ok(grid
        .iter()
        .map(|&t| {
            let psi = DVector::from_vec(system.eval_all(t));
            let h0 = psi.dot(&DVector::from_column_slice(&state.theta)).max(0.0);
            let se = quad_form(&cov_theta, &psi).sqrt();
            HazardBandPoint {
                t,
                h0,
                se,
                lower: (h0 - z * se).max(0.0),
                upper: h0 + z * se,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalBandPoint {
    pub t: f64,
    pub survival: f64,
    pub lower: f64,
    pub upper: f64,
    /// Survival is numerically 0 or 1, so the band collapses on that side.
    pub degenerate: bool,
}

/// Survival prediction for covariates `x` with a delta-method band on the
/// `log(-log S)` scale mapped back into `[0, 1]`.
pub fn predict_survival_band(
    state: &ModelState,
    cov: &CovarianceReport,
    system: &BasisSystem,
    x: &[f64],
    grid: &[f64],
    level: f64,
) -> Result<Vec<SurvivalBandPoint>, InferenceError> {
    check_state(state, cov)?;
    if x.len() != state.beta.len() {
        return Err(InferenceError::Dimension(format!(
            "profile has {} covariates, model has {}",
            x.len(),
            state.beta.len()
        )));
    }
    let z = z_quantile(level)?;
    let m = state.theta.len();
    let lp: f64 = x.iter().zip(&state.beta).map(|(a, b)| a * b).sum();
    let lp = lp.clamp(-crate::likelihood::LP_CLAMP, crate::likelihood::LP_CLAMP);
    Ok(grid
        .iter()
        .map(|&t| {
            let cum = system.cumulative_all(t);
            let h0: f64 = cum.iter().zip(&state.theta).map(|(a, b)| a * b).sum();
            let s = (-h0.max(0.0) * lp.exp()).exp();
            if !(h0 > 0.0) || s <= 0.0 || s >= 1.0 {
                return SurvivalBandPoint {
                    t,
                    survival: s,
                    lower: s,
                    upper: s,
                    degenerate: true,
                };
            }
            let grad = DVector::from_iterator(
                m + x.len(),
                cum.iter().map(|c| c / h0).chain(x.iter().copied()),
            );
            let se = quad_form(&cov.cov_eta, &grad).sqrt();
            let g = h0.ln() + lp;
            SurvivalBandPoint {
                t,
                survival: s,
                lower: (-(g + z * se).exp()).exp(),
                upper: (-(g - z * se).exp()).exp(),
                degenerate: false,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{data_knots, BasisSystem};
    use crate::optimizer::{fit, FitOptions};
    use crate::survdata::{Dataset, Observation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn sim_data(rng: &mut ChaCha8Rng, n: usize) -> Dataset {
        let obs = (0..n)
            .map(|_| {
                let x = vec![rng.random::<f64>()];
                let y = (2.0 * -rng.random::<f64>().ln() / (1.2 * x[0]).exp()).sqrt();
                let l = rng.random::<f64>();
                let r = l + rng.random::<f64>();
                if rng.random::<f64>() < 0.3 {
                    Observation::new(y, y, x)
                } else if y < l {
                    Observation::new(0.0, l, x)
                } else if y <= r {
                    Observation::new(l, r, x)
                } else {
                    Observation::new(r, f64::INFINITY, x)
                }
                .unwrap()
            })
            .collect();
        Dataset::from_observations(obs).unwrap()
    }

    fn fitted(seed: u64, n: usize, lambda: f64) -> (Problem, FitResult) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = sim_data(&mut rng, n);
        let sys = BasisSystem::mspline(data_knots(&data, 3).unwrap(), 3).unwrap();
        let pr = Problem::new(sys, &data).unwrap();
        let res = fit(&pr, lambda, &FitOptions::default()).unwrap();
        (pr, res)
    }

    #[test]
    fn active_set_examples() {
        let a = detect_active(&[1.0, 2.0], &[0.5, -0.5], 1, 1e-8);
        assert!(a.active.is_empty());
        assert_eq!(a.free, vec![0, 1, 2]);
        let a = detect_active(&[0.0, 1.0, 2.0], &[-0.5, 0.0, 0.0], 2, 1e-8);
        assert_eq!(a.active, vec![0]);
        assert_eq!(a.free, vec![1, 2, 3, 4]);
        let a = detect_active(&[0.0, 1.0], &[0.2, 0.0], 0, 1e-8);
        assert!(a.active.is_empty());
        assert_eq!(a.kkt_violations, vec![0]);
    }

    #[test]
    fn sandwich_reduces_to_inverse_hessian() {
        let (pr, res) = fitted(3, 120, 0.0);
        let hess = pr.loglik_hessian(&res.state).unwrap();
        let d = hess.nrows();
        let active = ActiveSet {
            active: vec![],
            free: (0..d).collect(),
            kkt_violations: vec![],
        };
        let cov = sandwich_covariance(&hess, pr.penalty(), 0.0, &active).unwrap();
        let inv = (-&hess).try_inverse().unwrap();
        let rel = (&cov.cov_eta - &inv).amax() / inv.amax();
        assert!(rel < 1e-8, "{rel}");
    }

    #[test]
    fn active_rows_are_zero() {
        let (pr, res) = fitted(5, 100, 1.0);
        let hess = pr.loglik_hessian(&res.state).unwrap();
        let m = pr.m();
        let active = ActiveSet {
            active: vec![0],
            free: (1..m + 1).collect(),
            kkt_violations: vec![],
        };
        let cov = sandwich_covariance(&hess, pr.penalty(), 1.0, &active).unwrap();
        for k in 0..m + 1 {
            assert_eq!(cov.cov_eta[(0, k)], 0.0);
            assert_eq!(cov.cov_eta[(k, 0)], 0.0);
        }
        assert_eq!(cov.se_theta[0], 0.0);
    }

    #[test]
    fn singular_block_reports_condition() {
        let hess = DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, -1.0, -1.0]);
        let active = ActiveSet {
            active: vec![],
            free: vec![0, 1],
            kkt_violations: vec![],
        };
        let r = PenaltyMatrix::zeros(1);
        match sandwich_covariance(&hess, &r, 0.0, &active) {
            Err(InferenceError::Singular { condition }) => assert!(condition > 1e12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn summary_examples() {
        let (_, mut res) = fitted(9, 80, 0.5);
        res.state.beta = vec![0.0];
        let mut cov = CovarianceReport {
            cov_eta: DMatrix::zeros(1, 1),
            active: detect_active(&[], &[], 1, 0.0),
            se_theta: vec![],
            se_beta: vec![0.3],
            condition: 1.0,
        };
        let names = vec!["x1".to_string()];
        let s = regression_summary(&res, &cov, &names, 0.95).unwrap();
        let row = &s.rows[0];
        assert_eq!(row.hazard_ratio, 1.0);
        assert!((row.hr_lower.ln() + row.hr_upper.ln()).abs() < 1e-15);
        assert!((row.p_value - 1.0).abs() < 1e-15);
        res.state.beta = vec![2f64.ln()];
        cov.se_beta = vec![0.0];
        let s = regression_summary(&res, &cov, &names, 0.95).unwrap();
        assert!((s.rows[0].hr_lower - 2.0).abs() < 1e-15 && (s.rows[0].hr_upper - 2.0).abs() < 1e-15);
        assert!((z_quantile(0.9).unwrap() - 1.6448536269514722).abs() < 1e-9);
        assert!(z_quantile(1.0).is_err());
    }

    #[test]
    fn bands_degenerate_with_zero_covariance() {
        let (pr, res) = fitted(11, 100, 0.5);
        let d = pr.m() + pr.p();
        let cov = CovarianceReport {
            cov_eta: DMatrix::zeros(d, d),
            active: detect_active(&res.state.theta, &vec![0.0; pr.m()], pr.p(), 0.0),
            se_theta: vec![0.0; pr.m()],
            se_beta: vec![0.0; pr.p()],
            condition: 1.0,
        };
        let (lo, hi) = pr.system().range();
        let grid: Vec<f64> = (0..20).map(|i| lo + (hi - lo) * i as f64 / 19.0).collect();
        for pt in baseline_hazard_band(&res.state, &cov, pr.system(), &grid, 0.95).unwrap() {
            assert_eq!(pt.lower, pt.h0.max(0.0));
            assert_eq!(pt.upper, pt.h0);
        }
        let sb = predict_survival_band(&res.state, &cov, pr.system(), &[0.0], &[0.0, 0.5 * hi], 0.95).unwrap();
        assert_eq!(sb[0].survival, 1.0);
        assert_eq!((sb[0].lower, sb[0].upper), (1.0, 1.0));
        assert!((sb[1].lower - sb[1].survival).abs() < 1e-15);
        assert!((sb[1].upper - sb[1].survival).abs() < 1e-15);
    }

    #[test]
    fn fitted_covariance_properties() {
        let (pr, res) = fitted(13, 200, 0.2);
        let cov = fit_covariance(&pr, &res.state).unwrap();
        assert_eq!(cov.cov_eta, cov.cov_eta.transpose());
        for &u in &cov.active.active {
            assert!(cov.cov_eta.row(u).iter().all(|v| *v == 0.0));
        }
        let (lo, hi) = pr.system().range();
        let grid: Vec<f64> = (0..50).map(|i| lo + (hi - lo) * i as f64 / 49.0).collect();
        for pt in baseline_hazard_band(&res.state, &cov, pr.system(), &grid, 0.95).unwrap() {
            assert!(pt.lower <= pt.h0 && pt.h0 <= pt.upper && pt.lower >= 0.0);
        }
        for pt in predict_survival_band(&res.state, &cov, pr.system(), &[0.5], &grid, 0.95).unwrap() {
            assert!(pt.lower <= pt.survival && pt.survival <= pt.upper);
            assert!(pt.lower >= 0.0 && pt.upper <= 1.0);
        }
    }

    #[test]
    fn delta_method_matches_parametric_bootstrap() {
        let (pr, res) = fitted(17, 400, 0.5);
        let cov = fit_covariance(&pr, &res.state).unwrap();
        let free = &cov.active.free;
        let block = free_block(&cov.cov_eta, free);
        let chol = block.clone().cholesky().expect("positive definite free block");
        let x = [0.5];
        let t = pr.median_endpoint();
        let band = predict_survival_band(&res.state, &cov, pr.system(), &x, &[t], 0.95).unwrap();
        let z = 1.959964;
        let eta = res.state.eta();
        let m = pr.m();
        let cum = pr.system().cumulative_all(t);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut draws = Vec::new();
        for _ in 0..500 {
            let e = DVector::from_fn(free.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let shift = chol.l() * e;
            let mut eta_b = eta.clone();
            for (i, &k) in free.iter().enumerate() {
                eta_b[k] += shift[i];
            }
            let h0: f64 = (0..m).map(|u| eta_b[u] * cum[u]).sum();
            if h0 > 0.0 {
                draws.push(h0.ln() + x[0] * eta_b[m]);
            }
        }
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64).sqrt();
        // recover the delta-method SE from the lower survival limit
        let g = (-band[0].survival.ln()).ln();
        let se_band = ((-band[0].lower.ln()).ln() - g) / z;
        assert!(draws.len() > 480);
        assert!((se_band - sd).abs() < 0.15 * sd, "delta {se_band} bootstrap {sd}");
    }
}
