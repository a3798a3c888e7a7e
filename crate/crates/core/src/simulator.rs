//! Monte Carlo harness: the three benchmark scenarios, sample generation and
//! replication metrics for regression coefficients and the baseline hazard.

use crate::inference::{baseline_hazard_band, z_quantile, InferenceError};
use crate::model::{fit_model, BasisChoice, LambdaChoice, ModelError, ModelSpec};
use crate::quad::simpson;
use crate::survdata::{CensorKind, DataError, Dataset, Observation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};
use thiserror::Error;

const PRESET_1: &str = include_str!("../presets/sim1.toml");
const PRESET_2: &str = include_str!("../presets/sim2.toml");
const PRESET_3: &str = include_str!("../presets/sim3.toml");

/// Draws used to locate percentiles of the marginal event-time distribution.
pub const PERCENTILE_DRAWS: usize = 1_000_000;
const PERCENTILE_SEED: u64 = 0x5eed_0f_7e4c;
/// Subintervals of the composite Simpson rule for the integrated discrepancy.
pub const DISCREPANCY_INTERVALS: usize = 512;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown scenario preset {0} (expected 1, 2 or 3)")]
    UnknownPreset(u32),
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("cannot parse scenario file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("uniform draw {0} outside (0, 1)")]
    UniformOutOfRange(f64),
    #[error("replication count must be at least 1")]
    NoReplications,
    #[error("cannot build worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Baseline hazards with closed-form cumulative hazards and inverses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// `h0(y) = y`, `H0(y) = y^2 / 2`.
    Linear,
    /// `h0(y) = 3 y^2`, `H0(y) = y^3`.
    Quadratic,
    /// `h0(y) = 4 e^2 y^3 / (e^2 y^4 + 1)`, `H0(y) = log(1 + e^2 y^4)`.
    LogLogistic,
}

impl Baseline {
    pub fn hazard(self, y: f64) -> f64 {
        match self {
            Baseline::Linear => y,
            Baseline::Quadratic => 3.0 * y * y,
            Baseline::LogLogistic => {
                let e2 = std::f64::consts::E.powi(2);
                4.0 * e2 * y.powi(3) / (e2 * y.powi(4) + 1.0)
            }
        }
    }

    pub fn cumulative(self, y: f64) -> f64 {
        match self {
            Baseline::Linear => 0.5 * y * y,
            Baseline::Quadratic => y.powi(3),
            Baseline::LogLogistic => (std::f64::consts::E.powi(2) * y.powi(4)).ln_1p(),
        }
    }

    /// Inverse of the cumulative hazard.
    pub fn inverse_cumulative(self, c: f64) -> f64 {
        match self {
            Baseline::Linear => (2.0 * c).sqrt(),
            Baseline::Quadratic => c.cbrt(),
            Baseline::LogLogistic => (c.exp_m1() * (-2.0f64).exp()).powf(0.25),
        }
    }
}

/// How the censoring interval is built from `U^L` and `U^R`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CensoringScheme {
    /// Interval `[gL U^L, gL U^L + gR U^R]`.
    #[default]
    Additive,
    /// Interval `[gL U^L, gR U^R]` with the left case checked first.
    AsPrinted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub id: u32,
    pub beta: Vec<f64>,
    /// Covariate `j` is `covariate_scales[j] * U(0, 1)`.
    pub covariate_scales: Vec<f64>,
    pub baseline: Baseline,
    pub gamma_left: f64,
    pub gamma_right: f64,
    pub pi_event: f64,
    pub n: usize,
    #[serde(default)]
    pub censoring: CensoringScheme,
}

impl ScenarioConfig {
    pub fn preset(id: u32) -> Result<Self, SimError> {
        let text = match id {
            1 => PRESET_1,
            2 => PRESET_2,
            3 => PRESET_3,
            other => return Err(SimError::UnknownPreset(other)),
        };
        Self::from_toml(text)
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.beta.len() != self.covariate_scales.len() {
            return bad(format!(
                "{} coefficients but {} covariate scales",
                self.beta.len(),
                self.covariate_scales.len()
            ));
        }
        if !(0.0..=1.0).contains(&self.pi_event) {
            return bad(format!("pi_event {} outside [0, 1]", self.pi_event));
        }
        if !(self.gamma_left > 0.0 && self.gamma_right >= self.gamma_left) {
            return bad(format!(
                "need gamma_right >= gamma_left > 0, got {} and {}",
                self.gamma_left, self.gamma_right
            ));
        }
        if self.n == 0 {
            return bad("sample size must be positive".into());
        }
        if self.beta.iter().chain(&self.covariate_scales).any(|v| !v.is_finite()) {
            return bad("coefficients and scales must be finite".into());
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    /// Interior knot count used for this scenario's sample size: the
    /// benchmark settings where they exist, the cube-root rule otherwise.
    pub fn default_n_interior(&self) -> usize {
        match (self.id, self.n) {
            (1, 200) | (2 | 3, 100) => 7,
            (1, 500) | (2 | 3, 500) => 9,
            (2 | 3, 2000) => 11,
            (_, n) => crate::model::auto_n_interior(n),
        }
    }

    fn draw_covariates<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.covariate_scales
            .iter()
            .map(|s| s * rng.random::<f64>())
            .collect()
    }

    fn linear_predictor(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.beta).map(|(a, b)| a * b).sum()
    }
}

/// `Y = H0^-1(-log u / exp(x beta))`.
pub fn sample_event_time(baseline: Baseline, x: &[f64], beta: &[f64], u: f64) -> Result<f64, SimError> {
    if !(u > 0.0 && u < 1.0) {
        return Err(SimError::UniformOutOfRange(u));
    }
    let lp: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
    Ok(baseline.inverse_cumulative(-u.ln() * (-lp).exp()))
}

/// Uniform on the open interval (0, 1).
fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Censoring of a latent time `y` given the two censoring uniforms.
pub fn censor(cfg: &ScenarioConfig, y: f64, u_left: f64, u_right: f64) -> (f64, f64) {
    let left = cfg.gamma_left * u_left;
    let right = match cfg.censoring {
        CensoringScheme::Additive => left + cfg.gamma_right * u_right,
        CensoringScheme::AsPrinted => cfg.gamma_right * u_right,
    };
    if y < left {
        (0.0, left)
    } else if y <= right {
        (left, right)
    } else {
        (right.max(left), f64::INFINITY)
    }
}

/// One observation per subject: covariates, `U^E`, the event-time uniform,
/// then `U^L` and `U^R`, drawn in that order.
pub fn generate_observation<R: Rng>(cfg: &ScenarioConfig, rng: &mut R) -> Observation {
    let x = cfg.draw_covariates(rng);
    let u_event: f64 = rng.random();
    let u = open_unit(rng);
    let u_left: f64 = open_unit(rng);
    let u_right: f64 = open_unit(rng);
    let y = cfg
        .baseline
        .inverse_cumulative(-u.ln() * (-cfg.linear_predictor(&x)).exp());
    let (l, r) = if u_event < cfg.pi_event {
        (y, y)
    } else {
        censor(cfg, y, u_left, u_right)
    };
    Observation::new(l, r, x).expect("generated endpoints are ordered and nonnegative")
}

pub fn generate_sample<R: Rng>(cfg: &ScenarioConfig, rng: &mut R) -> Result<Dataset, SimError> {
    let obs = (0..cfg.n).map(|_| generate_observation(cfg, rng)).collect();
    Ok(Dataset::from_observations(obs)?)
}

/// Fractions of left, interval and right censoring among censored rows.
pub fn censoring_repartition(data: &Dataset) -> [f64; 3] {
    let counts = [CensorKind::Left, CensorKind::Interval, CensorKind::Right].map(|k| data.count(k));
    let total: usize = counts.iter().sum();
    counts.map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
}

/// Percentiles of the marginal event-time distribution (covariates mixed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruePercentiles {
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
}

impl TruePercentiles {
    pub fn evaluation_points(&self) -> [(f64, f64); 3] {
        [(0.25, self.p25), (0.5, self.p50), (0.75, self.p75)]
    }
}

fn percentile_cache() -> &'static Mutex<HashMap<String, TruePercentiles>> {
    static CACHE: OnceLock<Mutex<HashMap<String, TruePercentiles>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Monte Carlo percentiles of `Y` with a fixed internal seed; cached per
/// baseline, coefficients and covariate scales.
pub fn true_percentiles(cfg: &ScenarioConfig) -> TruePercentiles {
    let key = format!("{:?}|{:?}|{:?}", cfg.baseline, cfg.beta, cfg.covariate_scales);
    if let Some(hit) = percentile_cache().lock().expect("cache lock").get(&key) {
        return *hit;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(PERCENTILE_SEED);
    let mut draws: Vec<f64> = (0..PERCENTILE_DRAWS)
        .map(|_| {
            let x = cfg.draw_covariates(&mut rng);
            let u = open_unit(&mut rng);
            cfg.baseline
                .inverse_cumulative(-u.ln() * (-cfg.linear_predictor(&x)).exp())
        })
        .collect();
    draws.sort_unstable_by(f64::total_cmp);
    let q = |p: f64| crate::basis::quantile(&draws, p);
    let out = TruePercentiles {
        p25: q(0.25),
        p50: q(0.5),
        p75: q(0.75),
        p90: q(0.9),
    };
    percentile_cache()
        .lock()
        .expect("cache lock")
        .insert(key, out);
    out
}

/// `int_0^t_star |h_hat - h0|` by composite Simpson.
pub fn integrated_discrepancy<F: Fn(f64) -> f64>(estimate: F, baseline: Baseline, t_star: f64) -> f64 {
    simpson(
        |t| (estimate(t) - baseline.hazard(t)).abs(),
        0.0,
        t_star,
        DISCREPANCY_INTERVALS,
    )
}

/// Estimator settings shared by all replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationFit {
    pub basis: BasisChoice,
    /// `None` uses the scenario default.
    pub n_interior: Option<usize>,
    pub lambda: LambdaChoice,
    pub level: f64,
}

impl Default for SimulationFit {
    fn default() -> Self {
        SimulationFit {
            basis: BasisChoice::MSpline { order: 3 },
            n_interior: None,
            lambda: LambdaChoice::Auto,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// Data, basis or optimizer error, or a fit that did not reach the KKT tolerance.
    NoSolution,
    /// Covariance not positive semidefinite.
    NonPsd,
    /// Free block of the information matrix singular.
    Singular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub beta_hat: Vec<f64>,
    pub se_beta: Vec<f64>,
    pub h0_hat: [f64; 3],
    pub h0_se: [f64; 3],
    pub h0_covered: [bool; 3],
    pub discrepancy: f64,
    pub lambda: f64,
    pub smoothing_iterations: usize,
    pub smoothing_stabilized: bool,
    pub event_fraction: f64,
    pub repartition: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReplicationOutcome {
    Success(ReplicationRecord),
    Failure(FailureKind),
}

/// Fits one replication with its own RNG stream derived from `(seed, index)`.
pub fn run_replication(
    cfg: &ScenarioConfig,
    spec: &SimulationFit,
    truth: &TruePercentiles,
    seed: u64,
    index: u64,
) -> ReplicationOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let data = match generate_sample(cfg, &mut rng) {
        Ok(d) => d,
        Err(_) => return ReplicationOutcome::Failure(FailureKind::NoSolution),
    };
    let model = ModelSpec {
        basis: spec.basis,
        n_interior: Some(spec.n_interior.unwrap_or_else(|| cfg.default_n_interior())),
        lambda: spec.lambda,
        ..Default::default()
    };
    let fitted = match fit_model(&data, &model) {
        Ok(f) if f.fit.converged => f,
        Ok(_) | Err(ModelError::Fit(_) | ModelError::Smoothing(_)) => {
            return ReplicationOutcome::Failure(FailureKind::NoSolution)
        }
        Err(e) => {
            log::debug!("replication {index}: {e}");
            return ReplicationOutcome::Failure(FailureKind::NoSolution);
        }
    };
    let cov = match &fitted.covariance {
        Ok(c) => c,
        Err(InferenceError::NotPositiveSemidefinite { .. }) => {
            return ReplicationOutcome::Failure(FailureKind::NonPsd)
        }
        Err(_) => return ReplicationOutcome::Failure(FailureKind::Singular),
    };
    let system = fitted.problem.system();
    let state = &fitted.fit.state;
    let points = truth.evaluation_points().map(|(_, t)| t);
    let band = baseline_hazard_band(state, cov, system, &points, spec.level)
        .expect("covariance matches the fitted state");
    let h0_hat = [band[0].h0, band[1].h0, band[2].h0];
    let h0_se = [band[0].se, band[1].se, band[2].se];
    let h0_covered = [0, 1, 2].map(|k| {
        let truth = cfg.baseline.hazard(points[k]);
        band[k].lower <= truth && truth <= band[k].upper
    });
    let estimate = |t: f64| {
        system
            .eval_all(t)
            .iter()
            .zip(&state.theta)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let discrepancy = integrated_discrepancy(estimate, cfg.baseline, truth.p90);
    let (smoothing_iterations, smoothing_stabilized) = match &fitted.smoothing {
        Some(a) => (a.trace.len(), a.stabilized),
        None => (0, true),
    };
    ReplicationOutcome::Success(ReplicationRecord {
        beta_hat: state.beta.clone(),
        se_beta: cov.se_beta.clone(),
        h0_hat,
        h0_se,
        h0_covered,
        discrepancy,
        lambda: state.lambda,
        smoothing_iterations,
        smoothing_stabilized,
        event_fraction: data.count(CensorKind::Event) as f64 / data.n() as f64,
        repartition: censoring_repartition(&data),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterMetrics {
    pub name: String,
    pub truth: f64,
    pub bias: f64,
    pub mc_sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub percentile: f64,
    pub t: f64,
    pub truth: f64,
    pub bias: f64,
    pub mc_sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureTally {
    pub no_solution: usize,
    pub non_psd: usize,
    pub singular: usize,
}

impl FailureTally {
    pub fn total(&self) -> usize {
        self.no_solution + self.non_psd + self.singular
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationMetrics {
    pub scenario: u32,
    pub n: usize,
    pub pi_event: f64,
    pub replications: usize,
    pub succeeded: usize,
    pub failures: FailureTally,
    pub parameters: Vec<ParameterMetrics>,
    pub baseline: Vec<BaselineMetrics>,
    pub t_star: f64,
    pub mean_discrepancy: f64,
    pub sd_discrepancy: f64,
    pub mean_smoothing_iterations: f64,
    /// Fraction of successful replications whose smoothing loop stabilized
    /// within 20 passes.
    pub smoothing_within_20: f64,
    pub mean_event_fraction: f64,
    pub mean_repartition: [f64; 3],
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Aggregates outcomes in index order.
pub fn aggregate(
    cfg: &ScenarioConfig,
    spec: &SimulationFit,
    truth: &TruePercentiles,
    outcomes: &[ReplicationOutcome],
) -> ReplicationMetrics {
    let z = z_quantile(spec.level).unwrap_or(1.959964);
    let mut failures = FailureTally::default();
    let mut ok = Vec::new();
    for o in outcomes {
        match o {
            ReplicationOutcome::Success(r) => ok.push(r),
            ReplicationOutcome::Failure(FailureKind::NoSolution) => failures.no_solution += 1,
            ReplicationOutcome::Failure(FailureKind::NonPsd) => failures.non_psd += 1,
            ReplicationOutcome::Failure(FailureKind::Singular) => failures.singular += 1,
        }
    }
    let parameters = cfg
        .beta
        .iter()
        .enumerate()
        .map(|(j, &truth)| {
            let est: Vec<f64> = ok.iter().map(|r| r.beta_hat[j]).collect();
            let se: Vec<f64> = ok.iter().map(|r| r.se_beta[j]).collect();
            let hits = ok
                .iter()
                .filter(|r| (r.beta_hat[j] - truth).abs() <= z * r.se_beta[j])
                .count();
            ParameterMetrics {
                name: format!("beta{}", j + 1),
                truth,
                bias: mean(&est) - truth,
                mc_sd: sd(&est),
                mean_se: mean(&se),
                coverage: hits as f64 / ok.len().max(1) as f64,
            }
        })
        .collect();
    let baseline = truth
        .evaluation_points()
        .iter()
        .enumerate()
        .map(|(k, &(pct, t))| {
            let h0 = cfg.baseline.hazard(t);
            let est: Vec<f64> = ok.iter().map(|r| r.h0_hat[k]).collect();
            let se: Vec<f64> = ok.iter().map(|r| r.h0_se[k]).collect();
            let hits = ok.iter().filter(|r| r.h0_covered[k]).count();
            BaselineMetrics {
                percentile: pct,
                t,
                truth: h0,
                bias: mean(&est) - h0,
                mc_sd: sd(&est),
                mean_se: mean(&se),
                coverage: hits as f64 / ok.len().max(1) as f64,
            }
        })
        .collect();
    let d: Vec<f64> = ok.iter().map(|r| r.discrepancy).collect();
    let iters: Vec<f64> = ok.iter().map(|r| r.smoothing_iterations as f64).collect();
    let quick = ok
        .iter()
        .filter(|r| r.smoothing_stabilized && r.smoothing_iterations <= 20)
        .count();
    let events: Vec<f64> = ok.iter().map(|r| r.event_fraction).collect();
    let rep = [0, 1, 2].map(|k| mean(&ok.iter().map(|r| r.repartition[k]).collect::<Vec<_>>()));
    ReplicationMetrics {
        scenario: cfg.id,
        n: cfg.n,
        pi_event: cfg.pi_event,
        replications: outcomes.len(),
        succeeded: ok.len(),
        failures,
        parameters,
        baseline,
        t_star: truth.p90,
        mean_discrepancy: mean(&d),
        sd_discrepancy: sd(&d),
        mean_smoothing_iterations: mean(&iters),
        smoothing_within_20: quick as f64 / ok.len().max(1) as f64,
        mean_event_fraction: mean(&events),
        mean_repartition: rep,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRun {
    pub metrics: ReplicationMetrics,
    pub outcomes: Vec<ReplicationOutcome>,
}

/// Runs `reps` replications on `workers` threads. Each replication owns the
/// RNG stream `(seed, index)`, so results do not depend on `workers`.
pub fn run_replications(
    cfg: &ScenarioConfig,
    spec: &SimulationFit,
    reps: usize,
    seed: u64,
    workers: usize,
) -> Result<SimulationRun, SimError> {
    cfg.validate()?;
    if reps == 0 {
        return Err(SimError::NoReplications);
    }
    let truth = true_percentiles(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()?;
    let outcomes: Vec<ReplicationOutcome> = pool.install(|| {
        (0..reps as u64)
            .into_par_iter()
            .map(|i| run_replication(cfg, spec, &truth, seed, i))
            .collect()
    });
    let metrics = aggregate(cfg, spec, &truth, &outcomes);
    Ok(SimulationRun { metrics, outcomes })
}
