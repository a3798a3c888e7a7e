//! Fit and simulation reports. Text output rounds to six significant digits;
//! CSV and JSON carry full precision (shortest round-trip representation).

use crate::basis::BasisSystem;
use crate::inference::{
    baseline_hazard_band, predict_survival_band, regression_summary, HazardBandPoint,
    InferenceError, RegressionSummary, SurvivalBandPoint,
};
use crate::model::{ModelFit, ModelSpec};
use crate::simulator::{ReplicationMetrics, ReplicationOutcome};
use serde::{Deserialize, Serialize};
use std::fmt::Write;

/// Six significant digits, switching to exponent form for very large or
/// small magnitudes.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "NaN".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..6).contains(&mag) {
        let decimals = (5 - mag).max(0) as usize;
        let s = format!("{x:.decimals$}");
        // rounding may have produced an extra digit (9.999995 -> 10.00000)
        let rounded: f64 = s.parse().unwrap_or(x);
        if rounded != 0.0 && rounded.abs().log10().floor() as i32 != mag {
            let decimals = (4 - mag).max(0) as usize;
            return format!("{x:.decimals$}");
        }
        s
    } else {
        format!("{x:.5e}")
    }
}

/// [`sig6`] without trailing zeros, for labels such as confidence levels.
pub fn sig6_trimmed(x: f64) -> String {
    let s = sig6(x);
    if s.contains('.') && !s.contains('e') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Full-precision cell for machine-readable output.
pub fn full(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:?}")
    }
}

/// Equally spaced grid including both ends.
pub fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![lo],
        _ => (0..points)
            .map(|i| {
                if i == points - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (points - 1) as f64
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub input_sha256: String,
    pub spec: ModelSpec,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n: usize,
    pub censoring: [usize; 4],
    pub m: usize,
    pub knots: Vec<f64>,
    pub converged: bool,
    pub precision_limited: bool,
    pub iterations: usize,
    pub objective: f64,
    pub kkt_residual: f64,
    pub kkt_tol: f64,
    pub lambda: f64,
    pub sigma2: Option<f64>,
    pub nu: Option<f64>,
    pub smoothing_iterations: Option<usize>,
    pub smoothing_stabilized: Option<bool>,
    pub active_set: Vec<usize>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub provenance: Provenance,
    pub diagnostics: Diagnostics,
    pub regression: RegressionSummary,
    pub baseline_hazard: Vec<HazardBandPoint>,
    pub survival_profile: Option<Vec<f64>>,
    pub survival: Option<Vec<SurvivalBandPoint>>,
}

/// Assembles the report for a fitted model. Fails when the covariance is
/// unavailable.
pub fn build_fit_report(
    fitted: &ModelFit,
    covariate_names: &[String],
    censoring: [usize; 4],
    provenance: Provenance,
    grid_points: usize,
    profile: Option<&[f64]>,
) -> Result<FitReport, InferenceError> {
    let cov = fitted.covariance.as_ref().map_err(Clone::clone)?;
    let level = provenance.level;
    let system = fitted.problem.system();
    let state = &fitted.fit.state;
    let regression = regression_summary(&fitted.fit, cov, covariate_names, level)?;
    let (lo, hi) = system.range();
    let points = grid(lo, hi, grid_points);
    let baseline_hazard = baseline_hazard_band(state, cov, system, &points, level)?;
    let survival = match profile {
        Some(x) => {
            let pts = grid(0f64.min(lo), hi, grid_points);
            Some(predict_survival_band(state, cov, system, x, &pts, level)?)
        }
        None => None,
    };
    let smoothing = fitted.smoothing.as_ref();
    let diagnostics = Diagnostics {
        n: fitted.problem.n(),
        censoring,
        m: fitted.problem.m(),
        knots: system.knots().knots().to_vec(),
        converged: fitted.fit.converged,
        precision_limited: fitted.fit.precision_limited,
        iterations: fitted.fit.iterations,
        objective: fitted.fit.objective(),
        kkt_residual: fitted.fit.kkt_residual,
        kkt_tol: fitted.fit.kkt_tol,
        lambda: state.lambda,
        sigma2: smoothing.map(|s| s.state.sigma2),
        nu: smoothing.map(|s| s.state.nu),
        smoothing_iterations: smoothing.map(|s| s.trace.len()),
        smoothing_stabilized: smoothing.map(|s| s.stabilized),
        active_set: cov.active.active.clone(),
        theta: state.theta.clone(),
    };
    Ok(FitReport {
        provenance,
        diagnostics,
        regression,
        baseline_hazard,
        survival_profile: profile.map(<[f64]>::to_vec),
        survival,
    })
}

fn p_value_text(p: f64) -> String {
    if p < 1e-4 {
        "<0.0001".into()
    } else {
        sig6(p)
    }
}

pub fn render_fit_text(report: &FitReport) -> String {
    let d = &report.diagnostics;
    let mut out = String::new();
    let pct = format!("{}%", sig6_trimmed(100.0 * report.regression.level));
    let _ = writeln!(out, "Proportional hazards fit (maximum penalized likelihood)");
    let _ = writeln!(out, "input sha256: {}", report.provenance.input_sha256);
    let _ = writeln!(
        out,
        "n = {} (events {}, left {}, interval {}, right {})",
        d.n, d.censoring[0], d.censoring[1], d.censoring[2], d.censoring[3]
    );
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<16} {:>12} {:>12} {:>12} {:>24} {:>10}",
        "covariate",
        "estimate",
        "se",
        "hazard ratio",
        format!("{pct} CI"),
        "p-value"
    );
    for r in &report.regression.rows {
        let ci = format!("({}, {})", sig6(r.hr_lower), sig6(r.hr_upper));
        let _ = writeln!(
            out,
            "{:<16} {:>12} {:>12} {:>12} {:>24} {:>10}",
            r.name,
            sig6(r.estimate),
            sig6(r.se),
            sig6(r.hazard_ratio),
            ci,
            p_value_text(r.p_value)
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "basis functions: {} on knots [{}]", d.m, d.knots.iter().map(|k| sig6(*k)).collect::<Vec<_>>().join(", "));
    let _ = writeln!(out, "smoothing: lambda = {}", sig6(d.lambda));
    if let (Some(s2), Some(nu), Some(it), Some(stab)) =
        (d.sigma2, d.nu, d.smoothing_iterations, d.smoothing_stabilized)
    {
        let _ = writeln!(
            out,
            "           sigma2 = {}, model df = {}, passes = {}{}",
            sig6(s2),
            sig6(nu),
            it,
            if stab { "" } else { " (not stabilized)" }
        );
    }
    let _ = writeln!(
        out,
        "optimizer: {} after {} iterations, KKT residual {} (tolerance {}){}",
        if d.converged { "converged" } else { "NOT converged" },
        d.iterations,
        sig6(d.kkt_residual),
        sig6(d.kkt_tol),
        if d.precision_limited { ", limited by floating-point resolution" } else { "" }
    );
    let _ = writeln!(out, "objective: {}", sig6(d.objective));
    let _ = writeln!(out, "active constraints: {}", d.active_set.len());
    out
}

pub fn regression_csv(report: &FitReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = ["covariate", "estimate", "se", "hazard_ratio", "hr_lower", "hr_upper", "z", "p_value"];
    w.write_record(header).expect("in-memory write");
    for r in &report.regression.rows {
        let nums = [r.estimate, r.se, r.hazard_ratio, r.hr_lower, r.hr_upper, r.z, r.p_value];
        let mut record = vec![r.name.clone()];
        record.extend(nums.iter().map(|v| full(*v)));
        w.write_record(&record).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn hazard_csv(points: &[HazardBandPoint]) -> String {
    let mut out = String::from("t,h0,se,lower,upper\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            full(p.t),
            full(p.h0),
            full(p.se),
            full(p.lower),
            full(p.upper)
        );
    }
    out
}

pub fn survival_csv(points: &[SurvivalBandPoint]) -> String {
    let mut out = String::from("t,survival,lower,upper,degenerate\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            full(p.t),
            full(p.survival),
            full(p.lower),
            full(p.upper),
            p.degenerate
        );
    }
    out
}

/// `(t, u, psi_u(t), Psi_u(t))` rows over `points` grid values.
pub fn bases_csv(system: &BasisSystem, points: usize) -> String {
    let (lo, hi) = system.range();
    let mut out = String::from("t,u,psi,Psi\n");
    for t in grid(lo, hi, points) {
        let psi = system.eval_all(t);
        let cum = system.cumulative_all(t);
        for u in 0..system.m() {
            let _ = writeln!(out, "{},{},{},{}", full(t), u, full(psi[u]), full(cum[u]));
        }
    }
    out
}

pub fn render_metrics_text(m: &ReplicationMetrics) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Simulation {} (n = {}, event proportion {}%): {} of {} replications succeeded",
        m.scenario,
        m.n,
        sig6_trimmed(100.0 * m.pi_event),
        m.succeeded,
        m.replications
    );
    let _ = writeln!(
        out,
        "failures: no solution {}, non-PSD covariance {}, singular information {}",
        m.failures.no_solution, m.failures.non_psd, m.failures.singular
    );
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<10} {:>10} {:>12} {:>12} {:>12} {:>10}",
        "parameter", "true", "bias", "mean SE", "MC SD", "coverage"
    );
    for p in &m.parameters {
        let _ = writeln!(
            out,
            "{:<10} {:>10} {:>12} {:>12} {:>12} {:>10}",
            p.name,
            sig6(p.truth),
            sig6(p.bias),
            sig6(p.mean_se),
            sig6(p.mc_sd),
            sig6(p.coverage)
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<10} {:>10} {:>10} {:>12} {:>12} {:>12} {:>10}",
        "h0 at", "t", "true", "bias", "mean SE", "MC SD", "coverage"
    );
    for b in &m.baseline {
        let _ = writeln!(
            out,
            "{:<10} {:>10} {:>10} {:>12} {:>12} {:>12} {:>10}",
            format!("{}th pct", sig6_trimmed(100.0 * b.percentile)),
            sig6(b.t),
            sig6(b.truth),
            sig6(b.bias),
            sig6(b.mean_se),
            sig6(b.mc_sd),
            sig6(b.coverage)
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "integrated discrepancy on [0, {}]: mean {}, sd {}",
        sig6(m.t_star),
        sig6(m.mean_discrepancy),
        sig6(m.sd_discrepancy)
    );
    let _ = writeln!(
        out,
        "smoothing passes: mean {}, stabilized within 20 in {}% of fits",
        sig6(m.mean_smoothing_iterations),
        sig6(100.0 * m.smoothing_within_20)
    );
    let _ = writeln!(
        out,
        "censoring among censored rows: left {}%, interval {}%, right {}%",
        sig6(100.0 * m.mean_repartition[0]),
        sig6(100.0 * m.mean_repartition[1]),
        sig6(100.0 * m.mean_repartition[2])
    );
    out
}

pub fn metrics_csv(m: &ReplicationMetrics) -> String {
    let mut out = String::from("quantity,t,truth,bias,mean_se,mc_sd,coverage\n");
    for p in &m.parameters {
        let _ = writeln!(
            out,
            "{},,{},{},{},{},{}",
            p.name,
            full(p.truth),
            full(p.bias),
            full(p.mean_se),
            full(p.mc_sd),
            full(p.coverage)
        );
    }
    for b in &m.baseline {
        let _ = writeln!(
            out,
            "h0_p{},{},{},{},{},{},{}",
            (100.0 * b.percentile).round(),
            full(b.t),
            full(b.truth),
            full(b.bias),
            full(b.mean_se),
            full(b.mc_sd),
            full(b.coverage)
        );
    }
    let _ = writeln!(out, "discrepancy,{},,{},,{},", full(m.t_star), full(m.mean_discrepancy), full(m.sd_discrepancy));
    out
}

pub fn replications_csv(outcomes: &[ReplicationOutcome]) -> String {
    let mut out = String::from("replication,status,lambda,smoothing_passes,discrepancy,beta_hat,se_beta\n");
    for (i, o) in outcomes.iter().enumerate() {
        match o {
            ReplicationOutcome::Success(r) => {
                let join = |v: &[f64]| v.iter().map(|x| full(*x)).collect::<Vec<_>>().join(";");
                let _ = writeln!(
                    out,
                    "{i},ok,{},{},{},{},{}",
                    full(r.lambda),
                    r.smoothing_iterations,
                    full(r.discrepancy),
                    join(&r.beta_hat),
                    join(&r.se_beta)
                );
            }
            ReplicationOutcome::Failure(kind) => {
                let label = serde_json::to_value(kind)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default();
                let _ = writeln!(out, "{i},{label},,,,,");
            }
        }
    }
    out
}
