//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line to stderr
//! (written directly, so it shows without `--nocapture`) and then asserts.

use nalgebra::{DMatrix, DVector};
use phmpl::basis::{BasisSystem, KnotSequence};
use phmpl::inference::{detect_active, fit_covariance, sandwich_covariance, ActiveSet};
use phmpl::likelihood::{ModelState, Problem};
use phmpl::model::{build_system, fit_model, BasisChoice, LambdaChoice, ModelSpec};
use phmpl::optimizer::{boundary_eps, fit, resolution_floor, FitOptions};
use phmpl::simulator::{
    censoring_repartition, generate_sample, run_replications, ScenarioConfig, SimulationFit,
    SimulationRun,
};
use phmpl::survdata::{Dataset, Observation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;
use std::sync::OnceLock;

fn verdict(criterion: u32, title: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {criterion} [{title}]: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Mixed-censoring data on (0, 3] with `p` covariates in (-1, 1).
fn random_data(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Dataset {
    let obs = (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a: f64 = rng.random_range(0.2..2.6);
            let b = (a + rng.random_range(0.1..1.0)).min(3.0);
            match i % 4 {
                0 => Observation::new(a, a, x),
                1 => Observation::new(a, f64::INFINITY, x),
                2 => Observation::new(0.0, b, x),
                _ => Observation::new(a, b, x),
            }
            .unwrap()
        })
        .collect();
    Dataset::from_observations(obs).unwrap()
}

fn family(k: usize) -> BasisChoice {
    match k % 3 {
        0 => BasisChoice::MSpline { order: 3 },
        1 => BasisChoice::MSpline { order: 4 },
        _ => BasisChoice::Gaussian {
            zeta_interior: 0.35,
            zeta_boundary: 0.4,
        },
    }
}

fn random_problem(rng: &mut ChaCha8Rng, k: usize, n: usize, p: usize, n_interior: usize) -> Problem {
    let data = random_data(rng, n, p);
    let spec = ModelSpec {
        basis: family(k),
        n_interior: Some(n_interior),
        ..Default::default()
    };
    Problem::new(build_system(&data, &spec).unwrap(), &data).unwrap()
}

fn with_eta(state: &ModelState, k: usize, delta: f64) -> ModelState {
    let mut s = state.clone();
    let m = s.theta.len();
    if k < m {
        s.theta[k] += delta;
    } else {
        s.beta[k - m] += delta;
    }
    s
}

#[test]
fn criterion_1_derivatives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_score, mut worst_hess) = (0.0f64, 0.0f64);
    for trial in 0..50 {
        let pr = random_problem(&mut rng, trial, 30, 2, 3);
        let lambda = if trial % 5 == 0 { 0.0 } else { rng.random_range(0.0..0.5) };
        let state = ModelState::new(
            (0..2).map(|_| rng.random_range(-0.5..0.5)).collect(),
            (0..pr.m()).map(|_| rng.random_range(0.05..0.6)).collect(),
            lambda,
        )
        .unwrap();
        let g = pr.gradient(&state).unwrap();
        let hess = pr.hessian(&state).unwrap();
        let eta = state.eta();
        for k in 0..eta.len() {
            let h = 1e-6 * eta[k].abs().max(1e-2);
            let fd = (pr.objective(&with_eta(&state, k, h)) - pr.objective(&with_eta(&state, k, -h)))
                / (2.0 * h);
            worst_score = worst_score.max((g[k] - fd).abs() / fd.abs().max(1.0));

            let h = 1e-5;
            let col: DVector<f64> = (pr.gradient(&with_eta(&state, k, h)).unwrap()
                - pr.gradient(&with_eta(&state, k, -h)).unwrap())
                / (2.0 * h);
            for r in 0..eta.len() {
                worst_hess = worst_hess.max((hess[(r, k)] - col[r]).abs() / col[r].abs().max(1.0));
            }
        }
    }
    let pass = worst_score <= 1e-6 && worst_hess <= 1e-4;
    verdict(
        1,
        "derivative oracle",
        pass,
        &format!("max score rel err {worst_score:.2e}, max Hessian rel err {worst_hess:.2e}"),
    );
    assert!(pass);
}

/// KKT residual recomputed from the score at the returned state.
fn recomputed_kkt(pr: &Problem, state: &ModelState) -> f64 {
    let (gb, gt) = pr.score(state).unwrap();
    let eps = boundary_eps(&state.theta);
    let mut r = gb.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    for (t, g) in state.theta.iter().zip(&gt) {
        r = r.max(if *t > eps { g.abs() } else { g.max(0.0) });
    }
    r
}

#[test]
fn criterion_2_monotone_ascent_and_feasibility() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut monotone, mut feasible, mut kkt_ok) = (true, true, true);
    let mut converged = 0;
    for trial in 0..100 {
        let n = rng.random_range(30..80);
        let p = rng.random_range(0..3);
        let n_interior = rng.random_range(1..5);
        let pr = random_problem(&mut rng, trial, n, p, n_interior);
        let lambda = if trial % 4 == 0 { 0.0 } else { 10f64.powf(rng.random_range(-3.0..1.0)) };
        let res = fit(&pr, lambda, &FitOptions::default()).unwrap();
        monotone &= res.objective_trace.windows(2).all(|w| w[1] >= w[0] - 1e-10);
        feasible &= res.min_theta_trace.iter().all(|t| *t >= 0.0);
        feasible &= res.state.theta.iter().all(|t| *t >= 0.0);
        if res.converged {
            converged += 1;
            let r = recomputed_kkt(&pr, &res.state);
            let tol = if res.precision_limited {
                res.kkt_tol.max(resolution_floor(&pr, lambda, res.objective()))
            } else {
                res.kkt_tol
            };
            kkt_ok &= r < tol;
        }
    }
    let pass = monotone && feasible && kkt_ok && converged > 0;
    verdict(
        2,
        "monotone ascent and feasibility",
        pass,
        &format!("monotone {monotone}, theta >= 0 {feasible}, KKT on recomputation {kkt_ok}, {converged}/100 converged"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_exponential_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let times: Vec<f64> = (0..80).map(|_| -(1.0 - rng.random::<f64>()).ln() / 1.7).collect();
    let obs = times
        .iter()
        .map(|&t| Observation::new(t, t, vec![]).unwrap())
        .collect();
    let data = Dataset::from_observations(obs).unwrap();
    let mle = times.len() as f64 / times.iter().sum::<f64>();
    let spec = ModelSpec {
        basis: BasisChoice::MSpline { order: 1 },
        n_interior: Some(0),
        origin: true,
        lambda: LambdaChoice::Fixed(0.0),
        ..Default::default()
    };
    let out = fit_model(&data, &spec).unwrap();
    let system = out.problem.system();
    let (lo, hi) = system.range();
    let worst = [lo, 0.5 * (lo + hi), hi]
        .iter()
        .map(|&t| {
            let h: f64 = system
                .eval_all(t)
                .iter()
                .zip(&out.fit.state.theta)
                .map(|(a, b)| a * b)
                .sum();
            (h - mle).abs() / mle
        })
        .fold(0.0, f64::max);
    let pass = out.fit.converged && worst <= 1e-6;
    verdict(3, "exponential oracle", pass, &format!("MLE {mle:.6}, rel err {worst:.2e}"));
    assert!(pass);
}

const SIM1_SEED: u64 = 2024;

fn sim1_run() -> &'static SimulationRun {
    static RUN: OnceLock<SimulationRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = ScenarioConfig::preset(1).unwrap();
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        run_replications(&cfg, &SimulationFit::default(), 500, SIM1_SEED, workers).unwrap()
    })
}

#[test]
fn criterion_4_simulation_1_regression_metrics() {
    let m = &sim1_run().metrics;
    let b = &m.parameters[0];
    let ratio = b.mean_se / b.mc_sd;
    let pass = b.bias.abs() <= 0.05
        && (ratio - 1.0).abs() <= 0.10
        && (0.92..=0.97).contains(&b.coverage)
        && m.succeeded >= 450;
    verdict(
        4,
        "simulation 1 regression",
        pass,
        &format!(
            "{} of {} fits, bias {:.4}, mean SE {:.4}, MC SD {:.4}, coverage {:.3}, failures {:?}",
            m.succeeded, m.replications, b.bias, b.mean_se, b.mc_sd, b.coverage, m.failures
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_simulation_1_baseline_metrics() {
    let m = &sim1_run().metrics;
    let median = m.baseline.iter().find(|b| b.percentile == 0.5).unwrap();
    let pass = m.succeeded >= 300
        && m.mean_discrepancy <= 0.30
        && (0.88..=0.97).contains(&median.coverage);
    verdict(
        5,
        "simulation 1 baseline hazard",
        pass,
        &format!(
            "{} fits, mean D {:.4} on [0, {:.4}], h0 coverage at median {:.3}",
            m.succeeded, m.mean_discrepancy, m.t_star, median.coverage
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_censoring_repartition() {
    let targets = [
        (1, [32.5, 33.0, 34.5]),
        (2, [17.9, 43.7, 38.4]),
        (3, [17.9, 60.8, 21.4]),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (id, want) in targets {
        let mut cfg = ScenarioConfig::preset(id).unwrap();
        cfg.n = 100_000;
        let data = generate_sample(&cfg, &mut ChaCha8Rng::seed_from_u64(606)).unwrap();
        let got = censoring_repartition(&data).map(|f| 100.0 * f);
        pass &= got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 2.0);
        detail.push(format!("sim {id}: {:.1}/{:.1}/{:.1}", got[0], got[1], got[2]));
    }
    verdict(6, "censoring repartition", pass, &detail.join(", "));
    assert!(pass);
}

#[test]
fn criterion_7_sandwich_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);

    // lambda = 0, nothing active: the sandwich collapses to the inverse information
    let mut worst_inverse = 0.0f64;
    let mut reduced = 0;
    while reduced < 20 {
        let pr = random_problem(&mut rng, 0, 60, 2, 1);
        let res = fit(&pr, 0.0, &FitOptions::default()).unwrap();
        let h = pr.loglik_hessian(&res.state).unwrap();
        let d = h.nrows();
        let empty = ActiveSet {
            active: vec![],
            free: (0..d).collect(),
            kkt_violations: vec![],
        };
        let (_, gt) = pr.score(&res.state).unwrap();
        let detected = detect_active(&res.state.theta, &gt, pr.p(), boundary_eps(&res.state.theta));
        if !detected.active.is_empty() {
            continue;
        }
        let Some(inv) = (-&h).try_inverse() else { continue };
        let cov = sandwich_covariance(&h, pr.penalty(), 0.0, &empty).unwrap();
        worst_inverse = worst_inverse.max((&cov.cov_eta - &inv).amax() / inv.amax());
        reduced += 1;
    }

    // random penalized fits: active rows exactly zero, free block PSD
    let (mut zero_rows, mut psd) = (true, true);
    let mut with_active = 0;
    let mut failures = Vec::new();
    for trial in 0..50 {
        let pr = random_problem(&mut rng, trial, 60, 2, 4);
        let lambda = 10f64.powf(rng.random_range(-2.0..1.0));
        let res = fit(&pr, lambda, &FitOptions::default()).unwrap();
        match fit_covariance(&pr, &res.state) {
            Ok(c) => {
                with_active += !c.active.active.is_empty() as usize;
                for &u in &c.active.active {
                    zero_rows &= c.cov_eta.row(u).iter().all(|v| *v == 0.0);
                    zero_rows &= c.cov_eta.column(u).iter().all(|v| *v == 0.0);
                }
                let free = &c.active.free;
                let block = DMatrix::from_fn(free.len(), free.len(), |a, b| {
                    c.cov_eta[(free[a], free[b])]
                });
                let scale = block.amax();
                let min = block.symmetric_eigen().eigenvalues.min();
                psd &= min >= -1e-8 * scale;
            }
            Err(e) => {
                psd = false;
                failures.push(format!("fit {trial}: {e}"));
            }
        }
    }
    let pass = worst_inverse <= 1e-8 && zero_rows && psd && with_active > 0;
    verdict(
        7,
        "sandwich algebra",
        pass,
        &format!(
            "lambda=0 rel diff {worst_inverse:.2e} over {reduced} fits, active rows zero {zero_rows} ({with_active} fits with active set), PSD {psd} {failures:?}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_smoothing_loop() {
    let cfg = ScenarioConfig::preset(1).unwrap();
    let spec = ModelSpec {
        n_interior: Some(cfg.default_n_interior()),
        ..Default::default()
    };
    let outcomes: Vec<(bool, bool, usize)> = (0..200u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(SIM1_SEED);
            rng.set_stream(i);
            let data = generate_sample(&cfg, &mut rng).unwrap();
            match fit_model(&data, &spec) {
                Ok(f) => {
                    let auto = f.smoothing.expect("automatic smoothing");
                    let exact = auto.trace.iter().all(|s| s.lambda * 2.0 * s.sigma2 == 1.0)
                        && auto.state.lambda * 2.0 * auto.state.sigma2 == 1.0;
                    (auto.stabilized && auto.trace.len() <= 20, exact, auto.trace.len())
                }
                Err(_) => (false, true, 0),
            }
        })
        .collect();
    let quick = outcomes.iter().filter(|o| o.0).count();
    let exact = outcomes.iter().all(|o| o.1);
    let pass = quick as f64 >= 0.95 * 200.0 && exact;
    verdict(
        8,
        "smoothing loop",
        pass,
        &format!(
            "{quick}/200 stabilized within 20 passes, exact lambda*2*sigma2 = 1 {exact}, max passes {}",
            outcomes.iter().map(|o| o.2).max().unwrap_or(0)
        ),
    );
    assert!(pass);
}

/// Five-point Gauss-Legendre rule on [-1, 1].
const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

fn quadrature_penalty(s: &BasisSystem, cells_per_span: usize) -> DMatrix<f64> {
    let m = s.m();
    let mut r = DMatrix::zeros(m, m);
    for w in s.knots().knots().windows(2) {
        let step = (w[1] - w[0]) / cells_per_span as f64;
        for c in 0..cells_per_span {
            let mid = w[0] + (c as f64 + 0.5) * step;
            for (x, wt) in GL_NODES.iter().zip(GL_WEIGHTS) {
                let d2 = s.second_derivative_all(mid + 0.5 * step * x);
                for u in 0..m {
                    for v in 0..m {
                        r[(u, v)] += 0.5 * step * wt * d2[u] * d2[v];
                    }
                }
            }
        }
    }
    r
}

#[test]
fn criterion_9_basis_correctness() {
    let knot_sets: [&[f64]; 3] = [
        &[0.0, 1.0, 2.0, 3.0],
        &[0.3, 0.8, 1.1, 2.0, 2.4, 3.3],
        &[0.05, 0.1, 0.7, 2.5, 2.6, 4.0, 9.0],
    ];
    let mut notes = Vec::new();

    let mut ispline_exact = true;
    for knots in knot_sets {
        for order in 1..=4 {
            let s = BasisSystem::mspline(KnotSequence::new(knots.to_vec()).unwrap(), order).unwrap();
            let hi = s.range().1;
            for u in 0..s.m() {
                let end = s.support(u).1;
                for t in [end, end + 0.25 * (hi - end), 0.5 * (end + hi), hi] {
                    ispline_exact &= s.cumulative_all(t)[u] == 1.0;
                }
            }
        }
    }
    notes.push(format!("I-splines exactly 1 after support {ispline_exact}"));

    let mut gauss_ends = 0.0f64;
    for knots in knot_sets {
        let k = KnotSequence::new(knots.to_vec()).unwrap();
        for width in [0.2, 0.5, 1.5] {
            let s = BasisSystem::gaussian(k.clone(), vec![width; knots.len()]).unwrap();
            let (lo, hi) = s.range();
            let (a, b) = (s.cumulative_all(lo), s.cumulative_all(hi));
            for u in 0..s.m() {
                gauss_ends = gauss_ends.max(a[u].abs()).max((b[u] - 1.0).abs());
            }
        }
    }
    notes.push(format!("Gaussian boundary error {gauss_ends:.1e}"));

    let mut null_ratio = 0.0f64;
    for knots in knot_sets {
        for order in [2, 3, 4] {
            let s = BasisSystem::mspline(KnotSequence::new(knots.to_vec()).unwrap(), order).unwrap();
            let r = s.penalty_matrix();
            let norm = r.matrix().clone().symmetric_eigen().eigenvalues.amax();
            let theta = s.linear_coefficients(0.4, 1.3).unwrap();
            let theta_norm2: f64 = theta.iter().map(|t| t * t).sum();
            null_ratio = null_ratio.max(r.quadratic_form(&theta) / (norm * theta_norm2));
        }
    }
    notes.push(format!("linear-hazard penalty ratio {null_ratio:.1e}"));

    // second derivatives against finite differences of the basis values
    let mut d2_err = 0.0f64;
    // penalty against Gauss-Legendre quadrature of the second derivatives
    let mut pen_err = 0.0f64;
    for knots in knot_sets {
        let k = KnotSequence::new(knots.to_vec()).unwrap();
        let mut systems = vec![
            BasisSystem::mspline(k.clone(), 3).unwrap(),
            BasisSystem::mspline(k.clone(), 4).unwrap(),
        ];
        let widths: Vec<f64> = k.knots().windows(2).map(|w| w[1] - w[0]).collect();
        let mut scales = vec![widths[0]];
        scales.extend(widths.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        scales.push(*widths.last().unwrap());
        systems.push(BasisSystem::gaussian(k.clone(), scales).unwrap());
        for s in &systems {
            let (lo, hi) = s.range();
            for i in 1..40 {
                let t = lo + (hi - lo) * (i as f64 + 0.37) / 41.0;
                let h = 1e-4 * (hi - lo);
                let (a, b, c) = (s.eval_all(t - h), s.eval_all(t), s.eval_all(t + h));
                let d2 = s.second_derivative_all(t);
                let span_crossed = k.knots().iter().any(|kn| (kn - t).abs() <= h);
                if span_crossed {
                    continue;
                }
                for u in 0..s.m() {
                    let fd = (a[u] - 2.0 * b[u] + c[u]) / (h * h);
                    d2_err = d2_err.max((fd - d2[u]).abs() / d2[u].abs().max(1.0));
                }
            }
            let cells = if matches!(s.family(), phmpl::basis::BasisFamily::Gaussian { .. }) {
                200
            } else {
                1
            };
            let oracle = quadrature_penalty(s, cells);
            let r = s.penalty_matrix();
            let floor = 1e-12 * oracle.amax();
            for u in 0..s.m() {
                for v in 0..s.m() {
                    let diff = (r.matrix()[(u, v)] - oracle[(u, v)]).abs();
                    pen_err = pen_err.max(diff / oracle[(u, v)].abs().max(floor));
                }
            }
        }
    }
    notes.push(format!("second-derivative FD rel err {d2_err:.1e}"));
    notes.push(format!("penalty vs quadrature rel err {pen_err:.1e}"));

    let pass = ispline_exact
        && gauss_ends <= 1e-12
        && null_ratio <= 1e-10
        && d2_err <= 1e-4
        && pen_err <= 1e-6;
    verdict(9, "basis correctness", pass, &notes.join(", "));
    assert!(pass);
}
