//! End-to-end runs of the `phmpl` binary.

use phmpl::simulator::{generate_sample, Baseline, CensoringScheme, ScenarioConfig};
use phmpl::survdata::write_dataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::process::{Command, Output};

fn phmpl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phmpl"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let (header, rows) = csv_rows(path);
    let j = header.iter().position(|h| h == name).unwrap();
    rows.iter().map(|r| r[j].parse().unwrap()).collect()
}

/// Event times drawn by inversion with a fixed stream; the constant-hazard
/// maximum likelihood estimate is `n / sum(t)`.
fn exponential_events(dir: &Path) -> (std::path::PathBuf, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let times: Vec<f64> = (0..60)
        .map(|_| {
            let u: f64 = rand::Rng::random(&mut rng);
            -(1.0 - u).ln() / 0.8
        })
        .collect();
    let mut text = String::from("t_left,t_right\n");
    for t in &times {
        text.push_str(&format!("{t:?},{t:?}\n"));
    }
    let path = dir.join("exp.csv");
    std::fs::write(&path, text).unwrap();
    (path, times.len() as f64 / times.iter().sum::<f64>())
}

#[test]
fn exponential_fit_recovers_constant_hazard_mle() {
    let dir = tempfile::tempdir().unwrap();
    let (data, mle) = exponential_events(dir.path());
    let out = dir.path().join("out");
    let res = phmpl(&[
        "fit",
        data.to_str().unwrap(),
        "--lambda",
        "0",
        "--basis",
        "mspline1",
        "--n-interior",
        "0",
        "--origin",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let h0 = column(&out.join("baseline_hazard.csv"), "h0");
    assert_eq!(h0.len(), 200);
    for h in h0 {
        assert!((h - mle).abs() <= 1e-6 * mle, "{h} vs {mle}");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["diagnostics"]["converged"], true);
    assert_eq!(json["diagnostics"]["lambda"], 0.0);
}

fn write_sample(cfg: &ScenarioConfig, seed: u64, path: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = generate_sample(cfg, &mut rng).unwrap();
    write_dataset(&data, std::fs::File::create(path).unwrap()).unwrap();
}

fn four_covariate_config() -> ScenarioConfig {
    ScenarioConfig {
        id: 0,
        beta: vec![0.5, -0.4, 0.3, 0.0],
        covariate_scales: vec![1.0, 1.0, 2.0, 1.0],
        baseline: Baseline::Linear,
        gamma_left: 1.0,
        gamma_right: 1.0,
        pi_event: 0.3,
        n: 150,
        censoring: CensoringScheme::Additive,
    }
}

#[test]
fn zero_profile_survival_starts_at_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_sample(&four_covariate_config(), 5, &data);
    let out = dir.path().join("out");
    let res = phmpl(&[
        "fit",
        data.to_str().unwrap(),
        "--n-interior",
        "3",
        "--lambda",
        "1",
        "--covariate-profile",
        "0,0,0,0",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let s = column(&out.join("survival.csv"), "survival");
    assert_eq!(s[0], 1.0);
    assert!(s.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn four_covariate_report_with_ten_cubic_msplines() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_sample(&four_covariate_config(), 9, &data);
    let out = dir.path().join("out");
    let args = [
        "fit",
        data.to_str().unwrap(),
        "--basis",
        "mspline3",
        "--n-interior",
        "7",
        "--knots",
        "equidistant",
        "--out-dir",
        out.to_str().unwrap(),
    ];
    let res = phmpl(&args);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8(res.stdout).unwrap();
    for name in ["x1", "x2", "x3", "x4", "hazard ratio", "95% CI", "p-value"] {
        assert!(stdout.contains(name), "missing {name}:\n{stdout}");
    }
    let (header, rows) = csv_rows(&out.join("regression.csv"));
    assert_eq!(header[..4], ["covariate", "estimate", "se", "hazard_ratio"]);
    assert_eq!(rows.len(), 4);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["diagnostics"]["m"], 10);
    let knots: Vec<f64> = json["diagnostics"]["knots"]
        .as_array()
        .unwrap()
        .iter()
        .map(|k| k.as_f64().unwrap())
        .collect();
    assert_eq!(knots.len(), 9);
    let gap = knots[2] - knots[1];
    assert!(knots[1..].windows(2).all(|w| ((w[1] - w[0]) - gap).abs() < 1e-9 * gap));

    // text and CSV agree to printed precision
    let est = column(&out.join("regression.csv"), "estimate");
    let first_row = stdout.lines().find(|l| l.starts_with("x1")).unwrap();
    let printed: f64 = first_row.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((printed - est[0]).abs() <= 5e-6 * est[0].abs().max(1e-300));

    // same input and flags reproduce every file byte for byte
    let again = dir.path().join("again");
    let mut args2 = args;
    args2[9] = again.to_str().unwrap();
    assert!(phmpl(&args2).status.success());
    for f in ["report.txt", "report.json", "regression.csv", "baseline_hazard.csv"] {
        assert_eq!(
            std::fs::read(out.join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn simulate_is_reproducible_and_worker_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, workers: &str| {
        let out = dir.path().join(name);
        let res = phmpl(&[
            "simulate", "--scenario", "1", "--n", "80", "--reps", "6", "--seed", "7",
            "--workers", workers, "--out-dir", out.to_str().unwrap(),
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        (out, res.stdout)
    };
    let (a, text_a) = run("a", "1");
    let (b, text_b) = run("b", "1");
    let (c, _) = run("c", "3");
    assert_eq!(text_a, text_b);
    let text = String::from_utf8(text_a).unwrap();
    assert!(text.contains("bias") && text.contains("coverage"));
    for f in ["metrics.csv", "metrics.json", "metrics.txt", "replications.csv"] {
        let bytes = std::fs::read(a.join(f)).unwrap();
        assert_eq!(bytes, std::fs::read(b.join(f)).unwrap(), "{f}");
        assert_eq!(bytes, std::fs::read(c.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn simulate_requires_a_seed() {
    let res = phmpl(&["simulate", "--scenario", "1", "--reps", "2"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn bases_order_one_are_step_functions() {
    let res = phmpl(&[
        "bases", "--knots", "0,1,2,4", "--basis", "mspline1", "--points", "41",
    ]);
    assert!(res.status.success());
    let text = String::from_utf8(res.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,u,psi,Psi"));
    let rows: Vec<(f64, usize, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 41 * 3);
    let knots = [0.0, 1.0, 2.0, 4.0];
    for (t, u, psi) in rows {
        let (a, b) = (knots[u], knots[u + 1]);
        let inside = a < t && t < b;
        if inside {
            assert!((psi - 1.0 / (b - a)).abs() < 1e-12, "t {t} u {u} psi {psi}");
        } else if t < a || t > b {
            assert_eq!(psi, 0.0);
        }
    }
}

#[test]
fn gaussian_cumulatives_end_at_one_on_exact_range() {
    let res = phmpl(&[
        "bases", "--range", "0.5,3", "--n-interior", "2", "--basis", "gaussian", "--points", "11",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = String::from_utf8(res.stdout).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.first().unwrap()[0], 0.5);
    assert_eq!(rows.last().unwrap()[0], 3.0);
    let last: Vec<&Vec<f64>> = rows.iter().filter(|r| r[0] == 3.0).collect();
    assert_eq!(last.len(), 4);
    for r in last {
        assert!((r[3] - 1.0).abs() < 1e-12, "{r:?}");
    }
    for r in rows.iter().filter(|r| r[0] == 0.5) {
        assert!(r[3].abs() < 1e-12);
    }
}

#[test]
fn input_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "a,b\n1,2\n").unwrap();
    let res = phmpl(&["fit", path.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("t_left"));

    let (data, _) = exponential_events(dir.path());
    let res = phmpl(&["fit", data.to_str().unwrap(), "--lambda", "-1"]);
    assert_eq!(res.status.code(), Some(2));
    let res = phmpl(&["fit", data.to_str().unwrap(), "--basis", "bspline"]);
    assert_eq!(res.status.code(), Some(2));
}
