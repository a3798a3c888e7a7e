use clap::{Args, Parser, Subcommand};
use phmpl::basis::{equidistant_knots, gaussian_scales, BasisSystem, KnotSequence};
use phmpl::model::{fit_model, BasisChoice, KnotPlacement, LambdaChoice, ModelError, ModelSpec};
use phmpl::report::{
    bases_csv, build_fit_report, hazard_csv, metrics_csv, regression_csv, render_fit_text,
    render_metrics_text, replications_csv, survival_csv, Provenance,
};
use phmpl::simulator::{run_replications, ScenarioConfig, SimError, SimulationFit};
use phmpl::survdata::{load_dataset, CensorKind, Schema};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    NonConvergence(String),
    #[error("{0}")]
    Inference(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::NonConvergence(_) => 3,
            CliError::Inference(_) => 4,
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

#[derive(Parser)]
#[command(name = "phmpl", version, about = "Penalized likelihood proportional hazards for partly interval-censored data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a delimited data file.
    Fit(FitArgs),
    /// Run Monte Carlo replications of a simulation scenario.
    Simulate(SimulateArgs),
    /// Emit basis function values on a grid as CSV.
    Bases(BasesArgs),
}

#[derive(Args, Clone)]
struct BasisArgs {
    /// `mspline`, `msplineN` (order N) or `gaussian`.
    #[arg(long, default_value = "mspline")]
    basis: String,
    /// M-spline order when `--basis mspline` carries no suffix.
    #[arg(long, default_value_t = 3)]
    order: usize,
    /// Gaussian basis: fraction of endpoints within two scales of an interior knot.
    #[arg(long, default_value_t = 0.35)]
    zeta_interior: f64,
    /// Gaussian basis: same fraction for the boundary knots.
    #[arg(long, default_value_t = 0.4)]
    zeta_boundary: f64,
}

impl BasisArgs {
    fn choice(&self) -> Result<BasisChoice, CliError> {
        let name = self.basis.to_ascii_lowercase();
        if name == "gaussian" {
            return Ok(BasisChoice::Gaussian {
                zeta_interior: self.zeta_interior,
                zeta_boundary: self.zeta_boundary,
            });
        }
        let Some(suffix) = name.strip_prefix("mspline") else {
            return Err(CliError::Input(format!("unknown basis family '{}'", self.basis)));
        };
        let order = if suffix.is_empty() {
            self.order
        } else {
            suffix
                .parse()
                .map_err(|_| CliError::Input(format!("bad M-spline order in '{}'", self.basis)))?
        };
        Ok(BasisChoice::MSpline { order })
    }
}

fn parse_n_interior(s: &str) -> Result<Option<usize>, CliError> {
    if s.eq_ignore_ascii_case("auto") {
        Ok(None)
    } else {
        s.parse()
            .map(Some)
            .map_err(|_| CliError::Input(format!("--n-interior expects 'auto' or a count, got '{s}'")))
    }
}

fn parse_lambda(s: &str) -> Result<LambdaChoice, CliError> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(LambdaChoice::Auto);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(LambdaChoice::Fixed(v)),
        _ => Err(CliError::Input(format!(
            "--lambda expects 'auto' or a non-negative number, got '{s}'"
        ))),
    }
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Input(format!("{what}: cannot parse '{v}'")))
        })
        .collect()
}

#[derive(Args)]
struct FitArgs {
    /// Delimited file with a header row (comma or tab).
    data: PathBuf,
    #[arg(long, default_value = "t_left")]
    time_left: String,
    #[arg(long, default_value = "t_right")]
    time_right: String,
    /// Comma-separated covariate columns; default is every other column.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    #[command(flatten)]
    basis: BasisArgs,
    /// Interior knot count or `auto`.
    #[arg(long, default_value = "auto")]
    n_interior: String,
    #[arg(long, value_enum, default_value = "quantile")]
    knots: KnotArg,
    /// Place the lower boundary knot at zero.
    #[arg(long)]
    origin: bool,
    /// Smoothing value or `auto`.
    #[arg(long, default_value = "auto")]
    lambda: String,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Covariate values for a survival prediction, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    covariate_profile: Option<String>,
    #[arg(long, default_value_t = 200)]
    grid_points: usize,
    /// Write report files here in addition to printing the summary.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum KnotArg {
    Quantile,
    Equidistant,
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in scenario 1, 2 or 3.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    scenario: Option<u32>,
    /// Scenario described in a TOML file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    pi_event: Option<f64>,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    basis: BasisArgs,
    #[arg(long, default_value = "auto")]
    n_interior: String,
    #[arg(long, default_value = "auto")]
    lambda: String,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct BasesArgs {
    /// Explicit knots, comma separated and increasing.
    #[arg(long, conflicts_with = "range")]
    knots: Option<String>,
    /// `t_min,t_max` for equally spaced knots.
    #[arg(long, required_unless_present = "knots")]
    range: Option<String>,
    #[arg(long, default_value_t = 3)]
    n_interior: usize,
    #[command(flatten)]
    basis: BasisArgs,
    /// Gaussian scales, one per knot; default derives them from the knots.
    #[arg(long)]
    scales: Option<String>,
    #[arg(long, default_value_t = 101)]
    points: usize,
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    std::fs::write(dir.join(name), contents)
        .map_err(|e| CliError::Input(format!("writing {}: {e}", dir.join(name).display())))
}

fn prepare_dir(dir: &Option<PathBuf>) -> Result<(), CliError> {
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| CliError::Input(format!("{}: {e}", d.display())))?;
    }
    Ok(())
}

fn model_error(e: ModelError) -> CliError {
    match e {
        ModelError::Fit(_) | ModelError::Smoothing(_) => CliError::NonConvergence(e.to_string()),
        other => CliError::Input(other.to_string()),
    }
}

fn cmd_fit(args: FitArgs) -> Result<(), CliError> {
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(CliError::Input(format!("--level must lie in (0, 1), got {}", args.level)));
    }
    let bytes = std::fs::read(&args.data)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.data.display())))?;
    let covs: Vec<&str> = args.covariates.iter().map(String::as_str).collect();
    let schema = Schema::new(&args.time_left, &args.time_right, &covs);
    let data = load_dataset(bytes.as_slice(), &schema).map_err(input)?;
    let profile = match &args.covariate_profile {
        Some(s) => {
            let x = parse_list(s, "--covariate-profile")?;
            if x.len() != data.p() {
                return Err(CliError::Input(format!(
                    "--covariate-profile has {} values for {} covariates",
                    x.len(),
                    data.p()
                )));
            }
            Some(x)
        }
        None => None,
    };
    let spec = ModelSpec {
        basis: args.basis.choice()?,
        n_interior: parse_n_interior(&args.n_interior)?,
        knots: match args.knots {
            KnotArg::Quantile => KnotPlacement::Quantile,
            KnotArg::Equidistant => KnotPlacement::Equidistant,
        },
        origin: args.origin,
        lambda: parse_lambda(&args.lambda)?,
        ..Default::default()
    };
    prepare_dir(&args.out_dir)?;
    let fitted = fit_model(&data, &spec).map_err(model_error)?;
    let censoring = [
        data.count(CensorKind::Event),
        data.count(CensorKind::Left),
        data.count(CensorKind::Interval),
        data.count(CensorKind::Right),
    ];
    let provenance = Provenance {
        input_sha256: Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect(),
        spec,
        level: args.level,
    };
    let report = build_fit_report(
        &fitted,
        data.covariate_names(),
        censoring,
        provenance,
        args.grid_points,
        profile.as_deref(),
    )
    .map_err(|e| CliError::Inference(format!("covariance unavailable: {e}")))?;
    let text = render_fit_text(&report);
    print!("{text}");
    if let Some(dir) = &args.out_dir {
        write_file(dir, "report.txt", &text)?;
        write_file(dir, "regression.csv", &regression_csv(&report))?;
        write_file(dir, "baseline_hazard.csv", &hazard_csv(&report.baseline_hazard))?;
        if let Some(s) = &report.survival {
            write_file(dir, "survival.csv", &survival_csv(s))?;
        }
        let json = serde_json::to_string_pretty(&report).map_err(input)?;
        write_file(dir, "report.json", &(json + "\n"))?;
    }
    if !report.diagnostics.converged {
        return Err(CliError::NonConvergence(format!(
            "optimizer stopped after {} iterations with KKT residual {:e}",
            report.diagnostics.iterations, report.diagnostics.kkt_residual
        )));
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut cfg = match (&args.scenario, &args.config) {
        (Some(id), _) => ScenarioConfig::preset(*id).map_err(input)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            ScenarioConfig::from_toml(&text).map_err(input)?
        }
        (None, None) => return Err(CliError::Input("--scenario or --config is required".into())),
    };
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(p) = args.pi_event {
        cfg.pi_event = p;
    }
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(CliError::Input(format!("--level must lie in (0, 1), got {}", args.level)));
    }
    let spec = SimulationFit {
        basis: args.basis.choice()?,
        n_interior: parse_n_interior(&args.n_interior)?,
        lambda: parse_lambda(&args.lambda)?,
        level: args.level,
    };
    prepare_dir(&args.out_dir)?;
    let run = run_replications(&cfg, &spec, args.reps, args.seed, args.workers.max(1))
        .map_err(|e| match e {
            SimError::Pool(_) => CliError::Input(e.to_string()),
            other => input(other),
        })?;
    let text = render_metrics_text(&run.metrics);
    print!("{text}");
    if let Some(dir) = &args.out_dir {
        write_file(dir, "metrics.txt", &text)?;
        write_file(dir, "metrics.csv", &metrics_csv(&run.metrics))?;
        let json = serde_json::to_string_pretty(&run.metrics).map_err(input)?;
        write_file(dir, "metrics.json", &(json + "\n"))?;
        write_file(dir, "replications.csv", &replications_csv(&run.outcomes))?;
    }
    if run.metrics.succeeded == 0 {
        return Err(CliError::NonConvergence("no replication produced a usable fit".into()));
    }
    Ok(())
}

fn cmd_bases(args: BasesArgs) -> Result<(), CliError> {
    let knots = match (&args.knots, &args.range) {
        (Some(k), _) => KnotSequence::new(parse_list(k, "--knots")?).map_err(input)?,
        (None, Some(r)) => {
            let v = parse_list(r, "--range")?;
            if v.len() != 2 {
                return Err(CliError::Input("--range expects t_min,t_max".into()));
            }
            if args.n_interior == 0 {
                KnotSequence::new(v).map_err(input)?
            } else {
                equidistant_knots(v[0], v[1], args.n_interior).map_err(input)?
            }
        }
        (None, None) => return Err(CliError::Input("--knots or --range is required".into())),
    };
    let system = match args.basis.choice()? {
        BasisChoice::MSpline { order } => BasisSystem::mspline(knots, order),
        BasisChoice::Gaussian {
            zeta_interior,
            zeta_boundary,
        } => {
            let scales = match &args.scales {
                Some(s) => parse_list(s, "--scales")?,
                None => {
                    let pool = knots.knots().to_vec();
                    gaussian_scales(&pool, &knots, zeta_interior, zeta_boundary).map_err(input)?
                }
            };
            BasisSystem::gaussian(knots, scales)
        }
    }
    .map_err(input)?;
    print!("{}", bases_csv(&system, args.points));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Bases(a) => cmd_bases(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
