//! Command-line front end: fit an error mixture, solve the dispatch,
//! validate it by Monte Carlo, and benchmark the gradient methods.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use mgcc::case::load_case;
use mgcc::ccopf::{
    corrective_countermeasure, solve_ccscopf, AnalyticEtaGradients, ConfidenceConfig,
    EtaGradients, SolveOptions, SolveReport,
};
use mgcc::gmm::{fit_gmm, read_errors_csv, GmmModel, GmmOptions};
use mgcc::pf::SetPoints;
use mgcc::validation::{
    arms_cdf, arms_pdf, eta_candidate_law, monte_carlo_validate, time_gradient_methods,
    EtaPerturbationGradients, GradientTimings, ProbabilityPerturbationGradients,
    ValidationOptions, ValidationReport,
};
use mgcc::Error;

#[derive(Parser)]
#[command(name = "mgcc", version, about = "Stability-constrained microgrid dispatch")]
struct Cli {
    /// Worker threads for Monte-Carlo validation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a Gaussian mixture to historical forecast-error samples.
    Fit(FitArgs),
    /// Solve the chance-constrained stability-constrained dispatch.
    Solve(SolveArgs),
    /// Monte-Carlo validation of a dispatch.
    Validate(ValidateArgs),
    /// Compare gradient-method runtimes.
    Bench(BenchArgs),
}

#[derive(Args)]
struct FitArgs {
    /// CSV of error samples, one column per renewable unit.
    #[arg(long)]
    errors: PathBuf,
    #[arg(long, default_value_t = 10)]
    components: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output mixture file.
    #[arg(long, default_value = "gmm.json")]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    /// Case file (native JSON, or a matrix-format .m with a droop sidecar).
    #[arg(long)]
    case: PathBuf,
    /// Fitted mixture file.
    #[arg(long)]
    gmm: PathBuf,
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Gradient method driving the stability cuts.
    #[arg(long, default_value = "analytic")]
    method: String,
    /// Monte-Carlo samples for the post-solve verification and, on
    /// failure, the corrective walk-back (0 disables).
    #[arg(long, default_value_t = 0)]
    verify_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    case: PathBuf,
    #[arg(long)]
    gmm: PathBuf,
    /// Dispatch report to validate; omitted = the case's own set-points.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Exit with a failure status when the violation probability exceeds
    /// this bound.
    #[arg(long)]
    max_violation: Option<f64>,
    #[arg(long, default_value = "validation_report.json")]
    out: PathBuf,
    #[arg(long, default_value = "eta_samples.csv")]
    eta_out: PathBuf,
    #[arg(long, default_value = "pdf_cdf_grid.csv")]
    grid_out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    case: PathBuf,
    #[arg(long)]
    gmm: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Monte-Carlo samples per probability estimate in the
    /// probability-perturbation baseline.
    #[arg(long, default_value_t = 100)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "bench.json")]
    out: PathBuf,
}

/// Run configuration shared by solve/validate/bench.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    eta_bar: f64,
    beta: f64,
    beta_eta: f64,
    trust_pq: f64,
    trust_v: f64,
    cost_tol: f64,
    max_iter: usize,
    /// Uniform load scaling applied to the case after loading.
    load_scale: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let o = SolveOptions::default();
        RunConfig {
            eta_bar: o.eta_bar,
            beta: o.confidence.beta,
            beta_eta: o.confidence.beta_eta,
            trust_pq: o.trust_pq,
            trust_v: o.trust_v,
            cost_tol: o.cost_tol,
            max_iter: o.max_iter,
            load_scale: None,
        }
    }
}

impl RunConfig {
    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            eta_bar: self.eta_bar,
            confidence: ConfidenceConfig {
                beta: self.beta,
                beta_eta: self.beta_eta,
            },
            trust_pq: self.trust_pq,
            trust_v: self.trust_v,
            cost_tol: self.cost_tol,
            max_iter: self.max_iter,
            ..SolveOptions::default()
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ReportJson {
    timestamp_unix: u64,
    seed: u64,
    method: String,
    z0: Vec<f64>,
    z_opt: Vec<f64>,
    expected_cost: f64,
    eta_final: f64,
    eta_quantile: f64,
    eta_bar: f64,
    iterations: usize,
    n_cuts: usize,
    feasible: bool,
    corrective_rounds: usize,
    history: Vec<HistoryJson>,
}

#[derive(Serialize, Deserialize)]
struct HistoryJson {
    cost: f64,
    eta: f64,
    eta_quantile: f64,
    cut_added: bool,
    accepted: bool,
    step_norm: f64,
}

#[derive(Serialize)]
struct ValidationJson {
    timestamp_unix: u64,
    seed: u64,
    n_samples: usize,
    violations: usize,
    limit_violations: usize,
    eta_violations: usize,
    failures: usize,
    violation_probability: f64,
    confidence_half_width: f64,
    success_probability: f64,
    eta_bar: f64,
    arms_cdf: Option<f64>,
    arms_pdf: Option<f64>,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Parse { .. }
        | Error::InvalidCase(_)
        | Error::Io(_)
        | Error::InvalidInput(_)
        | Error::DimensionMismatch(_) => 2,
        Error::InfeasibleMaster(_) | Error::SdpInfeasible { .. } => 4,
        _ => 3,
    }
}

fn load_config(path: &Option<PathBuf>) -> mgcc::Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.display().to_string(),
                msg: e.to_string(),
            })
        }
    }
}

fn load_inputs(
    case_path: &PathBuf,
    gmm_path: &PathBuf,
    cfg: &RunConfig,
) -> mgcc::Result<(mgcc::case::MicrogridCase, GmmModel)> {
    let format = if case_path.extension().is_some_and(|e| e == "m") {
        mgcc::case::CaseFormat::MatpowerM
    } else {
        mgcc::case::CaseFormat::NativeJson
    };
    let mut case = load_case(case_path, format)?;
    if let Some(s) = cfg.load_scale {
        case = case.scale_loads(s)?;
    }
    let mixture = GmmModel::from_json(&std::fs::read_to_string(gmm_path)?)?;
    Ok((case, mixture))
}

fn write_json<T: Serialize>(path: &PathBuf, value: &T) -> mgcc::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value).expect("json"))?;
    Ok(())
}

fn run_fit(args: &FitArgs) -> mgcc::Result<()> {
    let data = read_errors_csv(&args.errors)?;
    let opts = GmmOptions {
        n_components: args.components,
        seed: args.seed,
        ..Default::default()
    };
    let model = fit_gmm(&data, &opts)?;
    std::fs::write(&args.out, model.to_json())?;
    println!(
        "fit: {} samples, {} units, {} components, mean log-likelihood {:.6}, seed {}",
        data.nrows(),
        data.ncols(),
        model.n_components(),
        model.log_likelihood,
        args.seed
    );
    Ok(())
}

fn gradient_method(
    name: &str,
    mixture: &GmmModel,
    seed: u64,
) -> mgcc::Result<Box<dyn EtaGradients>> {
    match name {
        "analytic" => Ok(Box::new(AnalyticEtaGradients)),
        "eta-perturbation" => Ok(Box::new(EtaPerturbationGradients::default())),
        "probability-perturbation" => Ok(Box::new(ProbabilityPerturbationGradients {
            mixture: mixture.clone(),
            step: 0.02,
            n_samples: 100,
            seed,
        })),
        other => Err(Error::InvalidInput(format!(
            "unknown gradient method '{other}'"
        ))),
    }
}

fn run_solve(args: &SolveArgs) -> mgcc::Result<()> {
    let cfg = load_config(&args.config)?;
    let (case, mixture) = load_inputs(&args.case, &args.gmm, &cfg)?;
    let opts = cfg.solve_options();
    let method = gradient_method(&args.method, &mixture, args.seed)?;
    let report = solve_ccscopf(&case, &mixture, method.as_ref(), &opts)?;

    let mut z_final = SetPoints::from_z(&report.z_opt)?;
    let mut corrective_rounds = 0;
    if args.verify_samples > 0 {
        let vopts = ValidationOptions {
            n_samples: args.verify_samples,
            seed: args.seed,
            eta_bar: opts.eta_bar,
            ..Default::default()
        };
        let passes = |z: &SetPoints| -> mgcc::Result<bool> {
            let r = monte_carlo_validate(&case, z, &mixture, &vopts)?;
            Ok(r.success_probability() >= 1.0 - cfg.beta_eta)
        };
        let z_base = SetPoints::from_z(&report.z0)?;
        let deta = last_gradient(&report);
        let (fixed, rounds) =
            corrective_countermeasure(&z_base, &z_final, &deta, passes, 10)?;
        z_final = fixed;
        corrective_rounds = rounds;
    }

    let out = ReportJson {
        timestamp_unix: now_unix(),
        seed: args.seed,
        method: method.name().to_string(),
        z0: report.z0.iter().copied().collect(),
        z_opt: z_final.to_z().iter().copied().collect(),
        expected_cost: report.expected_cost,
        eta_final: report.eta_final,
        eta_quantile: report.eta_quantile,
        eta_bar: opts.eta_bar,
        iterations: report.iterations,
        n_cuts: report.cuts.len(),
        feasible: report.feasible,
        corrective_rounds,
        history: report
            .history
            .iter()
            .map(|h| HistoryJson {
                cost: h.cost,
                eta: h.eta,
                eta_quantile: h.eta_quantile,
                cut_added: h.cut_added,
                accepted: h.accepted,
                step_norm: h.step_norm,
            })
            .collect(),
    };
    write_json(&args.out, &out)?;
    println!(
        "solve: cost {:.6}, eta {:.4} (quantile {:+.4}, threshold {:.4}), {} iterations, {} cuts, feasible {}",
        out.expected_cost,
        out.eta_final,
        out.eta_quantile,
        out.eta_bar,
        out.iterations,
        out.n_cuts,
        out.feasible
    );
    if !report.feasible {
        return Err(Error::InfeasibleMaster(
            "iteration cap reached without a stable dispatch".into(),
        ));
    }
    Ok(())
}

/// Gradient to steer the corrective walk-back: the last cut's gradient if
/// any cut exists, otherwise zeros (all blocks score equally).
fn last_gradient(report: &SolveReport) -> DVector<f64> {
    report
        .cuts
        .last()
        .map(|c| c.gradient.clone())
        .unwrap_or_else(|| DVector::from_element(report.z_opt.len(), 1.0))
}

fn run_validate(args: &ValidateArgs) -> mgcc::Result<bool> {
    let cfg = load_config(&args.config)?;
    let (case, mixture) = load_inputs(&args.case, &args.gmm, &cfg)?;
    let z = match &args.report {
        None => SetPoints::from_case(&case),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let r: ReportJson = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.display().to_string(),
                msg: e.to_string(),
            })?;
            SetPoints::from_z(&DVector::from_vec(r.z_opt))?
        }
    };
    let vopts = ValidationOptions {
        n_samples: args.samples,
        seed: args.seed,
        eta_bar: cfg.eta_bar,
        ..Default::default()
    };
    let report = monte_carlo_validate(&case, &z, &mixture, &vopts)?;
    write_outputs(args, &case, &mixture, &z, &vopts, &report, &cfg)?;
    println!(
        "validate: {}/{} violations (p = {:.4} ± {:.4}), {} failures, seed {}",
        report.violations,
        report.n_samples,
        report.violation_probability,
        report.confidence_half_width,
        report.failures,
        report.seed
    );
    let ok = args
        .max_violation
        .map_or(true, |cap| report.violation_probability <= cap);
    Ok(ok)
}

fn write_outputs(
    args: &ValidateArgs,
    case: &mgcc::case::MicrogridCase,
    mixture: &GmmModel,
    z: &SetPoints,
    vopts: &ValidationOptions,
    report: &ValidationReport,
    cfg: &RunConfig,
) -> mgcc::Result<()> {
    let mut eta_csv = String::from("eta\n");
    for e in &report.eta_samples {
        eta_csv.push_str(&format!("{e}\n"));
    }
    std::fs::write(&args.eta_out, eta_csv)?;

    // analytic first-order law of the index, for the grid file and ARMS
    let candidate = (|| -> mgcc::Result<_> {
        let y = mgcc::case::build_admittance(case);
        let eps_mean = mixture.mean();
        let (eq, stab) =
            mgcc::sensitivity::eta_at(case, &y, z, &eps_mean, None, &vopts.stability)?;
        let bundle = mgcc::sensitivity::compute_sensitivities(case, &y, &eq, &stab)?;
        eta_candidate_law(mixture, stab.eta, &bundle.deta_deps)
    })();

    let (mut cdf_metric, mut pdf_metric) = (None, None);
    if let (Ok(cand), false) = (&candidate, report.eta_samples.is_empty()) {
        cdf_metric = Some(arms_cdf(cand, &report.eta_samples));
        pdf_metric = Some(arms_pdf(cand, &report.eta_samples));
        let mut sorted = report.eta_samples.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        let mut grid = String::from("eta,candidate_pdf,candidate_cdf,empirical_cdf\n");
        for i in 0..200 {
            let x = lo + (hi - lo).max(1e-12) * i as f64 / 199.0;
            let emp = sorted.partition_point(|&s| s <= x) as f64 / sorted.len() as f64;
            grid.push_str(&format!("{x},{},{},{emp}\n", cand.pdf(x), cand.cdf(x)));
        }
        std::fs::write(&args.grid_out, grid)?;
    }

    let out = ValidationJson {
        timestamp_unix: now_unix(),
        seed: report.seed,
        n_samples: report.n_samples,
        violations: report.violations,
        limit_violations: report.limit_violations,
        eta_violations: report.eta_violations,
        failures: report.failures,
        violation_probability: report.violation_probability,
        confidence_half_width: report.confidence_half_width,
        success_probability: report.success_probability(),
        eta_bar: cfg.eta_bar,
        arms_cdf: cdf_metric,
        arms_pdf: pdf_metric,
    };
    write_json(&args.out, &out)
}

fn run_bench(args: &BenchArgs) -> mgcc::Result<()> {
    let cfg = load_config(&args.config)?;
    let (case, mixture) = load_inputs(&args.case, &args.gmm, &cfg)?;
    let timings: GradientTimings = time_gradient_methods(
        &case,
        &mixture,
        &EtaPerturbationGradients::default(),
        &ProbabilityPerturbationGradients {
            mixture: mixture.clone(),
            step: 0.02,
            n_samples: args.mc_samples,
            seed: args.seed,
        },
    )?;
    #[derive(Serialize)]
    struct BenchJson {
        timestamp_unix: u64,
        seed: u64,
        analytic_secs: f64,
        eta_perturbation_secs: f64,
        probability_perturbation_secs: f64,
    }
    let out = BenchJson {
        timestamp_unix: now_unix(),
        seed: args.seed,
        analytic_secs: timings.analytic_secs,
        eta_perturbation_secs: timings.eta_perturbation_secs,
        probability_perturbation_secs: timings.probability_perturbation_secs,
    };
    write_json(&args.out, &out)?;
    println!(
        "bench: analytic {:.4}s, index perturbation {:.4}s, probability perturbation {:.4}s",
        out.analytic_secs, out.eta_perturbation_secs, out.probability_perturbation_secs
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .ok();
    }
    let outcome = match &cli.command {
        Command::Fit(a) => run_fit(a).map(|_| true),
        Command::Solve(a) => run_solve(a).map(|_| true),
        Command::Validate(a) => run_validate(a),
        Command::Bench(a) => run_bench(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("validation failed: violation probability above the requested bound");
            ExitCode::from(5)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
