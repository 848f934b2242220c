//! Monte-Carlo validation of a dispatch against the fitted error law,
//! distribution-accuracy metrics, and the numerical-perturbation baseline
//! gradient methods the analytic sensitivities are benchmarked against.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::case::{build_admittance, MicrogridCase};
use crate::ccopf::{EtaGradients, GradientContext};
use crate::gmm::{GmmModel, ScalarMixture};
use crate::pf::{solve_equilibrium, SetPoints};
use crate::sensitivity::{compute_sensitivities, eta_at};
use crate::stability::StabilityOptions;
use crate::{Error, Result};

/// Samples per deterministic RNG stream; fixed so results do not depend on
/// the number of worker threads.
const CHUNK: usize = 64;

#[derive(Debug, Clone)]
pub struct ValidationOptions {
    pub n_samples: usize,
    pub seed: u64,
    pub eta_bar: f64,
    pub stability: StabilityOptions,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            n_samples: 1000,
            seed: 0,
            eta_bar: -0.05,
            stability: StabilityOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub n_samples: usize,
    /// Samples violating any limit, the index threshold, or failing to
    /// converge (failures count as violations).
    pub violations: usize,
    pub limit_violations: usize,
    pub eta_violations: usize,
    pub failures: usize,
    pub violation_probability: f64,
    /// 95% binomial half-width 1.96·√(p(1−p)/N).
    pub confidence_half_width: f64,
    /// Converged stability indices in sample order.
    pub eta_samples: Vec<f64>,
    pub seed: u64,
}

impl ValidationReport {
    pub fn success_probability(&self) -> f64 {
        1.0 - self.violation_probability
    }
}

struct SampleOutcome {
    eta: Option<f64>,
    limit_violated: bool,
    eta_violated: bool,
    failed: bool,
}

/// Monte-Carlo check of one dispatch: per sample, re-solve the droop
/// equilibrium, check every output and voltage limit, and re-solve the
/// stability SDP. Deterministic for a fixed seed regardless of thread
/// count.
pub fn monte_carlo_validate(
    case: &MicrogridCase,
    z: &SetPoints,
    mixture: &GmmModel,
    opts: &ValidationOptions,
) -> Result<ValidationReport> {
    if mixture.dim() != case.res.len() {
        return Err(Error::DimensionMismatch(format!(
            "mixture dimension {} vs {} renewable units",
            mixture.dim(),
            case.res.len()
        )));
    }
    let y = build_admittance(case);
    let eps_mean = mixture.mean();
    let base_eq = solve_equilibrium(case, &y, z, &eps_mean, None)?;

    let n_chunks = opts.n_samples.div_ceil(CHUNK);
    let per_chunk: Vec<Vec<SampleOutcome>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let take = CHUNK.min(opts.n_samples - c * CHUNK);
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(c as u64 + 1);
            let eps = mixture.sample_with(take, &mut rng);
            (0..take)
                .map(|i| {
                    let eps_i = eps.row(i).transpose();
                    evaluate_sample(case, &y, z, &eps_i, &base_eq, opts)
                })
                .collect()
        })
        .collect();

    let mut report = ValidationReport {
        n_samples: opts.n_samples,
        violations: 0,
        limit_violations: 0,
        eta_violations: 0,
        failures: 0,
        violation_probability: 0.0,
        confidence_half_width: 0.0,
        eta_samples: Vec::with_capacity(opts.n_samples),
        seed: opts.seed,
    };
    for outcome in per_chunk.into_iter().flatten() {
        if outcome.failed {
            report.failures += 1;
        }
        if outcome.limit_violated {
            report.limit_violations += 1;
        }
        if outcome.eta_violated {
            report.eta_violations += 1;
        }
        if outcome.failed || outcome.limit_violated || outcome.eta_violated {
            report.violations += 1;
        }
        if let Some(e) = outcome.eta {
            report.eta_samples.push(e);
        }
    }
    let p = report.violations as f64 / report.n_samples.max(1) as f64;
    report.violation_probability = p;
    report.confidence_half_width =
        1.96 * (p * (1.0 - p) / report.n_samples.max(1) as f64).sqrt();
    Ok(report)
}

fn evaluate_sample(
    case: &MicrogridCase,
    y: &crate::case::AdmittanceMatrix,
    z: &SetPoints,
    eps: &DVector<f64>,
    warm: &crate::pf::Equilibrium,
    opts: &ValidationOptions,
) -> SampleOutcome {
    let failed = SampleOutcome {
        eta: None,
        limit_violated: false,
        eta_violated: false,
        failed: true,
    };
    let eq = match solve_equilibrium(case, y, z, eps, Some(warm)) {
        Ok(eq) => eq,
        Err(_) => return failed,
    };
    let tol = 1e-9;
    let mut limit_violated = false;
    for (k, dg) in case.dgs_sorted().iter().enumerate() {
        if eq.p_g[k] > dg.p_max + tol || eq.p_g[k] < dg.p_min - tol {
            limit_violated = true;
        }
        if eq.q_g[k] > dg.q_max + tol || eq.q_g[k] < dg.q_min - tol {
            limit_violated = true;
        }
    }
    for (i, bus) in case.buses.iter().enumerate() {
        if eq.v[i] > bus.v_max + tol || eq.v[i] < bus.v_min - tol {
            limit_violated = true;
        }
    }
    let eta = (|| -> Result<f64> {
        let mut model = crate::smallsignal::assemble(case, y, &eq)?;
        crate::smallsignal::reduce(&mut model)?;
        Ok(crate::stability::stability_index(model.j.as_ref().unwrap(), &opts.stability)?.eta)
    })();
    match eta {
        Ok(e) => SampleOutcome {
            eta: Some(e),
            limit_violated,
            eta_violated: e > opts.eta_bar,
            failed: false,
        },
        Err(_) => SampleOutcome {
            limit_violated,
            ..failed
        },
    }
}

/// Mean relative forecast error over all samples and units: the average of
/// ε divided by the unit's forecast. Signed terms cancel for centered
/// errors, so centered laws score near zero by construction.
pub fn uncertainty_degree(case: &MicrogridCase, samples: &DMatrix<f64>) -> Result<f64> {
    if samples.ncols() != case.res.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} sample columns vs {} renewable units",
            samples.ncols(),
            case.res.len()
        )));
    }
    if case.res.iter().any(|r| r.p_forecast == 0.0) {
        return Err(Error::InvalidInput(
            "uncertainty degree undefined for a zero forecast".into(),
        ));
    }
    let n = samples.nrows();
    let k = samples.ncols();
    if n == 0 || k == 0 {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let mut acc = 0.0;
    for i in 0..n {
        for (j, r) in case.res.iter().enumerate() {
            acc += samples[(i, j)] / r.p_forecast;
        }
    }
    Ok(acc / (n * k) as f64)
}

/// First-order law of the stability index under the error mixture:
/// η ≈ η₀ + sᵀ(ε − μ) with s the index sensitivity to the forecast error.
pub fn eta_candidate_law(
    mixture: &GmmModel,
    eta0: f64,
    deta_deps: &DVector<f64>,
) -> Result<ScalarMixture> {
    let proj = mixture.project(deta_deps)?;
    let shift = eta0 - proj.mean();
    Ok(ScalarMixture {
        weights: proj.weights.clone(),
        means: proj.means.iter().map(|m| m + shift).collect(),
        variances: proj.variances,
    })
}

const ARMS_GRID: usize = 200;

fn grid_over(samples: &[f64]) -> Vec<f64> {
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    (0..ARMS_GRID)
        .map(|i| lo + span * i as f64 / (ARMS_GRID - 1) as f64)
        .collect()
}

/// Root-mean-square gap between a candidate CDF and the empirical CDF of
/// the samples, over a uniform grid spanning the sample range.
pub fn arms_cdf(candidate: &ScalarMixture, samples: &[f64]) -> f64 {
    assert!(!samples.is_empty());
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut acc = 0.0;
    for x in grid_over(samples) {
        let emp = sorted.partition_point(|&s| s <= x) as f64 / n;
        let d = candidate.cdf(x) - emp;
        acc += d * d;
    }
    (acc / ARMS_GRID as f64).sqrt()
}

/// Root-mean-square gap between a candidate PDF and a Gaussian kernel
/// density estimate (Silverman bandwidth) of the samples.
pub fn arms_pdf(candidate: &ScalarMixture, samples: &[f64]) -> f64 {
    assert!(samples.len() >= 2);
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let iqr = sorted[(0.75 * (n - 1.0)) as usize] - sorted[(0.25 * (n - 1.0)) as usize];
    let sigma = std.min(iqr / 1.34).max(1e-12);
    let h = 0.9 * sigma * n.powf(-0.2);
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * h * n);
    let mut acc = 0.0;
    for x in grid_over(samples) {
        let kde: f64 = samples
            .iter()
            .map(|&s| (-0.5 * ((x - s) / h).powi(2)).exp())
            .sum::<f64>()
            * norm;
        let d = candidate.pdf(x) - kde;
        acc += d * d;
    }
    (acc / ARMS_GRID as f64).sqrt()
}

/// Baseline gradient method: central finite differences of the stability
/// index with a full equilibrium + SDP re-solve per perturbation.
pub struct EtaPerturbationGradients {
    pub step: f64,
}

impl Default for EtaPerturbationGradients {
    fn default() -> Self {
        EtaPerturbationGradients { step: 1e-4 }
    }
}

impl EtaGradients for EtaPerturbationGradients {
    fn gradients(&self, ctx: &GradientContext) -> Result<(DVector<f64>, DVector<f64>)> {
        let nz = 3 * ctx.case.g();
        let nr = ctx.case.res.len();
        let z0 = ctx.z.to_z();
        let mut dz = DVector::zeros(nz);
        for j in 0..nz {
            let eval = |sign: f64| -> Result<f64> {
                let mut zv = z0.clone();
                zv[j] += sign * self.step;
                let zs = SetPoints::from_z(&zv)?;
                let (_, s) = eta_at(
                    ctx.case,
                    ctx.y,
                    &zs,
                    ctx.eps_mean,
                    Some(ctx.eq),
                    &StabilityOptions::default(),
                )?;
                Ok(s.eta)
            };
            dz[j] = (eval(1.0)? - eval(-1.0)?) / (2.0 * self.step);
        }
        let mut deps = DVector::zeros(nr);
        for k in 0..nr {
            let eval = |sign: f64| -> Result<f64> {
                let mut e = ctx.eps_mean.clone();
                e[k] += sign * self.step;
                let (_, s) = eta_at(
                    ctx.case,
                    ctx.y,
                    ctx.z,
                    &e,
                    Some(ctx.eq),
                    &StabilityOptions::default(),
                )?;
                Ok(s.eta)
            };
            deps[k] = (eval(1.0)? - eval(-1.0)?) / (2.0 * self.step);
        }
        Ok((dz, deps))
    }

    fn name(&self) -> &'static str {
        "eta-perturbation"
    }
}

/// Baseline gradient method: finite differences of the Monte-Carlo
/// estimate of the stability success probability, converted back to an
/// index gradient through the density of the projected error response.
/// Uses common random numbers across all perturbations.
pub struct ProbabilityPerturbationGradients {
    pub mixture: GmmModel,
    pub step: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl EtaGradients for ProbabilityPerturbationGradients {
    fn gradients(&self, ctx: &GradientContext) -> Result<(DVector<f64>, DVector<f64>)> {
        let u = &ctx.analytic.deta_deps;
        if u.len() == 0 {
            return Err(Error::InvalidInput(
                "probability perturbation needs at least one renewable unit".into(),
            ));
        }
        let proj = self.mixture.project(u)?;
        let u_mean = proj.mean();
        if proj.variance() <= 1e-16 {
            return Err(Error::InvalidInput(
                "index response has no spread under the error law".into(),
            ));
        }
        let eta0 = ctx.stab.eta;
        // probe threshold at the response median: the density is far from
        // zero there, so the probability-to-index conversion is stable
        let probe = eta0 + proj.inverse_cdf(0.5)? - u_mean;
        let density = proj.pdf(probe - eta0 + u_mean);

        let eps_samples = self.mixture.sample(self.n_samples, self.seed);
        let prob = |z: &SetPoints| -> Result<f64> {
            let mut hits = 0usize;
            for i in 0..self.n_samples {
                let eps = eps_samples.row(i).transpose();
                match eta_at(
                    ctx.case,
                    ctx.y,
                    z,
                    &eps,
                    Some(ctx.eq),
                    &StabilityOptions::default(),
                ) {
                    Ok((_, s)) if s.eta <= probe => hits += 1,
                    Ok(_) => {}
                    Err(_) => {}
                }
            }
            Ok(hits as f64 / self.n_samples as f64)
        };

        let nz = 3 * ctx.case.g();
        let z0 = ctx.z.to_z();
        let mut dz = DVector::zeros(nz);
        for j in 0..nz {
            let mut zp = z0.clone();
            let mut zm = z0.clone();
            zp[j] += self.step;
            zm[j] -= self.step;
            let pp = prob(&SetPoints::from_z(&zp)?)?;
            let pm = prob(&SetPoints::from_z(&zm)?)?;
            dz[j] = -(pp - pm) / (2.0 * self.step) / density;
        }
        Ok((dz, ctx.analytic.deta_deps.clone()))
    }

    fn name(&self) -> &'static str {
        "probability-perturbation"
    }
}

#[derive(Debug, Clone)]
pub struct GradientTimings {
    pub analytic_secs: f64,
    pub eta_perturbation_secs: f64,
    pub probability_perturbation_secs: f64,
}

/// Wall-clock comparison of the three gradient methods at one anchor. The
/// shared prerequisites (equilibrium and SDP solve) are excluded; what is
/// timed is only each method's own gradient work.
pub fn time_gradient_methods(
    case: &MicrogridCase,
    mixture: &GmmModel,
    eta_pert: &EtaPerturbationGradients,
    prob_pert: &ProbabilityPerturbationGradients,
) -> Result<GradientTimings> {
    let y = build_admittance(case);
    let z = SetPoints::from_case(case);
    let eps_mean = mixture.mean();
    let (eq, stab) = eta_at(
        case,
        &y,
        &z,
        &eps_mean,
        None,
        &StabilityOptions::default(),
    )?;

    let t0 = Instant::now();
    let bundle = compute_sensitivities(case, &y, &eq, &stab)?;
    let analytic_secs = t0.elapsed().as_secs_f64();

    let ctx = GradientContext {
        case,
        y: &y,
        z: &z,
        eps_mean: &eps_mean,
        eq: &eq,
        stab: &stab,
        analytic: &bundle,
    };

    let t1 = Instant::now();
    eta_pert.gradients(&ctx)?;
    let eta_perturbation_secs = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    prob_pert.gradients(&ctx)?;
    let probability_perturbation_secs = t2.elapsed().as_secs_f64();

    Ok(GradientTimings {
        analytic_secs,
        eta_perturbation_secs,
        probability_perturbation_secs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccopf::AnalyticEtaGradients;
    use crate::fixtures::*;
    use approx::assert_abs_diff_eq;

    fn mixture_1d() -> GmmModel {
        GmmModel {
            weights: vec![0.5, 0.5],
            means: vec![
                DVector::from_vec(vec![-0.003]),
                DVector::from_vec(vec![0.003]),
            ],
            covariances: vec![
                DMatrix::from_element(1, 1, 2e-6),
                DMatrix::from_element(1, 1, 2e-6),
            ],
            log_likelihood: 0.0,
        }
    }

    #[test]
    fn degenerate_mixture_gives_deterministic_outcome() {
        let c = five_bus_case();
        let z = SetPoints::from_case(&c);
        let point = GmmModel {
            weights: vec![1.0],
            means: vec![DVector::zeros(1)],
            covariances: vec![DMatrix::from_element(1, 1, 1e-18)],
            log_likelihood: 0.0,
        };
        let mut opts = ValidationOptions {
            n_samples: 50,
            ..Default::default()
        };
        // generous threshold: every sample passes
        opts.eta_bar = -1e-6;
        let r = monte_carlo_validate(&c, &z, &point, &opts).unwrap();
        assert_eq!(r.violations, 0);
        // impossible threshold: every sample fails
        opts.eta_bar = -1e6;
        let r = monte_carlo_validate(&c, &z, &point, &opts).unwrap();
        assert_eq!(r.violations, 50);
        assert_eq!(r.eta_violations, 50);
        assert_abs_diff_eq!(r.violation_probability, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.confidence_half_width, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn validation_is_deterministic_for_fixed_seed() {
        let c = five_bus_case();
        let z = SetPoints::from_case(&c);
        let opts = ValidationOptions {
            n_samples: 130,
            seed: 7,
            ..Default::default()
        };
        let a = monte_carlo_validate(&c, &z, &mixture_1d(), &opts).unwrap();
        let b = monte_carlo_validate(&c, &z, &mixture_1d(), &opts).unwrap();
        assert_eq!(a.violations, b.violations);
        assert_eq!(a.eta_samples, b.eta_samples);
    }

    #[test]
    fn violation_counts_are_consistent() {
        let c = five_bus_case();
        let z = SetPoints::from_case(&c);
        let mut opts = ValidationOptions {
            n_samples: 64,
            seed: 3,
            ..Default::default()
        };
        // threshold at the anchor index: roughly half the samples violate
        let y = build_admittance(&c);
        let (_, stab) = eta_at(
            &c,
            &y,
            &z,
            &mixture_1d().mean(),
            None,
            &StabilityOptions::default(),
        )
        .unwrap();
        opts.eta_bar = stab.eta;
        let r = monte_carlo_validate(&c, &z, &mixture_1d(), &opts).unwrap();
        assert!(r.violations >= r.eta_violations);
        assert!(r.violations <= r.eta_violations + r.limit_violations + r.failures);
        assert!(r.eta_violations > 5 && r.eta_violations < 59);
        assert_eq!(r.eta_samples.len() + r.failures, r.n_samples);
    }

    #[test]
    fn uncertainty_degree_is_the_literal_mean_ratio() {
        let c = five_bus_case();
        let samples = DMatrix::from_column_slice(4, 1, &[0.01, -0.005, 0.002, 0.003]);
        let d = uncertainty_degree(&c, &samples).unwrap();
        let expect = (0.01 - 0.005 + 0.002 + 0.003) / 0.02 / 4.0;
        assert_abs_diff_eq!(d, expect, epsilon = 1e-14);
    }

    #[test]
    fn arms_of_the_true_law_is_small_and_wrong_law_is_large() {
        let truth = ScalarMixture {
            weights: vec![0.5, 0.5],
            means: vec![-1.0, 1.0],
            variances: vec![0.04, 0.04],
        };
        let samples = truth.sample(20_000, 99);
        let good_cdf = arms_cdf(&truth, &samples);
        // Dvoretzky-Kiefer-Wolfowitz scale: sup gap ~ sqrt(ln(2/δ)/2N)
        assert!(good_cdf <= 0.02, "self ARMS-CDF {good_cdf}");
        let wrong = ScalarMixture::normal(0.0, truth.variance());
        let bad_cdf = arms_cdf(&wrong, &samples);
        assert!(
            bad_cdf >= 5.0 * good_cdf,
            "good {good_cdf} vs bad {bad_cdf}"
        );
        let good_pdf = arms_pdf(&truth, &samples);
        let bad_pdf = arms_pdf(&wrong, &samples);
        assert!(
            bad_pdf >= 5.0 * good_pdf,
            "good {good_pdf} vs bad {bad_pdf}"
        );
    }

    #[test]
    fn eta_perturbation_baseline_agrees_with_analytic() {
        let c = five_bus_case();
        let mixture = mixture_1d();
        let y = build_admittance(&c);
        let z = SetPoints::from_case(&c);
        let eps_mean = mixture.mean();
        let (eq, stab) = eta_at(&c, &y, &z, &eps_mean, None, &StabilityOptions::default()).unwrap();
        let bundle = compute_sensitivities(&c, &y, &eq, &stab).unwrap();
        let ctx = GradientContext {
            case: &c,
            y: &y,
            z: &z,
            eps_mean: &eps_mean,
            eq: &eq,
            stab: &stab,
            analytic: &bundle,
        };
        let (adz, adeps) = AnalyticEtaGradients.gradients(&ctx).unwrap();
        let (pdz, pdeps) = EtaPerturbationGradients::default().gradients(&ctx).unwrap();
        for j in 0..adz.len() {
            let denom = adz[j].abs().max(1e-3);
            assert!(
                (adz[j] - pdz[j]).abs() / denom <= 5e-2,
                "z[{j}]: analytic {} vs perturbed {}",
                adz[j],
                pdz[j]
            );
        }
        for k in 0..adeps.len() {
            let denom = adeps[k].abs().max(1e-3);
            assert!((adeps[k] - pdeps[k]).abs() / denom <= 5e-2);
        }
    }

    #[test]
    fn probability_perturbation_baseline_recovers_gradient_signs() {
        let c = five_bus_case();
        let mixture = GmmModel {
            weights: vec![1.0],
            means: vec![DVector::zeros(1)],
            covariances: vec![DMatrix::from_element(1, 1, 2.5e-5)],
            log_likelihood: 0.0,
        };
        let y = build_admittance(&c);
        let z = SetPoints::from_case(&c);
        let eps_mean = mixture.mean();
        let (eq, stab) = eta_at(&c, &y, &z, &eps_mean, None, &StabilityOptions::default()).unwrap();
        let bundle = compute_sensitivities(&c, &y, &eq, &stab).unwrap();
        let ctx = GradientContext {
            case: &c,
            y: &y,
            z: &z,
            eps_mean: &eps_mean,
            eq: &eq,
            stab: &stab,
            analytic: &bundle,
        };
        let method = ProbabilityPerturbationGradients {
            mixture: mixture.clone(),
            step: 0.02,
            n_samples: 200,
            seed: 11,
        };
        let (pdz, _) = method.gradients(&ctx).unwrap();
        let (adz, _) = AnalyticEtaGradients.gradients(&ctx).unwrap();
        // judge only coordinates the index actually responds to
        let scale = adz.amax();
        let mut checked = 0;
        let mut agree = 0;
        for j in 0..adz.len() {
            if adz[j].abs() >= 0.1 * scale {
                checked += 1;
                if adz[j].signum() == pdz[j].signum() {
                    agree += 1;
                }
            }
        }
        assert!(checked > 0);
        assert!(
            agree as f64 / checked as f64 >= 0.8,
            "{agree}/{checked} signs agree"
        );
    }

    #[test]
    fn timing_harness_reports_positive_durations() {
        let c = five_bus_case();
        let mixture = mixture_1d();
        let t = time_gradient_methods(
            &c,
            &mixture,
            &EtaPerturbationGradients::default(),
            &ProbabilityPerturbationGradients {
                mixture: mixture.clone(),
                step: 0.02,
                n_samples: 20,
                seed: 1,
            },
        )
        .unwrap();
        assert!(t.analytic_secs > 0.0);
        assert!(t.eta_perturbation_secs > 0.0);
        assert!(t.probability_perturbation_secs > 0.0);
    }

    #[test]
    fn baselines_drive_the_same_dispatch_loop() {
        let c = five_bus_case();
        let mixture = mixture_1d();
        let opts = crate::ccopf::SolveOptions::default();
        let analytic = crate::ccopf::solve_ccscopf(&c, &mixture, &AnalyticEtaGradients, &opts)
            .unwrap();
        let baseline = crate::ccopf::solve_ccscopf(
            &c,
            &mixture,
            &EtaPerturbationGradients::default(),
            &opts,
        )
        .unwrap();
        assert!(analytic.feasible && baseline.feasible);
        assert_abs_diff_eq!(
            analytic.expected_cost,
            baseline.expected_cost,
            epsilon = 1e-4
        );
    }
}
