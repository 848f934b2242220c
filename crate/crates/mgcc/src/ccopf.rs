//! Chance-constrained, stability-constrained dispatch.
//!
//! The master problem is a QP in the set-point move Δz built from the
//! anchor sensitivities: expected quadratic generation cost subject to
//! chance constraints on DG outputs and bus voltages (each tightened by a
//! quantile of its projected forecast-error response), a trust region, and
//! accumulated stability cuts. A Benders-style loop alternates master
//! solves with exact re-evaluation of the equilibrium and the stability
//! index, cutting off iterates whose index quantile crosses the threshold.

use nalgebra::{DMatrix, DVector};

use crate::case::{build_admittance, AdmittanceMatrix, MicrogridCase};
use crate::gmm::GmmModel;
use crate::pf::{solve_equilibrium, Equilibrium, SetPoints};
use crate::sdp::{Cone, ConicProblem};
use crate::sensitivity::{compute_sensitivities, SensitivityBundle};
use crate::stability::{StabilityOptions, StabilityResult};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct ConfidenceConfig {
    /// Violation budget for output and voltage limits.
    pub beta: f64,
    /// Violation budget for the stability index threshold.
    pub beta_eta: f64,
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        ConfidenceConfig {
            beta: 0.05,
            beta_eta: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Stability index threshold η̄ (must be negative for a margin).
    pub eta_bar: f64,
    pub confidence: ConfidenceConfig,
    /// Trust region half-widths on the P*/Q* and V* blocks of Δz.
    pub trust_pq: f64,
    pub trust_v: f64,
    /// Converged when the stability check passes and the expected cost
    /// moves by less than this between iterations.
    pub cost_tol: f64,
    pub max_iter: usize,
    /// Regularization keeping the master strictly convex.
    pub tikhonov: f64,
    pub stability: StabilityOptions,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            eta_bar: -0.05,
            confidence: ConfidenceConfig::default(),
            trust_pq: 0.1,
            trust_v: 0.01,
            cost_tol: 1e-6,
            max_iter: 200,
            tikhonov: 1e-9,
            stability: StabilityOptions::default(),
        }
    }
}

/// One stability cut: η(z) ⪅ η_at_anchor + gradᵀ(z − anchor_z) must stay
/// at or below `rhs` = η̄ minus the index quantile at the cut's anchor.
#[derive(Debug, Clone)]
pub struct BendersCut {
    pub eta_at_anchor: f64,
    pub gradient: DVector<f64>,
    pub anchor_z: DVector<f64>,
    pub rhs: f64,
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub cost: f64,
    pub eta: f64,
    pub eta_quantile: f64,
    pub cut_added: bool,
    /// Whether the candidate replaced the anchor (false for rejected steps
    /// and cut-generating iterations).
    pub accepted: bool,
    pub step_norm: f64,
    pub trust_scale: f64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub z0: DVector<f64>,
    pub z_opt: DVector<f64>,
    pub expected_cost: f64,
    pub eta_final: f64,
    pub eta_quantile: f64,
    pub iterations: usize,
    pub cuts: Vec<BendersCut>,
    pub history: Vec<IterationRecord>,
    pub feasible: bool,
}

/// Everything a gradient method may draw on at one anchor.
pub struct GradientContext<'a> {
    pub case: &'a MicrogridCase,
    pub y: &'a AdmittanceMatrix,
    pub z: &'a SetPoints,
    pub eps_mean: &'a DVector<f64>,
    pub eq: &'a Equilibrium,
    pub stab: &'a StabilityResult,
    pub analytic: &'a SensitivityBundle,
}

/// Source of the stability index gradients used by the master problem.
/// The analytic implementation reads them off the SDP duals; perturbation
/// baselines re-estimate them numerically.
pub trait EtaGradients {
    fn gradients(&self, ctx: &GradientContext) -> Result<(DVector<f64>, DVector<f64>)>;

    fn name(&self) -> &'static str {
        "analytic"
    }
}

pub struct AnalyticEtaGradients;

impl EtaGradients for AnalyticEtaGradients {
    fn gradients(&self, ctx: &GradientContext) -> Result<(DVector<f64>, DVector<f64>)> {
        Ok((ctx.analytic.deta_dz.clone(), ctx.analytic.deta_deps.clone()))
    }
}

/// Quantile of the zero-mean response U = sᵀ(ε − με) at the given level.
pub fn response_quantile(mixture: &GmmModel, s: &DVector<f64>, level: f64) -> Result<f64> {
    if s.len() == 0 || s.amax() == 0.0 {
        return Ok(0.0);
    }
    let proj = mixture.project(s)?;
    Ok(proj.inverse_cdf(level)? - proj.mean())
}

/// Per-quantity constraint tightenings at one anchor, all at level 1 − β.
#[derive(Debug, Clone)]
pub struct QuantileSet {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub eta: f64,
}

pub fn quantiles_at(
    mixture: &GmmModel,
    bundle: &SensitivityBundle,
    confidence: &ConfidenceConfig,
) -> Result<QuantileSet> {
    let lvl = 1.0 - confidence.beta;
    let row = |m: &DMatrix<f64>, k: usize| m.row(k).transpose();
    let g = bundle.dpg_deps.nrows();
    let n = bundle.dv_deps.nrows();
    let mut p = Vec::with_capacity(g);
    let mut q = Vec::with_capacity(g);
    for k in 0..g {
        p.push(response_quantile(mixture, &row(&bundle.dpg_deps, k), lvl)?);
        q.push(response_quantile(mixture, &row(&bundle.dqg_deps, k), lvl)?);
    }
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        v.push(response_quantile(mixture, &row(&bundle.dv_deps, i), lvl)?);
    }
    let eta = response_quantile(mixture, &bundle.deta_deps, 1.0 - confidence.beta_eta)?;
    Ok(QuantileSet { p, q, v, eta })
}

/// Quadratic master model in Δz with linear inequality rows a·Δz ≤ b.
#[derive(Debug, Clone)]
pub struct MasterModel {
    pub h: DMatrix<f64>,
    pub q_lin: DVector<f64>,
    pub cost_const: f64,
    pub rows: Vec<(DVector<f64>, f64)>,
}

impl MasterModel {
    pub fn build(
        case: &MicrogridCase,
        eq: &Equilibrium,
        bundle: &SensitivityBundle,
        quant: &QuantileSet,
        cuts: &[BendersCut],
        z_anchor: &DVector<f64>,
        var_pg: &[f64],
        trust_scale: f64,
        opts: &SolveOptions,
    ) -> Self {
        let g = case.g();
        let nz = 3 * g;
        let dgs = case.dgs_sorted();

        let mut h = DMatrix::identity(nz, nz) * (2.0 * opts.tikhonov);
        let mut q_lin = DVector::zeros(nz);
        let mut cost_const = 0.0;
        for (k, dg) in dgs.iter().enumerate() {
            let gi = bundle.dpg_dz.row(k).transpose();
            let p0 = eq.p_g[k];
            h += 2.0 * dg.cost.a2 * &gi * gi.transpose();
            q_lin += (2.0 * dg.cost.a2 * p0 + dg.cost.a1) * &gi;
            cost_const +=
                dg.cost.a2 * (p0 * p0 + var_pg[k]) + dg.cost.a1 * p0 + dg.cost.a0;
        }

        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        for (k, dg) in dgs.iter().enumerate() {
            let gp = bundle.dpg_dz.row(k).transpose();
            rows.push((gp.clone(), dg.p_max - eq.p_g[k] - quant.p[k]));
            rows.push((-&gp, eq.p_g[k] - quant.p[k] - dg.p_min));
            let gq = bundle.dqg_dz.row(k).transpose();
            rows.push((gq.clone(), dg.q_max - eq.q_g[k] - quant.q[k]));
            rows.push((-&gq, eq.q_g[k] - quant.q[k] - dg.q_min));
        }
        for (i, bus) in case.buses.iter().enumerate() {
            let gv = bundle.dv_dz.row(i).transpose();
            rows.push((gv.clone(), bus.v_max - eq.v[i] - quant.v[i]));
            rows.push((-&gv, eq.v[i] - quant.v[i] - bus.v_min));
        }
        for j in 0..nz {
            let half = trust_scale * if j < 2 * g { opts.trust_pq } else { opts.trust_v };
            let mut e = DVector::zeros(nz);
            e[j] = 1.0;
            rows.push((e.clone(), half));
            rows.push((-e, half));
        }
        for cut in cuts {
            let offset = cut.gradient.dot(&(z_anchor - &cut.anchor_z));
            rows.push((
                cut.gradient.clone(),
                cut.rhs - cut.eta_at_anchor - offset,
            ));
        }
        MasterModel {
            h,
            q_lin,
            cost_const,
            rows,
        }
    }

    /// Model cost (expected dispatch cost predicted at Δz).
    pub fn cost_at(&self, dz: &DVector<f64>) -> f64 {
        0.5 * (dz.transpose() * &self.h * dz)[(0, 0)] + self.q_lin.dot(dz) + self.cost_const
    }

    pub fn is_feasible(&self, dz: &DVector<f64>, tol: f64) -> bool {
        self.rows.iter().all(|(a, b)| a.dot(dz) <= b + tol)
    }

    pub fn solve(&self) -> Result<DVector<f64>> {
        let nz = self.q_lin.len();
        let mut prob = ConicProblem::new(nz);
        prob.q = self.q_lin.iter().copied().collect();
        for c in 0..nz {
            for r in 0..=c {
                if self.h[(r, c)] != 0.0 {
                    prob.p_triplets.push((r, c, self.h[(r, c)]));
                }
            }
        }
        let b: Vec<f64> = self.rows.iter().map(|(_, b)| *b).collect();
        let start = prob.push_cone(Cone::Nonnegative(b.len()), &b);
        for (i, (a, _)) in self.rows.iter().enumerate() {
            for (j, &v) in a.iter().enumerate() {
                prob.set_a(start + i, j, v);
            }
        }
        match crate::sdp::solve(&prob, 1e-9, 200) {
            Ok(sol) => Ok(DVector::from_vec(sol.x)),
            Err(Error::SdpInfeasible { status }) => Err(Error::InfeasibleMaster(status)),
            Err(e) => Err(e),
        }
    }
}

/// Var(P_G) per DG under the fitted error law.
fn output_variances(bundle: &SensitivityBundle, cov: &DMatrix<f64>) -> Vec<f64> {
    (0..bundle.dpg_deps.nrows())
        .map(|k| {
            let s = bundle.dpg_deps.row(k).transpose();
            if s.len() == 0 {
                0.0
            } else {
                (s.transpose() * cov * &s)[(0, 0)]
            }
        })
        .collect()
}

/// Expected dispatch cost at an anchor: quadratic in the mean outputs plus
/// the variance carried by the quadratic coefficients.
pub fn expected_cost(case: &MicrogridCase, eq: &Equilibrium, var_pg: &[f64]) -> f64 {
    case.dgs_sorted()
        .iter()
        .enumerate()
        .map(|(k, dg)| {
            dg.cost.a2 * (eq.p_g[k] * eq.p_g[k] + var_pg[k]) + dg.cost.a1 * eq.p_g[k]
                + dg.cost.a0
        })
        .sum()
}

struct AnchorState {
    z: SetPoints,
    eq: Equilibrium,
    stab: StabilityResult,
    bundle: SensitivityBundle,
    quant: QuantileSet,
    var_pg: Vec<f64>,
    cost: f64,
}

fn evaluate_anchor(
    case: &MicrogridCase,
    y: &AdmittanceMatrix,
    mixture: &GmmModel,
    cov: &DMatrix<f64>,
    eps_mean: &DVector<f64>,
    z: SetPoints,
    warm: Option<&Equilibrium>,
    method: &dyn EtaGradients,
    opts: &SolveOptions,
) -> Result<AnchorState> {
    let eq = solve_equilibrium(case, y, &z, eps_mean, warm)?;
    let mut model = crate::smallsignal::assemble(case, y, &eq)?;
    crate::smallsignal::reduce(&mut model)?;
    let stab = crate::stability::stability_index(model.j.as_ref().unwrap(), &opts.stability)?;
    let mut bundle = compute_sensitivities(case, y, &eq, &stab)?;
    let ctx = GradientContext {
        case,
        y,
        z: &z,
        eps_mean,
        eq: &eq,
        stab: &stab,
        analytic: &bundle,
    };
    let (deta_dz, deta_deps) = method.gradients(&ctx)?;
    bundle.deta_dz = deta_dz;
    bundle.deta_deps = deta_deps;
    let quant = quantiles_at(mixture, &bundle, &opts.confidence)?;
    let var_pg = output_variances(&bundle, cov);
    let cost = expected_cost(case, &eq, &var_pg);
    Ok(AnchorState {
        z,
        eq,
        stab,
        bundle,
        quant,
        var_pg,
        cost,
    })
}

/// Full solve: Benders loop from the case set-points.
pub fn solve_ccscopf(
    case: &MicrogridCase,
    mixture: &GmmModel,
    method: &dyn EtaGradients,
    opts: &SolveOptions,
) -> Result<SolveReport> {
    if mixture.dim() != case.res.len() {
        return Err(Error::DimensionMismatch(format!(
            "mixture dimension {} vs {} renewable units",
            mixture.dim(),
            case.res.len()
        )));
    }
    let y = build_admittance(case);
    let eps_mean = mixture.mean();
    let cov = mixture.covariance();
    let z0 = SetPoints::from_case(case).to_z();

    let mut anchor = evaluate_anchor(
        case,
        &y,
        mixture,
        &cov,
        &eps_mean,
        SetPoints::from_case(case),
        None,
        method,
        opts,
    )?;
    let mut cuts: Vec<BendersCut> = Vec::new();
    // the starting point itself may violate the stability chance constraint
    if anchor.stab.eta + anchor.quant.eta > opts.eta_bar {
        cuts.push(make_cut(&anchor, opts));
    }
    let mut history = Vec::new();
    let mut trust_scale = 1.0;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let master = MasterModel::build(
            case,
            &anchor.eq,
            &anchor.bundle,
            &anchor.quant,
            &cuts,
            &anchor.z.to_z(),
            &anchor.var_pg,
            trust_scale,
            opts,
        );
        let dz = master.solve()?;
        let z_new = SetPoints::from_z(&(anchor.z.to_z() + &dz))?;

        let candidate = evaluate_anchor(
            case,
            &y,
            mixture,
            &cov,
            &eps_mean,
            z_new,
            Some(&anchor.eq),
            method,
            opts,
        );
        let next = match candidate {
            Ok(a) => a,
            Err(Error::NonConvergence { .. }) | Err(Error::SingularNewtonJacobian { .. }) => {
                trust_scale *= 0.5;
                if trust_scale < 1e-4 {
                    return Err(Error::NonConvergence {
                        iters: iterations,
                        residual: f64::NAN,
                    });
                }
                history.push(IterationRecord {
                    cost: anchor.cost,
                    eta: anchor.stab.eta,
                    eta_quantile: anchor.quant.eta,
                    cut_added: false,
                    accepted: false,
                    step_norm: dz.norm(),
                    trust_scale,
                });
                continue;
            }
            Err(e) => return Err(e),
        };

        let anchor_ok = anchor.stab.eta + anchor.quant.eta <= opts.eta_bar + 1e-9;
        let stable_ok = next.stab.eta + next.quant.eta <= opts.eta_bar + 1e-9;
        let step_norm = dz.norm();
        let improved = next.cost <= anchor.cost + opts.cost_tol;
        // accept feasible descent steps, or any feasible step while the
        // anchor itself still violates the stability chance constraint
        let accepted = stable_ok && (improved || !anchor_ok);
        if !stable_ok {
            cuts.push(make_cut(&next, opts));
        }
        history.push(IterationRecord {
            cost: next.cost,
            eta: next.stab.eta,
            eta_quantile: next.quant.eta,
            cut_added: !stable_ok,
            accepted,
            step_norm,
            trust_scale,
        });
        if !accepted {
            if stable_ok {
                // the linearized model over-promised: shrink its validity
                // region; give up once further shrinking cannot move the cost
                trust_scale *= 0.5;
                if trust_scale < 1e-3 {
                    return Ok(finish(z0, anchor, cuts, history, iterations, anchor_ok));
                }
            }
            continue;
        }
        let cost_moved = (next.cost - anchor.cost).abs();
        let converged = anchor_ok && cost_moved <= opts.cost_tol;
        anchor = next;
        if converged {
            return Ok(finish(z0, anchor, cuts, history, iterations, true));
        }
        trust_scale = (trust_scale * 1.5).min(1.0);
    }
    let feasible = anchor.stab.eta + anchor.quant.eta <= opts.eta_bar + 1e-9;
    Ok(finish(z0, anchor, cuts, history, iterations, feasible))
}

fn make_cut(anchor: &AnchorState, opts: &SolveOptions) -> BendersCut {
    BendersCut {
        eta_at_anchor: anchor.stab.eta,
        gradient: anchor.bundle.deta_dz.clone(),
        anchor_z: anchor.z.to_z(),
        rhs: opts.eta_bar - anchor.quant.eta,
    }
}

fn finish(
    z0: DVector<f64>,
    anchor: AnchorState,
    cuts: Vec<BendersCut>,
    history: Vec<IterationRecord>,
    iterations: usize,
    feasible: bool,
) -> SolveReport {
    SolveReport {
        z0,
        z_opt: anchor.z.to_z(),
        expected_cost: anchor.cost,
        eta_final: anchor.stab.eta,
        eta_quantile: anchor.quant.eta,
        iterations,
        cuts,
        history,
        feasible,
    }
}

/// Corrective countermeasure: walk an operating point that fails
/// verification back toward a trusted base point, halving the set-point
/// block (P*, Q*, or V*) whose remaining move carries the largest
/// first-order index impact.
///
/// `verify` returns true when the candidate satisfies the stability chance
/// constraint (typically a Monte-Carlo point estimate).
pub fn corrective_countermeasure<F>(
    z_base: &SetPoints,
    z_opt: &SetPoints,
    deta_dz: &DVector<f64>,
    mut verify: F,
    max_rounds: usize,
) -> Result<(SetPoints, usize)>
where
    F: FnMut(&SetPoints) -> Result<bool>,
{
    let g = z_base.g();
    let zb = z_base.to_z();
    let mut delta = z_opt.to_z() - &zb;
    let mut rounds = 0;
    loop {
        let cand = SetPoints::from_z(&(&zb + &delta))?;
        if verify(&cand)? {
            return Ok((cand, rounds));
        }
        if rounds >= max_rounds {
            return Err(Error::RoundCapExceeded);
        }
        rounds += 1;
        // score each block by the index change attributable to its
        // remaining move, skipping blocks already at the base point
        let mut best_block = None;
        let mut best_score = 0.0;
        for blk in 0..3 {
            let span = blk * g..(blk + 1) * g;
            let move_left = span.clone().map(|j| delta[j].abs()).fold(0.0, f64::max);
            if move_left <= 1e-12 {
                continue;
            }
            let score = span
                .map(|j| (deta_dz[j] * delta[j]).abs())
                .fold(0.0, f64::max);
            if best_block.is_none() || score > best_score {
                best_block = Some(blk);
                best_score = score;
            }
        }
        let blk = best_block.ok_or(Error::RoundCapExceeded)?;
        for j in blk * g..(blk + 1) * g {
            delta[j] *= 0.5;
        }
    }
}
