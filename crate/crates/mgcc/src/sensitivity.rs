//! Analytic sensitivities of the operating point and of the stability
//! index with respect to droop set-points and renewable forecast error.
//!
//! The equilibrium is defined implicitly by r(u, p) = 0 with
//! u = [α_2..α_n, V_1..V_n, ω], so du/dp = −(∂r/∂u)⁻¹ ∂r/∂p. The index
//! sensitivity chains ∂η/∂J (from the SDP duals) through ∂J/∂u (finite
//! differenced; cheap, no SDP re-solves) and du/dp.

use nalgebra::{DMatrix, DVector};

use crate::case::{AdmittanceMatrix, MicrogridCase};
use crate::pf::{Equilibrium, PfState, SetPoints};
use crate::smallsignal::{assemble_at, reduce};
use crate::stability::{eta_jacobian_sensitivity, StabilityResult};
use crate::{Error, Result};

/// Finite-difference step for ∂J/∂u.
const FD_STEP: f64 = 1e-6;

/// First-order response of the dispatch quantities around one anchor
/// equilibrium. Parameter columns are [P*; Q*; V*] (3g) and the RES
/// forecast errors (one per unit).
#[derive(Debug, Clone)]
pub struct SensitivityBundle {
    pub eta0: f64,
    /// ∂η/∂z, length 3g.
    pub deta_dz: DVector<f64>,
    /// ∂η/∂ε, length = number of RES units.
    pub deta_deps: DVector<f64>,
    /// Bus voltage responses, n × 3g and n × n_res.
    pub dv_dz: DMatrix<f64>,
    pub dv_deps: DMatrix<f64>,
    /// Realized DG output responses, g × 3g and g × n_res.
    pub dpg_dz: DMatrix<f64>,
    pub dpg_deps: DMatrix<f64>,
    pub dqg_dz: DMatrix<f64>,
    pub dqg_deps: DMatrix<f64>,
    /// Frequency response, 3g and n_res.
    pub domega_dz: DVector<f64>,
    pub domega_deps: DVector<f64>,
    /// Fingerprint of the equilibrium everything is linearized at.
    pub anchor: u64,
}

/// ∂r/∂u at the equilibrium: the same matrix the Newton solver factors.
fn steady_state_jacobian(
    case: &MicrogridCase,
    y: &AdmittanceMatrix,
    eq: &Equilibrium,
) -> DMatrix<f64> {
    let n = case.n();
    let alpha_full = eq.alpha_full();
    let (dp_da, dp_dv, dq_da, dq_dv) = crate::pf::injection_jacobians(y, &alpha_full, &eq.v);
    let m = 2 * n;
    let mut jac = DMatrix::zeros(m, m);
    jac.view_mut((0, 0), (n, n - 1)).copy_from(&(-&dp_da));
    jac.view_mut((0, n - 1), (n, n)).copy_from(&(-&dp_dv));
    jac.view_mut((n, 0), (n, n - 1)).copy_from(&(-&dq_da));
    jac.view_mut((n, n - 1), (n, n)).copy_from(&(-&dq_dv));
    for dg in &case.dgs {
        let i = dg.bus - 1;
        jac[(i, 2 * n - 1)] = -1.0 / dg.kp;
        jac[(n + i, n - 1 + i)] -= 1.0 / dg.kq;
    }
    jac
}

/// ∂r/∂p columns for p = [P*; Q*; V*; ε], each of length 2n.
fn residual_parameter_jacobian(case: &MicrogridCase) -> DMatrix<f64> {
    let n = case.n();
    let g = case.g();
    let nr = case.res.len();
    let mut b = DMatrix::zeros(2 * n, 3 * g + nr);
    for (k, dg) in case.dgs_sorted().iter().enumerate() {
        let i = dg.bus - 1;
        b[(i, k)] = 1.0; // P*
        b[(n + i, g + k)] = 1.0; // Q*
        b[(n + i, 2 * g + k)] = 1.0 / dg.kq; // V*
    }
    for (k, r) in case.res.iter().enumerate() {
        let i = r.bus - 1;
        b[(i, 3 * g + k)] = 1.0;
        b[(n + i, 3 * g + k)] = r.q_ratio;
    }
    b
}

/// du/dp for all parameters at once: one LU factorization, 3g + n_res
/// right-hand sides. Row layout of the result matches u.
pub fn state_sensitivities(
    case: &MicrogridCase,
    y: &AdmittanceMatrix,
    eq: &Equilibrium,
) -> Result<DMatrix<f64>> {
    let s = steady_state_jacobian(case, y, eq);
    let b = residual_parameter_jacobian(case);
    let lu = s.lu();
    let du = lu.solve(&(-&b)).ok_or(Error::IllConditionedEquilibrium {
        cond: f64::INFINITY,
    })?;
    Ok(du)
}

/// Directional derivatives ⟨∂η/∂J, ∂J/∂u_s⟩ for every state coordinate,
/// by central differences of assemble + reduce. The reduced Jacobian does
/// not depend on ω, so that entry is exactly zero.
fn eta_state_gradient(
    case: &MicrogridCase,
    y: &AdmittanceMatrix,
    eq: &Equilibrium,
    deta_dj: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let n = case.n();
    let alpha0 = eq.alpha_full();
    let v0 = eq.v.clone();
    let mut grad = DVector::zeros(2 * n);
    let reduced = |alpha: &DVector<f64>, v: &DVector<f64>| -> Result<DMatrix<f64>> {
        let mut model = assemble_at(case, y, alpha, v);
        reduce(&mut model)?;
        Ok(model.j.unwrap())
    };
    for s in 0..2 * n - 1 {
        let (mut ap, mut am) = (alpha0.clone(), alpha0.clone());
        let (mut vp, mut vm) = (v0.clone(), v0.clone());
        if s < n - 1 {
            ap[s + 1] += FD_STEP;
            am[s + 1] -= FD_STEP;
        } else {
            vp[s - (n - 1)] += FD_STEP;
            vm[s - (n - 1)] -= FD_STEP;
        }
        let jp = reduced(&ap, &vp)?;
        let jm = reduced(&am, &vm)?;
        let dj = (jp - jm) / (2.0 * FD_STEP);
        grad[s] = deta_dj.zip_fold(&dj, 0.0, |acc, a, b| acc + a * b);
    }
    Ok(grad)
}

/// Build the full first-order bundle at one equilibrium. The stability
/// result must come from the Jacobian assembled at the same equilibrium.
pub fn compute_sensitivities(
    case: &MicrogridCase,
    y: &AdmittanceMatrix,
    eq: &Equilibrium,
    stab: &StabilityResult,
) -> Result<SensitivityBundle> {
    let n = case.n();
    let g = case.g();
    let nr = case.res.len();
    let np = 3 * g + nr;
    let du = state_sensitivities(case, y, eq)?;
    let deta_dj = eta_jacobian_sensitivity(stab)?;
    let eta_du = eta_state_gradient(case, y, eq, &deta_dj)?;

    // chain rule over the 2n state coordinates (ω contributes nothing)
    let mut deta = DVector::zeros(np);
    for p in 0..np {
        deta[p] = eta_du.dot(&du.column(p).into_owned());
    }

    let dv = du.rows(n - 1, n).into_owned();
    let domega = du.row(2 * n - 1).transpose();

    // realized outputs follow the droop laws: P_G = P* − (ω − ω*)/K_p,
    // Q_G = Q* − (V − V*)/K_q
    let mut dpg = DMatrix::zeros(g, np);
    let mut dqg = DMatrix::zeros(g, np);
    for (k, dg) in case.dgs_sorted().iter().enumerate() {
        let i = dg.bus - 1;
        for p in 0..np {
            let mut dp = -domega[p] / dg.kp;
            if p == k {
                dp += 1.0;
            }
            dpg[(k, p)] = dp;
            let mut dq = -dv[(i, p)] / dg.kq;
            if p == g + k {
                dq += 1.0;
            }
            if p == 2 * g + k {
                dq += 1.0 / dg.kq;
            }
            dqg[(k, p)] = dq;
        }
    }

    let zc = |m: &DMatrix<f64>| m.columns(0, 3 * g).into_owned();
    let ec = |m: &DMatrix<f64>| m.columns(3 * g, nr).into_owned();
    Ok(SensitivityBundle {
        eta0: stab.eta,
        deta_dz: deta.rows(0, 3 * g).into_owned(),
        deta_deps: deta.rows(3 * g, nr).into_owned(),
        dv_dz: zc(&dv),
        dv_deps: ec(&dv),
        dpg_dz: zc(&dpg),
        dpg_deps: ec(&dpg),
        dqg_dz: zc(&dqg),
        dqg_deps: ec(&dqg),
        domega_dz: domega.rows(0, 3 * g).into_owned(),
        domega_deps: domega.rows(3 * g, nr).into_owned(),
        anchor: eq.fingerprint(),
    })
}

/// Guard that a bundle is anchored at the given equilibrium.
pub fn check_anchor(bundle: &SensitivityBundle, eq: &Equilibrium) -> Result<()> {
    if bundle.anchor != eq.fingerprint() {
        return Err(Error::AnchorMismatch);
    }
    Ok(())
}

/// Reconstruct a [`PfState`] from an equilibrium; used by callers warm
/// starting from the anchor.
pub fn as_state(eq: &Equilibrium) -> PfState {
    PfState {
        alpha: eq.alpha.clone(),
        v: eq.v.clone(),
        omega: eq.omega,
    }
}

/// Convenience: equilibrium + small-signal reduction + stability solve.
pub fn eta_at(
    case: &MicrogridCase,
    y: &AdmittanceMatrix,
    z: &SetPoints,
    eps: &DVector<f64>,
    warm: Option<&Equilibrium>,
    opts: &crate::stability::StabilityOptions,
) -> Result<(Equilibrium, StabilityResult)> {
    let eq = crate::pf::solve_equilibrium(case, y, z, eps, warm)?;
    let mut model = crate::smallsignal::assemble(case, y, &eq)?;
    reduce(&mut model)?;
    let stab = crate::stability::stability_index(model.j.as_ref().unwrap(), opts)?;
    Ok((eq, stab))
}
