//! Droop-modified AC power flow: the steady state of the microgrid DAE.
//!
//! Unknowns are the relative angles of buses 2..n, all n voltage
//! magnitudes, and a single system frequency (droop synchronizes every DG
//! frequency at steady state). Residuals are active and reactive power
//! balance at every bus, with DG injections substituted from the droop
//! laws: P_G = P* − (ω − ω*)/K_p and Q_G = Q* − (V − V*)/K_q.

use nalgebra::{DMatrix, DVector};

use crate::case::{AdmittanceMatrix, MicrogridCase};
use crate::{Error, Result};

pub const NEWTON_TOL: f64 = 1e-8;
pub const NEWTON_MAX_ITER: usize = 50;
const MAX_HALVINGS: usize = 4;

/// Droop set-points in the global `z` ordering: all P*, all Q*, all V*,
/// each over DGs in ascending bus order.
#[derive(Debug, Clone, PartialEq)]
pub struct SetPoints {
    pub p_set: DVector<f64>,
    pub q_set: DVector<f64>,
    pub v_set: DVector<f64>,
}

impl SetPoints {
    pub fn from_case(case: &MicrogridCase) -> Self {
        let dgs = case.dgs_sorted();
        SetPoints {
            p_set: DVector::from_iterator(dgs.len(), dgs.iter().map(|d| d.p_set)),
            q_set: DVector::from_iterator(dgs.len(), dgs.iter().map(|d| d.q_set)),
            v_set: DVector::from_iterator(dgs.len(), dgs.iter().map(|d| d.v_set)),
        }
    }

    pub fn g(&self) -> usize {
        self.p_set.len()
    }

    /// Flatten to the 3g vector z = [P*; Q*; V*].
    pub fn to_z(&self) -> DVector<f64> {
        let g = self.g();
        let mut z = DVector::zeros(3 * g);
        z.rows_mut(0, g).copy_from(&self.p_set);
        z.rows_mut(g, g).copy_from(&self.q_set);
        z.rows_mut(2 * g, g).copy_from(&self.v_set);
        z
    }

    pub fn from_z(z: &DVector<f64>) -> Result<Self> {
        if z.len() % 3 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "z length {} is not a multiple of 3",
                z.len()
            )));
        }
        let g = z.len() / 3;
        Ok(SetPoints {
            p_set: z.rows(0, g).into_owned(),
            q_set: z.rows(g, g).into_owned(),
            v_set: z.rows(2 * g, g).into_owned(),
        })
    }
}

/// Converged operating point.
#[derive(Debug, Clone)]
pub struct Equilibrium {
    /// Relative angles α_2..α_n (bus 1 is the reference), radians.
    pub alpha: DVector<f64>,
    /// Voltage magnitudes V_1..V_n, per-unit.
    pub v: DVector<f64>,
    /// System frequency, per-unit.
    pub omega: f64,
    /// Realized DG active outputs, ascending DG bus order.
    pub p_g: DVector<f64>,
    /// Realized DG reactive outputs.
    pub q_g: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

impl Equilibrium {
    /// Full angle vector with the reference zero prepended.
    pub fn alpha_full(&self) -> DVector<f64> {
        let n = self.v.len();
        let mut a = DVector::zeros(n);
        a.rows_mut(1, n - 1).copy_from(&self.alpha);
        a
    }

    /// Hash of the state bits; used to pin sensitivity products to one
    /// anchor equilibrium.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |x: f64| {
            h ^= x.to_bits();
            h = h.wrapping_mul(0x100000001b3);
        };
        for x in self.alpha.iter().chain(self.v.iter()) {
            eat(*x);
        }
        eat(self.omega);
        h
    }
}

/// Active and reactive injections P^inj, Q^inj at every bus for the given
/// angles (full, including the reference zero) and voltages.
pub fn injections(
    y: &AdmittanceMatrix,
    alpha_full: &DVector<f64>,
    v: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let n = v.len();
    let mut p = DVector::zeros(n);
    let mut q = DVector::zeros(n);
    for i in 0..n {
        let mut pi = 0.0;
        let mut qi = 0.0;
        for j in 0..n {
            let g = y.g[(i, j)];
            let b = y.b[(i, j)];
            if g == 0.0 && b == 0.0 {
                continue;
            }
            let aij = alpha_full[i] - alpha_full[j];
            let (s, c) = aij.sin_cos();
            pi += v[j] * (g * c + b * s);
            qi += v[j] * (g * s - b * c);
        }
        p[i] = v[i] * pi;
        q[i] = v[i] * qi;
    }
    (p, q)
}

/// Partial derivatives of the injections with respect to α_2..α_n and V.
///
/// Returns (dP/dα, dP/dV, dQ/dα, dQ/dV); α columns are buses 2..n in bus
/// order, V columns are buses 1..n.
pub fn injection_jacobians(
    y: &AdmittanceMatrix,
    alpha_full: &DVector<f64>,
    v: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = v.len();
    let (p, q) = injections(y, alpha_full, v);
    let mut dp_da = DMatrix::zeros(n, n - 1);
    let mut dp_dv = DMatrix::zeros(n, n);
    let mut dq_da = DMatrix::zeros(n, n - 1);
    let mut dq_dv = DMatrix::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            let g = y.g[(i, k)];
            let b = y.b[(i, k)];
            let aik = alpha_full[i] - alpha_full[k];
            let (s, c) = aik.sin_cos();
            if k != i {
                if g != 0.0 || b != 0.0 {
                    // off-diagonal terms
                    if k >= 1 {
                        dp_da[(i, k - 1)] = v[i] * v[k] * (g * s - b * c);
                        dq_da[(i, k - 1)] = -v[i] * v[k] * (g * c + b * s);
                    }
                    dp_dv[(i, k)] = v[i] * (g * c + b * s);
                    dq_dv[(i, k)] = v[i] * (g * s - b * c);
                }
            } else {
                // diagonal terms
                if i >= 1 {
                    dp_da[(i, i - 1)] = -q[i] - b * v[i] * v[i];
                    dq_da[(i, i - 1)] = p[i] - g * v[i] * v[i];
                }
                dp_dv[(i, i)] = p[i] / v[i] + g * v[i];
                dq_dv[(i, i)] = q[i] / v[i] - b * v[i];
            }
        }
    }
    (dp_da, dp_dv, dq_da, dq_dv)
}

/// RES active injections at every bus for forecast error `eps_r` (indexed
/// by RES units in case order), and the paired reactive injections.
fn res_injections(
    case: &MicrogridCase,
    eps_r: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let n = case.n();
    let mut p_r = DVector::zeros(n);
    let mut q_r = DVector::zeros(n);
    for (k, r) in case.res.iter().enumerate() {
        let p = r.p_forecast + eps_r[k];
        p_r[r.bus - 1] += p;
        q_r[r.bus - 1] += r.q_ratio * p;
    }
    (p_r, q_r)
}

/// Equilibrium-shaped raw state used by the residual evaluator.
#[derive(Debug, Clone)]
pub struct PfState {
    pub alpha: DVector<f64>,
    pub v: DVector<f64>,
    pub omega: f64,
}

impl PfState {
    fn flat(case: &MicrogridCase) -> Self {
        let n = case.n();
        PfState {
            alpha: DVector::zeros(n - 1),
            v: DVector::from_element(n, 1.0),
            omega: case.omega_set,
        }
    }

    fn alpha_full(&self) -> DVector<f64> {
        let n = self.v.len();
        let mut a = DVector::zeros(n);
        a.rows_mut(1, n - 1).copy_from(&self.alpha);
        a
    }
}

/// Mismatch vector of length 2n: active balance at buses 1..n, then
/// reactive balance. Pure function of its inputs.
pub fn residuals(
    case: &MicrogridCase,
    y: &AdmittanceMatrix,
    state: &PfState,
    z: &SetPoints,
    eps_r: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = case.n();
    if state.alpha.len() != n - 1 || state.v.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "state sized for {} buses, case has {n}",
            state.v.len()
        )));
    }
    if eps_r.len() != case.res.len() {
        return Err(Error::DimensionMismatch(format!(
            "eps_r has {} entries for {} RES units",
            eps_r.len(),
            case.res.len()
        )));
    }
    if z.g() != case.g() {
        return Err(Error::DimensionMismatch(format!(
            "set-points for {} DGs, case has {}",
            z.g(),
            case.g()
        )));
    }
    let alpha_full = state.alpha_full();
    let (p_inj, q_inj) = injections(y, &alpha_full, &state.v);
    let (p_r, q_r) = res_injections(case, eps_r);
    let mut r = DVector::zeros(2 * n);
    for (i, bus) in case.buses.iter().enumerate() {
        r[i] = p_r[i] - bus.load_p - p_inj[i];
        r[n + i] = q_r[i] - bus.load_q - q_inj[i];
    }
    for (k, dg) in case.dgs_sorted().iter().enumerate() {
        let i = dg.bus - 1;
        r[i] += z.p_set[k] - (state.omega - case.omega_set) / dg.kp;
        r[n + i] += z.q_set[k] - (state.v[i] - z.v_set[k]) / dg.kq;
    }
    Ok(r)
}

fn newton_jacobian(
    case: &MicrogridCase,
    y: &AdmittanceMatrix,
    state: &PfState,
) -> DMatrix<f64> {
    let n = case.n();
    let alpha_full = state.alpha_full();
    let (dp_da, dp_dv, dq_da, dq_dv) = injection_jacobians(y, &alpha_full, &state.v);
    // unknown ordering: [alpha_2..alpha_n, v_1..v_n, omega]
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

/// Newton solve of the droop equilibrium. `init` warm-starts the iteration;
/// otherwise a flat start (α = 0, V = 1, ω = ω*) is used.
pub fn solve_equilibrium(
    case: &MicrogridCase,
    y: &AdmittanceMatrix,
    z: &SetPoints,
    eps_r: &DVector<f64>,
    init: Option<&Equilibrium>,
) -> Result<Equilibrium> {
    let n = case.n();
    let mut state = match init {
        Some(eq) => PfState {
            alpha: eq.alpha.clone(),
            v: eq.v.clone(),
            omega: eq.omega,
        },
        None => PfState::flat(case),
    };
    let mut r = residuals(case, y, &state, z, eps_r)?;
    let mut rnorm = r.amax();
    let mut iters = 0usize;
    while rnorm > NEWTON_TOL {
        if iters >= NEWTON_MAX_ITER {
            return Err(Error::NonConvergence {
                iters,
                residual: rnorm,
            });
        }
        let jac = newton_jacobian(case, y, &state);
        let step = jac
            .lu()
            .solve(&r)
            .ok_or(Error::SingularNewtonJacobian { residual: rnorm })?;
        // full Newton step; on residual increase back off by halving
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let trial = PfState {
                alpha: &state.alpha - scale * step.rows(0, n - 1),
                v: &state.v - scale * step.rows(n - 1, n),
                omega: state.omega - scale * step[2 * n - 1],
            };
            let rt = residuals(case, y, &trial, z, eps_r)?;
            let tn = rt.amax();
            if tn < rnorm || scale < 1.0 / ((1 << MAX_HALVINGS) as f64) {
                state = trial;
                r = rt;
                rnorm = tn;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence {
                iters,
                residual: rnorm,
            });
        }
        iters += 1;
    }
    if state.v.iter().any(|&v| v <= 0.0) {
        return Err(Error::NonConvergence {
            iters,
            residual: rnorm,
        });
    }
    // back-substitute realized DG outputs from the droop laws
    let dgs = case.dgs_sorted();
    let p_g = DVector::from_iterator(
        dgs.len(),
        dgs.iter()
            .enumerate()
            .map(|(k, d)| z.p_set[k] - (state.omega - case.omega_set) / d.kp),
    );
    let q_g = DVector::from_iterator(
        dgs.len(),
        dgs.iter()
            .enumerate()
            .map(|(k, d)| z.q_set[k] - (state.v[d.bus - 1] - z.v_set[k]) / d.kq),
    );
    Ok(Equilibrium {
        alpha: state.alpha,
        v: state.v,
        omega: state.omega,
        p_g,
        q_g,
        residual_norm: rnorm,
        iterations: iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::build_admittance;
    use crate::fixtures::*;
    use approx::assert_abs_diff_eq;

    fn zero_eps(case: &MicrogridCase) -> DVector<f64> {
        DVector::zeros(case.res.len())
    }

    #[test]
    fn no_flow_fixed_point() {
        let mut c = single_dg_case();
        // make it a true no-flow case: single DG bus island via zero loads
        c.buses[1].load_p = 0.0;
        c.buses[1].load_q = 0.0;
        let y = build_admittance(&c);
        let mut z = SetPoints::from_case(&c);
        z.p_set[0] = 0.0;
        z.q_set[0] = 0.0;
        let eq = solve_equilibrium(&c, &y, &z, &zero_eps(&c), None).unwrap();
        assert_abs_diff_eq!(eq.omega, c.omega_set, epsilon = 1e-10);
        assert_abs_diff_eq!(eq.alpha[0], 0.0, epsilon = 1e-10);
        for v in eq.v.iter() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(eq.p_g[0], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(eq.q_g[0], 0.0, epsilon = 1e-10);
    }

    /// Independent damped fixed-point oracle for the 2-bus case: relaxation
    /// on the four mismatch equations with local diagonal gains, sharing no
    /// code with the Newton solver.
    fn two_bus_fixed_point_oracle(c: &MicrogridCase) -> (f64, f64, f64) {
        let br = &c.branches[0];
        let d = br.r * br.r + br.x * br.x;
        // series admittance y = g + jb (b < 0 for inductive lines)
        let (g, b) = (br.r / d, -br.x / d);
        let dg = &c.dgs[0];
        let (pl, ql) = (c.buses[1].load_p, c.buses[1].load_q);
        let (mut a2, mut v1, mut v2, mut w) = (0.0f64, 1.0f64, 1.0f64, c.omega_set);
        let damp = 0.5;
        for _ in 0..500_000 {
            let (s, cth) = a2.sin_cos();
            // Ybus: Y11 = Y22 = g + jb, Y12 = Y21 = -(g + jb); a21 = a2
            let p1 = g * v1 * v1 + v1 * v2 * (-g * cth - (-b) * s);
            let q1 = -b * v1 * v1 + v1 * v2 * (g * s - (-b) * cth);
            let p2 = g * v2 * v2 + v2 * v1 * (-g * cth + (-b) * s);
            let q2 = -b * v2 * v2 + v2 * v1 * (-g * s - (-b) * cth);
            let m_p1 = dg.p_set - (w - c.omega_set) / dg.kp - p1;
            let m_q1 = dg.q_set - (v1 - dg.v_set) / dg.kq - q1;
            let m_p2 = -pl - p2;
            let m_q2 = -ql - q2;
            if m_p1.abs().max(m_q1.abs()).max(m_p2.abs()).max(m_q2.abs()) < 1e-12 {
                break;
            }
            let bmag = -b; // > 0
            w += damp * dg.kp * m_p1;
            v1 += damp * m_q1 / (1.0 / dg.kq + bmag);
            a2 += damp * m_p2 / (bmag * v1 * v2);
            v2 += damp * m_q2 / (bmag * v2);
        }
        (a2, v2, w)
    }

    #[test]
    fn two_bus_matches_fixed_point_oracle() {
        let c = two_bus_case();
        let y = build_admittance(&c);
        let z = SetPoints::from_case(&c);
        let eq = solve_equilibrium(&c, &y, &z, &zero_eps(&c), None).unwrap();
        let (a2, v2, w) = two_bus_fixed_point_oracle(&c);
        assert_abs_diff_eq!(eq.alpha[0], a2, epsilon = 1e-8);
        assert_abs_diff_eq!(eq.v[1], v2, epsilon = 1e-8);
        assert_abs_diff_eq!(eq.omega, w, epsilon = 1e-8);
    }

    #[test]
    fn droop_consistency_identities() {
        let c = five_bus_case();
        let y = build_admittance(&c);
        let z = SetPoints::from_case(&c);
        let eq = solve_equilibrium(&c, &y, &z, &zero_eps(&c), None).unwrap();
        for (k, dg) in c.dgs_sorted().iter().enumerate() {
            let w_pred = c.omega_set + dg.kp * (z.p_set[k] - eq.p_g[k]);
            assert_abs_diff_eq!(eq.omega, w_pred, epsilon = 1e-10);
            let v_pred = z.v_set[k] + dg.kq * (z.q_set[k] - eq.q_g[k]);
            assert_abs_diff_eq!(eq.v[dg.bus - 1], v_pred, epsilon = 1e-10);
        }
    }

    #[test]
    fn lossless_power_balance() {
        let c = five_bus_lossless_case();
        let y = build_admittance(&c);
        let z = SetPoints::from_case(&c);
        let eq = solve_equilibrium(&c, &y, &z, &zero_eps(&c), None).unwrap();
        let total_load: f64 = c.buses.iter().map(|b| b.load_p).sum();
        let total_res: f64 = c.res.iter().map(|r| r.p_forecast).sum();
        let total_gen: f64 = eq.p_g.iter().sum();
        assert_abs_diff_eq!(total_gen + total_res, total_load, epsilon = 1e-10);
    }

    #[test]
    fn warm_start_returns_quickly() {
        let c = five_bus_case();
        let y = build_admittance(&c);
        let z = SetPoints::from_case(&c);
        let eq = solve_equilibrium(&c, &y, &z, &zero_eps(&c), None).unwrap();
        let eq2 = solve_equilibrium(&c, &y, &z, &zero_eps(&c), Some(&eq)).unwrap();
        assert!(eq2.iterations <= 2, "warm start took {}", eq2.iterations);
    }

    #[test]
    fn residuals_at_flat_start_equal_injection_mismatch() {
        let c = two_bus_case();
        let y = build_admittance(&c);
        let mut z = SetPoints::from_case(&c);
        z.p_set[0] = 0.0;
        z.q_set[0] = 0.0;
        let state = PfState::flat(&c);
        let r = residuals(&c, &y, &state, &z, &zero_eps(&c)).unwrap();
        // flat start: zero flows, so the active residual at bus 2 is -P_L2
        assert_abs_diff_eq!(r[1], -c.buses[1].load_p, epsilon = 1e-12);
    }

    #[test]
    fn residuals_match_independent_injection_evaluator() {
        // random state on the 5-bus case vs a from-scratch evaluation of
        // the balance equations
        let c = five_bus_case();
        let y = build_admittance(&c);
        let z = SetPoints::from_case(&c);
        let n = c.n();
        let state = PfState {
            alpha: DVector::from_vec(vec![0.01, -0.03, 0.02, -0.015]),
            v: DVector::from_vec(vec![1.01, 0.98, 1.02, 0.97, 0.99]),
            omega: 0.995,
        };
        let eps = DVector::from_vec(vec![0.003]);
        let r = residuals(&c, &y, &state, &z, &eps).unwrap();
        let af = state.alpha_full();
        for i in 0..n {
            let mut p = 0.0;
            let mut q = 0.0;
            for j in 0..n {
                let aij = af[i] - af[j];
                p += state.v[i]
                    * state.v[j]
                    * (y.g[(i, j)] * aij.cos() + y.b[(i, j)] * aij.sin());
                q += state.v[i]
                    * state.v[j]
                    * (y.g[(i, j)] * aij.sin() - y.b[(i, j)] * aij.cos());
            }
            let mut p_in = -c.buses[i].load_p;
            let mut q_in = -c.buses[i].load_q;
            for (k, dgm) in c.dgs_sorted().iter().enumerate() {
                if dgm.bus == i + 1 {
                    p_in += z.p_set[k] - (state.omega - c.omega_set) / dgm.kp;
                    q_in += z.q_set[k] - (state.v[i] - z.v_set[k]) / dgm.kq;
                }
            }
            for (k, ru) in c.res.iter().enumerate() {
                if ru.bus == i + 1 {
                    p_in += ru.p_forecast + eps[k];
                    q_in += ru.q_ratio * (ru.p_forecast + eps[k]);
                }
            }
            assert_abs_diff_eq!(r[i], p_in - p, epsilon = 1e-12);
            assert_abs_diff_eq!(r[n + i], q_in - q, epsilon = 1e-12);
        }
    }

    #[test]
    fn converged_residual_is_small() {
        let c = five_bus_case();
        let y = build_admittance(&c);
        let z = SetPoints::from_case(&c);
        let eq = solve_equilibrium(&c, &y, &z, &zero_eps(&c), None).unwrap();
        let state = PfState {
            alpha: eq.alpha.clone(),
            v: eq.v.clone(),
            omega: eq.omega,
        };
        let r = residuals(&c, &y, &state, &z, &zero_eps(&c)).unwrap();
        assert!(r.amax() <= 1e-8);
    }
}
