//! Small-signal linearization of the microgrid DAE and reduction to the
//! dynamic Jacobian J = A − B·D⁻¹·C.
//!
//! State ordering inside x is fixed as [α_r (g−1); ω_G (g); V_G (g)] with
//! DG buses ascending and the reference DG (bus 1) excluded from α_r;
//! algebraic y is [α_L (d); V_L (d)] with load buses ascending.

use nalgebra::{Complex, DMatrix, DVector};

use crate::case::{AdmittanceMatrix, MicrogridCase};
use crate::pf::{injection_jacobians, Equilibrium};
use crate::{Error, Result};

/// Condition-estimate threshold above which D is declared singular.
pub const D_COND_LIMIT: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct SmallSignalModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// Reduced dynamic Jacobian; set by [`reduce`].
    pub j: Option<DMatrix<f64>>,
    /// Condition estimate of D from the reduction step.
    pub d_condition: Option<f64>,
}

/// Column layout shared by the linearization: maps bus-ordered injection
/// jacobian columns onto the (x, y) ordering.
struct Layout {
    dg_buses: Vec<usize>,
    load_buses: Vec<usize>,
    g: usize,
    d: usize,
}

impl Layout {
    fn new(case: &MicrogridCase) -> Self {
        Layout {
            dg_buses: case.dg_buses(),
            load_buses: case.load_buses(),
            g: case.g(),
            d: case.d(),
        }
    }

    /// Columns of x and y holding angles/voltages, as (state index, bus).
    /// Angle column order: α_r then α_L; voltage order: V_G then V_L.
    fn angle_columns(&self) -> Vec<(usize, usize)> {
        let mut cols = Vec::new();
        for (k, &bus) in self.dg_buses.iter().enumerate().skip(1) {
            cols.push((k - 1, bus));
        }
        for (k, &bus) in self.load_buses.iter().enumerate() {
            cols.push((self.g - 1 + k, bus));
        }
        cols
    }

    fn voltage_columns(&self) -> Vec<(usize, usize)> {
        let mut cols = Vec::new();
        for (k, &bus) in self.dg_buses.iter().enumerate() {
            cols.push((k, bus));
        }
        for (k, &bus) in self.load_buses.iter().enumerate() {
            cols.push((self.g + k, bus));
        }
        cols
    }
}

/// Assemble A, B, C, D at the given (angles, voltages) point. The point is
/// not required to be an equilibrium; [`assemble`] adds that check.
pub fn assemble_at(
    case: &MicrogridCase,
    y: &AdmittanceMatrix,
    alpha_full: &DVector<f64>,
    v: &DVector<f64>,
) -> SmallSignalModel {
    let lay = Layout::new(case);
    let (g, d) = (lay.g, lay.d);
    let nx = 3 * g - 1;
    let ny = 2 * d;
    let omega_b = case.omega_base;

    let (dp_da, dp_dv, dq_da, dq_dv) = injection_jacobians(y, alpha_full, v);

    // combined [A B; C D] columns: [α_r, ω_G, V_G, α_L, V_L]
    let mut m = DMatrix::zeros(nx + ny, nx + ny);

    // column positions in the combined matrix
    let col_of_angle = |state_idx: usize| -> usize {
        // angle columns: α_r occupy 0..g-1 in x; α_L occupy 0..d in y
        if state_idx < g - 1 {
            state_idx
        } else {
            nx + (state_idx - (g - 1))
        }
    };
    let col_of_voltage = |state_idx: usize| -> usize {
        if state_idx < g {
            (g - 1) + g + state_idx
        } else {
            nx + d + (state_idx - g)
        }
    };

    // rows 0..g-1: relative angle dynamics, ω_b·T_G with T_G = [-1, I]
    for k in 1..g {
        m[(k - 1, (g - 1))] = -omega_b;
        m[(k - 1, (g - 1) + k)] = omega_b;
    }

    let dgs = case.dgs_sorted();
    // rows g-1..2g-1: frequency dynamics f_G
    for (k, dg) in dgs.iter().enumerate() {
        let row = (g - 1) + k;
        let bus = dg.bus - 1;
        let gain = dg.kp * dg.fp;
        for (sidx, b) in lay.angle_columns() {
            m[(row, col_of_angle(sidx))] = -gain * dp_da[(bus, b - 2)];
        }
        for (sidx, b) in lay.voltage_columns() {
            m[(row, col_of_voltage(sidx))] = -gain * dp_dv[(bus, b - 1)];
        }
        m[(row, (g - 1) + k)] += -dg.fp;
    }
    // rows 2g-1..3g-1: voltage dynamics h_G
    for (k, dg) in dgs.iter().enumerate() {
        let row = (2 * g - 1) + k;
        let bus = dg.bus - 1;
        let gain = dg.kq * dg.fq;
        for (sidx, b) in lay.angle_columns() {
            m[(row, col_of_angle(sidx))] = -gain * dq_da[(bus, b - 2)];
        }
        for (sidx, b) in lay.voltage_columns() {
            m[(row, col_of_voltage(sidx))] = -gain * dq_dv[(bus, b - 1)];
        }
        m[(row, (g - 1) + g + k)] += -dg.fq;
    }
    // algebraic rows: f_L then h_L over load buses
    for (k, &bus) in lay.load_buses.iter().enumerate() {
        let row = nx + k;
        for (sidx, b) in lay.angle_columns() {
            m[(row, col_of_angle(sidx))] = -dp_da[(bus - 1, b - 2)];
        }
        for (sidx, b) in lay.voltage_columns() {
            m[(row, col_of_voltage(sidx))] = -dp_dv[(bus - 1, b - 1)];
        }
        let row = nx + d + k;
        for (sidx, b) in lay.angle_columns() {
            m[(row, col_of_angle(sidx))] = -dq_da[(bus - 1, b - 2)];
        }
        for (sidx, b) in lay.voltage_columns() {
            m[(row, col_of_voltage(sidx))] = -dq_dv[(bus - 1, b - 1)];
        }
    }

    SmallSignalModel {
        a: m.view((0, 0), (nx, nx)).into_owned(),
        b: m.view((0, nx), (nx, ny)).into_owned(),
        c: m.view((nx, 0), (ny, nx)).into_owned(),
        d: m.view((nx, nx), (ny, ny)).into_owned(),
        j: None,
        d_condition: None,
    }
}

/// Assemble the linearization blocks at a converged equilibrium.
pub fn assemble(
    case: &MicrogridCase,
    y: &AdmittanceMatrix,
    eq: &Equilibrium,
) -> Result<SmallSignalModel> {
    if eq.residual_norm > crate::pf::NEWTON_TOL {
        return Err(Error::NonConvergence {
            iters: eq.iterations,
            residual: eq.residual_norm,
        });
    }
    Ok(assemble_at(case, y, &eq.alpha_full(), &eq.v))
}

/// Eliminate the algebraic variables: J = A − B·D⁻¹·C via a linear solve.
pub fn reduce(model: &mut SmallSignalModel) -> Result<()> {
    let ny = model.d.nrows();
    if ny == 0 {
        model.j = Some(model.a.clone());
        model.d_condition = Some(1.0);
        return Ok(());
    }
    let svd = model.d.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > D_COND_LIMIT {
        return Err(Error::SingularAlgebraicBlock { cond });
    }
    let lu = model.d.clone().lu();
    let x = lu
        .solve(&model.c)
        .ok_or(Error::SingularAlgebraicBlock { cond })?;
    model.j = Some(&model.a - &model.b * x);
    model.d_condition = Some(cond);
    Ok(())
}

/// Full spectrum of a real square matrix (unordered).
pub fn eigenvalues(j: &DMatrix<f64>) -> Vec<Complex<f64>> {
    j.clone().complex_eigenvalues().iter().copied().collect()
}

/// Nonlinear DAE right-hand side [α̇_r; ω̇_G; V̇_G; f_L; h_L] at a raw
/// (x, y) point. This is the evaluator the assembled blocks are the
/// analytic derivatives of; tests difference it to verify them.
pub fn dae_rhs(
    case: &MicrogridCase,
    y: &AdmittanceMatrix,
    x: &DVector<f64>,
    yv: &DVector<f64>,
    z: &crate::pf::SetPoints,
    eps_r: &DVector<f64>,
) -> Result<DVector<f64>> {
    let lay = Layout::new(case);
    let (g, d) = (lay.g, lay.d);
    if x.len() != 3 * g - 1 || yv.len() != 2 * d {
        return Err(Error::DimensionMismatch(format!(
            "dae state sized ({}, {}), expected ({}, {})",
            x.len(),
            yv.len(),
            3 * g - 1,
            2 * d
        )));
    }
    let n = case.n();
    // rebuild bus-ordered angle/voltage vectors
    let mut alpha_full = DVector::<f64>::zeros(n);
    let mut v = DVector::<f64>::zeros(n);
    for (k, &bus) in lay.dg_buses.iter().enumerate() {
        if k > 0 {
            alpha_full[bus - 1] = x[k - 1];
        }
        v[bus - 1] = x[(g - 1) + g + k];
    }
    for (k, &bus) in lay.load_buses.iter().enumerate() {
        alpha_full[bus - 1] = yv[k];
        v[bus - 1] = yv[d + k];
    }
    let (p_inj, q_inj) = injections_with(y, &alpha_full, &v);
    let mut p_r = DVector::<f64>::zeros(n);
    let mut q_r = DVector::<f64>::zeros(n);
    for (k, r) in case.res.iter().enumerate() {
        let p = r.p_forecast + eps_r[k];
        p_r[r.bus - 1] += p;
        q_r[r.bus - 1] += r.q_ratio * p;
    }

    let mut out = DVector::<f64>::zeros(3 * g - 1 + 2 * d);
    let omega_ref = x[g - 1]; // ω of the reference DG
    for k in 1..g {
        out[k - 1] = case.omega_base * (x[(g - 1) + k] - omega_ref);
    }
    for (k, dg) in case.dgs_sorted().iter().enumerate() {
        let i = dg.bus - 1;
        let omega_k = x[(g - 1) + k];
        let v_k = x[(g - 1) + g + k];
        out[(g - 1) + k] = dg.kp * dg.fp * (z.p_set[k] + p_r[i] - case.buses[i].load_p - p_inj[i])
            - dg.fp * (omega_k - case.omega_set);
        out[(2 * g - 1) + k] = dg.kq * dg.fq
            * (z.q_set[k] + q_r[i] - case.buses[i].load_q - q_inj[i])
            - dg.fq * (v_k - z.v_set[k]);
    }
    for (k, &bus) in lay.load_buses.iter().enumerate() {
        let i = bus - 1;
        out[(3 * g - 1) + k] = p_r[i] - case.buses[i].load_p - p_inj[i];
        out[(3 * g - 1) + d + k] = q_r[i] - case.buses[i].load_q - q_inj[i];
    }
    Ok(out)
}

fn injections_with(
    y: &AdmittanceMatrix,
    alpha_full: &DVector<f64>,
    v: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    crate::pf::injections(y, alpha_full, v)
}

/// Pack an equilibrium into the (x, y) DAE coordinates.
pub fn pack_state(case: &MicrogridCase, eq: &Equilibrium) -> (DVector<f64>, DVector<f64>) {
    let lay = Layout::new(case);
    let (g, d) = (lay.g, lay.d);
    let alpha_full = eq.alpha_full();
    let mut x = DVector::<f64>::zeros(3 * g - 1);
    let mut yv = DVector::<f64>::zeros(2 * d);
    for (k, &bus) in lay.dg_buses.iter().enumerate() {
        if k > 0 {
            x[k - 1] = alpha_full[bus - 1];
        }
        x[(g - 1) + k] = eq.omega;
        x[(g - 1) + g + k] = eq.v[bus - 1];
    }
    for (k, &bus) in lay.load_buses.iter().enumerate() {
        yv[k] = alpha_full[bus - 1];
        yv[d + k] = eq.v[bus - 1];
    }
    (x, yv)
}
