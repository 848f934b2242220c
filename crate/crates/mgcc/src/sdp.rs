//! Thin conic-programming layer: a solver-agnostic problem description in
//! the standard form
//!
//!   min ½ xᵀPx + qᵀx   s.t.   Ax + s = b,  s ∈ K
//!
//! with K a product of zero, nonnegative, and PSD-triangle cones, plus the
//! scaled-vectorization (svec) helpers used to pass symmetric matrices
//! through the PSD cones. Backed by Clarabel.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cone {
    Zero(usize),
    Nonnegative(usize),
    /// Parameter is the matrix side length n; the cone consumes
    /// n(n+1)/2 svec entries.
    PsdTriangle(usize),
}

impl Cone {
    pub fn len(&self) -> usize {
        match *self {
            Cone::Zero(d) | Cone::Nonnegative(d) => d,
            Cone::PsdTriangle(n) => svec_len(n),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sparse conic problem assembled from triplets.
#[derive(Debug, Clone, Default)]
pub struct ConicProblem {
    pub num_vars: usize,
    pub q: Vec<f64>,
    /// Quadratic cost triplets (row, col, val), upper triangle only.
    pub p_triplets: Vec<(usize, usize, f64)>,
    pub a_triplets: Vec<(usize, usize, f64)>,
    pub b: Vec<f64>,
    pub cones: Vec<Cone>,
}

impl ConicProblem {
    pub fn new(num_vars: usize) -> Self {
        ConicProblem {
            num_vars,
            q: vec![0.0; num_vars],
            ..Default::default()
        }
    }

    pub fn num_rows(&self) -> usize {
        self.b.len()
    }

    /// Append a cone worth of constraint rows; returns the starting row.
    pub fn push_cone(&mut self, cone: Cone, b_rows: &[f64]) -> usize {
        assert_eq!(cone.len(), b_rows.len(), "cone/b row count mismatch");
        let start = self.b.len();
        self.b.extend_from_slice(b_rows);
        self.cones.push(cone);
        start
    }

    pub fn set_a(&mut self, row: usize, col: usize, val: f64) {
        if val != 0.0 {
            self.a_triplets.push((row, col, val));
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    /// Dual variables, one entry per constraint row.
    pub z: Vec<f64>,
    /// Primal slacks s = b − Ax.
    pub s: Vec<f64>,
    pub objective: f64,
    pub status: String,
}

fn csc_from_triplets(
    m: usize,
    n: usize,
    triplets: &[(usize, usize, f64)],
) -> CscMatrix<f64> {
    let mut sorted = triplets.to_vec();
    sorted.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval: Vec<usize> = Vec::with_capacity(sorted.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(sorted.len());
    let mut prev: Option<(usize, usize)> = None;
    for &(r, c, v) in &sorted {
        assert!(r < m && c < n, "triplet ({r},{c}) outside {m}x{n}");
        if prev == Some((c, r)) {
            *nzval.last_mut().unwrap() += v;
        } else {
            rowval.push(r);
            nzval.push(v);
            colptr[c + 1] += 1;
            prev = Some((c, r));
        }
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

/// Solve the problem to the requested duality-gap tolerance.
pub fn solve(problem: &ConicProblem, tol: f64, max_iter: usize) -> Result<ConicSolution> {
    let m = problem.num_rows();
    let n = problem.num_vars;
    let total: usize = problem.cones.iter().map(Cone::len).sum();
    if total != m {
        return Err(Error::DimensionMismatch(format!(
            "cones cover {total} rows, b has {m}"
        )));
    }
    let p = csc_from_triplets(n, n, &problem.p_triplets);
    let a = csc_from_triplets(m, n, &problem.a_triplets);
    let cones: Vec<SupportedConeT<f64>> = problem
        .cones
        .iter()
        .map(|c| match *c {
            Cone::Zero(d) => SupportedConeT::ZeroConeT(d),
            Cone::Nonnegative(d) => SupportedConeT::NonnegativeConeT(d),
            Cone::PsdTriangle(d) => SupportedConeT::PSDTriangleConeT(d),
        })
        .collect();
    let settings = DefaultSettings {
        verbose: false,
        tol_gap_abs: tol,
        tol_gap_rel: tol,
        tol_feas: tol,
        max_iter: max_iter as u32,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&p, &problem.q, &a, &problem.b, &cones, settings);
    solver.solve();
    let sol = &solver.solution;
    match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => Ok(ConicSolution {
            x: sol.x.clone(),
            z: sol.z.clone(),
            s: sol.s.clone(),
            objective: sol.obj_val,
            status: format!("{:?}", sol.status),
        }),
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            Err(Error::SdpInfeasible {
                status: format!("{:?}", sol.status),
            })
        }
        other => Err(Error::SolverFailure {
            status: format!("{other:?}"),
        }),
    }
}

/// Length of the scaled upper-triangle vectorization of an n×n symmetric
/// matrix.
pub fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// svec: column-major upper triangle, off-diagonals scaled by √2, so that
/// ⟨svec(X), svec(Y)⟩ = tr(XY) for symmetric X, Y.
pub fn mat_to_svec(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    assert_eq!(n, x.ncols());
    let mut v = Vec::with_capacity(svec_len(n));
    for c in 0..n {
        for r in 0..=c {
            if r == c {
                v.push(x[(r, c)]);
            } else {
                v.push(SQRT2 * 0.5 * (x[(r, c)] + x[(c, r)]));
            }
        }
    }
    v
}

pub fn svec_to_mat(v: &[f64], n: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), svec_len(n));
    let mut x = DMatrix::zeros(n, n);
    let mut k = 0;
    for c in 0..n {
        for r in 0..=c {
            if r == c {
                x[(r, c)] = v[k];
            } else {
                x[(r, c)] = v[k] / SQRT2;
                x[(c, r)] = v[k] / SQRT2;
            }
            k += 1;
        }
    }
    x
}

/// Index of entry (r, c), r ≤ c, inside the svec layout.
pub fn svec_index(r: usize, c: usize) -> usize {
    assert!(r <= c);
    c * (c + 1) / 2 + r
}
