//! Lyapunov-based small-signal stability index and its sensitivity to the
//! dynamic Jacobian.
//!
//! η(J) is the optimal value of
//!
//!   min η  s.t.  −JᵀΦ − ΦJ + ηI ⪰ 0,  εI ⪯ Φ ⪯ I
//!
//! so η < 0 certifies asymptotic stability with margin. The gradient of η
//! with respect to J is 2·Φ·Z where Z is the (trace-normalized) dual of
//! the first matrix inequality.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::sdp::{self, mat_to_svec, svec_index, svec_len, svec_to_mat, Cone, ConicProblem};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct StabilityOptions {
    /// Lower bound εI on the Lyapunov candidate.
    pub eps_lmi: f64,
    /// Conic solver tolerance.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        StabilityOptions {
            eps_lmi: 1e-4,
            tol: 1e-9,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StabilityResult {
    pub eta: f64,
    pub phi: DMatrix<f64>,
    /// Dual of −JᵀΦ − ΦJ + ηI ⪰ 0, normalized to unit trace.
    pub dual_lyap: DMatrix<f64>,
    /// Dual of Φ − εI ⪰ 0.
    pub dual_lower: DMatrix<f64>,
    /// Dual of I − Φ ⪰ 0.
    pub dual_upper: DMatrix<f64>,
    /// Complementarity residual ⟨slack, dual⟩ of the Lyapunov inequality.
    pub comp_slack: f64,
    /// Number of eigenvalues of the Lyapunov slack within 1e-6 of zero;
    /// values above one flag a potentially nonsmooth point of η(J).
    pub eigenvalue_multiplicity: usize,
}

/// Solve the stability SDP for a reduced Jacobian.
pub fn stability_index(j: &DMatrix<f64>, opts: &StabilityOptions) -> Result<StabilityResult> {
    let n = j.nrows();
    if n == 0 || j.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "jacobian is {}x{}",
            j.nrows(),
            j.ncols()
        )));
    }
    let sl = svec_len(n);
    // variables x = [η; svec(Φ)]
    let mut prob = ConicProblem::new(1 + sl);
    prob.q[0] = 1.0;

    let eye = DMatrix::<f64>::identity(n, n);
    let svec_eye = mat_to_svec(&eye);

    // s1 = svec(−JᵀΦ − ΦJ + ηI) ∈ PSD:
    //   A1·x + s1 = 0 with A1 = [−svec(I) | L], L_col(k) = svec(JᵀĒk + ĒkJ)
    let row1 = prob.push_cone(Cone::PsdTriangle(n), &vec![0.0; sl]);
    for (k, v) in svec_eye.iter().enumerate() {
        prob.set_a(row1 + k, 0, -v);
    }
    for c in 0..n {
        for r in 0..=c {
            let col = 1 + svec_index(r, c);
            let ebar = sym_basis(n, r, c);
            let m = j.transpose() * &ebar + &ebar * j;
            for (k, v) in mat_to_svec(&m).iter().enumerate() {
                prob.set_a(row1 + k, col, *v);
            }
        }
    }
    // s2 = svec(Φ − εI) ∈ PSD: A2 = [0 | −I], b2 = −ε svec(I)
    let b2: Vec<f64> = svec_eye.iter().map(|v| -opts.eps_lmi * v).collect();
    let row2 = prob.push_cone(Cone::PsdTriangle(n), &b2);
    for k in 0..sl {
        prob.set_a(row2 + k, 1 + k, -1.0);
    }
    // s3 = svec(I − Φ) ∈ PSD: A3 = [0 | I], b3 = svec(I)
    let row3 = prob.push_cone(Cone::PsdTriangle(n), &svec_eye);
    for k in 0..sl {
        prob.set_a(row3 + k, 1 + k, 1.0);
    }

    let sol = sdp::solve(&prob, opts.tol, opts.max_iter)?;

    let phi = {
        let raw = svec_to_mat(&sol.x[1..], n);
        // symmetrize away solver round-off
        (&raw + raw.transpose()) * 0.5
    };
    let mut dual_lyap = svec_to_mat(&sol.z[..sl], n);
    let dual_lower = svec_to_mat(&sol.z[sl..2 * sl], n);
    let dual_upper = svec_to_mat(&sol.z[2 * sl..3 * sl], n);
    let tr = dual_lyap.trace();
    let dual_ok = tr > 1e-12;
    if dual_ok {
        dual_lyap /= tr;
    }

    // Primal refinement: the tightest η for the returned candidate is the
    // largest eigenvalue of sym(JᵀΦ + ΦJ). Its defect is quadratic in the
    // Φ error only while that eigenvalue is simple; a degenerate top
    // cluster leaves a first-order residue.
    let lyap = j.transpose() * &phi + &phi * j;
    let lyap_sym = (&lyap + lyap.transpose()) * 0.5;
    let eig = SymmetricEigen::new(lyap_sym.clone());
    let eta_primal = eig.eigenvalues.max();

    // Dual refinement: any unit-trace Z ⪰ 0 certifies
    //   η ≥ ε·tr(W₊) + tr(W₋)  with  W = J·Z + Z·Jᵀ
    // (split into positive/negative parts). The defect is quadratic in
    // the dual error regardless of eigenvalue multiplicity, and the bound
    // varies smoothly with J, so it is the sharper estimate wherever the
    // two refinements agree to solver accuracy.
    let w = j * &dual_lyap + &dual_lyap * j.transpose();
    let w_sym = (&w + w.transpose()) * 0.5;
    let eta_dual: f64 = SymmetricEigen::new(w_sym)
        .eigenvalues
        .iter()
        .map(|&l| if l > 0.0 { opts.eps_lmi * l } else { l })
        .sum();
    let eta = if dual_ok && (eta_dual - eta_primal).abs() <= 1e-4 * eta_primal.abs().max(1.0) {
        eta_dual
    } else {
        eta_primal
    };

    let slack = &eye * eta_primal - lyap_sym;
    let comp_slack = (mat_to_svec(&slack)
        .iter()
        .zip(mat_to_svec(&dual_lyap).iter())
        .map(|(a, b)| a * b)
        .sum::<f64>())
    .abs();
    let eigenvalue_multiplicity = eig
        .eigenvalues
        .iter()
        .filter(|&&l| (eta - l).abs() <= 1e-6)
        .count();

    Ok(StabilityResult {
        eta,
        phi,
        dual_lyap,
        dual_lower,
        dual_upper,
        comp_slack,
        eigenvalue_multiplicity,
    })
}

/// Gradient of η with respect to J, entry (m, n) = ∂η/∂J_mn.
///
/// At the optimum the active Lyapunov inequality gives
/// ∂η/∂J = 2·Φ·Z with Z the unit-trace dual; a large complementarity
/// residual means the duals do not certify optimality and the gradient
/// would be unreliable.
pub fn eta_jacobian_sensitivity(result: &StabilityResult) -> Result<DMatrix<f64>> {
    if result.comp_slack > 1e-6 {
        return Err(Error::NotOptimal {
            residual: result.comp_slack,
        });
    }
    Ok(2.0 * &result.phi * &result.dual_lyap)
}

/// Symmetric basis matrix Ēk for svec index (r, c): unit diagonal entry or
/// 1/√2 on the symmetric off-diagonal pair, so that Φ = Σ svec(Φ)_k Ēk.
fn sym_basis(n: usize, r: usize, c: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(n, n);
    if r == c {
        e[(r, c)] = 1.0;
    } else {
        let v = 1.0 / std::f64::consts::SQRT_2;
        e[(r, c)] = v;
        e[(c, r)] = v;
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn eta_of(j: &DMatrix<f64>) -> StabilityResult {
        stability_index(j, &StabilityOptions::default()).unwrap()
    }

    #[test]
    fn eta_of_negative_identity_is_minus_two() {
        let j = -DMatrix::<f64>::identity(3, 3);
        let r = eta_of(&j);
        assert_abs_diff_eq!(r.eta, -2.0, epsilon = 1e-7);
    }

    #[test]
    fn eta_of_stable_diagonal_tracks_slowest_mode() {
        // Φ = I is optimal for normal J, so η = 2·max λ = −2
        let j = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -3.0]));
        let r = eta_of(&j);
        assert_abs_diff_eq!(r.eta, -2.0, epsilon = 1e-7);
    }

    #[test]
    fn eta_for_symmetric_matrices_is_twice_lambda_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(2..=8);
            let raw = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let sym = (&raw + raw.transpose()) * 0.5;
            let lmax = SymmetricEigen::new(sym.clone()).eigenvalues.max();
            // shift to make it Hurwitz with margin
            let j: DMatrix<f64> = &sym - DMatrix::identity(n, n) * (lmax + 0.5);
            let expect = 2.0 * (SymmetricEigen::new(j.clone()).eigenvalues.max());
            let r = eta_of(&j);
            assert_abs_diff_eq!(r.eta, expect, epsilon = 1e-6);
        }
    }

    /// Brute-force oracle for 2x2: minimize λmax(JᵀΦ + ΦJ) over a dense
    /// grid of normalized Φ ⪰ εI, refined by local search.
    fn eta_grid_oracle(j: &DMatrix<f64>, eps: f64) -> f64 {
        let lyap_eta = |phi: &DMatrix<f64>| -> Option<f64> {
            let eig_phi = SymmetricEigen::new(phi.clone());
            if eig_phi.eigenvalues.min() < eps || eig_phi.eigenvalues.max() > 1.0 {
                return None;
            }
            let m = j.transpose() * phi + phi * j;
            let m = (&m + m.transpose()) * 0.5;
            Some(SymmetricEigen::new(m).eigenvalues.max())
        };
        let mut best = f64::INFINITY;
        let mut best_p = (1.0, 1.0, 0.0);
        let steps = 60;
        for a in 0..=steps {
            for b in 0..=steps {
                for c in -(steps as i32)..=(steps as i32) {
                    let p11 = eps + (1.0 - eps) * a as f64 / steps as f64;
                    let p22 = eps + (1.0 - eps) * b as f64 / steps as f64;
                    let p12 = c as f64 / steps as f64;
                    let phi = DMatrix::from_row_slice(2, 2, &[p11, p12, p12, p22]);
                    if let Some(e) = lyap_eta(&phi) {
                        if e < best {
                            best = e;
                            best_p = (p11, p22, p12);
                        }
                    }
                }
            }
        }
        // Nelder-Mead refinement from the best grid point (coordinate
        // descent stalls on the nonsmooth λmax objective)
        let f = |p: &[f64; 3]| -> f64 {
            let phi = DMatrix::from_row_slice(2, 2, &[p[0], p[2], p[2], p[1]]);
            lyap_eta(&phi).unwrap_or(f64::INFINITY)
        };
        let mut simplex: Vec<[f64; 3]> = vec![
            [best_p.0, best_p.1, best_p.2],
            [best_p.0 + 0.05, best_p.1, best_p.2],
            [best_p.0, best_p.1 + 0.05, best_p.2],
            [best_p.0, best_p.1, best_p.2 + 0.05],
        ];
        for _ in 0..400 {
            simplex.sort_by(|a, b| f(a).partial_cmp(&f(b)).unwrap());
            let centroid = {
                let mut c = [0.0; 3];
                for p in &simplex[..3] {
                    for i in 0..3 {
                        c[i] += p[i] / 3.0;
                    }
                }
                c
            };
            let worst = simplex[3];
            let refl = std::array::from_fn(|i| centroid[i] + (centroid[i] - worst[i]));
            let (fr, fb, fw) = (f(&refl), f(&simplex[0]), f(&worst));
            if fr < fb {
                let exp = std::array::from_fn(|i| centroid[i] + 2.0 * (centroid[i] - worst[i]));
                simplex[3] = if f(&exp) < fr { exp } else { refl };
            } else if fr < fw {
                simplex[3] = refl;
            } else {
                let con = std::array::from_fn(|i| centroid[i] - 0.5 * (centroid[i] - worst[i]));
                if f(&con) < fw {
                    simplex[3] = con;
                } else {
                    for k in 1..4 {
                        for i in 0..3 {
                            simplex[k][i] = simplex[0][i] + 0.5 * (simplex[k][i] - simplex[0][i]);
                        }
                    }
                }
            }
        }
        best.min(f(&simplex[0]))
    }

    #[test]
    fn non_normal_jacobian_matches_grid_oracle() {
        let j = DMatrix::from_row_slice(2, 2, &[-1.0, 5.0, 0.0, -2.0]);
        let opts = StabilityOptions::default();
        let r = stability_index(&j, &opts).unwrap();
        let oracle = eta_grid_oracle(&j, opts.eps_lmi);
        assert_abs_diff_eq!(r.eta, oracle, epsilon = 1e-3);
        // non-normality costs margin relative to the spectral bound
        assert!(r.eta > 2.0 * -1.0);
    }

    #[test]
    fn eta_lower_bounded_by_spectral_abscissa() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(2..=6);
            let raw = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let j = &raw - DMatrix::identity(n, n) * 2.5;
            let max_re = j
                .clone()
                .complex_eigenvalues()
                .iter()
                .map(|c| c.re)
                .fold(f64::NEG_INFINITY, f64::max);
            if max_re >= -0.05 {
                continue;
            }
            let r = eta_of(&j);
            assert!(
                r.eta >= 2.0 * max_re - 1e-6,
                "eta {} below spectral bound {}",
                r.eta,
                2.0 * max_re
            );
        }
    }

    #[test]
    fn eta_scales_linearly_with_jacobian() {
        let j = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 0.0, -3.0]);
        let r1 = eta_of(&j);
        let r2 = eta_of(&(2.0 * &j));
        assert_abs_diff_eq!(r2.eta, 2.0 * r1.eta, epsilon = 1e-5);
    }

    #[test]
    fn identity_shift_moves_eta_by_twice_the_shift_for_normal_jacobians() {
        // with Φ = I optimal (normal J), η(J − sI) = η(J) − 2s exactly
        let j = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 1.0, -3.0]);
        let r1 = eta_of(&j);
        let shifted = &j - DMatrix::identity(2, 2) * 0.7;
        let r2 = eta_of(&shifted);
        assert_abs_diff_eq!(r2.eta, r1.eta - 1.4, epsilon = 1e-5);
    }

    #[test]
    fn identity_shift_brackets_eta_for_non_normal_jacobians() {
        // εI ⪯ Φ ⪯ I squeezes the shifted index between η − 2s and η − 2sε
        let j = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, -0.5, -3.0]);
        let s = 0.7;
        let opts = StabilityOptions::default();
        let r1 = stability_index(&j, &opts).unwrap();
        let shifted = &j - DMatrix::identity(2, 2) * s;
        let r2 = stability_index(&shifted, &opts).unwrap();
        assert!(r2.eta >= r1.eta - 2.0 * s - 1e-7);
        assert!(r2.eta <= r1.eta - 2.0 * s * opts.eps_lmi + 1e-7);
    }

    #[test]
    fn gradient_matches_known_example() {
        // J = diag(-1, -3): Φ = I, dual concentrates on the slow mode,
        // so ∂η/∂J = 2 e1 e1ᵀ
        let j = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -3.0]));
        let r = eta_of(&j);
        let g = eta_jacobian_sensitivity(&r).unwrap();
        assert_abs_diff_eq!(g[(0, 0)], 2.0, epsilon = 1e-5);
        assert_abs_diff_eq!(g[(1, 1)], 0.0, epsilon = 1e-5);
        assert_abs_diff_eq!(g[(0, 1)], 0.0, epsilon = 1e-5);
        assert_abs_diff_eq!(g[(1, 0)], 0.0, epsilon = 1e-5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let j = DMatrix::from_row_slice(3, 3, &[-2.0, 0.6, 0.1, -0.3, -1.5, 0.4, 0.2, -0.1, -2.5]);
        let r = eta_of(&j);
        if r.eigenvalue_multiplicity > 1 {
            // nonsmooth point, gradient comparison not meaningful
            return;
        }
        let g = eta_jacobian_sensitivity(&r).unwrap();
        let h = 1e-5;
        for a in 0..3 {
            for b in 0..3 {
                let mut jp = j.clone();
                let mut jm = j.clone();
                jp[(a, b)] += h;
                jm[(a, b)] -= h;
                let fd = (eta_of(&jp).eta - eta_of(&jm).eta) / (2.0 * h);
                assert_abs_diff_eq!(g[(a, b)], fd, epsilon = 2e-4);
            }
        }
    }

    #[test]
    fn dual_of_lyapunov_inequality_is_unit_trace_psd() {
        let j = DMatrix::from_row_slice(2, 2, &[-1.0, 5.0, 0.0, -2.0]);
        let r = eta_of(&j);
        assert_abs_diff_eq!(r.dual_lyap.trace(), 1.0, epsilon = 1e-9);
        let eig = SymmetricEigen::new(r.dual_lyap.clone());
        assert!(eig.eigenvalues.min() >= -1e-8);
        assert!(r.comp_slack <= 1e-6);
    }

    #[test]
    fn phi_respects_its_bounds() {
        let j = DMatrix::from_row_slice(2, 2, &[-1.0, 5.0, 0.0, -2.0]);
        let opts = StabilityOptions::default();
        let r = stability_index(&j, &opts).unwrap();
        let eig = SymmetricEigen::new(r.phi.clone());
        assert!(eig.eigenvalues.min() >= opts.eps_lmi - 1e-7);
        assert!(eig.eigenvalues.max() <= 1.0 + 1e-7);
    }
}
