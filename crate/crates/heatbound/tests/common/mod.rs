#![allow(dead_code)] // each integration test target uses its own subset

//! Shared oracles for the integration tests. Everything here is an
//! independent computation path: dense null-space quadratic programming via
//! SVD for the patch problems, and composite Gauss quadrature for the
//! semi-discrete energy integrals.

use heatbound::equilibration::{PatchMixedSpace, PatchRhs};
use heatbound::quadrature::gauss_on_interval;
use heatbound::semidiscrete::{exact_mode_at_nodes, ModeEnergyReport, ModeProblem};
use nalgebra::{DMatrix, DVector};

/// Solve min ½vᵀMv + bᵀv s.t. Bv = g by the dense null-space method:
/// a minimal-norm particular solution from the SVD pseudoinverse plus a
/// reduced solve on the null-space basis.
pub fn null_space_qp_oracle(patch: &PatchMixedSpace, rhs: &PatchRhs) -> Vec<f64> {
    let m = patch.patch_mass_matrix();
    let b_mat = patch.constraint_matrix();
    let load = DVector::from_column_slice(&rhs.moment_against_flux_basis);
    let g = DVector::from_column_slice(&rhs.g);

    let n_v = m.nrows();
    let svd = b_mat.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().fold(0.0f64, |a, &s| a.max(s));
    let eps = 1e-12 * sigma_max.max(1.0);
    // minimal-norm least-squares particular solution (projects g onto the
    // range, which absorbs the zero-mean consistency correction)
    let v0 = svd.solve(&g, eps).expect("SVD solve");

    // null-space basis from the eigendecomposition of BᵀB (the thin SVD of a
    // wide B does not carry the trailing right-singular vectors). In 1D the
    // divergence constraint with pinned endpoint traces determines the flux
    // completely, so the null space may be empty; the minimal-norm feasible
    // point is then the whole answer.
    let btb = b_mat.transpose() * &b_mat;
    let eig = nalgebra::SymmetricEigen::new(btb);
    let lam_max = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l));
    // numerically-zero eigenvalues come out around eps·λmax; the smallest
    // genuine σ² of these patch constraints sits many orders above
    let null_cols: Vec<usize> = (0..n_v)
        .filter(|&i| eig.eigenvalues[i] <= 1e-10 * lam_max.max(1e-300))
        .collect();
    let null_dim = null_cols.len();
    if null_dim == 0 {
        return v0.as_slice().to_vec();
    }
    let mut z = DMatrix::zeros(n_v, null_dim);
    for (col, &src) in null_cols.iter().enumerate() {
        for i in 0..n_v {
            z[(i, col)] = eig.eigenvectors[(i, src)];
        }
    }

    // reduced problem: (ZᵀMZ) y = −Zᵀ(M v0 + b)
    let zt_m_z = z.transpose() * &m * &z;
    let rhs_red = -(z.transpose() * (&m * &v0 + &load));
    let y = zt_m_z.lu().solve(&rhs_red).expect("reduced solve");
    let v = v0 + z * y;
    v.as_slice().to_vec()
}

/// Composite 10-point Gauss quadrature of the mode energy integrals, with
/// enough subintervals to resolve the boundary layer at large λτ.
pub fn mode_energy_quadrature_oracle(
    problem: &ModeProblem,
    trajectory: &[f64],
) -> ModeEnergyReport {
    let lambda = problem.lambda;
    let exact_nodes = exact_mode_at_nodes(problem);
    let mut int_const = 0.0;
    let mut int_affine = 0.0;
    let mut int_mid = 0.0;
    let mut jump_sq = 0.0;
    for n in 1..=problem.grid.n_steps() {
        let tau = problem.grid.step(n);
        let c1 = problem.forcing[n - 1] / lambda;
        let c2 = exact_nodes[n - 1] - c1;
        let (d_prev, d_curr) = (trajectory[n - 1], trajectory[n]);
        let subs = 2000;
        for s in 0..subs {
            let (lo, hi) = (
                tau * s as f64 / subs as f64,
                tau * (s + 1) as f64 / subs as f64,
            );
            for (t, w) in gauss_on_interval(lo, hi, 10) {
                let u = c1 + c2 * (-lambda * t).exp();
                let affine = d_prev + (d_curr - d_prev) * t / tau;
                int_const += w * (u - d_curr).powi(2);
                int_affine += w * (u - affine).powi(2);
                int_mid += w * (u - 0.5 * (d_curr + affine)).powi(2);
                jump_sq += w * lambda * (d_curr - affine).powi(2);
            }
        }
    }
    let final_gap = exact_nodes[problem.grid.n_steps()] - trajectory[problem.grid.n_steps()];
    let final_term = 0.5 * final_gap * final_gap;
    ModeEnergyReport {
        err_const_e: (final_term + lambda * int_const).sqrt(),
        err_affine_e: (final_term + lambda * int_affine).sqrt(),
        err_mid_e: (final_term + lambda * int_mid).sqrt(),
        jump_e: jump_sq.sqrt(),
    }
}
