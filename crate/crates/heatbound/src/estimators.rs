//! Error estimators, oscillation surrogates, exact errors, and the
//! estimator report.
//!
//! The total estimator combines the temporal jump term
//! ¼∫‖∇(u_{h,τ} − U_{h,τ})‖² with the flux misfit ∫‖σ_{h,τ} + ∇ū_{h,τ}‖²,
//! both integrated exactly in time (the integrands are polynomials of degree
//! ≤ 2 in t). The energy error of a reconstruction ũ is
//! ½‖u(T) − ũ(T)‖² + ∫‖∇(u − ũ)‖², evaluated with Gauss quadrature in time
//! and a high-order rule in space.
//!
//! The data-oscillation upper surrogate replaces the non-computable dual
//! norms by Friedrichs-type bounds: each local pairing against an H¹₀
//! function is bounded through ‖v‖_{L²(ω)} ≤ (h_ω/π)‖∇v‖_{L²(ω)}, giving
//!
//!   osc_upper = sqrt(Σ_n Σ_K (h_K/π)² ∫_{I_n}‖f − f_{h,τ}‖²_K dt)
//!             + ‖u_0 − u_{h,τ,0}‖_Ω,
//!
//! which only loosens the guaranteed upper bound.

use serde::Serialize;

use crate::equilibration::EquilibratedFlux;
use crate::fem::{assemble_load_broken, broken_value, dot};
use crate::mesh::vertex_patches;
use crate::par::{map_indexed, sum_indexed};
use crate::problem::{ExactSolution, ProblemSpec};
use crate::quadrature::{gauss_on_interval, QuadratureRule};
use crate::timestep::{ReconstructionKind, SpaceTimeSolution, ANALYTIC_QUAD_DEGREE};
use crate::{Error, Result};

/// Which gradient the flux misfit is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FluxVariant {
    /// σ + ∇ū_{h,τ} (the estimator the guaranteed bound is stated for).
    Midpoint,
    /// σ + ∇u_{h,τ}.
    Constant,
    /// σ + ∇U_{h,τ}.
    Affine,
}

/// Squared estimator and oscillation contributions of one time interval.
#[derive(Debug, Clone, Serialize)]
pub struct IntervalTerms {
    pub n: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub jump_sq: f64,
    pub flux_sq: f64,
    pub osc_sq: f64,
}

/// Full per-run estimator/error decomposition.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorReport {
    pub level: usize,
    pub h_max: f64,
    pub tau_max: f64,
    /// max over vertices and intervals of h_{ω_a}²/τ_n
    pub gamma_realized: f64,
    pub per_interval: Vec<IntervalTerms>,
    /// sqrt(Σ_n jump_sq)
    pub est_jump: f64,
    /// sqrt(Σ_n flux_sq)
    pub est_flux: f64,
    /// sqrt(Σ_n jump_sq + flux_sq)
    pub total_estimator: f64,
    /// Friedrichs surrogate with the initial-datum term included
    pub osc_upper: f64,
    pub osc_u0: f64,
    /// ‖u − ū_{h,τ}‖_E (midpoint reconstruction), when the exact solution is known
    pub err_energy: Option<f64>,
    pub err_x_const: Option<f64>,
    pub err_x_affine: Option<f64>,
    pub err_x_mid: Option<f64>,
    /// E_{h,τ} = ‖u − u_{h,τ}‖_E + ‖u − U_{h,τ}‖_E
    pub quantifier_e: Option<f64>,
    /// total_estimator / err_energy, absent under the division guard
    pub effectivity: Option<f64>,
}

/// Per-interval squared jump estimator ¼∫_{I_n}‖∇(u_{h,τ} − U_{h,τ})‖² dt.
///
/// Evaluated both in closed form ¼(τ_n/3)‖∇(u_n − u_{n−1})‖² and by 2-point
/// Gauss time quadrature; disagreement beyond 1e-12 relative is an integrity
/// failure. Returns the closed-form values.
pub fn jump_estimator(sol: &SpaceTimeSolution) -> Result<Vec<f64>> {
    let stiffness = sol.stiffness();
    let grid = sol.grid();
    let values = map_indexed(grid.n_steps(), |idx| {
        let n = idx + 1;
        let tau = grid.step(n);
        let delta: Vec<f64> = sol
            .coefficients(n)
            .iter()
            .zip(sol.coefficients(n - 1))
            .map(|(c, p)| c - p)
            .collect();
        let grad_sq = dot(&delta, &stiffness.matvec(&delta));
        let closed = 0.25 * tau / 3.0 * grad_sq;
        // time quadrature of the same quadratic integrand
        let mut quad = 0.0;
        for (t, w) in gauss_on_interval(grid.node(n - 1), grid.node(n), 2) {
            let factor = (grid.node(n) - t) / tau;
            quad += w * 0.25 * factor * factor * grad_sq;
        }
        (closed, quad)
    });
    let mut out = Vec::with_capacity(values.len());
    for (n, (closed, quad)) in values.into_iter().enumerate() {
        if (closed - quad).abs() > 1e-12 * closed.abs().max(quad.abs()).max(1e-300) {
            return Err(Error::integrity(format!(
                "jump estimator closed form and quadrature disagree on interval {}: {closed:.16e} vs {quad:.16e}",
                n + 1
            )));
        }
        out.push(closed);
    }
    Ok(out)
}

/// Per-interval squared flux estimator ∫_{I_n}‖σ + ∇(variant)‖² dt.
///
/// σ is constant and the reconstruction gradient affine in time on each
/// interval, so 2-point Gauss in time is exact; the spatial rule of the flux
/// space is exact for the integrand's degree.
pub fn flux_estimator(
    sol: &SpaceTimeSolution,
    flux: &EquilibratedFlux,
    variant: FluxVariant,
) -> Vec<f64> {
    let fe = sol.space();
    let mesh = fe.mesh();
    let grid = sol.grid();
    let rule = flux.flux_space().rule();
    map_indexed(grid.n_steps(), |idx| {
        let n = idx + 1;
        let (t0, t1) = (grid.node(n - 1), grid.node(n));
        let tau = t1 - t0;
        let mut total = 0.0;
        for (t, wt) in gauss_on_interval(t0, t1, 2) {
            let theta = (t - t0) / tau;
            for cell in 0..mesh.n_cells() {
                let g_curr = fe.gradient_on_cell(sol.coefficients(n), cell);
                let g_prev = fe.gradient_on_cell(sol.coefficients(n - 1), cell);
                let g_affine = [
                    theta * g_curr[0] + (1.0 - theta) * g_prev[0],
                    theta * g_curr[1] + (1.0 - theta) * g_prev[1],
                ];
                let g = match variant {
                    FluxVariant::Constant => g_curr,
                    FluxVariant::Affine => g_affine,
                    FluxVariant::Midpoint => [
                        0.5 * (g_curr[0] + g_affine[0]),
                        0.5 * (g_curr[1] + g_affine[1]),
                    ],
                };
                let meas_scale =
                    mesh.cell_measure(cell) / crate::fem::reference_measure(mesh.dim());
                let sigma = flux.values_at_rule_points(n, cell);
                for (q, &wq) in rule.weights.iter().enumerate() {
                    let rx = sigma[q][0] + g[0];
                    let ry = sigma[q][1] + g[1];
                    total += wt * wq * meas_scale * (rx * rx + ry * ry);
                }
            }
        }
        total
    })
}

/// Data-oscillation surrogates of one run.
#[derive(Debug, Clone)]
pub struct OscillationSurrogate {
    /// Σ_K (h_K/π)² ∫_{I_n} ‖f − f_{h,τ}‖²_K dt per interval
    pub per_interval_sq: Vec<f64>,
    /// (h_{ω_a}/π)·‖f − f_{h,τ}‖_{L²(ω_a × I_n)} per interval and vertex
    pub patch_terms: Vec<Vec<f64>>,
    /// ‖u_0 − u_{h,τ,0}‖_Ω
    pub u0_term: f64,
    /// sqrt(Σ per_interval_sq) + u0_term
    pub upper: f64,
    /// sqrt(∫₀ᵀ‖f‖²) + ‖u_0‖, the homogeneity scale of the data
    pub data_scale: f64,
}

/// Friedrichs-surrogate oscillation bounds (see module docs).
pub fn oscillation_surrogate(sol: &SpaceTimeSolution, problem: &ProblemSpec) -> OscillationSurrogate {
    let fe = sol.space();
    let mesh = fe.mesh();
    let grid = sol.grid();
    let dim = mesh.dim();
    let rule = QuadratureRule::simplex(dim, ANALYTIC_QUAD_DEGREE);
    let n_steps = grid.n_steps();

    // per interval, per cell: ∫_{I_n} ‖f − f_{h,τ,n}‖²_K dt and ∫‖f‖²_K
    let per_cell: Vec<(Vec<f64>, f64)> = map_indexed(n_steps, |idx| {
        let n = idx + 1;
        let f_n = sol.data_snapshot(n);
        let mut cells = vec![0.0; mesh.n_cells()];
        let mut f_sq = 0.0;
        for (t, wt) in gauss_on_interval(grid.node(n - 1), grid.node(n), 5) {
            for cell in 0..mesh.n_cells() {
                let meas_scale = mesh.cell_measure(cell) / crate::fem::reference_measure(dim);
                for (q, point) in rule.points.iter().enumerate() {
                    let x = mesh.point_from_barycentric(cell, point);
                    let fv = (problem.f)(x, t);
                    let fh = broken_value(f_n, dim, cell, point);
                    let w = wt * rule.weights[q] * meas_scale;
                    cells[cell] += w * (fv - fh) * (fv - fh);
                    f_sq += w * fv * fv;
                }
            }
        }
        (cells, f_sq)
    });

    let patches = vertex_patches(mesh);
    let mut per_interval_sq = Vec::with_capacity(n_steps);
    let mut patch_terms = Vec::with_capacity(n_steps);
    let mut f_norm_sq = 0.0;
    for (cells, f_sq) in &per_cell {
        let mut interval_sq = 0.0;
        for (cell, osc) in cells.iter().enumerate() {
            let h = mesh.cell_diameter(cell);
            interval_sq += (h / std::f64::consts::PI).powi(2) * osc;
        }
        per_interval_sq.push(interval_sq);
        patch_terms.push(
            patches
                .iter()
                .map(|p| {
                    let local: f64 = p.cells.iter().map(|&k| cells[k]).sum();
                    p.diameter / std::f64::consts::PI * local.sqrt()
                })
                .collect(),
        );
        f_norm_sq += f_sq;
    }

    // ‖u_0 − Π_h u_0‖ and ‖u_0‖
    let u0_coeffs = sol.coefficients(0);
    let (u0_gap_sq, u0_sq) = {
        let mut gap = 0.0;
        let mut norm = 0.0;
        for cell in 0..mesh.n_cells() {
            let meas_scale = mesh.cell_measure(cell) / crate::fem::reference_measure(dim);
            for (q, point) in rule.points.iter().enumerate() {
                let x = mesh.point_from_barycentric(cell, point);
                let exact = (problem.u0)(x);
                let discrete = fe.value_at(u0_coeffs, cell, point);
                let w = rule.weights[q] * meas_scale;
                gap += w * (exact - discrete) * (exact - discrete);
                norm += w * exact * exact;
            }
        }
        (gap, norm)
    };
    let u0_term = u0_gap_sq.sqrt();
    let upper = per_interval_sq.iter().sum::<f64>().sqrt() + u0_term;
    OscillationSurrogate {
        per_interval_sq,
        patch_terms,
        u0_term,
        upper,
        data_scale: f_norm_sq.sqrt() + u0_sq.sqrt(),
    }
}

/// Squared X-norm errors ∫₀ᵀ‖∇(u − ũ)‖² for the three reconstructions, plus
/// the squared final-time term ½‖u(T) − u_N‖² shared by all of them.
fn error_components(sol: &SpaceTimeSolution, exact: &ExactSolution) -> ([f64; 3], f64) {
    let fe = sol.space();
    let mesh = fe.mesh();
    let grid = sol.grid();
    let dim = mesh.dim();
    let rule = QuadratureRule::simplex(dim, ANALYTIC_QUAD_DEGREE);

    let per_interval: Vec<[f64; 3]> = map_indexed(grid.n_steps(), |idx| {
        let n = idx + 1;
        let (t0, t1) = (grid.node(n - 1), grid.node(n));
        let tau = t1 - t0;
        let mut acc = [0.0; 3];
        for (t, wt) in gauss_on_interval(t0, t1, 5) {
            let theta = (t - t0) / tau;
            for cell in 0..mesh.n_cells() {
                let g_curr = fe.gradient_on_cell(sol.coefficients(n), cell);
                let g_prev = fe.gradient_on_cell(sol.coefficients(n - 1), cell);
                let g_affine = [
                    theta * g_curr[0] + (1.0 - theta) * g_prev[0],
                    theta * g_curr[1] + (1.0 - theta) * g_prev[1],
                ];
                let g_mid = [
                    0.5 * (g_curr[0] + g_affine[0]),
                    0.5 * (g_curr[1] + g_affine[1]),
                ];
                let meas_scale = mesh.cell_measure(cell) / crate::fem::reference_measure(dim);
                for (q, point) in rule.points.iter().enumerate() {
                    let x = mesh.point_from_barycentric(cell, point);
                    let ge = (exact.grad_u)(x, t);
                    let w = wt * rule.weights[q] * meas_scale;
                    let d = |g: [f64; 2]| {
                        (ge[0] - g[0]) * (ge[0] - g[0]) + (ge[1] - g[1]) * (ge[1] - g[1])
                    };
                    acc[0] += w * d(g_curr);
                    acc[1] += w * d(g_affine);
                    acc[2] += w * d(g_mid);
                }
            }
        }
        acc
    });
    let mut x_sq = [0.0; 3];
    for acc in &per_interval {
        for i in 0..3 {
            x_sq[i] += acc[i];
        }
    }

    let t_final = grid.t_final();
    let u_n = sol.coefficients(grid.n_steps());
    let final_sq = 0.5
        * sum_indexed(mesh.n_cells(), |cell| {
            let meas_scale = mesh.cell_measure(cell) / crate::fem::reference_measure(dim);
            let mut acc = 0.0;
            for (q, point) in rule.points.iter().enumerate() {
                let x = mesh.point_from_barycentric(cell, point);
                let gap = (exact.u)(x, t_final) - fe.value_at(u_n, cell, point);
                acc += rule.weights[q] * meas_scale * gap * gap;
            }
            acc
        });
    (x_sq, final_sq)
}

fn kind_index(kind: ReconstructionKind) -> usize {
    match kind {
        ReconstructionKind::PiecewiseConstant => 0,
        ReconstructionKind::PiecewiseAffine => 1,
        ReconstructionKind::Midpoint => 2,
    }
}

/// Energy error ‖u − ũ‖_E of the chosen reconstruction.
pub fn energy_error(
    sol: &SpaceTimeSolution,
    kind: ReconstructionKind,
    exact: &ExactSolution,
) -> f64 {
    let (x_sq, final_sq) = error_components(sol, exact);
    (x_sq[kind_index(kind)] + final_sq).sqrt()
}

/// X-norm error ∫₀ᵀ‖∇(u − ũ)‖² (square root) of the chosen reconstruction.
pub fn x_norm_error(
    sol: &SpaceTimeSolution,
    kind: ReconstructionKind,
    exact: &ExactSolution,
) -> f64 {
    let (x_sq, _) = error_components(sol, exact);
    x_sq[kind_index(kind)].sqrt()
}

/// Assemble the full estimator report for one run.
pub fn compute_report(
    sol: &SpaceTimeSolution,
    flux: &EquilibratedFlux,
    problem: &ProblemSpec,
    level: usize,
) -> Result<EstimatorReport> {
    let grid = sol.grid();
    let jump_sq = jump_estimator(sol)?;
    let flux_sq = flux_estimator(sol, flux, FluxVariant::Midpoint);
    let osc = oscillation_surrogate(sol, problem);

    let per_interval: Vec<IntervalTerms> = (0..grid.n_steps())
        .map(|idx| IntervalTerms {
            n: idx + 1,
            t_start: grid.node(idx),
            t_end: grid.node(idx + 1),
            jump_sq: jump_sq[idx],
            flux_sq: flux_sq[idx],
            osc_sq: osc.per_interval_sq[idx],
        })
        .collect();

    let jump_total: f64 = jump_sq.iter().sum();
    let flux_total: f64 = flux_sq.iter().sum();
    let total_estimator = (jump_total + flux_total).sqrt();

    let mesh = sol.space().mesh();
    let max_patch_diameter = vertex_patches(mesh)
        .iter()
        .map(|p| p.diameter)
        .fold(0.0, f64::max);
    let gamma_realized = max_patch_diameter * max_patch_diameter / grid.min_step();

    let mut report = EstimatorReport {
        level,
        h_max: mesh.h_max(),
        tau_max: grid.max_step(),
        gamma_realized,
        per_interval,
        est_jump: jump_total.sqrt(),
        est_flux: flux_total.sqrt(),
        total_estimator,
        osc_upper: osc.upper,
        osc_u0: osc.u0_term,
        err_energy: None,
        err_x_const: None,
        err_x_affine: None,
        err_x_mid: None,
        quantifier_e: None,
        effectivity: None,
    };

    if let Some(exact) = &problem.exact {
        let (x_sq, final_sq) = error_components(sol, exact);
        let err_const = (x_sq[0] + final_sq).sqrt();
        let err_affine = (x_sq[1] + final_sq).sqrt();
        let err_mid = (x_sq[2] + final_sq).sqrt();
        let quantifier = err_const + err_affine;
        // midpoint triangle inequality ‖u − ū‖_E ≤ ½ E_{h,τ}
        if err_mid > 0.5 * quantifier + 1e-12 * quantifier.max(1.0) {
            return Err(Error::integrity(format!(
                "midpoint energy error {err_mid:.6e} exceeds half the quantifier {quantifier:.6e}"
            )));
        }
        report.err_x_const = Some(x_sq[0].sqrt());
        report.err_x_affine = Some(x_sq[1].sqrt());
        report.err_x_mid = Some(x_sq[2].sqrt());
        report.err_energy = Some(err_mid);
        report.quantifier_e = Some(quantifier);
        report.effectivity = if err_mid >= 1e-12 * osc.data_scale.max(1e-300) {
            Some(total_estimator / err_mid)
        } else {
            None
        };
    }
    Ok(report)
}

/// Outcome of the guaranteed-upper-bound check.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundCheck {
    pub pass: bool,
    /// (estimator + oscillation + slack) − error; nonnegative iff pass
    pub margin: f64,
    pub err_energy: f64,
    pub rhs: f64,
}

pub const UPPER_BOUND_SLACK: f64 = 1e-9;

/// Check err_energy ≤ total_estimator + osc_upper + slack.
pub fn verify_upper_bound(report: &EstimatorReport) -> Result<BoundCheck> {
    let err = report.err_energy.ok_or_else(|| {
        Error::invalid("upper-bound check needs a run with a known exact solution")
    })?;
    let rhs = report.total_estimator + report.osc_upper + UPPER_BOUND_SLACK;
    Ok(BoundCheck {
        pass: err <= rhs,
        margin: rhs - err,
        err_energy: err,
        rhs,
    })
}

/// Both sides of the discrete residual identity, evaluated for one test
/// field φ_h (piecewise affine in time, values in V_h).
#[derive(Debug, Clone, Copy)]
pub struct ResidualIdentityGap {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    /// Sum of the magnitudes of the individually computed terms.
    pub scale: f64,
}

/// Evaluate the identity relating the reconstruction difference to the
/// residual of the midpoint reconstruction:
///
///   ½∫[(∂_tφ_h, u_{h,τ}−U_{h,τ}) + (∇φ_h, ∇(u_{h,τ}−U_{h,τ}))] dt
///     = B_Z(u−ū, φ_h) − ∫⟨f−f_{h,τ}, φ_h⟩ dt − (u_0−u_{h,τ,0}, φ_h(0))
///
/// with B_Z(v, φ) = (v(T), φ(T)) + ∫[−(∂_tφ, v) + (∇φ, ∇v)] dt.
pub fn verify_residual_identity(
    sol: &SpaceTimeSolution,
    problem: &ProblemSpec,
    phi: &[Vec<f64>],
) -> Result<ResidualIdentityGap> {
    let exact = problem
        .exact
        .as_ref()
        .ok_or_else(|| Error::invalid("residual identity needs the exact solution"))?;
    let fe = sol.space();
    let mesh = fe.mesh();
    let grid = sol.grid();
    let dim = mesh.dim();
    if phi.len() != grid.n_steps() + 1 || phi.iter().any(|v| v.len() != fe.n_dofs()) {
        return Err(Error::invalid("φ needs N+1 coefficient vectors in V_h"));
    }
    let rule = QuadratureRule::simplex(dim, ANALYTIC_QUAD_DEGREE);
    let mass = sol.mass();
    let stiffness = sol.stiffness();

    // ∫ g·v_h over Ω for a fixed-time analytic g
    let dot_analytic = |coeffs: &[f64], g: &(dyn Fn([f64; 2]) -> f64 + Sync)| -> f64 {
        sum_indexed(mesh.n_cells(), |cell| {
            let meas_scale = mesh.cell_measure(cell) / crate::fem::reference_measure(dim);
            let mut acc = 0.0;
            for (q, point) in rule.points.iter().enumerate() {
                let x = mesh.point_from_barycentric(cell, point);
                acc += rule.weights[q] * meas_scale * g(x) * fe.value_at(coeffs, cell, point);
            }
            acc
        })
    };
    // ∫ ∇g·∇v_h over Ω for a fixed-time analytic gradient
    let dot_grad_analytic = |coeffs: &[f64], g: &(dyn Fn([f64; 2]) -> [f64; 2] + Sync)| -> f64 {
        sum_indexed(mesh.n_cells(), |cell| {
            let meas_scale = mesh.cell_measure(cell) / crate::fem::reference_measure(dim);
            let gv = fe.gradient_on_cell(coeffs, cell);
            let mut acc = 0.0;
            for (q, point) in rule.points.iter().enumerate() {
                let x = mesh.point_from_barycentric(cell, point);
                let ge = g(x);
                acc += rule.weights[q] * meas_scale * (ge[0] * gv[0] + ge[1] * gv[1]);
            }
            acc
        })
    };

    let combine = |a: &[f64], wa: f64, b: &[f64], wb: f64| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
    };

    let mut lhs = 0.0;
    let mut rhs_time = 0.0; // ∫[−(∂_tφ, u−ū) + (∇φ, ∇(u−ū))] − ∫(f − f_h, φ)
    let mut scale = 0.0;
    for n in 1..=grid.n_steps() {
        let (t0, t1) = (grid.node(n - 1), grid.node(n));
        let tau = t1 - t0;
        let dphi: Vec<f64> = phi[n]
            .iter()
            .zip(&phi[n - 1])
            .map(|(c, p)| (c - p) / tau)
            .collect();
        let delta: Vec<f64> = sol
            .coefficients(n)
            .iter()
            .zip(sol.coefficients(n - 1))
            .map(|(c, p)| c - p)
            .collect();
        let m_delta = mass.matvec(&delta);
        let a_delta = stiffness.matvec(&delta);
        let load = assemble_load_broken(fe, sol.data_snapshot(n));

        for (t, w) in gauss_on_interval(t0, t1, 8) {
            let theta = (t - t0) / tau;
            let jump_factor = 1.0 - theta; // (t_n − t)/τ
            let phi_t = combine(&phi[n], theta, &phi[n - 1], 1.0 - theta);
            // u_c − U = jump_factor · δ
            let lhs_term = 0.5 * w * jump_factor * (dot(&dphi, &m_delta) + dot(&phi_t, &a_delta));
            lhs += lhs_term;

            // ū coefficients at t
            let mid = combine(
                sol.coefficients(n),
                0.5 * (1.0 + theta),
                sol.coefficients(n - 1),
                0.5 * (1.0 - theta),
            );
            let u_fn = |x: [f64; 2]| (exact.u)(x, t);
            let grad_fn = |x: [f64; 2]| (exact.grad_u)(x, t);
            let f_fn = |x: [f64; 2]| (problem.f)(x, t);
            let t1_term = -w * (dot_analytic(&dphi, &u_fn) - dot(&dphi, &mass.matvec(&mid)));
            let t2_term =
                w * (dot_grad_analytic(&phi_t, &grad_fn) - dot(&phi_t, &stiffness.matvec(&mid)));
            let t3_term = -w * (dot_analytic(&phi_t, &f_fn) - dot(&phi_t, &load));
            rhs_time += t1_term + t2_term + t3_term;
            scale += lhs_term.abs() + t1_term.abs() + t2_term.abs() + t3_term.abs();
        }
    }

    // (u(T) − ū(T), φ(T)) with ū(T) = u_N
    let t_final = grid.t_final();
    let u_final_fn = |x: [f64; 2]| (exact.u)(x, t_final);
    let phi_final = &phi[grid.n_steps()];
    let final_term = dot_analytic(phi_final, &u_final_fn)
        - dot(phi_final, &mass.matvec(sol.coefficients(grid.n_steps())));

    // −(u_0 − u_{h,τ,0}, φ(0))
    let u0_fn = |x: [f64; 2]| (problem.u0)(x);
    let initial_term =
        -(dot_analytic(&phi[0], &u0_fn) - dot(&phi[0], &mass.matvec(sol.coefficients(0))));

    let rhs = final_term + rhs_time + initial_term;
    scale += final_term.abs() + initial_term.abs();
    Ok(ResidualIdentityGap {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
        scale: scale.max(1e-300),
    })
}

/// One line of a refinement study.
#[derive(Debug, Clone, Serialize)]
pub struct StudyRow {
    pub level: usize,
    pub h_max: f64,
    pub tau_max: f64,
    pub gamma_realized: f64,
    pub err_energy: Option<f64>,
    pub est_total: f64,
    pub osc_upper: f64,
    pub effectivity: Option<f64>,
    pub eoc_err: Option<f64>,
    pub eoc_est: Option<f64>,
}

/// Tabulate a sequence of reports over nested refinements, with EOCs between
/// consecutive levels.
pub fn effectivity_study(reports: &[EstimatorReport]) -> Vec<StudyRow> {
    reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let eoc = |prev: f64, curr: f64| -> Option<f64> {
                let h_prev = reports[i - 1].h_max;
                if prev > 0.0 && curr > 0.0 && h_prev > r.h_max {
                    Some((prev / curr).ln() / (h_prev / r.h_max).ln())
                } else {
                    None
                }
            };
            let (eoc_err, eoc_est) = if i == 0 {
                (None, None)
            } else {
                (
                    match (reports[i - 1].err_energy, r.err_energy) {
                        (Some(p), Some(c)) => eoc(p, c),
                        _ => None,
                    },
                    eoc(reports[i - 1].total_estimator, r.total_estimator),
                )
            };
            StudyRow {
                level: r.level,
                h_max: r.h_max,
                tau_max: r.tau_max,
                gamma_realized: r.gamma_realized,
                err_energy: r.err_energy,
                est_total: r.total_estimator,
                osc_upper: r.osc_upper,
                effectivity: r.effectivity,
                eoc_err,
                eoc_est,
            }
        })
        .collect()
}
