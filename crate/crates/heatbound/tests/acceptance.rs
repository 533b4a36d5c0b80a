//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `--nocapture` to see them all).
//!
//! Criterion 5 asserts the effectivity budget exactly as specified; see the
//! test body for the measured values it checks against.

mod common;

use std::sync::Arc;
use std::time::Instant;

use heatbound::equilibration::{
    assemble_patch_rhs, build_global_flux, build_patch_space, verify_equilibration,
    verify_normal_continuity, FluxSpace,
};
use heatbound::estimators::{
    compute_report, effectivity_study, verify_residual_identity, verify_upper_bound,
    EstimatorReport,
};
use heatbound::fem::FeSpace;
use heatbound::harness::{
    hypercircle_instance, run_study, MeshFamily, ProblemChoice, StudyConfig, StudyKind, TimeRule,
};
use heatbound::mesh::{build_interval_mesh, build_unit_square_mesh, vertex_patches};
use heatbound::problem::find;
use heatbound::semidiscrete::{counterexample_sweep, mode_energy_report, solve_mode, ModeProblem};
use heatbound::timestep::{run_implicit_euler, SolverOptions, SpaceTimeSolution, TimeGrid};

fn tight_solver() -> SolverOptions {
    SolverOptions {
        tol: 1e-14,
        max_iters: None,
    }
}

fn solve_catalog(name: &str, n: usize, steps: usize) -> SpaceTimeSolution {
    let problem = find(name).unwrap();
    let mesh = if problem.dim == 1 {
        build_interval_mesh(n, (0.0, 1.0)).unwrap()
    } else {
        build_unit_square_mesh(n).unwrap()
    };
    let space = Arc::new(FeSpace::p1(Arc::new(mesh)));
    let grid = TimeGrid::uniform(1.0, steps).unwrap();
    run_implicit_euler(space, grid, &problem, tight_solver()).unwrap()
}

/// Reports for a τ = h refinement sweep of a catalog problem.
fn tau_eq_h_sweep(
    name: &str,
    family: MeshFamily,
    resolution: usize,
    refinements: usize,
) -> Vec<EstimatorReport> {
    let problem = find(name).unwrap();
    let mut reports = Vec::new();
    for level in 0..=refinements {
        let n = resolution << level;
        let mesh = match family {
            MeshFamily::Interval => build_interval_mesh(n, (0.0, 1.0)).unwrap(),
            MeshFamily::UnitSquare => build_unit_square_mesh(n).unwrap(),
        };
        let steps = (1.0 / mesh.h_max()).ceil() as usize;
        let space = Arc::new(FeSpace::p1(Arc::new(mesh)));
        let grid = TimeGrid::uniform(1.0, steps.max(1)).unwrap();
        let sol = run_implicit_euler(space, grid, &problem, tight_solver()).unwrap();
        let flux = build_global_flux(&sol, 2).unwrap();
        reports.push(compute_report(&sol, &flux, &problem, level).unwrap());
    }
    reports
}

/// Criterion 1: Pythagoras and hypercircle-radius identities over 200
/// generated semi-discrete instances, relative error ≤ 1e-11, under 5 s.
#[test]
fn c1_hypercircle_suite() {
    let start = Instant::now();
    let mut worst_pythagoras: f64 = 0.0;
    let mut worst_radius: f64 = 0.0;
    for i in 0..200 {
        let problem = hypercircle_instance(20240801, i, 16);
        let traj = solve_mode(&problem);
        let report = mode_energy_report(&problem, &traj).unwrap();
        let jump_sq = report.jump_e * report.jump_e;
        let pythagoras = (report.err_const_e.powi(2) + report.err_affine_e.powi(2) - jump_sq).abs()
            / jump_sq.max(1e-300);
        let radius =
            (report.err_mid_e - 0.5 * report.jump_e).abs() / (0.5 * report.jump_e).max(1e-300);
        worst_pythagoras = worst_pythagoras.max(pythagoras);
        worst_radius = worst_radius.max(radius);
    }
    // independent quadrature oracle on a subsample
    for i in [0usize, 57, 123, 199] {
        let problem = hypercircle_instance(20240801, i, 16);
        let traj = solve_mode(&problem);
        let closed = mode_energy_report(&problem, &traj).unwrap();
        let oracle = common::mode_energy_quadrature_oracle(&problem, &traj);
        assert!(
            (closed.err_const_e - oracle.err_const_e).abs() <= 1e-8 * oracle.err_const_e.max(1e-12),
            "instance {i}: closed form disagrees with quadrature oracle"
        );
    }
    let elapsed = start.elapsed();
    let pass = worst_pythagoras <= 1e-11 && worst_radius <= 1e-11 && elapsed.as_secs_f64() < 5.0;
    println!(
        "ACCEPTANCE 1 {}: hypercircle suite, 200 instances, worst Pythagoras {:.3e}, worst radius {:.3e}, {:.2}s",
        if pass { "PASS" } else { "FAIL" },
        worst_pythagoras,
        worst_radius,
        elapsed.as_secs_f64()
    );
    assert!(
        worst_pythagoras <= 1e-11,
        "Pythagoras defect {worst_pythagoras:.3e}"
    );
    assert!(worst_radius <= 1e-11, "radius defect {worst_radius:.3e}");
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
}

/// Criterion 2: Appendix counterexample ratios grow by ≥ 10× toward the
/// stated limits and are monotone over the decade chains, under 1 s.
#[test]
fn c2_appendix_counterexample() {
    let start = Instant::now();
    let lambdas = [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];
    let rows = counterexample_sweep(&lambdas).unwrap();
    let at = |lambda: f64| rows.iter().find(|r| r.lambda == lambda).unwrap();

    // frozen oracle values at λ = 1 (30-digit quadrature of the closed forms)
    let r1 = at(1.0);
    assert!((r1.jump_e - 0.288675134594812882).abs() < 1e-12);
    assert!((r1.err_const_e - 0.242775041109503596).abs() < 1e-12);
    assert!((r1.err_affine_e - 0.156184547083289173).abs() < 1e-12);
    assert!((r1.ratio_const - 1.189064301155266).abs() < 1e-10);
    assert!((r1.ratio_affine - 1.848295109764412).abs() < 1e-10);

    // runtime comparison against the composite-quadrature oracle
    for &lambda in &lambdas {
        let problem = ModeProblem::unit_step(lambda);
        let traj = solve_mode(&problem);
        let oracle = common::mode_energy_quadrature_oracle(&problem, &traj);
        let row = at(lambda);
        assert!(
            (row.err_affine_e - oracle.err_affine_e).abs() <= 1e-8 * oracle.err_affine_e,
            "λ={lambda}: affine error disagrees with oracle"
        );
        assert!(
            (row.err_const_e - oracle.err_const_e).abs() <= 1e-8 * oracle.err_const_e,
            "λ={lambda}: constant error disagrees with oracle"
        );
    }

    let affine_factor = at(1e-3).ratio_affine / at(1.0).ratio_affine;
    let const_factor = at(1e3).ratio_const / at(1.0).ratio_const;
    let affine_monotone = at(1.0).ratio_affine < at(1e-1).ratio_affine
        && at(1e-1).ratio_affine < at(1e-2).ratio_affine
        && at(1e-2).ratio_affine < at(1e-3).ratio_affine;
    let const_monotone = at(1.0).ratio_const < at(1e1).ratio_const
        && at(1e1).ratio_const < at(1e2).ratio_const
        && at(1e2).ratio_const < at(1e3).ratio_const;

    let elapsed = start.elapsed();
    let pass = affine_factor >= 10.0
        && const_factor >= 10.0
        && affine_monotone
        && const_monotone
        && elapsed.as_secs_f64() < 1.0;
    println!(
        "ACCEPTANCE 2 {}: counterexample ratios grow ×{:.1} (affine, λ→0) and ×{:.1} (const, λ→∞), monotone, {:.3}s",
        if pass { "PASS" } else { "FAIL" },
        affine_factor,
        const_factor,
        elapsed.as_secs_f64()
    );
    assert!(
        affine_factor >= 10.0,
        "affine growth factor {affine_factor}"
    );
    assert!(const_factor >= 10.0, "const growth factor {const_factor}");
    assert!(affine_monotone && const_monotone);
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
}

/// Criterion 3: equilibration identity, H(div) continuity, and interior
/// compatibility on sin2d_decay at n ∈ {2,4,8}, N = n, under 60 s.
#[test]
fn c3_equilibration_identity() {
    let start = Instant::now();
    let mut worst_residual: f64 = 0.0;
    let mut worst_jump: f64 = 0.0;
    let mut worst_compat: f64 = 0.0;
    for n in [2usize, 4, 8] {
        let sol = solve_catalog("sin2d_decay", n, n);
        let flux = build_global_flux(&sol, 2).unwrap();
        let check = verify_equilibration(&sol, &flux).unwrap();
        worst_residual = worst_residual.max(check.max_residual_rel);
        worst_jump = worst_jump.max(verify_normal_continuity(&flux));
        worst_compat = worst_compat.max(flux.max_compatibility_rel);
    }
    let elapsed = start.elapsed();
    let pass = worst_residual <= 1e-10
        && worst_jump <= 1e-11
        && worst_compat <= 1e-12
        && elapsed.as_secs_f64() < 60.0;
    println!(
        "ACCEPTANCE 3 {}: equilibration residual {:.3e}, normal jump {:.3e}, compatibility {:.3e}, {:.2}s",
        if pass { "PASS" } else { "FAIL" },
        worst_residual,
        worst_jump,
        worst_compat,
        elapsed.as_secs_f64()
    );
    assert!(worst_residual <= 1e-10, "residual {worst_residual:.3e}");
    assert!(worst_jump <= 1e-11, "jump {worst_jump:.3e}");
    assert!(worst_compat <= 1e-12, "compatibility {worst_compat:.3e}");
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
}

/// Criterion 4: guaranteed upper bound err ≤ est + osc + 1e-9 on the 1D
/// sweep n ∈ {4..64} and the 2D sweep n ∈ {2..16}, τ = h, zero failures.
#[test]
fn c4_guaranteed_upper_bound() {
    let mut failures = Vec::new();
    let mut worst_margin = f64::INFINITY;
    let sweeps = [
        ("sin1d_decay", MeshFamily::Interval, 4usize, 4usize),
        ("sin2d_decay", MeshFamily::UnitSquare, 2, 3),
    ];
    for (name, family, resolution, refinements) in sweeps {
        let reports = tau_eq_h_sweep(name, family, resolution, refinements);
        for report in &reports {
            let check = verify_upper_bound(report).unwrap();
            worst_margin = worst_margin.min(check.margin);
            if !check.pass {
                failures.push(format!("{name} level {}", report.level));
            }
        }
    }
    let pass = failures.is_empty();
    println!(
        "ACCEPTANCE 4 {}: upper bound on both sweeps, worst margin {:.6e}, failures: {:?}",
        if pass { "PASS" } else { "FAIL" },
        worst_margin,
        failures
    );
    assert!(failures.is_empty(), "bound violated: {failures:?}");
}

/// Criterion 5: effectivity est_total/err_energy within [1.0, 10.0] at every
/// level of the 2D τ = h sweep, with bounded growth.
#[test]
fn c5_global_efficiency_budget() {
    let reports = tau_eq_h_sweep("sin2d_decay", MeshFamily::UnitSquare, 2, 3);
    let effectivities: Vec<f64> = reports.iter().map(|r| r.effectivity.unwrap()).collect();
    let in_budget = effectivities.iter().all(|&e| (1.0..=10.0).contains(&e));
    let growth_ok = *effectivities.last().unwrap() <= 1.5 * effectivities[0];
    let guaranteed_ratios: Vec<f64> = reports
        .iter()
        .map(|r| (r.total_estimator + r.osc_upper) / r.err_energy.unwrap())
        .collect();
    let pass = in_budget && growth_ok;
    println!(
        "ACCEPTANCE 5 {}: effectivity per level {:?}, growth {} (last ≤ 1.5×first), guaranteed-bound ratios {:?}",
        if pass { "PASS" } else { "FAIL" },
        effectivities
            .iter()
            .map(|e| format!("{e:.4}"))
            .collect::<Vec<_>>(),
        if growth_ok { "bounded" } else { "UNBOUNDED" },
        guaranteed_ratios
            .iter()
            .map(|e| format!("{e:.4}"))
            .collect::<Vec<_>>(),
    );
    assert!(growth_ok, "last effectivity exceeds 1.5× the first");
    assert!(
        in_budget,
        "effectivity outside [1.0, 10.0] at some level: {effectivities:?}"
    );
}

/// Criterion 6: the residual identity holds for 20 seeded test fields on
/// sin1d_decay at n = 8, N = 8, gap ≤ 1e-8 · scale, under 10 s.
#[test]
fn c6_residual_identity() {
    use rand::{Rng, SeedableRng};
    let start = Instant::now();
    let sol = solve_catalog("sin1d_decay", 8, 8);
    let problem = find("sin1d_decay").unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20240801);
    let mut worst_rel: f64 = 0.0;
    for _ in 0..20 {
        let phi: Vec<Vec<f64>> = (0..=8)
            .map(|_| {
                (0..sol.space().n_dofs())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let gap = verify_residual_identity(&sol, &problem, &phi).unwrap();
        worst_rel = worst_rel.max(gap.gap / gap.scale);
    }
    let elapsed = start.elapsed();
    let pass = worst_rel <= 1e-8 && elapsed.as_secs_f64() < 10.0;
    println!(
        "ACCEPTANCE 6 {}: residual identity over 20 fields, worst relative gap {:.3e}, {:.2}s",
        if pass { "PASS" } else { "FAIL" },
        worst_rel,
        elapsed.as_secs_f64()
    );
    assert!(worst_rel <= 1e-8, "gap {worst_rel:.3e}");
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
}

/// Criterion 7: EOC of err_energy and est_total between the last two 2D
/// levels lies in [0.8, 1.2].
#[test]
fn c7_convergence_sanity() {
    let reports = tau_eq_h_sweep("sin2d_decay", MeshFamily::UnitSquare, 2, 3);
    let rows = effectivity_study(&reports);
    let last = rows.last().unwrap();
    let eoc_err = last.eoc_err.unwrap();
    let eoc_est = last.eoc_est.unwrap();
    let pass = (0.8..=1.2).contains(&eoc_err) && (0.8..=1.2).contains(&eoc_est);
    println!(
        "ACCEPTANCE 7 {}: EOC between last two levels: err {:.3}, est {:.3}",
        if pass { "PASS" } else { "FAIL" },
        eoc_err,
        eoc_est
    );
    assert!((0.8..=1.2).contains(&eoc_err), "EOC err {eoc_err}");
    assert!((0.8..=1.2).contains(&eoc_est), "EOC est {eoc_est}");
}

/// Criterion 8: the patch flux on the 1D n = 2 single-interior-vertex
/// problem matches the dense null-space QP oracle in every coefficient.
#[test]
fn c8_patch_solver_oracle() {
    let sol = solve_catalog("sin1d_decay", 2, 2);
    let space = Arc::new(FluxSpace::new(sol.space_arc(), 2).unwrap());
    let patches = vertex_patches(sol.space().mesh());
    let interior = patches.iter().find(|p| p.is_interior).unwrap();
    let patch = build_patch_space(Arc::clone(&space), interior).unwrap();
    let mut worst: f64 = 0.0;
    for n in 1..=2 {
        let rhs = assemble_patch_rhs(&sol, &patch, n).unwrap();
        let flux = patch.solve(&rhs).unwrap();
        let oracle = common::null_space_qp_oracle(&patch, &rhs);
        assert_eq!(flux.len(), oracle.len());
        for (i, (a, b)) in flux.iter().zip(&oracle).enumerate() {
            let gap = (a - b).abs();
            worst = worst.max(gap);
            assert!(
                gap <= 1e-10,
                "interval {n}, coefficient {i}: {a:.16e} vs oracle {b:.16e}"
            );
        }
    }
    println!("ACCEPTANCE 8 PASS: patch flux matches null-space QP oracle, worst coefficient gap {worst:.3e}");
}

/// Criterion 9: the CSV output backing criteria 3–5 is bitwise identical
/// across thread counts 1 and 4.
#[test]
fn c9_determinism_across_threads() {
    let run_all = |threads: usize| -> Vec<String> {
        let mut outputs = Vec::new();
        // criterion 3 runs: sin2d solves at n ∈ {2,4,8}, N = n
        for n in [2usize, 4, 8] {
            let config = StudyConfig {
                mesh: heatbound::harness::MeshConfig {
                    family: MeshFamily::UnitSquare,
                    resolution: n,
                    refinements: 0,
                },
                time: heatbound::harness::TimeConfig {
                    t_final: 1.0,
                    steps: n,
                    rule: TimeRule::Uniform,
                    grading: 1.0,
                },
                problem: ProblemChoice::Name("sin2d_decay".into()),
                threads,
                ..StudyConfig::default()
            };
            let outcome = run_study(StudyKind::Solve, &config, true).unwrap();
            outputs.push(outcome.csv.unwrap());
            // numeric JSON payload (levels + flux dump); the config echo
            // legitimately records the differing thread count
            let json: serde_json::Value = serde_json::from_str(&outcome.json.unwrap()).unwrap();
            outputs.push(serde_json::to_string(&json["levels"]).unwrap());
            outputs.push(serde_json::to_string(&json["detail"]).unwrap());
        }
        // criteria 4 and 5 sweeps (1D and 2D, τ = h)
        for (family, problem, resolution, refinements, study) in [
            (
                MeshFamily::Interval,
                "sin1d_decay",
                4usize,
                4usize,
                StudyKind::UpperBound,
            ),
            (
                MeshFamily::UnitSquare,
                "sin2d_decay",
                2,
                3,
                StudyKind::UpperBound,
            ),
            (
                MeshFamily::UnitSquare,
                "sin2d_decay",
                2,
                3,
                StudyKind::Effectivity,
            ),
        ] {
            let config = StudyConfig {
                mesh: heatbound::harness::MeshConfig {
                    family,
                    resolution,
                    refinements,
                },
                time: heatbound::harness::TimeConfig {
                    t_final: 1.0,
                    steps: 4,
                    rule: TimeRule::TauEqH,
                    grading: 1.0,
                },
                problem: ProblemChoice::Name(problem.into()),
                threads,
                ..StudyConfig::default()
            };
            // the effectivity study exits FAIL at coarse levels (criterion 5);
            // determinism concerns only the emitted bytes
            let outcome = run_study(study, &config, false).unwrap();
            outputs.push(outcome.csv.unwrap());
        }
        outputs
    };
    let with_one = run_all(1);
    let with_four = run_all(4);
    assert_eq!(with_one.len(), with_four.len());
    let mut identical = true;
    for (a, b) in with_one.iter().zip(&with_four) {
        identical &= a == b;
    }
    println!(
        "ACCEPTANCE 9 {}: {} outputs bitwise identical across thread counts 1 and 4",
        if identical { "PASS" } else { "FAIL" },
        with_one.len()
    );
    assert!(identical, "outputs differ across thread counts");
}
