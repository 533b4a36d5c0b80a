//! Study orchestration: configuration, the named studies, and CSV/JSON
//! report emission.
//!
//! All floating-point output is formatted with a fixed `{:.16e}` layout and
//! every parallel reduction is index-ordered, so reports are bitwise
//! identical across repeated runs and thread counts.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::equilibration::{build_global_flux, EquilibratedFlux};
use crate::estimators::{
    compute_report, effectivity_study, verify_residual_identity, verify_upper_bound,
    EstimatorReport, StudyRow,
};
use crate::fem::FeSpace;
use crate::mesh::{build_interval_mesh, build_unit_square_mesh, Mesh};
use crate::problem::{find, ProblemSpec};
use crate::semidiscrete::{counterexample_sweep, mode_energy_report, solve_mode, ModeProblem};
use crate::timestep::{run_implicit_euler, SolverOptions, SpaceTimeSolution, TimeGrid};
use crate::{Error, Result};

/// The available studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    /// One solve at the base resolution with a full report.
    Solve,
    /// Refinement sweep with EOC bookkeeping, no assertions.
    Convergence,
    /// Refinement sweep asserting the guaranteed upper bound per level.
    UpperBound,
    /// Refinement sweep asserting the effectivity budget.
    Effectivity,
    /// Single-mode efficiency counterexample sweep over λ.
    AppendixOde,
    /// Randomized semi-discrete identity suite.
    Hypercircle,
    /// Residual identity check with seeded discrete test fields.
    ResidualIdentity,
}

impl StudyKind {
    pub fn name(self) -> &'static str {
        match self {
            StudyKind::Solve => "solve",
            StudyKind::Convergence => "convergence",
            StudyKind::UpperBound => "upper-bound",
            StudyKind::Effectivity => "effectivity",
            StudyKind::AppendixOde => "appendix-ode",
            StudyKind::Hypercircle => "hypercircle",
            StudyKind::ResidualIdentity => "residual-identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshFamily {
    Interval,
    UnitSquare,
}

fn default_resolution() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub family: MeshFamily,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub refinements: usize,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            family: MeshFamily::Interval,
            resolution: default_resolution(),
            refinements: 0,
        }
    }
}

/// How the number of time steps follows the mesh size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeRule {
    /// Use `steps` directly.
    Uniform,
    /// N = ceil(T / h_max).
    TauEqH,
    /// N = ceil(T / h_max²).
    TauEqHSq,
}

fn default_t_final() -> f64 {
    1.0
}

fn default_steps() -> usize {
    4
}

fn default_grading() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    #[serde(default = "default_t_final", alias = "T")]
    pub t_final: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_time_rule")]
    pub rule: TimeRule,
    /// Geometric step grading ratio τ_{n+1}/τ_n (1 = uniform).
    #[serde(default = "default_grading")]
    pub grading: f64,
}

fn default_time_rule() -> TimeRule {
    TimeRule::Uniform
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig {
            t_final: default_t_final(),
            steps: default_steps(),
            rule: default_time_rule(),
            grading: default_grading(),
        }
    }
}

/// Catalog entry by name, or the single-mode ODE surrogate with parameter λ.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemChoice {
    Name(String),
    Mode { lambda: f64 },
}

impl Default for ProblemChoice {
    fn default() -> Self {
        ProblemChoice::Name("sin1d_decay".into())
    }
}

fn default_solver_tol() -> f64 {
    1e-14
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_solver_tol")]
    pub tol: f64,
    #[serde(default)]
    pub max_iters: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: default_solver_tol(),
            max_iters: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub csv: Option<String>,
    #[serde(default)]
    pub json: Option<String>,
}

fn default_instances() -> usize {
    200
}

fn default_seed() -> u64 {
    20240801
}

fn default_max_steps() -> usize {
    16
}

fn default_identity_tol() -> f64 {
    1e-11
}

/// Settings for the randomized hypercircle suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypercircleConfig {
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_identity_tol")]
    pub tol: f64,
}

impl Default for HypercircleConfig {
    fn default() -> Self {
        HypercircleConfig {
            instances: default_instances(),
            seed: default_seed(),
            max_steps: default_max_steps(),
            tol: default_identity_tol(),
        }
    }
}

fn default_fields() -> usize {
    20
}

fn default_residual_tol() -> f64 {
    1e-8
}

/// Settings for the residual-identity study.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualConfig {
    #[serde(default = "default_fields")]
    pub fields: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_residual_tol")]
    pub tol: f64,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        ResidualConfig {
            fields: default_fields(),
            seed: default_seed(),
            tol: default_residual_tol(),
        }
    }
}

fn default_effectivity_budget() -> [f64; 2] {
    [1.0, 10.0]
}

fn default_growth_factor() -> f64 {
    1.5
}

/// Settings for the effectivity study.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectivityConfig {
    /// Effectivity must stay inside this interval on every level.
    #[serde(default = "default_effectivity_budget")]
    pub budget: [f64; 2],
    /// Last-level effectivity must not exceed this multiple of the first.
    #[serde(default = "default_growth_factor")]
    pub growth_factor: f64,
    /// Assert only on levels whose realized γ = max h_{ω_a}²/τ_n stays below
    /// this bound (efficiency needs the mesh-vs-step condition h² ≲ τ);
    /// `null` asserts on every level.
    #[serde(default)]
    pub gamma_max: Option<f64>,
}

impl Default for EffectivityConfig {
    fn default() -> Self {
        EffectivityConfig {
            budget: default_effectivity_budget(),
            growth_factor: default_growth_factor(),
            gamma_max: None,
        }
    }
}

fn default_flux_degree() -> usize {
    2
}

/// One JSON document configures any study; every field has a default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Optional; the CLI positional argument takes precedence.
    #[serde(default)]
    pub study: Option<StudyKind>,
    #[serde(default)]
    pub mesh: MeshConfig,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub problem: ProblemChoice,
    #[serde(default = "default_flux_degree")]
    pub flux_degree: usize,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Worker threads (0 = library default).
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub hypercircle: HypercircleConfig,
    /// λ values for the appendix-ode sweep.
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default)]
    pub residual: ResidualConfig,
    #[serde(default)]
    pub effectivity: EffectivityConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<StudyConfig> {
        let config: StudyConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mesh.resolution < 1 {
            return Err(Error::Config("mesh.resolution must be at least 1".into()));
        }
        if self.flux_degree < 2 {
            return Err(Error::Config("flux_degree must be at least 2".into()));
        }
        if !(self.time.t_final > 0.0) {
            return Err(Error::Config("time.t_final must be positive".into()));
        }
        if self.time.steps < 1 {
            return Err(Error::Config("time.steps must be at least 1".into()));
        }
        if !(self.time.grading > 0.0) {
            return Err(Error::Config("time.grading must be positive".into()));
        }
        Ok(())
    }

    fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.solver.tol,
            max_iters: self.solver.max_iters,
        }
    }
}

/// What a study run produced.
#[derive(Debug)]
pub struct StudyOutcome {
    pub passed: bool,
    pub summary: String,
    pub csv: Option<String>,
    pub json: Option<String>,
}

/// Run a study, honoring `config.threads` when the `parallel` feature is on.
pub fn run_study(study: StudyKind, config: &StudyConfig, dump_flux: bool) -> Result<StudyOutcome> {
    config.validate()?;
    #[cfg(feature = "parallel")]
    {
        if config.threads > 0 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            return pool.install(|| run_study_inner(study, config, dump_flux));
        }
    }
    run_study_inner(study, config, dump_flux)
}

fn run_study_inner(
    study: StudyKind,
    config: &StudyConfig,
    dump_flux: bool,
) -> Result<StudyOutcome> {
    match study {
        StudyKind::Solve => run_solve(config, dump_flux),
        StudyKind::Convergence => run_sweep(config, dump_flux, SweepChecks::None),
        StudyKind::UpperBound => run_sweep(config, dump_flux, SweepChecks::UpperBound),
        StudyKind::Effectivity => run_sweep(config, dump_flux, SweepChecks::Effectivity),
        StudyKind::AppendixOde => run_appendix_ode(config),
        StudyKind::Hypercircle => run_hypercircle(config),
        StudyKind::ResidualIdentity => run_residual_identity(config),
    }
}

fn problem_for_pde(config: &StudyConfig) -> Result<ProblemSpec> {
    match &config.problem {
        ProblemChoice::Name(name) => {
            let problem = find(name)?;
            problem.verify_consistency(1, 20, config.time.t_final)?;
            Ok(problem)
        }
        ProblemChoice::Mode { .. } => Err(Error::Config(
            "this study needs a catalog problem; the single-mode surrogate only drives \
             solve/appendix-ode/hypercircle"
                .into(),
        )),
    }
}

fn build_level_mesh(config: &StudyConfig, level: usize) -> Result<Mesh> {
    let resolution = config.mesh.resolution << level;
    match config.mesh.family {
        MeshFamily::Interval => build_interval_mesh(resolution, (0.0, 1.0)),
        MeshFamily::UnitSquare => build_unit_square_mesh(resolution),
    }
}

fn build_grid(config: &StudyConfig, mesh: &Mesh) -> Result<TimeGrid> {
    let t = config.time.t_final;
    let steps = match config.time.rule {
        TimeRule::Uniform => config.time.steps,
        TimeRule::TauEqH => (t / mesh.h_max()).ceil() as usize,
        TimeRule::TauEqHSq => (t / (mesh.h_max() * mesh.h_max())).ceil() as usize,
    }
    .max(1);
    TimeGrid::geometric(t, steps, config.time.grading)
}

fn run_level(
    config: &StudyConfig,
    problem: &ProblemSpec,
    level: usize,
) -> Result<(SpaceTimeSolution, EquilibratedFlux, EstimatorReport)> {
    let mesh = Arc::new(build_level_mesh(config, level)?);
    let expected_dim = match config.mesh.family {
        MeshFamily::Interval => 1,
        MeshFamily::UnitSquare => 2,
    };
    if problem.dim != expected_dim {
        return Err(Error::Config(format!(
            "problem {:?} is {}D but mesh family is {}D",
            problem.name, problem.dim, expected_dim
        )));
    }
    let space = Arc::new(FeSpace::p1(mesh));
    let grid = build_grid(config, space.mesh())?;
    let sol = run_implicit_euler(space, grid, problem, config.solver_options())?;
    let flux = build_global_flux(&sol, config.flux_degree)?;
    let report = compute_report(&sol, &flux, problem, level)?;
    Ok((sol, flux, report))
}

const ESTIMATOR_CSV_HEADER: &str = "level,h_max,tau_max,gamma_realized,err_energy,err_X_const,\
err_X_affine,est_jump,est_flux,est_total,osc_upper,effectivity";

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

fn estimator_csv(reports: &[EstimatorReport]) -> String {
    let mut out = String::from(ESTIMATOR_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.level,
            fmt(r.h_max),
            fmt(r.tau_max),
            fmt(r.gamma_realized),
            fmt_opt(r.err_energy),
            fmt_opt(r.err_x_const),
            fmt_opt(r.err_x_affine),
            fmt(r.est_jump),
            fmt(r.est_flux),
            fmt(r.total_estimator),
            fmt(r.osc_upper),
            fmt_opt(r.effectivity),
        ));
    }
    out
}

fn flux_dump(flux: &EquilibratedFlux) -> serde_json::Value {
    let intervals: Vec<serde_json::Value> = (1..=flux.n_intervals())
        .map(|n| {
            let cells: Vec<Vec<f64>> = (0..flux.flux_space().fe_space().mesh().n_cells())
                .map(|cell| flux.cell_dofs(n, cell).to_vec())
                .collect();
            serde_json::json!({ "interval": n, "cells": cells })
        })
        .collect();
    serde_json::Value::Array(intervals)
}

fn json_report(
    study: StudyKind,
    config: &StudyConfig,
    reports: &[EstimatorReport],
    extra: serde_json::Value,
) -> Result<String> {
    let value = serde_json::json!({
        "study": study.name(),
        "config": config,
        "levels": reports,
        "detail": extra,
    });
    serde_json::to_string_pretty(&value).map_err(|e| Error::Config(e.to_string()))
}

fn summary_table(rows: &[StudyRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>5} {:>12} {:>12} {:>10} {:>12} {:>12} {:>12} {:>8} {:>8} {:>8}\n",
        "level",
        "h_max",
        "tau_max",
        "gamma",
        "err_energy",
        "est_total",
        "osc_upper",
        "eff",
        "eoc_err",
        "eoc_est"
    ));
    for r in rows {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:>5} {:>12.4e} {:>12.4e} {:>10.3} {:>12} {:>12.4e} {:>12.4e} {:>8} {:>8} {:>8}\n",
            r.level,
            r.h_max,
            r.tau_max,
            r.gamma_realized,
            r.err_energy
                .map(|v| format!("{v:.4e}"))
                .unwrap_or_else(|| "-".into()),
            r.est_total,
            r.osc_upper,
            opt(r.effectivity),
            opt(r.eoc_err),
            opt(r.eoc_est),
        ));
    }
    out
}

fn run_solve(config: &StudyConfig, dump_flux: bool) -> Result<StudyOutcome> {
    if let ProblemChoice::Mode { lambda } = config.problem {
        return run_single_mode(config, lambda);
    }
    let problem = problem_for_pde(config)?;
    let (_sol, flux, report) = run_level(config, &problem, 0)?;
    let reports = vec![report];
    let rows = effectivity_study(&reports);
    let detail = if dump_flux {
        serde_json::json!({ "flux": [flux_dump(&flux)] })
    } else {
        serde_json::Value::Null
    };
    Ok(StudyOutcome {
        passed: true,
        summary: summary_table(&rows),
        csv: Some(estimator_csv(&reports)),
        json: Some(json_report(StudyKind::Solve, config, &reports, detail)?),
    })
}

/// The single-mode surrogate run: implicit Euler on ∂_t u + λu = 1, u0 = 0.
fn run_single_mode(config: &StudyConfig, lambda: f64) -> Result<StudyOutcome> {
    let grid = TimeGrid::geometric(config.time.t_final, config.time.steps, config.time.grading)?;
    let n = grid.n_steps();
    let problem = ModeProblem::new(lambda, grid, vec![1.0; n], 0.0)?;
    let traj = solve_mode(&problem);
    let report = mode_energy_report(&problem, &traj)?;
    let csv = format!(
        "lambda,jump_E,err_const_E,err_affine_E,err_mid_E,ratio_const,ratio_affine\n{},{},{},{},{},{},{}\n",
        fmt(lambda),
        fmt(report.jump_e),
        fmt(report.err_const_e),
        fmt(report.err_affine_e),
        fmt(report.err_mid_e),
        fmt(report.jump_e / report.err_const_e),
        fmt(report.jump_e / report.err_affine_e),
    );
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "study": "solve",
        "config": config,
        "mode": {
            "lambda": lambda,
            "trajectory": traj,
            "jump_e": report.jump_e,
            "err_const_e": report.err_const_e,
            "err_affine_e": report.err_affine_e,
            "err_mid_e": report.err_mid_e,
        }
    }))
    .map_err(|e| Error::Config(e.to_string()))?;
    Ok(StudyOutcome {
        passed: true,
        summary: format!(
            "mode λ={lambda}: jump {:.6e}, err_const {:.6e}, err_affine {:.6e}, err_mid {:.6e}\n",
            report.jump_e, report.err_const_e, report.err_affine_e, report.err_mid_e
        ),
        csv: Some(csv),
        json: Some(json),
    })
}

enum SweepChecks {
    None,
    UpperBound,
    Effectivity,
}

fn run_sweep(config: &StudyConfig, dump_flux: bool, checks: SweepChecks) -> Result<StudyOutcome> {
    let problem = problem_for_pde(config)?;
    let mut reports = Vec::new();
    let mut dumps = Vec::new();
    for level in 0..=config.mesh.refinements {
        let (_sol, flux, report) = run_level(config, &problem, level)?;
        if dump_flux {
            dumps.push(flux_dump(&flux));
        }
        reports.push(report);
    }
    let rows = effectivity_study(&reports);
    let mut summary = summary_table(&rows);
    let mut passed = true;

    match checks {
        SweepChecks::None => {}
        SweepChecks::UpperBound => {
            for r in &reports {
                let check = verify_upper_bound(r)?;
                summary.push_str(&format!(
                    "upper bound level {}: {} (margin {:.6e})\n",
                    r.level,
                    if check.pass { "PASS" } else { "FAIL" },
                    check.margin
                ));
                passed &= check.pass;
            }
        }
        SweepChecks::Effectivity => {
            let [lo, hi] = config.effectivity.budget;
            let gamma_ok = |r: &EstimatorReport| {
                config
                    .effectivity
                    .gamma_max
                    .is_none_or(|g| r.gamma_realized <= g)
            };
            let effs: Vec<(usize, f64)> = reports
                .iter()
                .filter(|r| gamma_ok(r))
                .filter_map(|r| r.effectivity.map(|e| (r.level, e)))
                .collect();
            for &(level, eff) in &effs {
                let ok = (lo..=hi).contains(&eff);
                summary.push_str(&format!(
                    "effectivity level {level}: {:.4} {}\n",
                    eff,
                    if ok { "within budget" } else { "OUT OF BUDGET" }
                ));
                passed &= ok;
            }
            if let (Some(&(_, first)), Some(&(_, last))) = (effs.first(), effs.last()) {
                let ok = last <= config.effectivity.growth_factor * first;
                summary.push_str(&format!(
                    "effectivity growth: first {:.4}, last {:.4} {}\n",
                    first,
                    last,
                    if ok { "(bounded)" } else { "(GROWING)" }
                ));
                passed &= ok;
            }
        }
    }

    let detail = if dump_flux {
        serde_json::json!({ "flux": dumps })
    } else {
        serde_json::Value::Null
    };
    let study = match checks {
        SweepChecks::None => StudyKind::Convergence,
        SweepChecks::UpperBound => StudyKind::UpperBound,
        SweepChecks::Effectivity => StudyKind::Effectivity,
    };
    Ok(StudyOutcome {
        passed,
        summary,
        csv: Some(estimator_csv(&reports)),
        json: Some(json_report(study, config, &reports, detail)?),
    })
}

fn run_appendix_ode(config: &StudyConfig) -> Result<StudyOutcome> {
    let default_lambdas = vec![1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];
    let lambdas = config.lambdas.clone().unwrap_or(default_lambdas);
    let rows = counterexample_sweep(&lambdas)?;
    let mut csv =
        String::from("lambda,jump_E,err_const_E,err_affine_E,err_mid_E,ratio_const,ratio_affine\n");
    let mut summary = format!(
        "{:>10} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
        "lambda", "jump_E", "err_const", "err_affine", "ratio_const", "ratio_affine"
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            fmt(r.lambda),
            fmt(r.jump_e),
            fmt(r.err_const_e),
            fmt(r.err_affine_e),
            fmt(r.err_mid_e),
            fmt(r.ratio_const),
            fmt(r.ratio_affine),
        ));
        summary.push_str(&format!(
            "{:>10.1e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4} {:>12.4}\n",
            r.lambda, r.jump_e, r.err_const_e, r.err_affine_e, r.ratio_const, r.ratio_affine
        ));
    }
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "study": "appendix-ode",
        "config": config,
        "rows": rows.iter().map(|r| serde_json::json!({
            "lambda": r.lambda,
            "jump_e": r.jump_e,
            "err_const_e": r.err_const_e,
            "err_affine_e": r.err_affine_e,
            "err_mid_e": r.err_mid_e,
            "ratio_const": r.ratio_const,
            "ratio_affine": r.ratio_affine,
        })).collect::<Vec<_>>(),
    }))
    .map_err(|e| Error::Config(e.to_string()))?;
    Ok(StudyOutcome {
        passed: true,
        summary,
        csv: Some(csv),
        json: Some(json),
    })
}

/// Deterministic generator for the randomized semi-discrete suite.
pub fn hypercircle_instance(seed: u64, index: usize, max_steps: usize) -> ModeProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
    let lambda = 10f64.powf(rng.gen_range(-3.0..=3.0));
    let n_steps = rng.gen_range(1..=max_steps);
    let mut interior: Vec<f64> = (0..n_steps.saturating_sub(1))
        .map(|_| rng.gen_range(0.05..0.95))
        .collect();
    interior.sort_by(f64::total_cmp);
    interior.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
    let mut nodes = vec![0.0];
    nodes.extend(interior);
    nodes.push(1.0);
    let grid = TimeGrid::from_nodes(nodes).expect("generated nodes are valid");
    let forcing: Vec<f64> = (0..grid.n_steps())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let u0 = rng.gen_range(-1.0..1.0);
    ModeProblem::new(lambda, grid, forcing, u0).expect("generated problem is valid")
}

fn run_hypercircle(config: &StudyConfig) -> Result<StudyOutcome> {
    let hc = &config.hypercircle;
    let mut csv = String::from(
        "instance,lambda,n_steps,jump_E,err_const_E,err_affine_E,err_mid_E,pythagoras_rel,radius_rel\n",
    );
    let mut worst_pythagoras: f64 = 0.0;
    let mut worst_radius: f64 = 0.0;
    let results: Vec<Result<_>> = crate::par::map_indexed(hc.instances, |i| {
        let problem = hypercircle_instance(hc.seed, i, hc.max_steps);
        let traj = solve_mode(&problem);
        let report = mode_energy_report(&problem, &traj)?;
        let jump_sq = report.jump_e * report.jump_e;
        let pythagoras = (report.err_const_e.powi(2) + report.err_affine_e.powi(2) - jump_sq).abs()
            / jump_sq.max(1e-300);
        let radius =
            (report.err_mid_e - 0.5 * report.jump_e).abs() / (0.5 * report.jump_e).max(1e-300);
        Ok((problem, report, pythagoras, radius))
    });
    for (i, result) in results.into_iter().enumerate() {
        let (problem, report, pythagoras, radius) = result?;
        worst_pythagoras = worst_pythagoras.max(pythagoras);
        worst_radius = worst_radius.max(radius);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            i,
            fmt(problem.lambda),
            problem.grid.n_steps(),
            fmt(report.jump_e),
            fmt(report.err_const_e),
            fmt(report.err_affine_e),
            fmt(report.err_mid_e),
            fmt(pythagoras),
            fmt(radius),
        ));
    }
    let passed = worst_pythagoras <= hc.tol && worst_radius <= hc.tol;
    let summary = format!(
        "{} instances: worst Pythagoras defect {:.3e}, worst radius defect {:.3e} (tol {:.1e}) — {}\n",
        hc.instances,
        worst_pythagoras,
        worst_radius,
        hc.tol,
        if passed { "PASS" } else { "FAIL" }
    );
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "study": "hypercircle",
        "config": config,
        "worst_pythagoras_rel": worst_pythagoras,
        "worst_radius_rel": worst_radius,
        "passed": passed,
    }))
    .map_err(|e| Error::Config(e.to_string()))?;
    Ok(StudyOutcome {
        passed,
        summary,
        csv: Some(csv),
        json: Some(json),
    })
}

fn run_residual_identity(config: &StudyConfig) -> Result<StudyOutcome> {
    let problem = problem_for_pde(config)?;
    let (sol, _flux, _report) = run_level(config, &problem, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.residual.seed);
    let n_dofs = sol.space().n_dofs();
    let n_steps = sol.grid().n_steps();
    let mut csv = String::from("field,lhs,rhs,gap,scale\n");
    let mut worst_rel: f64 = 0.0;
    for i in 0..config.residual.fields {
        let phi: Vec<Vec<f64>> = (0..=n_steps)
            .map(|_| (0..n_dofs).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let gap = verify_residual_identity(&sol, &problem, &phi)?;
        worst_rel = worst_rel.max(gap.gap / gap.scale);
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            i,
            fmt(gap.lhs),
            fmt(gap.rhs),
            fmt(gap.gap),
            fmt(gap.scale)
        ));
    }
    let passed = worst_rel <= config.residual.tol;
    let summary = format!(
        "{} fields: worst relative gap {:.3e} (tol {:.1e}) — {}\n",
        config.residual.fields,
        worst_rel,
        config.residual.tol,
        if passed { "PASS" } else { "FAIL" }
    );
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "study": "residual-identity",
        "config": config,
        "worst_relative_gap": worst_rel,
        "passed": passed,
    }))
    .map_err(|e| Error::Config(e.to_string()))?;
    Ok(StudyOutcome {
        passed,
        summary,
        csv: Some(csv),
        json: Some(json),
    })
}
