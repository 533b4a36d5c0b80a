//! Implicit Euler time marching and the temporal reconstructions.
//!
//! Each step solves `(M/τ_n + A) u_n = (M/τ_n) u_{n−1} + b_n` where
//! `b_n,i = (f_{h,τ,n}, φ_i)` and `f_{h,τ,n}` is the broken-P1 L2 projection
//! of the source slice `f(·, t_n)`. The initial coefficients are the global
//! L2 projection of `u_0`.
//!
//! Three reconstructions extend the nodal values to all of `[0,T]`: the
//! left-continuous piecewise constant, the continuous piecewise affine
//! interpolant, and their midpoint average.

use std::sync::Arc;

use crate::fem::{
    assemble_load_broken, assemble_mass, assemble_stiffness, project_broken_p1, solve_spd,
    BrokenP1, FeSpace, SparseOperator, DEFAULT_CG_TOL,
};
use crate::problem::ProblemSpec;
use crate::quadrature::QuadratureRule;
use crate::{Error, Result};

/// Quadrature degree used whenever analytic (non-polynomial) integrands are
/// involved; polynomial integrands are covered a fortiori.
pub const ANALYTIC_QUAD_DEGREE: usize = 14;

/// Strictly increasing time nodes t_0 = 0 < … < t_N = T.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn from_nodes(nodes: Vec<f64>) -> Result<TimeGrid> {
        if nodes.len() < 2 {
            return Err(Error::invalid("time grid needs at least two nodes"));
        }
        if nodes[0] != 0.0 {
            return Err(Error::invalid("time grid must start at t = 0"));
        }
        if nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("time nodes must be strictly increasing"));
        }
        Ok(TimeGrid { nodes })
    }

    /// Uniform grid with `n_steps` steps on [0, t_final].
    pub fn uniform(t_final: f64, n_steps: usize) -> Result<TimeGrid> {
        Self::geometric(t_final, n_steps, 1.0)
    }

    /// Geometrically graded grid: consecutive steps satisfy τ_{n+1} = ratio·τ_n.
    pub fn geometric(t_final: f64, n_steps: usize, ratio: f64) -> Result<TimeGrid> {
        if !(t_final > 0.0) {
            return Err(Error::invalid("final time must be positive"));
        }
        if n_steps == 0 {
            return Err(Error::invalid("need at least one time step"));
        }
        if !(ratio > 0.0) {
            return Err(Error::invalid("grading ratio must be positive"));
        }
        let n = n_steps as f64;
        let mut nodes = Vec::with_capacity(n_steps + 1);
        if (ratio - 1.0).abs() < 1e-14 {
            for i in 0..=n_steps {
                nodes.push(t_final * i as f64 / n);
            }
        } else {
            let tau1 = t_final * (ratio - 1.0) / (ratio.powi(n_steps as i32) - 1.0);
            let mut t = 0.0;
            let mut tau = tau1;
            nodes.push(0.0);
            for _ in 0..n_steps - 1 {
                t += tau;
                nodes.push(t);
                tau *= ratio;
            }
            nodes.push(t_final);
        }
        Self::from_nodes(nodes)
    }

    pub fn n_steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn t_final(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    pub fn node(&self, n: usize) -> f64 {
        self.nodes[n]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Step length τ_n = t_n − t_{n−1}, n ∈ 1..=N.
    pub fn step(&self, n: usize) -> f64 {
        self.nodes[n] - self.nodes[n - 1]
    }

    pub fn max_step(&self) -> f64 {
        (1..=self.n_steps())
            .map(|n| self.step(n))
            .fold(0.0, f64::max)
    }

    pub fn min_step(&self) -> f64 {
        (1..=self.n_steps())
            .map(|n| self.step(n))
            .fold(f64::INFINITY, f64::min)
    }

    /// Interval index n ∈ 1..=N with t ∈ (t_{n−1}, t_n]; returns 1 for t = 0.
    pub fn interval_of(&self, t: f64) -> Result<usize> {
        if t < 0.0 || t > self.t_final() {
            return Err(Error::invalid(format!(
                "time {t} outside [0, {}]",
                self.t_final()
            )));
        }
        if t == 0.0 {
            return Ok(1);
        }
        let idx = self.nodes.partition_point(|&s| s < t);
        Ok(idx.min(self.n_steps()))
    }
}

/// Which temporal reconstruction of the nodal values to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconstructionKind {
    /// Left-continuous, `u(t) = u_n` on `(t_{n−1}, t_n]`, `u(0) = u_0`.
    PiecewiseConstant,
    /// Continuous interpolant of the nodal values.
    PiecewiseAffine,
    /// Average of the other two.
    Midpoint,
}

/// Discrete solution: time grid, nodal coefficient vectors, and the
/// broken-P1 data snapshots actually used on each interval.
#[derive(Clone)]
pub struct SpaceTimeSolution {
    space: Arc<FeSpace>,
    grid: TimeGrid,
    coefficients: Vec<Vec<f64>>,
    data_snapshots: Vec<BrokenP1>,
    mass: SparseOperator,
    stiffness: SparseOperator,
}

impl SpaceTimeSolution {
    /// Assemble a solution object from raw parts (e.g. to experiment with
    /// alternative data snapshots); validates shapes only.
    pub fn from_parts(
        space: Arc<FeSpace>,
        grid: TimeGrid,
        coefficients: Vec<Vec<f64>>,
        data_snapshots: Vec<BrokenP1>,
    ) -> Result<SpaceTimeSolution> {
        if coefficients.len() != grid.n_steps() + 1 {
            return Err(Error::invalid("need N+1 coefficient vectors"));
        }
        if data_snapshots.len() != grid.n_steps() {
            return Err(Error::invalid("need N data snapshots"));
        }
        if coefficients.iter().any(|c| c.len() != space.n_dofs()) {
            return Err(Error::invalid("coefficient vector length mismatch"));
        }
        if data_snapshots
            .iter()
            .any(|d| d.len() != space.mesh().n_cells())
        {
            return Err(Error::invalid("data snapshot length mismatch"));
        }
        let mass = assemble_mass(&space);
        let stiffness = assemble_stiffness(&space);
        Ok(SpaceTimeSolution {
            space,
            grid,
            coefficients,
            data_snapshots,
            mass,
            stiffness,
        })
    }

    pub fn space(&self) -> &FeSpace {
        &self.space
    }

    pub fn space_arc(&self) -> Arc<FeSpace> {
        Arc::clone(&self.space)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Nodal coefficients u_{h,τ,n}, n ∈ 0..=N.
    pub fn coefficients(&self, n: usize) -> &[f64] {
        &self.coefficients[n]
    }

    /// Data snapshot f_{h,τ,n} used on interval n ∈ 1..=N.
    pub fn data_snapshot(&self, n: usize) -> &BrokenP1 {
        &self.data_snapshots[n - 1]
    }

    pub fn mass(&self) -> &SparseOperator {
        &self.mass
    }

    pub fn stiffness(&self) -> &SparseOperator {
        &self.stiffness
    }

    /// Coefficients of the chosen reconstruction at time `t`.
    pub fn reconstruction_coefficients(
        &self,
        kind: ReconstructionKind,
        t: f64,
    ) -> Result<Vec<f64>> {
        let n = self.grid.interval_of(t)?;
        if t == 0.0 {
            return Ok(self.coefficients[0].clone());
        }
        let (prev, curr) = (&self.coefficients[n - 1], &self.coefficients[n]);
        let theta = (t - self.grid.node(n - 1)) / self.grid.step(n);
        let combine = |wc: f64, wp: f64| -> Vec<f64> {
            curr.iter()
                .zip(prev)
                .map(|(c, p)| wc * c + wp * p)
                .collect()
        };
        Ok(match kind {
            ReconstructionKind::PiecewiseConstant => curr.clone(),
            ReconstructionKind::PiecewiseAffine => combine(theta, 1.0 - theta),
            ReconstructionKind::Midpoint => combine(0.5 * (1.0 + theta), 0.5 * (1.0 - theta)),
        })
    }

    /// Pointwise value of a reconstruction at (t, x).
    pub fn evaluate(&self, kind: ReconstructionKind, t: f64, x: [f64; 2]) -> Result<f64> {
        let coeffs = self.reconstruction_coefficients(kind, t)?;
        let mesh = self.space.mesh();
        let k = mesh
            .find_cell(x)
            .ok_or_else(|| Error::invalid(format!("point {x:?} outside the mesh")))?;
        let bary = mesh.barycentric(k, x);
        Ok(self.space.value_at(&coeffs, k, &bary))
    }

    /// Slope (u_n − u_{n−1})/τ_n of the affine reconstruction on I_n.
    pub fn time_derivative_affine(&self, n: usize) -> Result<Vec<f64>> {
        if n == 0 || n > self.grid.n_steps() {
            return Err(Error::invalid(format!(
                "interval index {n} out of range 1..={}",
                self.grid.n_steps()
            )));
        }
        let tau = self.grid.step(n);
        Ok(self.coefficients[n]
            .iter()
            .zip(&self.coefficients[n - 1])
            .map(|(c, p)| (c - p) / tau)
            .collect())
    }
}

/// Linear solver settings for the time stepper.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Relative residual tolerance for each CG solve.
    pub tol: f64,
    /// Iteration cap; `None` means 10·n.
    pub max_iters: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: DEFAULT_CG_TOL,
            max_iters: None,
        }
    }
}

/// One implicit Euler step: solves `(M/τ + A) u = (M/τ) u_prev + load`.
pub fn step_implicit_euler(
    mass: &SparseOperator,
    stiffness: &SparseOperator,
    u_prev: &[f64],
    load: &[f64],
    tau: f64,
    opts: SolverOptions,
) -> Result<Vec<f64>> {
    let system = SparseOperator::linear_combination(1.0 / tau, mass, 1.0, stiffness);
    let mu = mass.matvec(u_prev);
    let rhs: Vec<f64> = mu.iter().zip(load).map(|(m, b)| m / tau + b).collect();
    solve_spd(&system, &rhs, opts.tol, opts.max_iters)
}

/// March the discrete problem over the whole grid.
pub fn run_implicit_euler(
    space: Arc<FeSpace>,
    grid: TimeGrid,
    problem: &ProblemSpec,
    opts: SolverOptions,
) -> Result<SpaceTimeSolution> {
    if problem.dim != space.mesh().dim() {
        return Err(Error::invalid(format!(
            "problem {:?} is {}D but the mesh is {}D",
            problem.name,
            problem.dim,
            space.mesh().dim()
        )));
    }
    let mesh = space.mesh();
    let rule = QuadratureRule::simplex(mesh.dim(), ANALYTIC_QUAD_DEGREE);
    let mass = assemble_mass(&space);
    let stiffness = assemble_stiffness(&space);

    let u0fn = &problem.u0;
    let b0 = crate::fem::assemble_load_analytic(&space, &rule, |x| u0fn(x));
    let u0 = solve_spd(&mass, &b0, opts.tol, opts.max_iters).map_err(|e| wrap_step_error(e, 0))?;

    let mut coefficients = Vec::with_capacity(grid.n_steps() + 1);
    coefficients.push(u0);
    let mut data_snapshots = Vec::with_capacity(grid.n_steps());
    for n in 1..=grid.n_steps() {
        let t_n = grid.node(n);
        let ffn = &problem.f;
        let f_n = project_broken_p1(mesh, &rule, |x| ffn(x, t_n));
        let load = assemble_load_broken(&space, &f_n);
        let u_n = step_implicit_euler(
            &mass,
            &stiffness,
            coefficients.last().unwrap(),
            &load,
            grid.step(n),
            opts,
        )
        .map_err(|e| wrap_step_error(e, n))?;
        coefficients.push(u_n);
        data_snapshots.push(f_n);
    }
    Ok(SpaceTimeSolution {
        space,
        grid,
        coefficients,
        data_snapshots,
        mass,
        stiffness,
    })
}

fn wrap_step_error(e: Error, step: usize) -> Error {
    match e {
        Error::SolveFailure {
            context,
            residual,
            iterations,
            tol,
        } => Error::SolveFailure {
            context: format!("{context} at time step {step}"),
            residual,
            iterations,
            tol,
        },
        other => other,
    }
}
