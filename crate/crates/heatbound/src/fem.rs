//! Conforming P1 finite element space with homogeneous Dirichlet conditions,
//! sparse operator assembly, L2 projections, and a Jacobi-preconditioned
//! conjugate gradient solver.
//!
//! Degrees of freedom live at interior mesh vertices; boundary vertices carry
//! the value zero. Element matrices are computed in parallel over cells and
//! scattered sequentially in cell order, so assembled operators are bitwise
//! independent of the thread count.

use std::sync::Arc;

use crate::mesh::{refine_with_parents, Mesh};
use crate::par::map_indexed;
use crate::quadrature::QuadratureRule;
use crate::{Error, Result};

/// Conforming P1 space V_h ⊂ H¹₀(Ω).
#[derive(Debug, Clone)]
pub struct FeSpace {
    mesh: Arc<Mesh>,
    degree: usize,
    vertex_dof: Vec<Option<usize>>,
    dof_vertex: Vec<usize>,
}

impl FeSpace {
    /// Lowest-order space on the given mesh.
    pub fn p1(mesh: Arc<Mesh>) -> FeSpace {
        let mut vertex_dof = vec![None; mesh.n_vertices()];
        let mut dof_vertex = Vec::new();
        for v in 0..mesh.n_vertices() {
            if !mesh.is_boundary_vertex(v) {
                vertex_dof[v] = Some(dof_vertex.len());
                dof_vertex.push(v);
            }
        }
        FeSpace {
            mesh,
            degree: 1,
            vertex_dof,
            dof_vertex,
        }
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> Arc<Mesh> {
        Arc::clone(&self.mesh)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of interior (non-Dirichlet) degrees of freedom.
    pub fn n_dofs(&self) -> usize {
        self.dof_vertex.len()
    }

    pub fn dof_of_vertex(&self, v: usize) -> Option<usize> {
        self.vertex_dof[v]
    }

    pub fn vertex_of_dof(&self, i: usize) -> usize {
        self.dof_vertex[i]
    }

    /// Nodal values of a coefficient vector on cell `k` (zeros at Dirichlet
    /// vertices).
    pub fn cell_nodal_values(&self, coeffs: &[f64], k: usize) -> [f64; 3] {
        let mut vals = [0.0; 3];
        for (i, &v) in self.mesh.cell(k).iter().enumerate() {
            if let Some(d) = self.vertex_dof[v] {
                vals[i] = coeffs[d];
            }
        }
        vals
    }

    /// Constant gradient of the P1 field on cell `k`.
    pub fn gradient_on_cell(&self, coeffs: &[f64], k: usize) -> [f64; 2] {
        let vals = self.cell_nodal_values(coeffs, k);
        let grads = self.mesh.grad_barycentric(k);
        let mut g = [0.0, 0.0];
        for i in 0..self.mesh.dim() + 1 {
            g[0] += vals[i] * grads[i][0];
            g[1] += vals[i] * grads[i][1];
        }
        g
    }

    /// Value of the P1 field at barycentric coordinates of cell `k`.
    pub fn value_at(&self, coeffs: &[f64], k: usize, bary: &[f64; 3]) -> f64 {
        let vals = self.cell_nodal_values(coeffs, k);
        (0..self.mesh.dim() + 1).map(|i| vals[i] * bary[i]).sum()
    }

    /// Nodal interpolant of `g` (values at interior vertices).
    pub fn interpolate(&self, g: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        self.dof_vertex
            .iter()
            .map(|&v| g(self.mesh.vertex(v)))
            .collect()
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseOperator {
    pub fn dimension(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[range.clone()].binary_search(&j) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    /// y = A x, rows computed independently.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        map_indexed(self.n, |i| {
            let mut s = 0.0;
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[idx] * x[self.col_idx[idx]];
            }
            s
        })
    }

    /// y = Aᵀ x (sequential; only used by the projection-stability probe).
    pub fn matvec_transpose(&self, x: &[f64], n_cols: usize) -> Vec<f64> {
        let mut y = vec![0.0; n_cols];
        for i in 0..self.n {
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                y[self.col_idx[idx]] += self.values[idx] * x[i];
            }
        }
        y
    }

    /// max |A_ij − A_ji| over stored entries.
    pub fn symmetry_defect(&self) -> f64 {
        let mut defect: f64 = 0.0;
        for i in 0..self.n {
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[idx];
                defect = defect.max((self.values[idx] - self.get(j, i)).abs());
            }
        }
        defect
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// alpha·A + beta·B for operators with identical sparsity patterns.
    pub fn linear_combination(
        alpha: f64,
        a: &SparseOperator,
        beta: f64,
        b: &SparseOperator,
    ) -> SparseOperator {
        assert_eq!(a.row_ptr, b.row_ptr, "sparsity patterns differ");
        assert_eq!(a.col_idx, b.col_idx, "sparsity patterns differ");
        SparseOperator {
            n: a.n,
            row_ptr: a.row_ptr.clone(),
            col_idx: a.col_idx.clone(),
            values: a
                .values
                .iter()
                .zip(&b.values)
                .map(|(x, y)| alpha * x + beta * y)
                .collect(),
        }
    }

    /// Build from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n_rows: usize, triplets: &mut [(usize, usize, f64)]) -> SparseOperator {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let mut pos = 0;
        for i in 0..n_rows {
            while pos < triplets.len() && triplets[pos].0 == i {
                let j = triplets[pos].1;
                let mut v = 0.0;
                while pos < triplets.len() && triplets[pos].0 == i && triplets[pos].1 == j {
                    v += triplets[pos].2;
                    pos += 1;
                }
                col_idx.push(j);
                values.push(v);
            }
            row_ptr[i + 1] = col_idx.len();
        }
        SparseOperator {
            n: n_rows,
            row_ptr,
            col_idx,
            values,
        }
    }
}

/// The dof-adjacency sparsity pattern shared by mass and stiffness.
fn dof_pattern(space: &FeSpace) -> (Vec<usize>, Vec<usize>) {
    let n = space.n_dofs();
    let mesh = space.mesh();
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for k in 0..mesh.n_cells() {
        let cell = mesh.cell(k);
        for &vi in cell {
            if let Some(di) = space.dof_of_vertex(vi) {
                for &vj in cell {
                    if let Some(dj) = space.dof_of_vertex(vj) {
                        neighbors[di].push(dj);
                    }
                }
            }
        }
    }
    let mut row_ptr = vec![0usize; n + 1];
    let mut col_idx = Vec::new();
    for (i, nb) in neighbors.iter_mut().enumerate() {
        nb.sort_unstable();
        nb.dedup();
        col_idx.extend_from_slice(nb);
        row_ptr[i + 1] = col_idx.len();
    }
    (row_ptr, col_idx)
}

/// Local (d+1)×(d+1) element matrix.
type LocalMatrix = [[f64; 3]; 3];

fn local_stiffness(mesh: &Mesh, k: usize) -> LocalMatrix {
    let grads = mesh.grad_barycentric(k);
    let measure = mesh.cell_measure(k);
    let n = mesh.dim() + 1;
    let mut m = [[0.0; 3]; 3];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = measure * (grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1]);
        }
    }
    m
}

pub(crate) fn local_mass(mesh: &Mesh, k: usize) -> LocalMatrix {
    let measure = mesh.cell_measure(k);
    let n = mesh.dim() + 1;
    // ∫_K λ_i λ_j = |K| (1 + δ_ij) / ((d+1)(d+2))
    let scale = measure / ((n * (n + 1)) as f64);
    let mut m = [[0.0; 3]; 3];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = scale * if i == j { 2.0 } else { 1.0 };
        }
    }
    m
}

fn assemble(
    space: &FeSpace,
    local: impl Fn(&Mesh, usize) -> LocalMatrix + Sync + Send,
) -> SparseOperator {
    let mesh = space.mesh();
    let (row_ptr, col_idx) = dof_pattern(space);
    let mut values = vec![0.0; col_idx.len()];
    let locals: Vec<LocalMatrix> = map_indexed(mesh.n_cells(), |k| local(mesh, k));
    let n_loc = mesh.dim() + 1;
    for (k, loc) in locals.iter().enumerate() {
        let cell = mesh.cell(k);
        for i in 0..n_loc {
            let Some(di) = space.dof_of_vertex(cell[i]) else {
                continue;
            };
            for j in 0..n_loc {
                let Some(dj) = space.dof_of_vertex(cell[j]) else {
                    continue;
                };
                let range = row_ptr[di]..row_ptr[di + 1];
                let pos = range.start + col_idx[range].binary_search(&dj).unwrap();
                values[pos] += loc[i][j];
            }
        }
    }
    SparseOperator {
        n: space.n_dofs(),
        row_ptr,
        col_idx,
        values,
    }
}

/// Stiffness matrix A_ij = ∫_Ω ∇φ_j·∇φ_i.
pub fn assemble_stiffness(space: &FeSpace) -> SparseOperator {
    assemble(space, local_stiffness)
}

/// Mass matrix M_ij = ∫_Ω φ_j φ_i.
pub fn assemble_mass(space: &FeSpace) -> SparseOperator {
    assemble(space, local_mass)
}

/// Load vector b_i = ∫_Ω g φ_i for analytic `g`, using the given rule.
pub fn assemble_load_analytic(
    space: &FeSpace,
    rule: &QuadratureRule,
    g: impl Fn([f64; 2]) -> f64 + Sync + Send,
) -> Vec<f64> {
    let mesh = space.mesh();
    let n_loc = mesh.dim() + 1;
    let per_cell: Vec<[f64; 3]> = map_indexed(mesh.n_cells(), |k| {
        let scale = mesh.cell_measure(k) / reference_measure(mesh.dim());
        let mut b = [0.0; 3];
        for (p, &w) in rule.points.iter().zip(&rule.weights) {
            let x = mesh.point_from_barycentric(k, p);
            let gv = g(x);
            for (i, bi) in b.iter_mut().enumerate().take(n_loc) {
                *bi += w * scale * gv * p[i];
            }
        }
        b
    });
    let mut b = vec![0.0; space.n_dofs()];
    for (k, loc) in per_cell.iter().enumerate() {
        for (i, &v) in mesh.cell(k).iter().enumerate() {
            if let Some(d) = space.dof_of_vertex(v) {
                b[d] += loc[i];
            }
        }
    }
    b
}

pub(crate) fn reference_measure(dim: usize) -> f64 {
    match dim {
        1 => 1.0,
        _ => 0.5,
    }
}

/// Elementwise-P1 field, stored as per-cell vertex values (no continuity).
pub type BrokenP1 = Vec<[f64; 3]>;

/// Per-cell L2 projection of `g` onto broken P1.
pub fn project_broken_p1(
    mesh: &Mesh,
    rule: &QuadratureRule,
    g: impl Fn([f64; 2]) -> f64 + Sync + Send,
) -> BrokenP1 {
    let n_loc = mesh.dim() + 1;
    map_indexed(mesh.n_cells(), |k| {
        let scale = mesh.cell_measure(k) / reference_measure(mesh.dim());
        let mut rhs = [0.0; 3];
        for (p, &w) in rule.points.iter().zip(&rule.weights) {
            let x = mesh.point_from_barycentric(k, p);
            let gv = g(x);
            for (i, ri) in rhs.iter_mut().enumerate().take(n_loc) {
                *ri += w * scale * gv * p[i];
            }
        }
        let m = local_mass(mesh, k);
        solve_local(&m, &rhs, n_loc)
    })
}

/// Load vector b_i = (g_h, φ_i) for broken-P1 data; exact.
pub fn assemble_load_broken(space: &FeSpace, data: &BrokenP1) -> Vec<f64> {
    let mesh = space.mesh();
    let n_loc = mesh.dim() + 1;
    let mut b = vec![0.0; space.n_dofs()];
    for k in 0..mesh.n_cells() {
        let m = local_mass(mesh, k);
        let vals = data[k];
        for (i, &v) in mesh.cell(k).iter().enumerate() {
            if let Some(d) = space.dof_of_vertex(v) {
                let mut s = 0.0;
                for j in 0..n_loc {
                    s += m[i][j] * vals[j];
                }
                b[d] += s;
            }
        }
    }
    b
}

/// Value of a broken-P1 field at barycentric coordinates of cell `k`.
pub fn broken_value(data: &BrokenP1, dim: usize, k: usize, bary: &[f64; 3]) -> f64 {
    (0..dim + 1).map(|i| data[k][i] * bary[i]).sum()
}

fn solve_local(m: &LocalMatrix, rhs: &[f64; 3], n: usize) -> [f64; 3] {
    // tiny dense solve with partial pivoting
    let mut a = [[0.0f64; 4]; 3];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = m[i][j];
        }
        a[i][n] = rhs[i];
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            for j in col..=n {
                a[row][j] -= f * a[col][j];
            }
        }
    }
    let mut x = [0.0; 3];
    for col in (0..n).rev() {
        let mut s = a[col][n];
        for j in (col + 1)..n {
            s -= a[col][j] * x[j];
        }
        x[col] = s / a[col][col];
    }
    x
}

/// Outcome of a conjugate gradient solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

pub const DEFAULT_CG_TOL: f64 = 1e-12;

/// Jacobi-preconditioned conjugate gradients for SPD operators. The relative
/// residual is measured against ‖rhs‖₂; iteration order is fixed, so the
/// result does not depend on the thread count.
pub fn solve_spd(
    op: &SparseOperator,
    rhs: &[f64],
    tol: f64,
    max_iters: Option<usize>,
) -> Result<Vec<f64>> {
    solve_spd_with_stats(op, rhs, tol, max_iters).map(|(x, _)| x)
}

pub fn solve_spd_with_stats(
    op: &SparseOperator,
    rhs: &[f64],
    tol: f64,
    max_iters: Option<usize>,
) -> Result<(Vec<f64>, SolveStats)> {
    let n = op.dimension();
    assert_eq!(rhs.len(), n);
    let b_norm = norm(rhs);
    if b_norm == 0.0 || n == 0 {
        return Ok((
            vec![0.0; n],
            SolveStats {
                iterations: 0,
                relative_residual: 0.0,
            },
        ));
    }
    let max_iters = max_iters.unwrap_or_else(|| 10 * n.max(10));
    let dinv: Vec<f64> = op.diagonal().iter().map(|&d| 1.0 / d).collect();
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut iterations = 0;
    let mut res = norm(&r) / b_norm;
    while res > tol && iterations < max_iters {
        let ap = op.matvec(&p);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * dinv[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        iterations += 1;
        res = norm(&r) / b_norm;
    }
    if res > tol {
        return Err(Error::SolveFailure {
            context: "conjugate gradients".into(),
            residual: res,
            iterations,
            tol,
        });
    }
    Ok((
        x,
        SolveStats {
            iterations,
            relative_residual: res,
        },
    ))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// L2 projection Π_h g onto the conforming space: solves M x = b with
/// b_i = ∫ g φ_i.
pub fn l2_project(
    space: &FeSpace,
    rule: &QuadratureRule,
    g: impl Fn([f64; 2]) -> f64 + Sync + Send,
    tol: f64,
) -> Result<Vec<f64>> {
    let mass = assemble_mass(space);
    let b = assemble_load_analytic(space, rule, g);
    solve_spd(&mass, &b, tol, None)
}

/// Lower bound for the H¹-stability constant C_Π of the L2 projection,
/// obtained by maximizing ‖∇Π_h v‖/‖∇v‖ over the space built on the
/// `n_refinements`-times uniformly refined mesh (power iteration on the
/// induced generalized eigenproblem). Diagnostic only; no estimator consumes
/// this value.
pub fn estimate_projection_stability(space: &FeSpace, n_refinements: usize) -> Result<f64> {
    if n_refinements == 0 {
        return Err(Error::invalid("n_refinements must be at least 1"));
    }
    if space.n_dofs() == 0 {
        return Err(Error::invalid("space has no interior dofs"));
    }
    // refine, composing parent maps down to the coarse mesh
    let mut fine_mesh = Arc::new(space.mesh().clone());
    let mut ancestor: Vec<usize> = (0..fine_mesh.n_cells()).collect();
    for _ in 0..n_refinements {
        let (refined, parents) = refine_with_parents(&fine_mesh);
        ancestor = parents.iter().map(|&p| ancestor[p]).collect();
        fine_mesh = Arc::new(refined);
    }
    let fine = FeSpace::p1(fine_mesh);

    let mass_c = assemble_mass(space);
    let stiff_c = assemble_stiffness(space);
    let stiff_f = assemble_stiffness(&fine);

    // cross mass C[i_coarse][j_fine] = (φ_i^c, φ_j^f)
    let coarse_mesh = space.mesh();
    let fmesh = fine.mesh();
    let n_loc = fmesh.dim() + 1;
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    for kf in 0..fmesh.n_cells() {
        let kc = ancestor[kf];
        let m_loc = local_mass(fmesh, kf);
        let fine_cell = fmesh.cell(kf);
        let coarse_cell = coarse_mesh.cell(kc);
        // coarse hat values at the fine cell's vertices
        let mut hat_vals = [[0.0f64; 3]; 3]; // [coarse local][fine local]
        for (bf, &vf) in fine_cell.iter().enumerate() {
            let bary = coarse_mesh.barycentric(kc, fmesh.vertex(vf));
            for (ac, row) in hat_vals.iter_mut().enumerate().take(n_loc) {
                row[bf] = bary[ac];
            }
        }
        for (ac, &vc) in coarse_cell.iter().enumerate() {
            let Some(di) = space.dof_of_vertex(vc) else {
                continue;
            };
            for (bf, &vf) in fine_cell.iter().enumerate() {
                let Some(dj) = fine.dof_of_vertex(vf) else {
                    continue;
                };
                let mut s = 0.0;
                for m in 0..n_loc {
                    s += hat_vals[ac][m] * m_loc[m][bf];
                }
                triplets.push((di, dj, s));
            }
        }
    }
    let cross = SparseOperator::from_triplets(space.n_dofs(), &mut triplets);

    // power iteration on  G v = θ A_f v,  G = Cᵀ M_c⁻¹ A_c M_c⁻¹ C
    let m = fine.n_dofs();
    let mut v: Vec<f64> = {
        // fixed-seed LCG start vector
        let mut state: u64 = 0x9e3779b97f4a7c15;
        (0..m)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    };
    let cg_tol = 1e-13;
    let mut theta_prev = 0.0;
    let mut flat_streak = 0;
    for iter in 0..1000 {
        // normalize in the A_f inner product
        let av = stiff_f.matvec(&v);
        let nrm = dot(&v, &av).sqrt();
        for x in v.iter_mut() {
            *x /= nrm;
        }
        let y = cross.matvec(&v);
        let z = solve_spd(&mass_c, &y, cg_tol, None)?;
        let t = stiff_c.matvec(&z);
        let s = solve_spd(&mass_c, &t, cg_tol, None)?;
        let g = cross.matvec_transpose(&s, m);
        let theta = dot(&v, &g);
        if iter > 3 && (theta - theta_prev).abs() <= 1e-7 * theta.abs().max(1e-30) {
            flat_streak += 1;
            if flat_streak >= 3 {
                return Ok(theta.max(0.0).sqrt());
            }
        } else {
            flat_streak = 0;
        }
        theta_prev = theta;
        v = solve_spd(&stiff_f, &g, cg_tol, None)?;
    }
    Err(Error::PowerIterationStagnated {
        estimate: theta_prev.max(0.0).sqrt(),
    })
}
