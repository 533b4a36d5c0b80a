//! Simplicial meshes: intervals in 1D, triangles in 2D.
//!
//! Connectivity is stored flat (`dim + 1` vertex indices per cell). Faces are
//! vertices in 1D and edges in 2D; local face `i` of a cell is the face
//! opposite local vertex `i`. Boundary flags are always inferred from face
//! ownership (a face owned by exactly one cell is a boundary face), never
//! read from input.
//!
//! Meshes are immutable after construction and safe to share across threads.

use crate::{Error, Result};

/// Conforming simplicial mesh.
#[derive(Debug, Clone)]
pub struct Mesh {
    dim: usize,
    vertices: Vec<[f64; 2]>,
    cell_vertices: Vec<usize>,
    /// Canonical faces: 1D `[v, v]`, 2D `[lo, hi]` with `lo < hi`.
    faces: Vec<[usize; 2]>,
    /// Per cell, `dim + 1` face ids; local face `i` is opposite local vertex `i`.
    cell_faces: Vec<usize>,
    face_cells: Vec<(usize, Option<usize>)>,
    boundary_vertex: Vec<bool>,
    boundary_face: Vec<bool>,
}

/// The cells sharing one vertex, i.e. the support of its hat function.
#[derive(Debug, Clone)]
pub struct VertexPatch {
    pub vertex: usize,
    /// Cell indices in ascending order.
    pub cells: Vec<usize>,
    /// Max pairwise distance over the patch vertex set.
    pub diameter: f64,
    pub is_interior: bool,
}

/// Diagnostic mesh quality numbers.
#[derive(Debug, Clone)]
pub struct MeshQualityReport {
    pub h_max: f64,
    /// θ = max_K h_K / ρ_K; ρ_K is h_K/2 in 1D and the inradius for triangles.
    pub shape_regularity: f64,
    pub patch_diameters: Vec<f64>,
}

impl Mesh {
    /// Build a mesh from raw vertex coordinates and flat cell connectivity,
    /// validating nondegeneracy and face conformity. Cell orientation is
    /// normalized (ascending x in 1D, counterclockwise in 2D).
    pub fn new(dim: usize, vertices: Vec<[f64; 2]>, mut cell_vertices: Vec<usize>) -> Result<Mesh> {
        if dim != 1 && dim != 2 {
            return Err(Error::invalid(format!("unsupported dimension {dim}")));
        }
        let nv_per_cell = dim + 1;
        if cell_vertices.len() % nv_per_cell != 0 {
            return Err(Error::invalid("cell connectivity length mismatch"));
        }
        let n_cells = cell_vertices.len() / nv_per_cell;
        if n_cells == 0 {
            return Err(Error::invalid("mesh has no cells"));
        }
        for &v in &cell_vertices {
            if v >= vertices.len() {
                return Err(Error::invalid(format!("vertex index {v} out of range")));
            }
        }

        // Normalize orientation and reject degenerate cells.
        for k in 0..n_cells {
            let c = &mut cell_vertices[k * nv_per_cell..(k + 1) * nv_per_cell];
            match dim {
                1 => {
                    if vertices[c[0]][0] > vertices[c[1]][0] {
                        c.swap(0, 1);
                    }
                    if vertices[c[1]][0] - vertices[c[0]][0] <= 0.0 {
                        return Err(Error::invalid(format!("cell {k} has nonpositive length")));
                    }
                }
                _ => {
                    let a = signed_area(&vertices, c[0], c[1], c[2]);
                    if a < 0.0 {
                        c.swap(1, 2);
                    }
                    let a = signed_area(&vertices, c[0], c[1], c[2]);
                    if a <= 0.0 {
                        return Err(Error::invalid(format!("cell {k} is degenerate")));
                    }
                }
            }
        }

        // Enumerate faces in first-encounter order over cells.
        let mut face_ids: std::collections::HashMap<[usize; 2], usize> =
            std::collections::HashMap::new();
        let mut faces: Vec<[usize; 2]> = Vec::new();
        let mut face_cells: Vec<(usize, Option<usize>)> = Vec::new();
        let mut cell_faces = vec![0usize; n_cells * nv_per_cell];
        for k in 0..n_cells {
            let c = &cell_vertices[k * nv_per_cell..(k + 1) * nv_per_cell];
            for i in 0..nv_per_cell {
                let key = match dim {
                    1 => {
                        // face opposite local vertex i is the other vertex
                        let v = c[1 - i];
                        [v, v]
                    }
                    _ => {
                        let (a, b) = (c[(i + 1) % 3], c[(i + 2) % 3]);
                        [a.min(b), a.max(b)]
                    }
                };
                let id = *face_ids.entry(key).or_insert_with(|| {
                    faces.push(key);
                    face_cells.push((k, None));
                    faces.len() - 1
                });
                cell_faces[k * nv_per_cell + i] = id;
                if face_cells[id].0 != k {
                    match face_cells[id].1 {
                        None => face_cells[id].1 = Some(k),
                        Some(other) if other == k => {}
                        Some(_) => {
                            return Err(Error::invalid(format!(
                                "face {:?} shared by more than two cells",
                                key
                            )))
                        }
                    }
                }
            }
        }

        let boundary_face: Vec<bool> = face_cells.iter().map(|fc| fc.1.is_none()).collect();
        let mut boundary_vertex = vec![false; vertices.len()];
        for (f, face) in faces.iter().enumerate() {
            if boundary_face[f] {
                boundary_vertex[face[0]] = true;
                boundary_vertex[face[1]] = true;
            }
        }

        Ok(Mesh {
            dim,
            vertices,
            cell_vertices,
            faces,
            cell_faces,
            face_cells,
            boundary_vertex,
            boundary_face,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cell_vertices.len() / (self.dim + 1)
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn vertex(&self, v: usize) -> [f64; 2] {
        self.vertices[v]
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    /// Vertex indices of cell `k` (`dim + 1` entries).
    pub fn cell(&self, k: usize) -> &[usize] {
        let n = self.dim + 1;
        &self.cell_vertices[k * n..(k + 1) * n]
    }

    /// Face ids of cell `k`; local face `i` is opposite local vertex `i`.
    pub fn cell_face_ids(&self, k: usize) -> &[usize] {
        let n = self.dim + 1;
        &self.cell_faces[k * n..(k + 1) * n]
    }

    /// Canonical vertex pair of a face (`[v, v]` in 1D).
    pub fn face(&self, f: usize) -> [usize; 2] {
        self.faces[f]
    }

    pub fn face_cells(&self, f: usize) -> (usize, Option<usize>) {
        self.face_cells[f]
    }

    pub fn is_boundary_face(&self, f: usize) -> bool {
        self.boundary_face[f]
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.boundary_vertex[v]
    }

    /// Neighbor of cell `k` across its local face `i`, if any.
    pub fn neighbor(&self, k: usize, i: usize) -> Option<usize> {
        let f = self.cell_face_ids(k)[i];
        let (c0, c1) = self.face_cells[f];
        if c0 == k {
            c1
        } else {
            Some(c0)
        }
    }

    /// Cell measure (length or area).
    pub fn cell_measure(&self, k: usize) -> f64 {
        let c = self.cell(k);
        match self.dim {
            1 => self.vertices[c[1]][0] - self.vertices[c[0]][0],
            _ => signed_area(&self.vertices, c[0], c[1], c[2]),
        }
    }

    /// Cell diameter h_K.
    pub fn cell_diameter(&self, k: usize) -> f64 {
        let c = self.cell(k);
        match self.dim {
            1 => self.cell_measure(k),
            _ => {
                let mut h: f64 = 0.0;
                for i in 0..3 {
                    for j in (i + 1)..3 {
                        h = h.max(dist(self.vertices[c[i]], self.vertices[c[j]]));
                    }
                }
                h
            }
        }
    }

    /// Inscribed-ball radius ρ_K: h_K/2 in 1D, the inradius 2|K|/perimeter for
    /// triangles.
    pub fn cell_inradius(&self, k: usize) -> f64 {
        let c = self.cell(k);
        match self.dim {
            1 => 0.5 * self.cell_measure(k),
            _ => {
                let per: f64 = (0..3)
                    .map(|i| dist(self.vertices[c[i]], self.vertices[c[(i + 1) % 3]]))
                    .sum();
                2.0 * self.cell_measure(k) / per
            }
        }
    }

    pub fn domain_measure(&self) -> f64 {
        (0..self.n_cells()).map(|k| self.cell_measure(k)).sum()
    }

    pub fn h_max(&self) -> f64 {
        (0..self.n_cells())
            .map(|k| self.cell_diameter(k))
            .fold(0.0, f64::max)
    }

    /// Gradients of the barycentric coordinates on cell `k` (constant).
    pub fn grad_barycentric(&self, k: usize) -> [[f64; 2]; 3] {
        let c = self.cell(k);
        match self.dim {
            1 => {
                let h = self.cell_measure(k);
                [[-1.0 / h, 0.0], [1.0 / h, 0.0], [0.0, 0.0]]
            }
            _ => {
                let p: Vec<[f64; 2]> = c.iter().map(|&v| self.vertices[v]).collect();
                let two_a = 2.0 * self.cell_measure(k);
                [
                    [(p[1][1] - p[2][1]) / two_a, (p[2][0] - p[1][0]) / two_a],
                    [(p[2][1] - p[0][1]) / two_a, (p[0][0] - p[2][0]) / two_a],
                    [(p[0][1] - p[1][1]) / two_a, (p[1][0] - p[0][0]) / two_a],
                ]
            }
        }
    }

    /// Barycentric coordinates of `x` with respect to cell `k`.
    pub fn barycentric(&self, k: usize, x: [f64; 2]) -> [f64; 3] {
        let c = self.cell(k);
        match self.dim {
            1 => {
                let (a, b) = (self.vertices[c[0]][0], self.vertices[c[1]][0]);
                let s = (x[0] - a) / (b - a);
                [1.0 - s, s, 0.0]
            }
            _ => {
                let a = self.cell_measure(k);
                let p: Vec<[f64; 2]> = c.iter().map(|&v| self.vertices[v]).collect();
                let l0 = signed_area_pts(x, p[1], p[2]) / a;
                let l1 = signed_area_pts(p[0], x, p[2]) / a;
                [l0, l1, 1.0 - l0 - l1]
            }
        }
    }

    /// Physical point of barycentric coordinates on cell `k`.
    pub fn point_from_barycentric(&self, k: usize, bary: &[f64; 3]) -> [f64; 2] {
        let c = self.cell(k);
        let mut x = [0.0, 0.0];
        for (i, &v) in c.iter().enumerate() {
            x[0] += bary[i] * self.vertices[v][0];
            x[1] += bary[i] * self.vertices[v][1];
        }
        x
    }

    /// First cell containing `x` (within a relative tolerance), scanning in
    /// cell order.
    pub fn find_cell(&self, x: [f64; 2]) -> Option<usize> {
        let tol = 1e-12;
        (0..self.n_cells()).find(|&k| {
            let b = self.barycentric(k, x);
            b.iter().take(self.dim + 1).all(|&l| l >= -tol)
        })
    }

    /// Centroid of cell `k`.
    pub fn centroid(&self, k: usize) -> [f64; 2] {
        let c = self.cell(k);
        let n = (self.dim + 1) as f64;
        let mut x = [0.0, 0.0];
        for &v in c {
            x[0] += self.vertices[v][0] / n;
            x[1] += self.vertices[v][1] / n;
        }
        x
    }

    /// Unit normal of face `f` under the global convention (1D: +x̂; 2D: the
    /// canonical edge direction rotated by −90°). Both adjacent cells see the
    /// same normal, which is what H(div) dof sharing relies on.
    pub fn face_normal(&self, f: usize) -> [f64; 2] {
        match self.dim {
            1 => [1.0, 0.0],
            _ => {
                let [a, b] = self.faces[f];
                let (pa, pb) = (self.vertices[a], self.vertices[b]);
                let t = [pb[0] - pa[0], pb[1] - pa[1]];
                let len = (t[0] * t[0] + t[1] * t[1]).sqrt();
                [t[1] / len, -t[0] / len]
            }
        }
    }

    pub fn face_measure(&self, f: usize) -> f64 {
        match self.dim {
            1 => 1.0,
            _ => {
                let [a, b] = self.faces[f];
                dist(self.vertices[a], self.vertices[b])
            }
        }
    }
}

fn signed_area(vertices: &[[f64; 2]], a: usize, b: usize, c: usize) -> f64 {
    signed_area_pts(vertices[a], vertices[b], vertices[c])
}

fn signed_area_pts(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Uniform 1D mesh with `n_cells` cells on `[a, b]`.
pub fn build_interval_mesh(n_cells: usize, domain: (f64, f64)) -> Result<Mesh> {
    if n_cells == 0 {
        return Err(Error::invalid("n_cells must be at least 1"));
    }
    let (a, b) = domain;
    if !(b > a) {
        return Err(Error::invalid("domain bounds must satisfy a < b"));
    }
    let h = (b - a) / n_cells as f64;
    let vertices: Vec<[f64; 2]> = (0..=n_cells).map(|i| [a + i as f64 * h, 0.0]).collect();
    let mut cells = Vec::with_capacity(2 * n_cells);
    for i in 0..n_cells {
        cells.push(i);
        cells.push(i + 1);
    }
    Mesh::new(1, vertices, cells)
}

/// Structured triangulation of the unit square: `n × n` squares, each split
/// into two triangles by the diagonal from the lower-left to the upper-right
/// corner.
pub fn build_unit_square_mesh(n_per_side: usize) -> Result<Mesh> {
    if n_per_side == 0 {
        return Err(Error::invalid("n_per_side must be at least 1"));
    }
    let n = n_per_side;
    let h = 1.0 / n as f64;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            vertices.push([i as f64 * h, j as f64 * h]);
        }
    }
    let vid = |i: usize, j: usize| j * (n + 1) + i;
    let mut cells = Vec::with_capacity(6 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (ll, lr, ur, ul) = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1));
            cells.extend_from_slice(&[ll, lr, ur]);
            cells.extend_from_slice(&[ll, ur, ul]);
        }
    }
    Mesh::new(2, vertices, cells)
}

/// Uniform refinement: each interval is bisected, each triangle split into
/// four by its edge midpoints. Conformity and shape regularity are preserved.
pub fn uniform_refine(mesh: &Mesh) -> Mesh {
    refine_with_parents(mesh).0
}

/// Uniform refinement that also reports, for each child cell, the index of
/// its parent in the input mesh.
pub fn refine_with_parents(mesh: &Mesh) -> (Mesh, Vec<usize>) {
    let mut vertices = mesh.vertices.to_vec();
    let mut cells = Vec::new();
    let mut parents = Vec::new();
    match mesh.dim {
        1 => {
            for k in 0..mesh.n_cells() {
                let c = mesh.cell(k);
                let m = vertices.len();
                let mid = [0.5 * (mesh.vertex(c[0])[0] + mesh.vertex(c[1])[0]), 0.0];
                vertices.push(mid);
                cells.extend_from_slice(&[c[0], m]);
                cells.extend_from_slice(&[m, c[1]]);
                parents.extend_from_slice(&[k, k]);
            }
        }
        _ => {
            // One new vertex per edge, id = n_vertices + edge id.
            let base = vertices.len();
            for f in 0..mesh.n_faces() {
                let [a, b] = mesh.face(f);
                let (pa, pb) = (mesh.vertex(a), mesh.vertex(b));
                vertices.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
            }
            for k in 0..mesh.n_cells() {
                let c = mesh.cell(k);
                let fs = mesh.cell_face_ids(k);
                // midpoint m[i] sits on the face opposite vertex i
                let m = [base + fs[0], base + fs[1], base + fs[2]];
                cells.extend_from_slice(&[c[0], m[2], m[1]]);
                cells.extend_from_slice(&[c[1], m[0], m[2]]);
                cells.extend_from_slice(&[c[2], m[1], m[0]]);
                cells.extend_from_slice(&[m[0], m[1], m[2]]);
                parents.extend_from_slice(&[k, k, k, k]);
            }
        }
    }
    let refined = Mesh::new(mesh.dim, vertices, cells).expect("refinement preserves validity");
    (refined, parents)
}

/// One patch per vertex; each cell appears in exactly `dim + 1` patches.
pub fn vertex_patches(mesh: &Mesh) -> Vec<VertexPatch> {
    let mut cells_of: Vec<Vec<usize>> = vec![Vec::new(); mesh.n_vertices()];
    for k in 0..mesh.n_cells() {
        for &v in mesh.cell(k) {
            cells_of[v].push(k);
        }
    }
    cells_of
        .into_iter()
        .enumerate()
        .map(|(v, cells)| {
            let mut verts: Vec<usize> = cells.iter().flat_map(|&k| mesh.cell(k).to_vec()).collect();
            verts.sort_unstable();
            verts.dedup();
            let mut diameter: f64 = 0.0;
            for i in 0..verts.len() {
                for j in (i + 1)..verts.len() {
                    diameter = diameter.max(dist(mesh.vertex(verts[i]), mesh.vertex(verts[j])));
                }
            }
            VertexPatch {
                vertex: v,
                cells,
                diameter,
                is_interior: !mesh.is_boundary_vertex(v),
            }
        })
        .collect()
}

/// Quality metrics for diagnostics; no estimator consumes these numerically.
pub fn quality_report(mesh: &Mesh) -> MeshQualityReport {
    let h_max = mesh.h_max();
    let shape_regularity = (0..mesh.n_cells())
        .map(|k| mesh.cell_diameter(k) / mesh.cell_inradius(k))
        .fold(0.0, f64::max);
    let patch_diameters = vertex_patches(mesh).iter().map(|p| p.diameter).collect();
    MeshQualityReport {
        h_max,
        shape_regularity,
        patch_diameters,
    }
}

/// Parse the line-oriented mesh text format:
/// header `dim n_vertices n_cells`, then coordinate lines, then 0-based cell
/// connectivity lines. Boundary flags are inferred, never read.
pub fn parse_mesh_text(text: &str) -> Result<Mesh> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::MeshFormat("empty input".into()))?;
    let head: Vec<usize> = header
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::MeshFormat(format!("bad header token {t:?}")))
        })
        .collect::<Result<_>>()?;
    let [dim, n_vertices, n_cells] = head[..] else {
        return Err(Error::MeshFormat(
            "header must be `dim n_vertices n_cells`".into(),
        ));
    };
    let mut vertices = Vec::with_capacity(n_vertices);
    for i in 0..n_vertices {
        let line = lines
            .next()
            .ok_or_else(|| Error::MeshFormat(format!("missing vertex line {i}")))?;
        let coords: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::MeshFormat(format!("bad coordinate {t:?}")))
            })
            .collect::<Result<_>>()?;
        if coords.len() != dim {
            return Err(Error::MeshFormat(format!(
                "vertex line {i} has {} coordinates, expected {dim}",
                coords.len()
            )));
        }
        vertices.push([coords[0], if dim == 2 { coords[1] } else { 0.0 }]);
    }
    let mut cells = Vec::with_capacity(n_cells * (dim + 1));
    for k in 0..n_cells {
        let line = lines
            .next()
            .ok_or_else(|| Error::MeshFormat(format!("missing cell line {k}")))?;
        let ids: Vec<usize> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::MeshFormat(format!("bad vertex index {t:?}")))
            })
            .collect::<Result<_>>()?;
        if ids.len() != dim + 1 {
            return Err(Error::MeshFormat(format!(
                "cell line {k} has {} indices, expected {}",
                ids.len(),
                dim + 1
            )));
        }
        cells.extend_from_slice(&ids);
    }
    let mesh = Mesh::new(dim, vertices, cells)?;
    check_no_hanging_vertices(&mesh)?;
    Ok(mesh)
}

/// Serialize a mesh in the text format accepted by [`parse_mesh_text`].
pub fn mesh_to_text(mesh: &Mesh) -> String {
    let mut out = format!("{} {} {}\n", mesh.dim(), mesh.n_vertices(), mesh.n_cells());
    for v in 0..mesh.n_vertices() {
        let p = mesh.vertex(v);
        if mesh.dim() == 1 {
            out.push_str(&format!("{:.17e}\n", p[0]));
        } else {
            out.push_str(&format!("{:.17e} {:.17e}\n", p[0], p[1]));
        }
    }
    for k in 0..mesh.n_cells() {
        let ids: Vec<String> = mesh.cell(k).iter().map(|v| v.to_string()).collect();
        out.push_str(&ids.join(" "));
        out.push('\n');
    }
    out
}

/// Reject vertices lying strictly inside another cell's face (hanging nodes).
fn check_no_hanging_vertices(mesh: &Mesh) -> Result<()> {
    for v in 0..mesh.n_vertices() {
        let p = mesh.vertex(v);
        for f in 0..mesh.n_faces() {
            let [a, b] = mesh.face(f);
            if a == v || b == v || a == b {
                continue;
            }
            let (pa, pb) = (mesh.vertex(a), mesh.vertex(b));
            let len = dist(pa, pb);
            let cross = (pb[0] - pa[0]) * (p[1] - pa[1]) - (pb[1] - pa[1]) * (p[0] - pa[0]);
            if cross.abs() > 1e-12 * len * len {
                continue;
            }
            let t =
                ((p[0] - pa[0]) * (pb[0] - pa[0]) + (p[1] - pa[1]) * (pb[1] - pa[1])) / (len * len);
            if t > 1e-12 && t < 1.0 - 1e-12 {
                return Err(Error::MeshFormat(format!(
                    "vertex {v} hangs on face ({a}, {b}); mesh is not conforming"
                )));
            }
        }
    }
    Ok(())
}
