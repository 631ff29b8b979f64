//! Structured P1 triangulations of a rectangle, scalar H¹/L² forms and the
//! plane-strain elasticity state equation with a phase-dependent stiffness.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VmptError};
use crate::sparse::{dot, CholeskyFactor, CsrMatrix, Pattern, SymbolicCholesky};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Edge {
    Left,
    Right,
    Bottom,
    Top,
}

/// Constant surface load `g` on the part `[from, to]` of one boundary edge,
/// parametrized by the tangential coordinate (y on vertical edges, x on
/// horizontal ones).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TractionPatch {
    pub edge: Edge,
    pub from: f64,
    pub to: f64,
    pub g: [f64; 2],
}

/// Boundary tags: the clamped edge Γ_D and the loaded patch Γ_g.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub dirichlet: Edge,
    pub traction: TractionPatch,
}

impl BoundarySpec {
    /// Left edge clamped; downward unit load on a segment of length
    /// `load_length` centered on the right edge.
    pub fn cantilever(ly: f64, load_length: f64) -> Self {
        let mid = 0.5 * ly;
        Self {
            dirichlet: Edge::Left,
            traction: TractionPatch {
                edge: Edge::Right,
                from: mid - 0.5 * load_length,
                to: mid + 0.5 * load_length,
                g: [0.0, -1.0],
            },
        }
    }
}

/// Per-triangle P1 data: area and the constant gradients of the three
/// barycentric basis functions.
#[derive(Debug, Clone, Copy)]
pub struct TriGeometry {
    pub area: f64,
    pub grad: [[f64; 2]; 3],
}

/// Uniform triangulation of `[0, lx] × [0, ly]`: `nx × ny` rectangular cells,
/// each split along its (0,0)-(1,1) diagonal.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub geometry: Vec<TriGeometry>,
    pub boundary: BoundarySpec,
    dirichlet_nodes: Vec<bool>,
}

impl TriMesh {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64, boundary: BoundarySpec) -> Result<Self> {
        if nx == 0 || ny == 0 || !(lx > 0.0) || !(ly > 0.0) || !lx.is_finite() || !ly.is_finite() {
            return Err(VmptError::DegenerateMesh(format!(
                "need positive cell counts and extents, got {nx}x{ny} on {lx}x{ly}"
            )));
        }
        let node = |i: usize, j: usize| j * (nx + 1) + i;
        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push([lx * i as f64 / nx as f64, ly * j as f64 / ny as f64]);
            }
        }
        let mut triangles = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let (v00, v10, v01, v11) = (node(i, j), node(i + 1, j), node(i, j + 1), node(i + 1, j + 1));
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }
        let geometry = triangles
            .iter()
            .map(|t| tri_geometry([vertices[t[0]], vertices[t[1]], vertices[t[2]]]))
            .collect::<Result<Vec<_>>>()?;

        let mut mesh = Self {
            nx,
            ny,
            lx,
            ly,
            vertices,
            triangles,
            geometry,
            boundary,
            dirichlet_nodes: Vec::new(),
        };
        mesh.dirichlet_nodes = (0..mesh.num_nodes()).map(|_| false).collect();
        for v in mesh.edge_nodes(boundary.dirichlet) {
            mesh.dirichlet_nodes[v] = true;
        }
        mesh.validate_boundary()?;
        Ok(mesh)
    }

    /// Cantilever beam `[0, lx] × [0, ly]` with square cells of size `h`.
    pub fn cantilever(h: f64, lx: f64, ly: f64, load_length: f64) -> Result<Self> {
        let nx = (lx / h).round() as usize;
        let ny = (ly / h).round() as usize;
        if ((nx as f64) * h - lx).abs() > 1e-9 * lx || ((ny as f64) * h - ly).abs() > 1e-9 * ly {
            return Err(VmptError::DegenerateMesh(format!("h = {h} does not divide {lx} x {ly}")));
        }
        Self::new(nx, ny, lx, ly, BoundarySpec::cantilever(ly, load_length))
    }

    pub fn num_nodes(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }

    pub fn is_dirichlet(&self, node: usize) -> bool {
        self.dirichlet_nodes[node]
    }

    /// Nodes on one edge, ordered by the tangential coordinate.
    pub fn edge_nodes(&self, edge: Edge) -> Vec<usize> {
        let nx = self.nx;
        let node = |i: usize, j: usize| j * (nx + 1) + i;
        match edge {
            Edge::Left => (0..=self.ny).map(|j| node(0, j)).collect(),
            Edge::Right => (0..=self.ny).map(|j| node(nx, j)).collect(),
            Edge::Bottom => (0..=nx).map(|i| node(i, 0)).collect(),
            Edge::Top => (0..=nx).map(|i| node(i, self.ny)).collect(),
        }
    }

    fn tangential(&self, edge: Edge, v: usize) -> f64 {
        match edge {
            Edge::Left | Edge::Right => self.vertices[v][1],
            Edge::Bottom | Edge::Top => self.vertices[v][0],
        }
    }

    fn validate_boundary(&self) -> Result<()> {
        let t = &self.boundary.traction;
        if !(t.from < t.to) {
            return Err(VmptError::DegenerateMesh("traction patch has non-positive length".into()));
        }
        let touched = self.traction_nodes();
        if touched.iter().any(|&v| self.dirichlet_nodes[v]) {
            return Err(VmptError::DegenerateMesh("Dirichlet and traction boundaries intersect".into()));
        }
        Ok(())
    }

    fn traction_nodes(&self) -> Vec<usize> {
        let t = &self.boundary.traction;
        let nodes = self.edge_nodes(t.edge);
        let mut out = Vec::new();
        for w in nodes.windows(2) {
            let (sa, sb) = (self.tangential(t.edge, w[0]), self.tangential(t.edge, w[1]));
            if sb.min(t.to) - sa.max(t.from) > 0.0 {
                out.extend_from_slice(w);
            }
        }
        out.dedup();
        out
    }

    /// Consistent load vector `∫_{Γ_g} g·η` for the 2-component P1 space.
    pub fn load_vector(&self) -> Vec<f64> {
        let t = &self.boundary.traction;
        let mut f = vec![0.0; 2 * self.num_nodes()];
        for w in self.edge_nodes(t.edge).windows(2) {
            let (a, b) = (w[0], w[1]);
            let (sa, sb) = (self.tangential(t.edge, a), self.tangential(t.edge, b));
            let s0 = sa.max(t.from);
            let s1 = sb.min(t.to);
            if s1 <= s0 {
                continue;
            }
            let len = sb - sa;
            // exact integrals of the two hat functions over [s0, s1]
            let ia = ((sb - s0).powi(2) - (sb - s1).powi(2)) / (2.0 * len);
            let ib = ((s1 - sa).powi(2) - (s0 - sa).powi(2)) / (2.0 * len);
            for c in 0..2 {
                f[2 * a + c] += ia * t.g[c];
                f[2 * b + c] += ib * t.g[c];
            }
        }
        f
    }

    /// Pattern coupling nodes that share a triangle.
    pub fn scalar_pattern(&self) -> Arc<Pattern> {
        Arc::new(Pattern::from_elements(self.num_nodes(), self.triangles.iter().map(|t| &t[..])))
    }

    /// Centroid average of a nodal field on each triangle.
    pub fn centroid_values(&self, nodal: &[f64]) -> Vec<f64> {
        self.triangles.iter().map(|t| (nodal[t[0]] + nodal[t[1]] + nodal[t[2]]) / 3.0).collect()
    }

    /// Lumped weights `∫ N_i`, i.e. the row sums of the mass matrix.
    pub fn lumped_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.num_nodes()];
        for (t, g) in self.triangles.iter().zip(&self.geometry) {
            for &v in t {
                w[v] += g.area / 3.0;
            }
        }
        w
    }
}

fn tri_geometry(p: [[f64; 2]; 3]) -> Result<TriGeometry> {
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    if !(det > 0.0) {
        return Err(VmptError::DegenerateMesh(format!("triangle with signed area {}", 0.5 * det)));
    }
    let mut grad = [[0.0; 2]; 3];
    for k in 0..3 {
        let (a, b) = (p[(k + 1) % 3], p[(k + 2) % 3]);
        grad[k] = [(a[1] - b[1]) / det, (b[0] - a[0]) / det];
    }
    Ok(TriGeometry { area: 0.5 * det, grad })
}

/// Scalar P1 stiffness matrix `(∇p, ∇y)_{L²}`.
pub fn assemble_h1_form(mesh: &TriMesh) -> CsrMatrix {
    let mut a = CsrMatrix::zeros(mesh.scalar_pattern());
    let mut ke = [0.0; 9];
    for (t, g) in mesh.triangles.iter().zip(&mesh.geometry) {
        for i in 0..3 {
            for j in 0..3 {
                ke[3 * i + j] = g.area * (g.grad[i][0] * g.grad[j][0] + g.grad[i][1] * g.grad[j][1]);
            }
        }
        a.add_element(t, &ke);
    }
    a
}

/// Scalar P1 mass matrix `(p, y)_{L²}`, integrated exactly.
pub fn assemble_l2_form(mesh: &TriMesh) -> CsrMatrix {
    let mut a = CsrMatrix::zeros(mesh.scalar_pattern());
    for (t, g) in mesh.triangles.iter().zip(&mesh.geometry) {
        let d = g.area / 6.0;
        let o = g.area / 12.0;
        a.add_element(t, &[d, o, o, o, d, o, o, o, d]);
    }
    a
}

/// P1 stiffness and mass matrices on a uniform partition of `[0, length]`.
pub fn line_forms(nodes: usize, length: f64) -> (CsrMatrix, CsrMatrix) {
    assert!(nodes >= 2);
    let h = length / (nodes - 1) as f64;
    let elems: Vec<[usize; 2]> = (0..nodes - 1).map(|i| [i, i + 1]).collect();
    let pat = Arc::new(Pattern::from_elements(nodes, elems.iter().map(|e| &e[..])));
    let mut stiff = CsrMatrix::zeros(Arc::clone(&pat));
    let mut mass = CsrMatrix::zeros(pat);
    for e in &elems {
        stiff.add_element(e, &[1.0 / h, -1.0 / h, -1.0 / h, 1.0 / h]);
        mass.add_element(e, &[h / 3.0, h / 6.0, h / 6.0, h / 3.0]);
    }
    (stiff, mass)
}

/// Isotropic material given by Young's modulus and Poisson ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Isotropic {
    pub young: f64,
    pub poisson: f64,
}

impl Isotropic {
    /// Plane-strain constitutive matrix in Voigt notation (xx, yy, xy with
    /// engineering shear).
    pub fn plane_strain(&self) -> [[f64; 3]; 3] {
        let (e, nu) = (self.young, self.poisson);
        let s = e / ((1.0 + nu) * (1.0 - 2.0 * nu));
        [
            [s * (1.0 - nu), s * nu, 0.0],
            [s * nu, s * (1.0 - nu), 0.0],
            [0.0, 0.0, s * (1.0 - 2.0 * nu) / 2.0],
        ]
    }

    fn validate(&self) -> Result<()> {
        if !(self.young > 0.0) || !(self.poisson > -1.0 && self.poisson < 0.5) {
            return Err(VmptError::InvalidConfig(format!("inadmissible material {self:?}")));
        }
        Ok(())
    }
}

/// Two-phase stiffness `C(c) = C_soft + q(c) (C_hard - C_soft)` where `c` is
/// the hard-phase concentration and `q(c) = c²` on `[0, 1]`, clamped outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StiffnessModel {
    pub hard: Isotropic,
    pub soft: Isotropic,
}

impl Default for StiffnessModel {
    fn default() -> Self {
        Self {
            hard: Isotropic { young: 1.0, poisson: 0.3 },
            soft: Isotropic { young: 1e-4, poisson: 0.3 },
        }
    }
}

impl StiffnessModel {
    pub fn interpolation(c: f64) -> f64 {
        let c = c.clamp(0.0, 1.0);
        c * c
    }

    pub fn interpolation_derivative(c: f64) -> f64 {
        if (0.0..=1.0).contains(&c) {
            2.0 * c
        } else {
            0.0
        }
    }
}

/// Element stiffness `area · Bᵀ D B` for the dof order (x0, y0, x1, y1, x2, y2).
fn element_stiffness(g: &TriGeometry, d: &[[f64; 3]; 3]) -> [f64; 36] {
    let mut b = [[0.0; 6]; 3];
    for k in 0..3 {
        let [gx, gy] = g.grad[k];
        b[0][2 * k] = gx;
        b[1][2 * k + 1] = gy;
        b[2][2 * k] = gy;
        b[2][2 * k + 1] = gx;
    }
    let mut db = [[0.0; 6]; 3];
    for r in 0..3 {
        for c in 0..6 {
            db[r][c] = (0..3).map(|s| d[r][s] * b[s][c]).sum();
        }
    }
    let mut ke = [0.0; 36];
    for i in 0..6 {
        for j in 0..6 {
            ke[6 * i + j] = g.area * (0..3).map(|s| b[s][i] * db[s][j]).sum::<f64>();
        }
    }
    ke
}

fn element_dofs(t: &[usize; 3]) -> [usize; 6] {
    [2 * t[0], 2 * t[0] + 1, 2 * t[1], 2 * t[1] + 1, 2 * t[2], 2 * t[2] + 1]
}

fn quad_form6(ke: &[f64; 36], a: &[f64; 6], b: &[f64; 6]) -> f64 {
    let mut acc = 0.0;
    for i in 0..6 {
        let row: f64 = (0..6).map(|j| ke[6 * i + j] * b[j]).sum();
        acc += a[i] * row;
    }
    acc
}

/// Factorized state operator `K(φ_k)` and the displacement `u_k`; everything
/// the gradient, the linearized state and the second-order metric need.
#[derive(Debug)]
pub struct StateSolution {
    pub stiffness: CsrMatrix,
    pub factor: CholeskyFactor,
    pub displacement: Vec<f64>,
    /// Hard-phase concentration at each triangle centroid.
    pub centroid_concentration: Vec<f64>,
    pub compliance: f64,
    /// Triangles whose concentration had to be clamped into `[0, 1]`.
    pub clamped_elements: usize,
}

/// Plane-strain elasticity on a [`TriMesh`] with reusable symbolic analysis.
#[derive(Debug)]
pub struct ElasticitySystem {
    mesh: Arc<TriMesh>,
    model: StiffnessModel,
    ke_soft: Vec<[f64; 36]>,
    ke_delta: Vec<[f64; 36]>,
    fixed: Vec<bool>,
    load: Vec<f64>,
    symbolic: SymbolicCholesky,
}

impl ElasticitySystem {
    pub fn new(mesh: Arc<TriMesh>, model: StiffnessModel) -> Result<Self> {
        model.hard.validate()?;
        model.soft.validate()?;
        let d_soft = model.soft.plane_strain();
        let d_hard = model.hard.plane_strain();
        let mut ke_soft = Vec::with_capacity(mesh.num_triangles());
        let mut ke_delta = Vec::with_capacity(mesh.num_triangles());
        for g in &mesh.geometry {
            let ks = element_stiffness(g, &d_soft);
            let kh = element_stiffness(g, &d_hard);
            let mut kd = [0.0; 36];
            for i in 0..36 {
                kd[i] = kh[i] - ks[i];
            }
            ke_soft.push(ks);
            ke_delta.push(kd);
        }
        let dofs: Vec<[usize; 6]> = mesh.triangles.iter().map(element_dofs).collect();
        let pattern = Arc::new(Pattern::from_elements(2 * mesh.num_nodes(), dofs.iter().map(|d| &d[..])));
        let mut fixed = vec![false; 2 * mesh.num_nodes()];
        for v in 0..mesh.num_nodes() {
            if mesh.is_dirichlet(v) {
                fixed[2 * v] = true;
                fixed[2 * v + 1] = true;
            }
        }
        if !fixed.iter().any(|&f| f) {
            return Err(VmptError::SingularSystem);
        }
        let load = mesh.load_vector();
        let symbolic = SymbolicCholesky::analyze(&pattern)?;
        Ok(Self { mesh, model, ke_soft, ke_delta, fixed, load, symbolic })
    }

    pub fn mesh(&self) -> &Arc<TriMesh> {
        &self.mesh
    }

    pub fn model(&self) -> &StiffnessModel {
        &self.model
    }

    pub fn load(&self) -> &[f64] {
        &self.load
    }

    /// Multiplies the traction by `s`; `s = 0` removes the load.
    pub fn scale_load(&mut self, s: f64) {
        self.load.iter_mut().for_each(|f| *f *= s);
    }

    pub fn fixed_dofs(&self) -> &[bool] {
        &self.fixed
    }

    /// `K(c)` without boundary conditions, for centroid concentrations `c`.
    pub fn assemble_unconstrained(&self, centroid_concentration: &[f64]) -> CsrMatrix {
        let mut k = CsrMatrix::zeros(Arc::clone(self.symbolic.pattern()));
        let mut ke = [0.0; 36];
        for (e, t) in self.mesh.triangles.iter().enumerate() {
            let q = StiffnessModel::interpolation(centroid_concentration[e]);
            for i in 0..36 {
                ke[i] = self.ke_soft[e][i] + q * self.ke_delta[e][i];
            }
            k.add_element(&element_dofs(t), &ke);
        }
        k
    }

    /// Stiffness operator with Dirichlet rows/columns replaced by identity.
    pub fn assemble(&self, concentration: &[f64]) -> (CsrMatrix, Vec<f64>, usize) {
        let cc = self.mesh.centroid_values(concentration);
        let clamped = cc.iter().filter(|&&c| !(0.0..=1.0).contains(&c)).count();
        let mut k = self.assemble_unconstrained(&cc);
        k.pin_rows(&self.fixed);
        (k, cc, clamped)
    }

    pub fn factorize(&self, k: &CsrMatrix) -> Result<CholeskyFactor> {
        self.symbolic.factorize(k).map_err(|e| match e {
            VmptError::NotPositiveDefinite => VmptError::SingularSystem,
            other => other,
        })
    }

    /// Solves `K u = f` with homogeneous Dirichlet data.
    pub fn solve_with(&self, factor: &CholeskyFactor, rhs: &[f64]) -> Vec<f64> {
        let mut b = rhs.to_vec();
        for (bi, &fx) in b.iter_mut().zip(&self.fixed) {
            if fx {
                *bi = 0.0;
            }
        }
        factor.solve_in_place(&mut b);
        b
    }

    /// Assembles, factorizes and solves the state equation at the given
    /// nodal hard-phase concentration.
    pub fn solve_state(&self, concentration: &[f64]) -> Result<StateSolution> {
        let (stiffness, centroid_concentration, clamped_elements) = self.assemble(concentration);
        let factor = self.factorize(&stiffness)?;
        let displacement = self.solve_with(&factor, &self.load);
        // stationary form 2fᵀu - uᵀKu: its error is quadratic in the solve
        // error, which keeps finite differences of j clean
        let compliance =
            2.0 * dot(&self.load, &displacement) - self.strain_energy(&centroid_concentration, &displacement);
        Ok(StateSolution { stiffness, factor, displacement, centroid_concentration, compliance, clamped_elements })
    }

    /// `uᵀ K(c) u` summed element by element. Each element's translation is
    /// removed first; `K_e` annihilates it, and the products stay at the
    /// size of the strains rather than of the displacement.
    fn strain_energy(&self, centroid_concentration: &[f64], u: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (e, t) in self.mesh.triangles.iter().enumerate() {
            let q = StiffnessModel::interpolation(centroid_concentration[e]);
            let mut ue = Self::element_values(u, t);
            let (tx, ty) = (ue[0], ue[1]);
            for k in 0..3 {
                ue[2 * k] -= tx;
                ue[2 * k + 1] -= ty;
            }
            acc += quad_form6(&self.ke_soft[e], &ue, &ue) + q * quad_form6(&self.ke_delta[e], &ue, &ue);
        }
        acc
    }

    fn element_values(v: &[f64], t: &[usize; 3]) -> [f64; 6] {
        let d = element_dofs(t);
        [v[d[0]], v[d[1]], v[d[2]], v[d[3]], v[d[4]], v[d[5]]]
    }

    /// Nodal vector `Σ_e q'(c_e) (u_eᵀ ΔK_e u_e) / 3`: the derivative of the
    /// strain energy `uᵀ K(c) u` with respect to nodal concentrations at
    /// fixed `u`.
    pub fn energy_sensitivity(&self, state: &StateSolution) -> Vec<f64> {
        let mut out = vec![0.0; self.mesh.num_nodes()];
        for (e, t) in self.mesh.triangles.iter().enumerate() {
            let dq = StiffnessModel::interpolation_derivative(state.centroid_concentration[e]);
            if dq == 0.0 {
                continue;
            }
            let ue = Self::element_values(&state.displacement, t);
            let s = dq * quad_form6(&self.ke_delta[e], &ue, &ue) / 3.0;
            for &v in t {
                out[v] += s;
            }
        }
        out
    }

    /// `G p = Σ_e q'(c_e) p̄_e ΔK_e u_e` (dof vector, zero on Dirichlet dofs).
    pub fn apply_sensitivity(&self, state: &StateSolution, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; 2 * self.mesh.num_nodes()];
        for (e, t) in self.mesh.triangles.iter().enumerate() {
            let pbar = (p[t[0]] + p[t[1]] + p[t[2]]) / 3.0;
            let dq = StiffnessModel::interpolation_derivative(state.centroid_concentration[e]);
            let s = dq * pbar;
            if s == 0.0 {
                continue;
            }
            let ue = Self::element_values(&state.displacement, t);
            let dofs = element_dofs(t);
            for i in 0..6 {
                let row: f64 = (0..6).map(|j| self.ke_delta[e][6 * i + j] * ue[j]).sum();
                out[dofs[i]] += s * row;
            }
        }
        for (o, &fx) in out.iter_mut().zip(&self.fixed) {
            if fx {
                *o = 0.0;
            }
        }
        out
    }

    /// Entries `(dof, node, value)` of the matrix behind
    /// [`Self::apply_sensitivity`], Dirichlet rows omitted.
    pub fn sensitivity_entries(&self, state: &StateSolution) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(18 * self.mesh.num_triangles());
        for (e, t) in self.mesh.triangles.iter().enumerate() {
            let dq = StiffnessModel::interpolation_derivative(state.centroid_concentration[e]);
            let ue = Self::element_values(&state.displacement, t);
            for (i, &d) in element_dofs(t).iter().enumerate() {
                if self.fixed[d] {
                    continue;
                }
                let row: f64 = (0..6).map(|j| self.ke_delta[e][6 * i + j] * ue[j]).sum();
                for &v in t {
                    out.push((d, v, dq * row / 3.0));
                }
            }
        }
        out
    }

    /// Transpose of [`Self::apply_sensitivity`]: nodal vector `Gᵀ w`.
    pub fn apply_sensitivity_transpose(&self, state: &StateSolution, w: &[f64]) -> Vec<f64> {
        let mut masked = w.to_vec();
        for (m, &fx) in masked.iter_mut().zip(&self.fixed) {
            if fx {
                *m = 0.0;
            }
        }
        let mut out = vec![0.0; self.mesh.num_nodes()];
        for (e, t) in self.mesh.triangles.iter().enumerate() {
            let dq = StiffnessModel::interpolation_derivative(state.centroid_concentration[e]);
            if dq == 0.0 {
                continue;
            }
            let ue = Self::element_values(&state.displacement, t);
            let we = Self::element_values(&masked, t);
            let s = dq * quad_form6(&self.ke_delta[e], &we, &ue) / 3.0;
            for &v in t {
                out[v] += s;
            }
        }
        out
    }

    /// Linearized state `z_p = S'(φ) p`: `K z_p = -G p`, reusing the factor.
    pub fn solve_linearized_state(&self, state: &StateSolution, p: &[f64]) -> Vec<f64> {
        let mut rhs = self.apply_sensitivity(state, p);
        rhs.iter_mut().for_each(|r| *r = -*r);
        self.solve_with(&state.factor, &rhs)
    }

    /// `-2 Σ_e q'(c_e) ȳ_e z_eᵀ ΔK_e u_e`, i.e. `-2 ∫ C'(c)(y) E(z) : E(u)`.
    pub fn sensitivity_coupling(&self, state: &StateSolution, z: &[f64], y: &[f64]) -> f64 {
        -2.0 * dot(&self.apply_sensitivity(state, y), z)
    }

    /// `∫ C(c) E(a) : E(b)` at the current state.
    pub fn energy_product(&self, state: &StateSolution, a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (e, t) in self.mesh.triangles.iter().enumerate() {
            let q = StiffnessModel::interpolation(state.centroid_concentration[e]);
            let ae = Self::element_values(a, t);
            let be = Self::element_values(b, t);
            acc += quad_form6(&self.ke_soft[e], &ae, &be) + q * quad_form6(&self.ke_delta[e], &ae, &be);
        }
        acc
    }

    /// Full H¹ norm of a displacement field (both components).
    pub fn h1_norm(&self, stiffness: &CsrMatrix, mass: &CsrMatrix, u: &[f64]) -> f64 {
        let n = self.mesh.num_nodes();
        let mut acc = 0.0;
        for c in 0..2 {
            let comp: Vec<f64> = (0..n).map(|v| u[2 * v + c]).collect();
            acc += stiffness.form(&comp, &comp) + mass.form(&comp, &comp);
        }
        acc.sqrt()
    }
}
