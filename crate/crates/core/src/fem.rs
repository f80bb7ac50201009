//! Coupled piezoelectric finite elements on trilinear hexahedra.
//!
//! Displacements live on every mesh node; electric potential degrees of
//! freedom exist only on nodes of piezo-tagged elements. Electrical operators
//! are assembled over piezo-tagged elements only. The interface plane under
//! the film is grounded; the top surface floats.

use std::io::Write;
use std::path::Path;

use log::{debug, warn};
use nalgebra::{Matrix3, SMatrix, Vector3};
use rayon::prelude::*;

use crate::eigen::{lanczos_smallest, mac, EigenPairs, LanczosOptions};
use crate::error::{Error, Result};
use crate::materials::{background_slope, material_weights, properties_from_weights, Materials, PointProperties};
use crate::mesh::{Mesh, RegionTag};
use crate::sparse::{CsrMatrix, LdlFactor, TripletBuilder};

const G: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)

/// Natural coordinates of the eight hexahedron vertices.
pub const NATURAL: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

/// Trilinear shape functions and their natural derivatives.
pub fn shape(xi: [f64; 3]) -> ([f64; 8], [[f64; 3]; 8]) {
    let mut n = [0.0; 8];
    let mut dn = [[0.0; 3]; 8];
    for a in 0..8 {
        let [sa, ta, ua] = NATURAL[a];
        let (p, q, r) = (1.0 + sa * xi[0], 1.0 + ta * xi[1], 1.0 + ua * xi[2]);
        n[a] = 0.125 * p * q * r;
        dn[a] = [0.125 * sa * q * r, 0.125 * ta * p * r, 0.125 * ua * p * q];
    }
    (n, dn)
}

/// Shape data at the 2×2×2 Gauss points of one element.
#[derive(Debug, Clone)]
pub struct ElementGeometry {
    pub n: [[f64; 8]; 8],
    /// physical gradients `∂N_a/∂x` per Gauss point
    pub grad: [[[f64; 3]; 8]; 8],
    /// quadrature weight times Jacobian determinant
    pub wdet: [f64; 8],
}

impl ElementGeometry {
    pub fn new(coords: &[[f64; 3]; 8], element: usize) -> Result<Self> {
        let mut geo = ElementGeometry {
            n: [[0.0; 8]; 8],
            grad: [[[0.0; 3]; 8]; 8],
            wdet: [0.0; 8],
        };
        for (g, nat) in NATURAL.iter().enumerate() {
            let (n, dn) = shape([nat[0] * G, nat[1] * G, nat[2] * G]);
            let mut j = Matrix3::<f64>::zeros();
            for a in 0..8 {
                for r in 0..3 {
                    for c in 0..3 {
                        j[(r, c)] += dn[a][r] * coords[a][c];
                    }
                }
            }
            let det = j.determinant();
            if !(det > 0.0) {
                return Err(Error::BadJacobian { element, det });
            }
            let jinv = j.try_inverse().ok_or(Error::BadJacobian { element, det })?;
            for a in 0..8 {
                let d = jinv * Vector3::new(dn[a][0], dn[a][1], dn[a][2]);
                geo.grad[g][a] = [d[0], d[1], d[2]];
            }
            geo.n[g] = n;
            geo.wdet[g] = det;
        }
        Ok(geo)
    }

    /// Strain-displacement matrix at Gauss point `g`.
    pub fn b_matrix(&self, g: usize) -> SMatrix<f64, 6, 24> {
        let mut b = SMatrix::<f64, 6, 24>::zeros();
        for a in 0..8 {
            let [gx, gy, gz] = self.grad[g][a];
            let c = 3 * a;
            b[(0, c)] = gx;
            b[(1, c + 1)] = gy;
            b[(2, c + 2)] = gz;
            b[(3, c + 1)] = gz;
            b[(3, c + 2)] = gy;
            b[(4, c)] = gz;
            b[(4, c + 2)] = gx;
            b[(5, c)] = gy;
            b[(5, c + 1)] = gx;
        }
        b
    }

    /// Gradient operator `∇N` (3×8) at Gauss point `g`.
    pub fn grad_matrix(&self, g: usize) -> SMatrix<f64, 3, 8> {
        let mut m = SMatrix::<f64, 3, 8>::zeros();
        for a in 0..8 {
            for r in 0..3 {
                m[(r, a)] = self.grad[g][a][r];
            }
        }
        m
    }
}

/// How `∂h/∂φ` enters the sensitivities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    /// exact Gâteaux derivative of the relaxed problem
    #[default]
    Derivative,
    /// `∂h/∂φ` replaced by one
    Substitution,
}

/// Nodal design variables feeding the material interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignState {
    pub phi_p: Vec<f64>,
    pub phi_s: Vec<f64>,
    /// fictitious field rescaled to `[-1, 1]`; `None` disables the factor
    pub xi_scaled: Option<Vec<f64>>,
}

impl DesignState {
    pub fn full(n_nodes: usize) -> Self {
        Self {
            phi_p: vec![1.0; n_nodes],
            phi_s: vec![1.0; n_nodes],
            xi_scaled: None,
        }
    }
}

/// Interpolated weights at one Gauss point.
#[derive(Debug, Clone, Copy)]
pub struct GaussSample {
    pub w_p: f64,
    pub w_s: f64,
    /// `∂w_p/∂φ_p` without the shape-function factor
    pub dwp: f64,
    /// `∂w_s/∂φ_s` without the shape-function factor
    pub dws: f64,
    /// effective piezo characteristic `h(φ_p)·h(ξ′)`
    pub chi_p: f64,
    pub chi_s: f64,
}

fn interp(n: &[f64; 8], conn: &[usize; 8], f: &[f64]) -> f64 {
    (0..8).map(|a| n[a] * f[conn[a]]).sum()
}

/// Mesh, materials and cached element geometry.
#[derive(Debug, Clone)]
pub struct PiezoModel {
    mesh: Mesh,
    mats: Materials,
    geometry: Vec<ElementGeometry>,
    dofs: DofMap,
}

/// Degree-of-freedom bookkeeping.
#[derive(Debug, Clone)]
pub struct DofMap {
    pub n_nodes: usize,
    /// potential index of each node, if it carries one
    pub pot_of_node: Vec<Option<usize>>,
    pub n_pot: usize,
    pub disp_free: Vec<usize>,
    pub disp_to_free: Vec<Option<usize>>,
    pub pot_free: Vec<usize>,
    pub pot_to_free: Vec<Option<usize>>,
}

impl DofMap {
    fn new(mesh: &Mesh) -> Self {
        let n_nodes = mesh.n_nodes();
        let mut pot_of_node = vec![None; n_nodes];
        let mut n_pot = 0;
        for n in 0..n_nodes {
            if mesh.node_touches(n, RegionTag::PeDesign) || mesh.node_touches(n, RegionTag::PeNondesign) {
                pot_of_node[n] = Some(n_pot);
                n_pot += 1;
            }
        }
        let mut clamped = vec![false; 3 * n_nodes];
        for &n in mesh.clamp_nodes() {
            for a in 0..3 {
                clamped[3 * n + a] = true;
            }
        }
        let mut grounded = vec![false; n_pot];
        for &n in mesh.pzt_ground_nodes() {
            if let Some(p) = pot_of_node[n] {
                grounded[p] = true;
            }
        }
        let mut disp_free = Vec::new();
        let mut disp_to_free = vec![None; 3 * n_nodes];
        for d in 0..3 * n_nodes {
            if !clamped[d] {
                disp_to_free[d] = Some(disp_free.len());
                disp_free.push(d);
            }
        }
        let mut pot_free = Vec::new();
        let mut pot_to_free = vec![None; n_pot];
        for p in 0..n_pot {
            if !grounded[p] {
                pot_to_free[p] = Some(pot_free.len());
                pot_free.push(p);
            }
        }
        Self {
            n_nodes,
            pot_of_node,
            n_pot,
            disp_free,
            disp_to_free,
            pot_free,
            pot_to_free,
        }
    }

    pub fn n_disp(&self) -> usize {
        3 * self.n_nodes
    }

    /// Expands a free displacement vector to all DOFs (clamped entries zero).
    pub fn expand_disp(&self, free: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.n_disp()];
        for (f, &d) in self.disp_free.iter().enumerate() {
            full[d] = free[f];
        }
        full
    }

    pub fn restrict_disp(&self, full: &[f64]) -> Vec<f64> {
        self.disp_free.iter().map(|&d| full[d]).collect()
    }

    pub fn expand_pot(&self, free: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.n_pot];
        for (f, &p) in self.pot_free.iter().enumerate() {
            full[p] = free[f];
        }
        full
    }

    /// Nodal potential field with zeros on nodes without a potential DOF.
    pub fn pot_to_nodes(&self, pot: &[f64]) -> Vec<f64> {
        self.pot_of_node
            .iter()
            .map(|p| p.map_or(0.0, |p| pot[p]))
            .collect()
    }
}

/// Element operators.
struct ElementMatrices {
    k: SMatrix<f64, 24, 24>,
    m: SMatrix<f64, 24, 24>,
    p: SMatrix<f64, 24, 8>,
    g: SMatrix<f64, 8, 8>,
}

impl PiezoModel {
    pub fn new(mesh: Mesh, mats: Materials) -> Result<Self> {
        let geometry = (0..mesh.n_elements())
            .into_par_iter()
            .map(|e| ElementGeometry::new(&mesh.element_coords(e), e))
            .collect::<Result<Vec<_>>>()?;
        let dofs = DofMap::new(&mesh);
        Ok(Self {
            mesh,
            mats,
            geometry,
            dofs,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn materials(&self) -> &Materials {
        &self.mats
    }

    pub fn dofs(&self) -> &DofMap {
        &self.dofs
    }

    pub fn geometry(&self, e: usize) -> &ElementGeometry {
        &self.geometry[e]
    }

    /// Material weights at Gauss point `g` of element `e`.
    pub fn sample(&self, state: &DesignState, e: usize, g: usize, mode: DerivativeMode) -> GaussSample {
        let tag = self.mesh.tag(e);
        let d = self.mats.heaviside.d;
        match tag {
            RegionTag::PeNondesign | RegionTag::SbNondesign | RegionTag::Weight => {
                let h_ps = if tag == RegionTag::PeNondesign { 1.0 } else { d };
                let (w_p, w_s) = material_weights(1.0, 1.0, 1.0, h_ps, d);
                let pe = tag == RegionTag::PeNondesign;
                GaussSample {
                    w_p,
                    w_s,
                    dwp: 0.0,
                    dws: 0.0,
                    chi_p: if pe { 1.0 } else { d },
                    chi_s: if pe { d } else { 1.0 },
                }
            }
            RegionTag::PeDesign | RegionTag::SbDesign => {
                let conn = self.mesh.element(e);
                let n = &self.geometry[e].n[g];
                let phi_p = interp(n, conn, &state.phi_p);
                let phi_s = interp(n, conn, &state.phi_s);
                let h_xi = state
                    .xi_scaled
                    .as_ref()
                    .map_or(1.0, |x| self.mats.h(interp(n, conn, x)));
                let h_ps = if tag == RegionTag::PeDesign { 1.0 } else { d };
                let h_p = self.mats.h(phi_p);
                let h_s = self.mats.h(phi_s);
                let (w_p, w_s) = material_weights(h_p, h_s, h_xi, h_ps, d);
                let (dh_p, dh_s) = match mode {
                    DerivativeMode::Derivative => (self.mats.dh(phi_p), self.mats.dh(phi_s)),
                    DerivativeMode::Substitution => (1.0, 1.0),
                };
                GaussSample {
                    w_p,
                    w_s,
                    dwp: h_ps * h_xi * dh_p,
                    dws: (1.0 + d - h_ps) * dh_s,
                    chi_p: h_p * h_xi,
                    chi_s: h_s,
                }
            }
        }
    }

    fn point_properties(&self, tag: RegionTag, s: &GaussSample) -> PointProperties {
        if tag == RegionTag::Weight {
            self.mats.weight_properties(self.mesh.weight_density_factor())
        } else {
            properties_from_weights(s.w_p, s.w_s, &self.mats)
        }
    }

    fn element_matrices(&self, state: &DesignState, e: usize) -> ElementMatrices {
        let geo = &self.geometry[e];
        let tag = self.mesh.tag(e);
        let electric = tag.is_piezo();
        let mut out = ElementMatrices {
            k: SMatrix::zeros(),
            m: SMatrix::zeros(),
            p: SMatrix::zeros(),
            g: SMatrix::zeros(),
        };
        for g in 0..8 {
            let s = self.sample(state, e, g, DerivativeMode::Derivative);
            let props = self.point_properties(tag, &s);
            let wd = geo.wdet[g];
            let b = geo.b_matrix(g);
            let cb = props.c * b;
            out.k += b.transpose() * cb * wd;
            let n = &geo.n[g];
            for a in 0..8 {
                for c in 0..8 {
                    let v = props.rho * n[a] * n[c] * wd;
                    for i in 0..3 {
                        out.m[(3 * a + i, 3 * c + i)] += v;
                    }
                }
            }
            if electric {
                let gm = geo.grad_matrix(g);
                out.p += b.transpose() * props.e.transpose() * gm * wd;
                out.g += gm.transpose() * props.eps * gm * wd;
            }
        }
        out
    }

    /// Assembles K, M, P and G for the given design.
    pub fn assemble(&self, state: &DesignState) -> Result<GlobalSystem> {
        let nn = self.mesh.n_nodes();
        for (name, f) in [("phi_p", &state.phi_p), ("phi_s", &state.phi_s)] {
            if f.len() != nn {
                return Err(Error::SizeMismatch(format!(
                    "{name} has {} values for {nn} nodes",
                    f.len()
                )));
            }
        }
        if let Some(x) = &state.xi_scaled {
            if x.len() != nn {
                return Err(Error::SizeMismatch(format!("xi has {} values for {nn} nodes", x.len())));
            }
        }
        let elems: Vec<ElementMatrices> = (0..self.mesh.n_elements())
            .into_par_iter()
            .map(|e| self.element_matrices(state, e))
            .collect();

        let nd = 3 * nn;
        let np = self.dofs.n_pot;
        let ne = elems.len();
        let mut kb = TripletBuilder::with_capacity(nd, nd, ne * 576);
        let mut mb = TripletBuilder::with_capacity(nd, nd, ne * 192);
        let mut pb = TripletBuilder::new(nd, np);
        let mut gb = TripletBuilder::new(np, np);
        for (e, em) in elems.iter().enumerate() {
            let conn = self.mesh.element(e);
            let dof = |l: usize| 3 * conn[l / 3] + l % 3;
            for r in 0..24 {
                for c in 0..24 {
                    kb.push(dof(r), dof(c), em.k[(r, c)]);
                    if r % 3 == c % 3 {
                        mb.push(dof(r), dof(c), em.m[(r, c)]);
                    }
                }
            }
            if self.mesh.tag(e).is_piezo() {
                let pot: [usize; 8] = std::array::from_fn(|a| self.dofs.pot_of_node[conn[a]].unwrap());
                for r in 0..24 {
                    for c in 0..8 {
                        pb.push(dof(r), pot[c], em.p[(r, c)]);
                    }
                }
                for r in 0..8 {
                    for c in 0..8 {
                        gb.push(pot[r], pot[c], em.g[(r, c)]);
                    }
                }
            }
        }
        Ok(GlobalSystem::new(
            self.dofs.clone(),
            kb.build(),
            mb.build(),
            pb.build(),
            gb.build(),
        ))
    }

    /// Gradient of `uᵀKu − λuᵀMu (+ 2uᵀPφ − φᵀGφ)` with respect to the nodal
    /// values of `φ_p` and `φ_s`.
    ///
    /// For an `M`-normalized eigenpair this is `dλ/dθ_j`. Pass `phi = None` for
    /// short-circuit modes. `u` and `phi` are full-length vectors.
    pub fn eigen_gradient(
        &self,
        state: &DesignState,
        u: &[f64],
        phi: Option<&[f64]>,
        lambda: f64,
        mode: DerivativeMode,
    ) -> (Vec<f64>, Vec<f64>) {
        let nn = self.mesh.n_nodes();
        let parts: Vec<([f64; 8], [f64; 8])> = (0..self.mesh.n_elements())
            .into_par_iter()
            .map(|e| self.element_gradient(state, e, u, phi, lambda, mode))
            .collect();
        let mut gp = vec![0.0; nn];
        let mut gs = vec![0.0; nn];
        for (e, (ep, es)) in parts.iter().enumerate() {
            for (a, &n) in self.mesh.element(e).iter().enumerate() {
                gp[n] += ep[a];
                gs[n] += es[a];
            }
        }
        (gp, gs)
    }

    fn element_gradient(
        &self,
        state: &DesignState,
        e: usize,
        u: &[f64],
        phi: Option<&[f64]>,
        lambda: f64,
        mode: DerivativeMode,
    ) -> ([f64; 8], [f64; 8]) {
        let tag = self.mesh.tag(e);
        let mut out = ([0.0; 8], [0.0; 8]);
        if !tag.is_design() {
            return out;
        }
        let geo = &self.geometry[e];
        let conn = self.mesh.element(e);
        let ue = SMatrix::<f64, 24, 1>::from_fn(|r, _| u[3 * conn[r / 3] + r % 3]);
        let phie = match phi {
            Some(p) if tag.is_piezo() => Some(SMatrix::<f64, 8, 1>::from_fn(|a, _| {
                p[self.dofs.pot_of_node[conn[a]].unwrap()]
            })),
            _ => None,
        };
        let m = &self.mats;
        for g in 0..8 {
            let s = self.sample(state, e, g, mode);
            let strain = geo.b_matrix(g) * ue;
            let n = &geo.n[g];
            let mut uu = 0.0;
            for i in 0..3 {
                let ui: f64 = (0..8).map(|a| n[a] * ue[3 * a + i]).sum();
                uu += ui * ui;
            }
            let mut dens_p = (strain.transpose() * m.c_pe * strain)[0] - lambda * m.rho_pe * uu;
            let mut dens_s = (strain.transpose() * m.c_sb * strain)[0] - lambda * m.rho_sb * uu;
            if let Some(pe) = &phie {
                let grad = geo.grad_matrix(g) * pe;
                let slope = background_slope(s.w_p, s.w_s, m);
                let gg = grad.dot(&grad);
                dens_p += 2.0 * (strain.transpose() * m.e.transpose() * grad)[0]
                    - (grad.transpose() * m.eps_s * grad)[0]
                    - slope * gg;
                dens_s -= slope * gg;
            }
            let wd = geo.wdet[g];
            for a in 0..8 {
                out.0[a] += s.dwp * dens_p * n[a] * wd;
                out.1[a] += s.dws * dens_s * n[a] * wd;
            }
        }
        out
    }

    /// Consistent inertial load for a uniform base acceleration along z.
    pub fn base_excitation_load(&self, system: &GlobalSystem, accel: f64) -> Vec<f64> {
        let mut r = vec![0.0; self.dofs.n_disp()];
        for n in 0..self.mesh.n_nodes() {
            r[3 * n + 2] = accel;
        }
        system.m.mul_vec(&r)
    }

    /// Lumped nodal volumes (one eighth of each adjacent element).
    pub fn lumped_volumes(&self) -> Vec<f64> {
        lumped_volumes(&self.mesh)
    }
}

/// Lumped nodal volumes of a mesh.
pub fn lumped_volumes(mesh: &Mesh) -> Vec<f64> {
    let mut v = vec![0.0; mesh.n_nodes()];
    for e in 0..mesh.n_elements() {
        let share = mesh.element_volume(e) / 8.0;
        for &n in mesh.element(e) {
            v[n] += share;
        }
    }
    v
}

/// Assembled operators, both full and restricted to free DOFs.
#[derive(Debug, Clone)]
pub struct GlobalSystem {
    pub dofs: DofMap,
    pub k: CsrMatrix,
    pub m: CsrMatrix,
    pub p: CsrMatrix,
    pub g: CsrMatrix,
    pub k_ff: CsrMatrix,
    pub m_ff: CsrMatrix,
    pub p_ff: CsrMatrix,
    pub g_ff: CsrMatrix,
}

/// One family of eigenpairs with full-length vectors.
#[derive(Debug, Clone)]
pub struct ModeFamily {
    pub omega: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    /// open-circuit potentials (full potential DOF vectors)
    pub potentials: Option<Vec<Vec<f64>>>,
}

impl ModeFamily {
    pub fn lambda(&self, i: usize) -> f64 {
        self.omega[i] * self.omega[i]
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }
}

fn to_family(pairs: EigenPairs, dofs: &DofMap, pots: Option<Vec<Vec<f64>>>) -> ModeFamily {
    ModeFamily {
        omega: pairs.values.iter().map(|l| l.max(0.0).sqrt()).collect(),
        vectors: pairs.vectors.iter().map(|v| dofs.expand_disp(v)).collect(),
        potentials: pots,
    }
}

/// Prepared open-circuit solver: quasi-definite factor and dielectric factor.
pub struct OpenCircuitSolver<'a> {
    system: &'a GlobalSystem,
    coupled: LdlFactor,
    dielectric: Option<LdlFactor>,
    disp_pos: Vec<usize>,
    pot_pos: Vec<usize>,
}

impl<'a> OpenCircuitSolver<'a> {
    /// `(K + P G⁻¹ Pᵀ)⁻¹ b` on free displacement DOFs.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.disp_pos.len() + self.pot_pos.len();
        let mut rhs = vec![0.0; n];
        for (i, &p) in self.disp_pos.iter().enumerate() {
            rhs[p] = b[i];
        }
        let x = self.coupled.solve(&rhs);
        self.disp_pos.iter().map(|&p| x[p]).collect()
    }

    /// `G⁻¹ Pᵀ u` on free potential DOFs.
    pub fn potential(&self, u_free: &[f64]) -> Vec<f64> {
        match &self.dielectric {
            Some(f) => f.solve(&self.system.p_ff.mul_vec_transpose(u_free)),
            None => Vec::new(),
        }
    }

    /// `(K + P G⁻¹ Pᵀ) u` on free displacement DOFs.
    pub fn apply(&self, u_free: &[f64]) -> Vec<f64> {
        let mut y = self.system.k_ff.mul_vec(u_free);
        if self.dielectric.is_some() {
            let phi = self.potential(u_free);
            let pp = self.system.p_ff.mul_vec(&phi);
            y.iter_mut().zip(&pp).for_each(|(a, b)| *a += b);
        }
        y
    }
}

impl GlobalSystem {
    pub fn new(dofs: DofMap, k: CsrMatrix, m: CsrMatrix, p: CsrMatrix, g: CsrMatrix) -> Self {
        let dmap = &dofs.disp_to_free;
        let pmap = &dofs.pot_to_free;
        let nd = dofs.disp_free.len();
        let np = dofs.pot_free.len();
        let k_ff = k.restrict(dmap, nd, dmap, nd);
        let m_ff = m.restrict(dmap, nd, dmap, nd);
        let p_ff = p.restrict(dmap, nd, pmap, np);
        let g_ff = g.restrict(pmap, np, pmap, np);
        Self {
            dofs,
            k,
            m,
            p,
            g,
            k_ff,
            m_ff,
            p_ff,
            g_ff,
        }
    }

    pub fn n_free_disp(&self) -> usize {
        self.dofs.disp_free.len()
    }

    /// Short-circuit modes: all potentials grounded, `K u = ω² M u`.
    pub fn solve_short_circuit_modes(&self, n: usize, opts: &LanczosOptions) -> Result<ModeFamily> {
        let f = LdlFactor::new(&self.k_ff, "short-circuit stiffness")?;
        let pairs = lanczos_smallest(&self.m_ff, n, |b| f.solve(b), |x| self.k_ff.mul_vec(x), opts)?;
        debug!("short-circuit eigenvalues {:?}", pairs.values);
        Ok(to_family(pairs, &self.dofs, None))
    }

    /// Factors the open-circuit operator.
    pub fn open_circuit_solver(&self) -> Result<OpenCircuitSolver<'_>> {
        let np = self.dofs.pot_free.len();
        let dielectric = if np > 0 {
            Some(LdlFactor::new(&self.g_ff, "dielectric matrix")?)
        } else {
            None
        };
        // interleave displacement and potential unknowns node by node so the
        // coupled matrix keeps the profile of the mesh
        let mut disp_pos = vec![0; self.dofs.disp_free.len()];
        let mut pot_pos = vec![0; np];
        let mut next = 0;
        for node in 0..self.dofs.n_nodes {
            for a in 0..3 {
                if let Some(f) = self.dofs.disp_to_free[3 * node + a] {
                    disp_pos[f] = next;
                    next += 1;
                }
            }
            if let Some(p) = self.dofs.pot_of_node[node] {
                if let Some(f) = self.dofs.pot_to_free[p] {
                    pot_pos[f] = next;
                    next += 1;
                }
            }
        }
        let mut b = TripletBuilder::new(next, next);
        for (r, c, v) in self.k_ff.triplets() {
            b.push(disp_pos[r], disp_pos[c], v);
        }
        for (r, c, v) in self.p_ff.triplets() {
            b.push(disp_pos[r], pot_pos[c], v);
            b.push(pot_pos[c], disp_pos[r], v);
        }
        for (r, c, v) in self.g_ff.triplets() {
            b.push(pot_pos[r], pot_pos[c], -v);
        }
        let coupled = LdlFactor::new(&b.build(), "open-circuit coupled matrix")?;
        Ok(OpenCircuitSolver {
            system: self,
            coupled,
            dielectric,
            disp_pos,
            pot_pos,
        })
    }

    /// Open-circuit modes `(K + P G⁻¹ Pᵀ) u = ω² M u` with recovered
    /// potentials `φ = G⁻¹ Pᵀ u`.
    pub fn solve_open_circuit_modes(&self, n: usize, opts: &LanczosOptions) -> Result<ModeFamily> {
        let solver = self.open_circuit_solver()?;
        let pairs = lanczos_smallest(&self.m_ff, n, |b| solver.solve(b), |x| solver.apply(x), opts)?;
        debug!("open-circuit eigenvalues {:?}", pairs.values);
        let pots = pairs
            .vectors
            .iter()
            .map(|u| self.dofs.expand_pot(&solver.potential(u)))
            .collect();
        Ok(to_family(pairs, &self.dofs, Some(pots)))
    }

    /// Potential `G⁻¹ Pᵀ u` for a full displacement vector, grounded DOFs zero.
    pub fn recover_potential(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.dofs.n_disp() {
            return Err(Error::SizeMismatch(format!(
                "displacement has {} entries, expected {}",
                u.len(),
                self.dofs.n_disp()
            )));
        }
        if self.dofs.pot_free.is_empty() {
            return Ok(vec![0.0; self.dofs.n_pot]);
        }
        let f = LdlFactor::new(&self.g_ff, "dielectric matrix")?;
        let rhs = self.p_ff.mul_vec_transpose(&self.dofs.restrict_disp(u));
        Ok(self.dofs.expand_pot(&f.solve(&rhs)))
    }

    /// Writes one operator as `row col value` lines (0-based indices).
    pub fn dump_triplets(matrix: &CsrMatrix, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("# {} {} {}\n", matrix.nrows(), matrix.ncols(), matrix.nnz()));
        for (r, c, v) in matrix.triplets() {
            out.push_str(&format!("{r} {c} {v:e}\n"));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Paired open/short-circuit modes. Index `i` refers to the i-th open-circuit
/// mode and its matched short-circuit partner.
#[derive(Debug, Clone)]
pub struct ModeSet {
    pub oc: ModeFamily,
    pub sc: ModeFamily,
    /// `pairing[i]` is the short-circuit index paired with open-circuit mode i
    pub pairing: Vec<usize>,
    pub warnings: Vec<String>,
}

impl ModeSet {
    pub fn len(&self) -> usize {
        self.oc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.oc.is_empty()
    }

    pub fn omega_oc(&self, i: usize) -> f64 {
        self.oc.omega[i]
    }

    pub fn omega_sc(&self, i: usize) -> f64 {
        self.sc.omega[self.pairing[i]]
    }

    pub fn u_oc(&self, i: usize) -> &[f64] {
        &self.oc.vectors[i]
    }

    pub fn u_sc(&self, i: usize) -> &[f64] {
        &self.sc.vectors[self.pairing[i]]
    }

    pub fn phi_oc(&self, i: usize) -> &[f64] {
        &self.oc.potentials.as_ref().expect("open-circuit potentials")[i]
    }
}

fn stiffening_holds(oc: &ModeFamily, sc: &ModeFamily, pairing: &[usize]) -> bool {
    pairing
        .iter()
        .enumerate()
        .all(|(i, &j)| oc.omega[i] >= sc.omega[j] * (1.0 - 1e-10))
}

/// Pairs modes by greedy best modal assurance criterion.
///
/// Falls back to index order with a warning when the best matches are
/// ambiguous (within 1e-6), all below 0.5, or when the greedy choice would
/// pair a mode against the piezoelectric stiffening order.
pub fn pair_modes(sc: ModeFamily, oc: ModeFamily, m: &CsrMatrix) -> ModeSet {
    let n = oc.len().min(sc.len());
    let mut warnings = Vec::new();
    let identity: Vec<usize> = (0..n).collect();
    let mut table = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            table[i][j] = mac(m, &oc.vectors[i], &sc.vectors[j]);
        }
    }
    let all_low = table.iter().flatten().all(|&v| v < 0.5);
    let mut pairing = vec![usize::MAX; n];
    let mut ambiguous = false;
    if !all_low {
        let mut used_oc = vec![false; n];
        let mut used_sc = vec![false; n];
        let mut entries: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..n {
            for j in 0..n {
                entries.push((table[i][j], i, j));
            }
        }
        entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for k in 0..entries.len() {
            let (v, i, j) = entries[k];
            if used_oc[i] || used_sc[j] || v < 0.5 {
                continue;
            }
            // a competing unused candidate for the same row or column that is
            // indistinguishable makes the choice arbitrary
            if entries.iter().any(|&(w, i2, j2)| {
                (i2, j2) != (i, j)
                    && (i2 == i || j2 == j)
                    && !used_oc[i2]
                    && !used_sc[j2]
                    && (w - v).abs() < 1e-6
            }) {
                ambiguous = true;
            }
            pairing[i] = j;
            used_oc[i] = true;
            used_sc[j] = true;
        }
        // leftovers in index order
        let mut free_sc = (0..n).filter(|&j| !used_sc[j]);
        for p in pairing.iter_mut() {
            if *p == usize::MAX {
                *p = free_sc.next().unwrap();
            }
        }
    }
    let pairing = if all_low {
        warnings.push("all modal assurance values below 0.5; pairing by index".to_string());
        identity
    } else if ambiguous {
        warnings.push("ambiguous modal assurance pairing; pairing by index".to_string());
        identity
    } else if !stiffening_holds(&oc, &sc, &pairing) {
        warnings.push("assurance pairing violates stiffening order; pairing by index".to_string());
        identity
    } else {
        pairing
    };
    for w in &warnings {
        warn!("{w}");
    }
    ModeSet {
        oc,
        sc,
        pairing,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::materials::MaterialConfig;

    fn mats() -> Materials {
        Materials::new(MaterialConfig::default()).unwrap()
    }

    #[test]
    fn shape_partition_of_unity() {
        let (n, dn) = shape([0.3, -0.2, 0.7]);
        assert!((n.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for c in 0..3 {
            assert!(dn.iter().map(|d| d[c]).sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn single_element_shapes_and_nullspace() {
        let mesh = Mesh::uniform_box([1, 1, 1], [1.0, 1.0, 1.0], RegionTag::PeDesign).unwrap();
        let model = PiezoModel::new(mesh, mats()).unwrap();
        let sys = model.assemble(&DesignState::full(8)).unwrap();
        assert_eq!((sys.k.nrows(), sys.k.ncols()), (24, 24));
        assert_eq!((sys.m.nrows(), sys.m.ncols()), (24, 24));
        assert_eq!((sys.p.nrows(), sys.p.ncols()), (24, 8));
        assert_eq!((sys.g.nrows(), sys.g.ncols()), (8, 8));
        let k = sys.k.to_dense();
        let scale = k.amax();
        for r in 0..24 {
            // rigid translations along each axis
            for a in 0..3 {
                let s: f64 = (0..8).map(|n| k[(r, 3 * n + a)]).sum();
                assert!(s.abs() < 1e-12 * scale);
            }
        }
        assert!(sys.k.symmetry_defect() < 1e-12);
        assert!(sys.g.symmetry_defect() < 1e-12);
    }

    #[test]
    fn void_scaling_of_stiffness() {
        let mesh = Mesh::uniform_box([1, 1, 1], [1.0, 1.0, 1.0], RegionTag::SbDesign).unwrap();
        let model = PiezoModel::new(mesh, mats()).unwrap();
        let full = model.assemble(&DesignState::full(8)).unwrap();
        let void = model
            .assemble(&DesignState {
                phi_p: vec![-1.0; 8],
                phi_s: vec![-1.0; 8],
                xi_scaled: None,
            })
            .unwrap();
        let m = mats();
        // full: d·C_pe + C_sb; void: d·d·C_pe + d·C_sb = d × full
        let _ = m;
        for (r, c, v) in full.k.triplets() {
            let w = void.k.get(r, c);
            if v.abs() > 1e-6 * full.k.max_abs() {
                assert!((w / v - 0.01).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn coupling_patch_test() {
        let (lx, ly, lz) = (2.0, 3.0, 0.5);
        let mesh = Mesh::uniform_box([1, 1, 1], [lx, ly, lz], RegionTag::PeDesign).unwrap();
        let mut cfg = MaterialConfig::default();
        cfg.piezo.e31 = 0.0;
        cfg.piezo.e15 = 0.0;
        let model = PiezoModel::new(mesh.clone(), Materials::new(cfg).unwrap()).unwrap();
        let sys = model.assemble(&DesignState::full(8)).unwrap();
        let s33 = 1e-3;
        let mut u = vec![0.0; 24];
        for n in 0..8 {
            u[3 * n + 2] = s33 * mesh.node(n)[2];
        }
        let q = sys.p.mul_vec_transpose(&u);
        for n in 0..8 {
            let sign = if mesh.node(n)[2] > 0.0 { 1.0 } else { -1.0 };
            let expect = 15.8 * s33 * sign * lx * ly / 4.0;
            assert!((q[n] - expect).abs() < 1e-12 * expect.abs(), "{} vs {}", q[n], expect);
        }
    }

    #[test]
    fn stiffness_linear_in_material_scale() {
        let mesh = Mesh::uniform_box([2, 1, 1], [2.0, 1.0, 1.0], RegionTag::SbDesign).unwrap();
        let base = MaterialConfig::default();
        let mut scaled = base;
        scaled.substrate.youngs_modulus *= 3.0;
        scaled.piezo_elastic.youngs_modulus *= 3.0;
        let a = PiezoModel::new(mesh.clone(), Materials::new(base).unwrap()).unwrap();
        let b = PiezoModel::new(mesh, Materials::new(scaled).unwrap()).unwrap();
        let st = DesignState::full(12);
        let ka = a.assemble(&st).unwrap().k;
        let kb = b.assemble(&st).unwrap().k;
        for (r, c, v) in ka.triplets() {
            assert!((kb.get(r, c) - 3.0 * v).abs() <= 1e-12 * ka.max_abs());
        }
    }

    #[test]
    fn bad_jacobian_reported() {
        let mut coords = [[0.0; 3]; 8];
        for a in 0..8 {
            coords[a] = [
                (NATURAL[a][0] + 1.0) / 2.0,
                (NATURAL[a][1] + 1.0) / 2.0,
                (NATURAL[a][2] + 1.0) / 2.0,
            ];
        }
        coords.swap(0, 6);
        match ElementGeometry::new(&coords, 7) {
            Err(Error::BadJacobian { element, .. }) => assert_eq!(element, 7),
            other => panic!("expected jacobian error, got {:?}", other.map(|_| ())),
        }
    }

    fn synthetic_family(vectors: Vec<Vec<f64>>, omega: Vec<f64>) -> ModeFamily {
        ModeFamily {
            omega,
            vectors,
            potentials: None,
        }
    }

    fn unit(n: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn pairing_identity_and_swap() {
        let m = CsrMatrix::from_dense(&nalgebra::DMatrix::identity(4, 4));
        let vecs: Vec<Vec<f64>> = (0..4).map(|i| unit(4, i)).collect();
        let sc = synthetic_family(vecs.clone(), vec![1.0, 2.0, 3.0, 4.0]);
        let oc = synthetic_family(vecs.clone(), vec![1.1, 2.1, 3.1, 4.1]);
        let set = pair_modes(sc.clone(), oc, &m);
        assert_eq!(set.pairing, vec![0, 1, 2, 3]);
        assert!(set.warnings.is_empty());

        let swapped = vec![vecs[0].clone(), vecs[2].clone(), vecs[1].clone(), vecs[3].clone()];
        let oc = synthetic_family(swapped, vec![1.1, 3.05, 3.1, 4.1]);
        let set = pair_modes(sc, oc, &m);
        assert_eq!(set.pairing, vec![0, 2, 1, 3]);
    }

    #[test]
    fn low_mac_falls_back() {
        let m = CsrMatrix::from_dense(&nalgebra::DMatrix::identity(4, 4));
        let sc = synthetic_family((0..2).map(|i| unit(4, i)).collect(), vec![1.0, 2.0]);
        let oc = synthetic_family((2..4).map(|i| unit(4, i)).collect(), vec![1.0, 2.0]);
        let set = pair_modes(sc, oc, &m);
        assert_eq!(set.pairing, vec![0, 1]);
        assert_eq!(set.warnings.len(), 1);
    }
}
