//! Level-set fields, the reaction–diffusion update and cross-section metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{lumped_volumes, ElementGeometry};
use crate::materials::{smoothed_heaviside, HeavisideParams};
use crate::mesh::{Mesh, RegionTag};
use crate::sparse::{CsrMatrix, LdlFactor, TripletBuilder};

/// Which design region a field controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Piezo,
    Substrate,
    /// one shared field over both design layers
    Combined,
}

impl FieldKind {
    fn design_tag(self, tag: RegionTag) -> bool {
        match self {
            FieldKind::Piezo => tag == RegionTag::PeDesign,
            FieldKind::Substrate => tag == RegionTag::SbDesign,
            FieldKind::Combined => tag.is_design(),
        }
    }

    fn solid_tag(self, tag: RegionTag) -> bool {
        match self {
            FieldKind::Piezo => matches!(tag, RegionTag::PeNondesign | RegionTag::Weight),
            FieldKind::Substrate => matches!(tag, RegionTag::SbNondesign | RegionTag::Weight),
            FieldKind::Combined => !tag.is_design(),
        }
    }
}

/// Nodal level-set values with frozen entries outside the design region.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSetField {
    pub values: Vec<f64>,
    pub design: Vec<bool>,
    kind: FieldKind,
}

impl LevelSetField {
    /// Initial field: `+1` on design nodes and in fixed material, `−1`
    /// elsewhere.
    ///
    /// A node is designable when it touches a design element of this field
    /// and no fixed solid element.
    pub fn initial(mesh: &Mesh, kind: FieldKind) -> Self {
        let nn = mesh.n_nodes();
        let mut touches_design = vec![false; nn];
        let mut touches_solid = vec![false; nn];
        for e in 0..mesh.n_elements() {
            let tag = mesh.tag(e);
            for &n in mesh.element(e) {
                touches_design[n] |= kind.design_tag(tag);
                touches_solid[n] |= kind.solid_tag(tag);
            }
        }
        let design: Vec<bool> = (0..nn).map(|n| touches_design[n] && !touches_solid[n]).collect();
        let values = (0..nn)
            .map(|n| if design[n] || touches_solid[n] { 1.0 } else { -1.0 })
            .collect();
        Self { values, design, kind }
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn n_design(&self) -> usize {
        self.design.iter().filter(|d| **d).count()
    }

    pub fn frozen_value(&self, node: usize) -> Option<f64> {
        (!self.design[node]).then_some(self.values[node])
    }

    /// Replaces design-node values (frozen entries are left untouched).
    pub fn set_design_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::SizeMismatch(format!(
                "field has {} nodes, got {} values",
                self.values.len(),
                values.len()
            )));
        }
        for n in 0..values.len() {
            if self.design[n] {
                self.values[n] = values[n].clamp(-1.0, 1.0);
            }
        }
        Ok(())
    }
}

/// Nodal `h(φ)`.
pub fn characteristic(field: &LevelSetField, params: &HeavisideParams) -> Vec<f64> {
    field.values.iter().map(|&p| smoothed_heaviside(p, params)).collect()
}

/// Diagonal diffusion tensor. Omitted entries take the defaults: weak
/// in-plane smoothing and moderate smoothing through the thickness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizationTensor {
    pub tau_x: f64,
    pub tau_y: f64,
    pub tau_z: f64,
}

impl Default for RegularizationTensor {
    fn default() -> Self {
        Self {
            tau_x: 1e-7,
            tau_y: 1e-7,
            tau_z: 1e-4,
        }
    }
}

impl RegularizationTensor {
    pub fn isotropic(tau: f64) -> Self {
        Self {
            tau_x: tau,
            tau_y: tau,
            tau_z: tau,
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let t = [self.tau_x, self.tau_y, self.tau_z];
        if t.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidConfig(format!("{name} entries must be nonnegative")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.tau_x, self.tau_y, self.tau_z]
    }
}

fn default_k() -> f64 {
    1.0
}

fn default_c() -> f64 {
    2.0
}

fn default_dt() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateParams {
    #[serde(default = "default_k")]
    pub k_coeff: f64,
    #[serde(default = "default_c")]
    pub c_norm: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// length that nondimensionalizes the diffusion term (m); defaults to
    /// the plate side length
    #[serde(default)]
    pub length_scale: Option<f64>,
}

impl Default for UpdateParams {
    fn default() -> Self {
        Self {
            k_coeff: 1.0,
            c_norm: 2.0,
            dt: default_dt(),
            length_scale: None,
        }
    }
}

impl UpdateParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("k_coeff", self.k_coeff), ("c_norm", self.c_norm), ("dt", self.dt)] {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!("update.{name} must be positive")));
            }
        }
        if let Some(l) = self.length_scale {
            if !(l > 0.0) {
                return Err(Error::InvalidConfig("update.length_scale must be positive".into()));
            }
        }
        Ok(())
    }
}

/// `c̃·raw` with `c̃ = c ∫dΩ / ∫|raw| dΩ` under lumped nodal quadrature.
pub fn normalize_sensitivity(raw: &[f64], volumes: &[f64], c_norm: f64) -> Result<Vec<f64>> {
    let total: f64 = volumes.iter().sum();
    let weighted: f64 = raw.iter().zip(volumes).map(|(r, v)| r.abs() * v).sum();
    if !(weighted > 0.0) || !weighted.is_finite() {
        return Err(Error::VanishedGradient);
    }
    let c = c_norm * total / weighted;
    Ok(raw.iter().map(|r| r * c).collect())
}

/// Prepared implicit reaction–diffusion step for one field.
#[derive(Debug, Clone)]
pub struct LevelSetUpdater {
    laplacian: CsrMatrix,
    volumes: Vec<f64>,
}

impl LevelSetUpdater {
    /// Assembles the anisotropic Laplacian over the field's own design
    /// elements. `tau` is applied in coordinates scaled by `length_scale`.
    pub fn new(mesh: &Mesh, kind: FieldKind, tau: &RegularizationTensor, length_scale: f64) -> Result<Self> {
        tau.validate("tau")?;
        let nn = mesh.n_nodes();
        let t = tau.as_array().map(|v| v * length_scale * length_scale);
        let mut b = TripletBuilder::new(nn, nn);
        for e in 0..mesh.n_elements() {
            if !kind.design_tag(mesh.tag(e)) {
                continue;
            }
            let geo = ElementGeometry::new(&mesh.element_coords(e), e)?;
            let conn = mesh.element(e);
            let mut ke = [[0.0; 8]; 8];
            for g in 0..8 {
                for a in 0..8 {
                    for c in 0..8 {
                        let s: f64 = (0..3).map(|k| t[k] * geo.grad[g][a][k] * geo.grad[g][c][k]).sum();
                        ke[a][c] += s * geo.wdet[g];
                    }
                }
            }
            for a in 0..8 {
                for c in 0..8 {
                    b.push(conn[a], conn[c], ke[a][c]);
                }
            }
        }
        Ok(Self {
            laplacian: b.build(),
            volumes: lumped_volumes(mesh),
        })
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    /// One semi-implicit step of `∂φ/∂t = K(c̃F′ + ∇·τ∇φ)`.
    ///
    /// `sensitivity` must already be normalized. Frozen nodes act as
    /// Dirichlet data; the result is clamped to `[−1, 1]`.
    pub fn step(&self, field: &LevelSetField, sensitivity: &[f64], params: &UpdateParams) -> Result<LevelSetField> {
        params.validate()?;
        let nn = field.values.len();
        if sensitivity.len() != nn || self.volumes.len() != nn {
            return Err(Error::SizeMismatch("sensitivity length differs from the field".into()));
        }
        let mut index = vec![None; nn];
        let mut count = 0;
        for n in 0..nn {
            if field.design[n] {
                index[n] = Some(count);
                count += 1;
            }
        }
        let kdt = params.k_coeff * params.dt;
        let mut b = TripletBuilder::new(count, count);
        let mut rhs = vec![0.0; count];
        for n in 0..nn {
            let Some(r) = index[n] else { continue };
            let v = self.volumes[n];
            b.push(r, r, v);
            rhs[r] = v * (field.values[n] + kdt * sensitivity[n]);
            for (c, a) in self.laplacian.row(n) {
                match index[c] {
                    Some(col) => b.push(r, col, kdt * a),
                    None => rhs[r] -= kdt * a * field.values[c],
                }
            }
        }
        let mut out = field.clone();
        if count == 0 {
            return Ok(out);
        }
        let sol = LdlFactor::new(&b.build(), "level-set update")?.solve(&rhs);
        for n in 0..nn {
            if let Some(r) = index[n] {
                out.values[n] = sol[r].clamp(-1.0, 1.0);
            }
        }
        Ok(out)
    }
}

/// Convenience wrapper building the updater for a single step.
pub fn update_field(
    field: &LevelSetField,
    sensitivity: &[f64],
    tau: &RegularizationTensor,
    params: &UpdateParams,
    mesh: &Mesh,
) -> Result<LevelSetField> {
    let scale = params.length_scale.unwrap_or(1.0);
    LevelSetUpdater::new(mesh, field.kind, tau, scale)?.step(field, sensitivity, params)
}

/// `(N_φ1, N_φ2)`: fractions of nodes whose effective level-set value has the
/// opposite sign of the node below. The effective value is `φ_p` at and above
/// the piezo/substrate interface and `φ_s` below it. `N_φ2` ignores pairs that
/// straddle the interface.
pub fn manufacturability_metrics(phi_p: &[f64], phi_s: &[f64], mesh: &Mesh) -> (f64, f64) {
    let interface = mesh
        .pzt_ground_nodes()
        .first()
        .map_or(f64::INFINITY, |&n| mesh.node(n)[2]);
    let tol = 1e-12 * (1.0 + interface.abs());
    let upper = |n: usize| mesh.node(n)[2] >= interface - tol;
    let eff = |n: usize| if upper(n) { phi_p[n] } else { phi_s[n] };
    let mut n1 = 0usize;
    let mut n2 = 0usize;
    for n in 0..mesh.n_nodes() {
        if let Some(b) = mesh.neighbor_below(n) {
            if eff(n) * eff(b) < 0.0 {
                n1 += 1;
                if upper(n) == upper(b) {
                    n2 += 1;
                }
            }
        }
    }
    let total = mesh.n_nodes() as f64;
    (n1 as f64 / total, n2 as f64 / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chain(n: usize) -> Mesh {
        let zs: Vec<f64> = (0..n).map(|k| k as f64).collect();
        Mesh::from_lattice(&[0.0, 1.0], &[0.0, 1.0], &zs, |_, _, _, _| Some(RegionTag::SbDesign)).unwrap()
    }

    #[test]
    fn characteristic_values() {
        let mesh = chain(3);
        let hp = HeavisideParams::default();
        let mut f = LevelSetField::initial(&mesh, FieldKind::Substrate);
        assert!(characteristic(&f, &hp).iter().all(|&v| v == 1.0));
        f.values.iter_mut().for_each(|v| *v = -1.0);
        assert!(characteristic(&f, &hp).iter().all(|&v| v == 0.01));
        f.values[2] = 0.0;
        assert_eq!(characteristic(&f, &hp)[2], 0.505);
    }

    #[test]
    fn normalization() {
        let vol = vec![0.5, 1.5, 2.0];
        let out = normalize_sensitivity(&[-3.0, -3.0, -3.0], &vol, 2.0).unwrap();
        assert!(out.iter().all(|v| (v + 2.0).abs() < 1e-14));
        let raw = [1.0, -4.0, 2.0];
        let a = normalize_sensitivity(&raw, &vol, 2.0).unwrap();
        let b = normalize_sensitivity(&raw.map(|v| v * 10.0), &vol, 2.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
        // brute-force quadrature of the quotient
        let c = 2.0 * 4.0 / (0.5 * 1.0 + 1.5 * 4.0 + 2.0 * 2.0);
        assert!((a[1] - c * -4.0).abs() < 1e-14);
        assert!(matches!(normalize_sensitivity(&[0.0; 3], &vol, 2.0), Err(Error::VanishedGradient)));
    }

    #[test]
    fn steady_state_and_pure_reaction() {
        let mesh = chain(4);
        let f = LevelSetField::initial(&mesh, FieldKind::Substrate);
        let mut g = f.clone();
        g.values.iter_mut().for_each(|v| *v = 0.3);
        let tau = RegularizationTensor::isotropic(1.0);
        let p = UpdateParams::default();
        let out = update_field(&g, &vec![0.0; mesh.n_nodes()], &tau, &p, &mesh).unwrap();
        for v in &out.values {
            assert!((v - 0.3).abs() < 1e-14);
        }
        let mut sens = vec![0.0; mesh.n_nodes()];
        let params = UpdateParams { dt: 0.5, ..UpdateParams::default() };
        sens[5] = 0.2; // K·F′·dt = 0.1
        let out = update_field(&g, &sens, &RegularizationTensor::isotropic(0.0), &params, &mesh).unwrap();
        assert!((out.values[5] - 0.4).abs() < 1e-14);
        assert!((out.values[4] - 0.3).abs() < 1e-14);
    }

    #[test]
    fn three_node_chain_oracle() {
        // 1×1×2 elements, τ only along z: the in-plane uniform solution obeys
        // the 1D system (V + dt A) φ⁺ = V φ with A the 1D stiffness times area
        let mesh = chain(3);
        let mut f = LevelSetField::initial(&mesh, FieldKind::Substrate);
        for n in 0..mesh.n_nodes() {
            f.values[n] = [0.9, -0.2, 0.5][mesh.lattice_index(n)[2]];
        }
        let tau = RegularizationTensor {
            tau_x: 0.0,
            tau_y: 0.0,
            tau_z: 0.3,
        };
        let params = UpdateParams { dt: 2.0, ..UpdateParams::default() };
        let out = update_field(&f, &vec![0.0; mesh.n_nodes()], &tau, &params, &mesh).unwrap();
        let (dt, t) = (2.0, 0.3);
        let v = [0.5, 1.0, 0.5];
        let a = [[t, -t, 0.0], [-t, 2.0 * t, -t], [0.0, -t, t]];
        let m = nalgebra::Matrix3::from_fn(|r, c| if r == c { v[r] } else { 0.0 } + dt * a[r][c]);
        let rhs = nalgebra::Vector3::new(v[0] * 0.9, v[1] * -0.2, v[2] * 0.5);
        let sol = m.lu().solve(&rhs).unwrap();
        for n in 0..mesh.n_nodes() {
            let k = mesh.lattice_index(n)[2];
            assert!((out.values[n] - sol[k]).abs() < 1e-13);
        }
    }

    #[test]
    fn frozen_nodes_keep_values() {
        let mesh = Mesh::from_lattice(&[0.0, 1.0, 2.0], &[0.0, 1.0], &[0.0, 1.0], |i, _, _, _| {
            Some(if i == 0 { RegionTag::SbNondesign } else { RegionTag::SbDesign })
        })
        .unwrap();
        let f = LevelSetField::initial(&mesh, FieldKind::Substrate);
        assert_eq!(f.n_design(), 4);
        let sens = vec![-50.0; mesh.n_nodes()];
        let out = update_field(&f, &sens, &RegularizationTensor::isotropic(1.0), &UpdateParams::default(), &mesh)
            .unwrap();
        for n in 0..mesh.n_nodes() {
            if !f.design[n] {
                assert_eq!(out.values[n], 1.0);
            } else {
                assert!(out.values[n] >= -1.0);
            }
        }
        assert!(out.values.iter().any(|v| *v == -1.0));
    }

    #[test]
    fn metrics_count_sign_flips() {
        // 100 nodes: 2×5 columns of 10 layers
        let zs: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let mesh = Mesh::from_lattice(&[0.0, 1.0], &[0.0, 1.0, 2.0, 3.0, 4.0], &zs, |_, _, k, _| {
            Some(if k >= 5 { RegionTag::PeDesign } else { RegionTag::SbDesign })
        })
        .unwrap();
        assert_eq!(mesh.n_nodes(), 100);
        let ones = vec![1.0; 100];
        assert_eq!(manufacturability_metrics(&ones, &ones, &mesh), (0.0, 0.0));
        // one flip inside the piezo layer
        let mut p = ones.clone();
        let top = (0..100).find(|&n| mesh.lattice_index(n) == [0, 0, 9]).unwrap();
        p[top] = -1.0;
        assert_eq!(manufacturability_metrics(&p, &ones, &mesh), (0.01, 0.01));
        // one flip across the interface (z = 5 above, z = 4 below)
        let mut s = ones.clone();
        for n in 0..100 {
            let [i, j, k] = mesh.lattice_index(n);
            if i == 0 && j == 0 && k <= 4 {
                s[n] = -1.0;
            }
        }
        assert_eq!(manufacturability_metrics(&ones, &s, &mesh), (0.01, 0.0));
    }

    proptest! {
        #[test]
        fn update_is_clamped_and_smooths(vals in proptest::collection::vec(-1.0f64..1.0, 6),
                                         sens in proptest::collection::vec(-30.0f64..30.0, 24),
                                         tau in 0.0f64..5.0) {
            let mesh = chain(6);
            let mut f = LevelSetField::initial(&mesh, FieldKind::Substrate);
            for n in 0..mesh.n_nodes() {
                f.values[n] = vals[mesh.lattice_index(n)[2]];
            }
            let t = RegularizationTensor { tau_x: 0.0, tau_y: 0.0, tau_z: tau };
            let p = UpdateParams::default();
            let out = update_field(&f, &sens, &t, &p, &mesh).unwrap();
            prop_assert!(out.values.iter().all(|v| v.abs() <= 1.0));

            let tv = |v: &[f64]| -> f64 {
                (0..mesh.n_nodes()).filter_map(|n| mesh.neighbor_below(n).map(|b| (v[n] - v[b]).abs())).sum()
            };
            let smooth = update_field(&f, &vec![0.0; 24], &t, &p, &mesh).unwrap();
            prop_assert!(tv(&smooth.values) <= tv(&f.values) + 1e-12);
        }

        #[test]
        fn update_commutes_with_relabeling(seed in 0u64..1000) {
            // mirror the chain in x: a node relabeling that maps the mesh onto itself
            let mesh = Mesh::from_lattice(&[0.0, 1.0, 2.0], &[0.0, 1.0], &[0.0, 1.0, 2.0], |_, _, _, _| Some(RegionTag::SbDesign)).unwrap();
            let nn = mesh.n_nodes();
            let perm: Vec<usize> = (0..nn).map(|n| {
                let [i, j, k] = mesh.lattice_index(n);
                (0..nn).find(|&m| mesh.lattice_index(m) == [2 - i, j, k]).unwrap()
            }).collect();
            let mut f = LevelSetField::initial(&mesh, FieldKind::Substrate);
            let mut sens = vec![0.0; nn];
            for n in 0..nn {
                let x = ((n as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0;
                f.values[n] = 2.0 * x - 1.0;
                sens[n] = 3.0 * x - 1.5;
            }
            let t = RegularizationTensor::isotropic(0.7);
            let p = UpdateParams::default();
            let out = update_field(&f, &sens, &t, &p, &mesh).unwrap();
            let mut g = f.clone();
            let mut sp = vec![0.0; nn];
            for n in 0..nn {
                g.values[perm[n]] = f.values[n];
                sp[perm[n]] = sens[n];
            }
            let outp = update_field(&g, &sp, &t, &p, &mesh).unwrap();
            for n in 0..nn {
                prop_assert!((outp.values[perm[n]] - out.values[n]).abs() < 1e-12);
            }
        }
    }
}
