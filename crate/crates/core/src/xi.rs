//! Fictitious diffusion field marking piezo columns that rest on substrate.
//!
//! The field is solved on the design layers with a strongly anisotropic
//! conductivity: inside substrate material a source pins it near `+ξ̄_s`,
//! inside void substrate near `−ξ̄_s`, and the bottom face is held at `−ξ̄₀`.
//! Vertical diffusion then carries the sign of the substrate column up into
//! the piezo layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::ElementGeometry;
use crate::materials::{smoothed_heaviside, HeavisideParams};
use crate::mesh::{Mesh, RegionTag};
use crate::sparse::{LdlFactor, TripletBuilder};

fn default_kappa_z() -> f64 {
    1.0
}

fn default_kappa_xy() -> f64 {
    1e-4
}

fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XiConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_kappa_xy")]
    pub kappa_x: f64,
    #[serde(default = "default_kappa_xy")]
    pub kappa_y: f64,
    #[serde(default = "default_kappa_z")]
    pub kappa_z: f64,
    #[serde(default = "default_one")]
    pub xi_source: f64,
    #[serde(default = "default_one")]
    pub xi_sink: f64,
    /// source coefficient; defaults to `100·κ_z/H²` with `H` the design-layer
    /// thickness
    #[serde(default)]
    pub penalty: Option<f64>,
}

impl Default for XiConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            kappa_x: 1e-4,
            kappa_y: 1e-4,
            kappa_z: 1.0,
            xi_source: 1.0,
            xi_sink: 1.0,
            penalty: None,
        }
    }
}

impl XiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_z > 0.0) || self.kappa_x < 0.0 || self.kappa_y < 0.0 {
            return Err(Error::InvalidConfig(
                "xi conductivities must satisfy kappa_z > 0 and kappa_x, kappa_y >= 0".into(),
            ));
        }
        if !(self.xi_source > 0.0) || !(self.xi_sink > 0.0) {
            return Err(Error::InvalidConfig("xi.xi_source and xi.xi_sink must be positive".into()));
        }
        if let Some(p) = self.penalty {
            if p < 0.0 {
                return Err(Error::InvalidConfig("xi.penalty must be nonnegative".into()));
            }
        }
        Ok(())
    }

    pub fn penalty_for(&self, mesh: &Mesh) -> f64 {
        self.penalty.unwrap_or_else(|| {
            let h = design_thickness(mesh);
            100.0 * self.kappa_z / (h * h)
        })
    }
}

fn design_thickness(mesh: &Mesh) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for e in 0..mesh.n_elements() {
        if mesh.tag(e).is_design() {
            for &n in mesh.element(e) {
                lo = lo.min(mesh.node(n)[2]);
                hi = hi.max(mesh.node(n)[2]);
            }
        }
    }
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

/// Nodal fictitious field.
#[derive(Debug, Clone, PartialEq)]
pub struct XiField {
    pub values: Vec<f64>,
}

impl XiField {
    /// Discrete maximum-principle bound check.
    pub fn within_bounds(&self, cfg: &XiConfig) -> bool {
        let tol = 1e-6 * (cfg.xi_source + cfg.xi_sink);
        self.values
            .iter()
            .all(|&v| v >= -cfg.xi_source.max(cfg.xi_sink) - tol && v <= cfg.xi_source + tol)
    }
}

/// Solves the fictitious field for substrate level set `phi_s`.
///
/// Only design elements take part; nodes outside them are set to `ξ̄_s`.
pub fn solve_xi(mesh: &Mesh, phi_s: &[f64], cfg: &XiConfig, heaviside: &HeavisideParams) -> Result<XiField> {
    cfg.validate()?;
    let nn = mesh.n_nodes();
    if phi_s.len() != nn {
        return Err(Error::SizeMismatch(format!("phi_s has {} values for {nn} nodes", phi_s.len())));
    }
    let penalty = cfg.penalty_for(mesh);
    let kappa = [cfg.kappa_x, cfg.kappa_y, cfg.kappa_z];

    let mut active = vec![false; nn];
    for e in 0..mesh.n_elements() {
        if mesh.tag(e).is_design() {
            for &n in mesh.element(e) {
                active[n] = true;
            }
        }
    }
    let mut fixed = vec![None; nn];
    for &n in mesh.gamma_xi_nodes() {
        fixed[n] = Some(-cfg.xi_sink);
    }
    let mut index = vec![None; nn];
    let mut count = 0;
    for n in 0..nn {
        if active[n] && fixed[n].is_none() {
            index[n] = Some(count);
            count += 1;
        }
    }

    let mut b = TripletBuilder::new(count, count);
    let mut rhs = vec![0.0; count];
    for e in 0..mesh.n_elements() {
        let tag = mesh.tag(e);
        if !tag.is_design() {
            continue;
        }
        let conn = mesh.element(e);
        let geo = ElementGeometry::new(&mesh.element_coords(e), e)?;
        // h of the negated region indicator: 1 in the substrate, d in the film
        let h_sp = if tag == RegionTag::SbDesign { 1.0 } else { heaviside.d };
        let mut ke = [[0.0; 8]; 8];
        let mut fe = [0.0; 8];
        for g in 0..8 {
            let n = &geo.n[g];
            let grad = &geo.grad[g];
            let wd = geo.wdet[g];
            let phi: f64 = (0..8).map(|a| n[a] * phi_s[conn[a]]).sum();
            let chi = smoothed_heaviside(phi, heaviside);
            let target = cfg.xi_source * (2.0 * chi - 1.0);
            for a in 0..8 {
                for c in 0..8 {
                    let diff: f64 = (0..3).map(|k| kappa[k] * grad[a][k] * grad[c][k]).sum();
                    ke[a][c] += diff * wd;
                }
                // lumped reaction keeps the discrete maximum principle
                ke[a][a] += penalty * h_sp * n[a] * wd;
                fe[a] += penalty * h_sp * target * n[a] * wd;
            }
        }
        for a in 0..8 {
            let Some(r) = index[conn[a]] else { continue };
            rhs[r] += fe[a];
            for c in 0..8 {
                match (index[conn[c]], fixed[conn[c]]) {
                    (Some(col), _) => b.push(r, col, ke[a][c]),
                    (None, Some(v)) => rhs[r] -= ke[a][c] * v,
                    (None, None) => {}
                }
            }
        }
    }
    let values_free = if count > 0 {
        LdlFactor::new(&b.build(), "fictitious field")?.solve(&rhs)
    } else {
        Vec::new()
    };
    let values = (0..nn)
        .map(|n| match (index[n], fixed[n]) {
            (Some(i), _) => values_free[i],
            (None, Some(v)) if active[n] => v,
            _ => cfg.xi_source,
        })
        .collect();
    Ok(XiField { values })
}

/// Rescales `ξ` to the level-set range: `clamp(ξ/ξ̄_s, −1, 1)`.
pub fn scaled_xi(xi: &XiField, cfg: &XiConfig) -> Vec<f64> {
    xi.values
        .iter()
        .map(|v| (v / cfg.xi_source).clamp(-1.0, 1.0))
        .collect()
}

/// Nodal `h(φ_p)·h(ξ′)`.
pub fn effective_pe_characteristic(
    phi_p: &[f64],
    xi: &XiField,
    cfg: &XiConfig,
    heaviside: &HeavisideParams,
) -> Vec<f64> {
    phi_p
        .iter()
        .zip(scaled_xi(xi, cfg))
        .map(|(&p, x)| smoothed_heaviside(p, heaviside) * smoothed_heaviside(x, heaviside))
        .collect()
}

/// Fraction of piezo design elements that carry effective piezo material
/// (element-average `χ_p_eff > 0.5`) with no substrate element below them in
/// their column (every substrate element there has average `χ_s < 0.5`).
pub fn unsupported_piezo_fraction(mesh: &Mesh, chi_p_eff: &[f64], chi_s: &[f64]) -> f64 {
    let avg = |f: &[f64], e: usize| mesh.element(e).iter().map(|&n| f[n]).sum::<f64>() / 8.0;
    let col = |e: usize| mesh.column(mesh.element(e)[0]);
    let mut supported = std::collections::HashSet::new();
    for e in 0..mesh.n_elements() {
        if mesh.tag(e) == RegionTag::SbDesign && avg(chi_s, e) >= 0.5 {
            supported.insert(col(e));
        }
    }
    let pe: Vec<usize> = (0..mesh.n_elements()).filter(|&e| mesh.tag(e) == RegionTag::PeDesign).collect();
    if pe.is_empty() {
        return 0.0;
    }
    let bad = pe
        .iter()
        .filter(|&&e| avg(chi_p_eff, e) > 0.5 && !supported.contains(&col(e)))
        .count();
    bad as f64 / pe.len() as f64
}
