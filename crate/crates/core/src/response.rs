//! Forced response by modal superposition and the output-voltage measure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{DerivativeMode, DesignState, ModeSet, PiezoModel};

fn default_accel() -> f64 {
    1.0
}

fn default_damping() -> f64 {
    0.01
}

fn default_eval_mode() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcitationConfig {
    /// base acceleration amplitude along +z (m/s²)
    #[serde(default = "default_accel")]
    pub base_acceleration: f64,
    /// evaluation frequency in Hz; defaults to the target of `eval_mode`
    #[serde(default)]
    pub eval_frequency: Option<f64>,
    /// 1-based target index used when `eval_frequency` is unset
    #[serde(default = "default_eval_mode")]
    pub eval_mode: usize,
    #[serde(default = "default_damping")]
    pub damping_ratio: f64,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        Self {
            base_acceleration: 1.0,
            eval_frequency: None,
            eval_mode: 1,
            damping_ratio: 0.01,
        }
    }
}

impl ExcitationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping_ratio > 0.0) {
            return Err(Error::InvalidConfig("excitation.damping_ratio must be positive".into()));
        }
        if let Some(f) = self.eval_frequency {
            if !(f > 0.0) {
                return Err(Error::InvalidConfig("excitation.eval_frequency must be positive".into()));
            }
        }
        if self.eval_mode == 0 {
            return Err(Error::InvalidConfig("excitation.eval_mode is 1-based".into()));
        }
        Ok(())
    }
}

/// Modal forces `F_i = u_ocᵢᵀ f`.
pub fn modal_force(modes: &ModeSet, load: &[f64]) -> Vec<f64> {
    (0..modes.len())
        .map(|i| modes.u_oc(i).iter().zip(load).map(|(a, b)| a * b).sum())
        .collect()
}

/// Steady-state modal amplitudes at angular frequency `eval_omega`.
pub fn modal_amplitudes(forces: &[f64], omegas: &[f64], eval_omega: f64, zeta: f64) -> Result<Vec<f64>> {
    forces
        .iter()
        .zip(omegas)
        .enumerate()
        .map(|(i, (&f, &w))| {
            if !(w > 0.0) {
                return Err(Error::ZeroFrequency { mode: i + 1 });
            }
            let r = eval_omega / w;
            Ok(f / (w * ((1.0 - r * r).powi(2) + 4.0 * zeta * zeta * r * r).sqrt()))
        })
        .collect()
}

/// Displacement `Σ qᵢ u_ocᵢ`.
pub fn superpose(modes: &ModeSet, q: &[f64]) -> Vec<f64> {
    let mut u = vec![0.0; modes.u_oc(0).len()];
    for (i, &qi) in q.iter().enumerate() {
        for (a, b) in u.iter_mut().zip(modes.u_oc(i)) {
            *a += qi * b;
        }
    }
    u
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoltageResult {
    pub v_e: f64,
    /// `∫ χ_p ∂φ/∂z` (signed)
    pub q_proxy: f64,
    /// `∫ χ_p / (ε_z L_z²)`
    pub c_p_proxy: f64,
    pub volume_pe: f64,
}

/// Output voltage from a potential vector (indexed by potential DOF).
///
/// Integrals run over piezo-tagged elements weighted by the effective piezo
/// characteristic. The reported voltage is the magnitude; the sign of the
/// harmonic response is a phase convention.
pub fn output_voltage(
    model: &PiezoModel,
    state: &DesignState,
    potential: &[f64],
    l_z: f64,
) -> Result<VoltageResult> {
    let mesh = model.mesh();
    let dofs = model.dofs();
    if potential.len() != dofs.n_pot {
        return Err(Error::SizeMismatch(format!(
            "potential has {} entries, expected {}",
            potential.len(),
            dofs.n_pot
        )));
    }
    let eps_z = model.materials().eps_z();
    let mut q = 0.0;
    let mut vol = 0.0;
    for e in 0..mesh.n_elements() {
        if !mesh.tag(e).is_piezo() {
            continue;
        }
        let geo = model.geometry(e);
        let conn = mesh.element(e);
        for g in 0..8 {
            let chi = model.sample(state, e, g, DerivativeMode::Derivative).chi_p;
            let dz: f64 = (0..8)
                .map(|a| geo.grad[g][a][2] * potential[dofs.pot_of_node[conn[a]].unwrap()])
                .sum();
            q += chi * dz * geo.wdet[g];
            vol += chi * geo.wdet[g];
        }
    }
    if !(vol > 0.0) {
        return Err(Error::EmptyPiezoLayer);
    }
    let c = vol / (eps_z * l_z * l_z);
    Ok(VoltageResult {
        v_e: q.abs() / c,
        q_proxy: q,
        c_p_proxy: c,
        volume_pe: vol,
    })
}

/// `G_V = vol − ε_z L_z² |Q| / V_min`; satisfied when `≤ 0`.
pub fn voltage_constraint(result: &VoltageResult, v_min: f64, eps_z: f64, l_z: f64) -> Result<f64> {
    if !(v_min > 0.0) {
        return Err(Error::InvalidConfig(format!("voltage_min must be positive, got {v_min}")));
    }
    Ok(result.volume_pe - eps_z * l_z * l_z * result.q_proxy.abs() / v_min)
}
