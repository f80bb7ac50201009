//! Coupling, frequency-tracking and combined objectives with their adjoint
//! sensitivities.
//!
//! Target frequencies are configured in Hz and converted to rad/s. For an
//! `M`-normalized eigenpair, the adjoint states are scaled copies of the
//! eigenvectors, so each sensitivity reduces to `Σ c_i · dλ_i/dφ` where the
//! eigenvalue gradients come from [`PiezoModel::eigen_gradient`].

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{DerivativeMode, DesignState, ModeSet, PiezoModel};

/// Which form of the adjoint coefficients to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientForm {
    /// exact derivative of the objectives with respect to `ω²`
    #[default]
    Exact,
    /// coupling terms without the `1/ω̄²` factor
    Unnormalized,
}

fn default_n_modes() -> usize {
    4
}

fn default_targets() -> Vec<f64> {
    vec![70.0, 435.0, 450.0, 500.0]
}

fn default_alpha() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(default = "default_n_modes")]
    pub n_modes: usize,
    /// target eigenfrequencies in Hz
    #[serde(default = "default_targets")]
    pub target_frequencies: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha_pe: f64,
    #[serde(default = "default_alpha")]
    pub alpha_sb: f64,
    #[serde(default)]
    pub coefficient_form: CoefficientForm,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            n_modes: 4,
            target_frequencies: default_targets(),
            alpha_pe: 0.95,
            alpha_sb: 0.95,
            coefficient_form: CoefficientForm::Exact,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_modes == 0 {
            return Err(Error::InvalidConfig("objective.n_modes must be at least 1".into()));
        }
        if self.target_frequencies.len() != self.n_modes {
            return Err(Error::InvalidConfig(format!(
                "objective.target_frequencies has {} entries but n_modes is {}",
                self.target_frequencies.len(),
                self.n_modes
            )));
        }
        if self.target_frequencies.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::InvalidConfig(
                "objective.target_frequencies must all be positive".into(),
            ));
        }
        for (name, a) in [("alpha_pe", self.alpha_pe), ("alpha_sb", self.alpha_sb)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidConfig(format!("objective.{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Targets in rad/s.
    pub fn target_omegas(&self) -> Vec<f64> {
        self.target_frequencies.iter().map(|f| 2.0 * PI * f).collect()
    }
}

/// `k² = (ω_oc² − ω_sc²)/ω_oc²`.
pub fn coupling_coefficient(omega_oc: f64, omega_sc: f64) -> Result<f64> {
    if omega_oc < omega_sc {
        return Err(Error::ModeOrdering {
            mode: 0,
            omega_oc,
            omega_sc,
        });
    }
    if !(omega_sc > 0.0) {
        return Err(Error::ZeroFrequency { mode: 0 });
    }
    Ok((omega_oc * omega_oc - omega_sc * omega_sc) / (omega_oc * omega_oc))
}

/// `Σ (ω_oc − ω̄)²/ω̄²`.
pub fn objective_f_omega(omega_oc: &[f64], targets: &[f64]) -> f64 {
    omega_oc
        .iter()
        .zip(targets)
        .map(|(w, t)| (w - t) * (w - t) / (t * t))
        .sum()
}

/// `Σ ω_oc²/((ω_oc² − ω_sc²) ω̄²)`.
pub fn objective_f_k(omega_oc: &[f64], omega_sc: &[f64], targets: &[f64]) -> Result<f64> {
    let mut sum = 0.0;
    for (i, ((o, s), t)) in omega_oc.iter().zip(omega_sc).zip(targets).enumerate() {
        let split = o * o - s * s;
        if !(split > 0.0) {
            return Err(Error::ZeroCoupling { mode: i + 1 });
        }
        sum += o * o / (split * t * t);
    }
    Ok(sum)
}

/// `(F_pe, F_sb)` as convex combinations of `F_k` and `F_ω`.
pub fn combined_objectives(f_k: f64, f_omega: f64, alpha_pe: f64, alpha_sb: f64) -> (f64, f64) {
    (
        alpha_pe * f_k + (1.0 - alpha_pe) * f_omega,
        alpha_sb * f_k + (1.0 - alpha_sb) * f_omega,
    )
}

/// Per-mode multipliers of `dλ_oc/dφ` and `dλ_sc/dφ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointCoefficients {
    pub c_oc_pe: Vec<f64>,
    pub c_sc_pe: Vec<f64>,
    pub c_oc_sb: Vec<f64>,
    pub c_sc_sb: Vec<f64>,
}

pub fn adjoint_coefficients(
    omega_oc: &[f64],
    omega_sc: &[f64],
    targets: &[f64],
    alpha_pe: f64,
    alpha_sb: f64,
    form: CoefficientForm,
) -> Result<AdjointCoefficients> {
    let n = omega_oc.len();
    let mut out = AdjointCoefficients {
        c_oc_pe: Vec::with_capacity(n),
        c_sc_pe: Vec::with_capacity(n),
        c_oc_sb: Vec::with_capacity(n),
        c_sc_sb: Vec::with_capacity(n),
    };
    for i in 0..n {
        let (wo, ws, t) = (omega_oc[i], omega_sc[i], targets[i]);
        let (lo, ls) = (wo * wo, ws * ws);
        let split = lo - ls;
        if !(split > 0.0) {
            return Err(Error::ZeroCoupling { mode: i + 1 });
        }
        let norm = match form {
            CoefficientForm::Exact => t * t,
            CoefficientForm::Unnormalized => 1.0,
        };
        let k_oc = -ls / (split * split * norm);
        let k_sc = lo / (split * split * norm);
        // targets given in Hz come back from rad/s within a few ulps
        let track = if (wo - t).abs() <= 4.0 * f64::EPSILON * t {
            0.0
        } else {
            (wo - t) / (wo * t * t)
        };
        out.c_oc_pe.push(alpha_pe * k_oc + (1.0 - alpha_pe) * track);
        out.c_sc_pe.push(alpha_pe * k_sc);
        out.c_oc_sb.push(alpha_sb * k_oc + (1.0 - alpha_sb) * track);
        out.c_sc_sb.push(alpha_sb * k_sc);
    }
    Ok(out)
}

/// Nodal sensitivity densities of `L_pe` and `L_sb`.
#[derive(Debug, Clone)]
pub struct SensitivityFields {
    pub fprime_pe: Vec<f64>,
    pub fprime_sb: Vec<f64>,
    pub coefficients: AdjointCoefficients,
}

/// Evaluates the sensitivity densities.
///
/// Nodal gradients are divided by lumped nodal volumes to give densities;
/// `lambda` is added on the nodes flagged in `lambda_nodes`.
pub fn sensitivity_fields(
    model: &PiezoModel,
    state: &DesignState,
    modes: &ModeSet,
    coeffs: AdjointCoefficients,
    lambda: f64,
    lambda_nodes: &[bool],
    mode: DerivativeMode,
) -> SensitivityFields {
    let nn = model.mesh().n_nodes();
    let mut pe = vec![0.0; nn];
    let mut sb = vec![0.0; nn];
    for i in 0..modes.len() {
        let (op, os) = model.eigen_gradient(
            state,
            modes.u_oc(i),
            Some(modes.phi_oc(i)),
            modes.omega_oc(i).powi(2),
            mode,
        );
        let (sp, ss) = model.eigen_gradient(state, modes.u_sc(i), None, modes.omega_sc(i).powi(2), mode);
        for n in 0..nn {
            pe[n] += coeffs.c_oc_pe[i] * op[n] + coeffs.c_sc_pe[i] * sp[n];
            sb[n] += coeffs.c_oc_sb[i] * os[n] + coeffs.c_sc_sb[i] * ss[n];
        }
    }
    let vol = model.lumped_volumes();
    for n in 0..nn {
        pe[n] /= vol[n];
        sb[n] /= vol[n];
        if lambda_nodes[n] {
            pe[n] += lambda;
        }
    }
    SensitivityFields {
        fprime_pe: pe,
        fprime_sb: sb,
        coefficients: coeffs,
    }
}

/// Projected ascent on the voltage multiplier.
pub fn update_lambda(g_v: f64, lambda: f64, rate: f64, volume_pe: f64) -> f64 {
    (lambda + rate * g_v / volume_pe).max(0.0)
}

/// Objective values of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveReport {
    pub omega_oc: Vec<f64>,
    pub omega_sc: Vec<f64>,
    pub k2: Vec<f64>,
    pub f_k: f64,
    pub f_omega: f64,
    pub f_pe: f64,
    pub f_sb: f64,
    pub v_e: f64,
    pub g_v: f64,
    pub lambda: f64,
}

/// Coupling per paired mode, reporting the offending mode on failure.
pub fn coupling_per_mode(modes: &ModeSet) -> Result<Vec<f64>> {
    (0..modes.len())
        .map(|i| {
            let (o, s) = (modes.omega_oc(i), modes.omega_sc(i));
            if !(s > 0.0) {
                return Err(Error::ZeroFrequency { mode: i + 1 });
            }
            if o < s * (1.0 - 1e-10) {
                return Err(Error::ModeOrdering {
                    mode: i + 1,
                    omega_oc: o,
                    omega_sc: s,
                });
            }
            Ok(((o * o - s * s) / (o * o)).max(0.0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coupling_values() {
        assert_eq!(coupling_coefficient(3.0, 3.0).unwrap(), 0.0);
        assert!((coupling_coefficient(2f64.sqrt(), 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((coupling_coefficient(100.0, 99.0).unwrap() - 0.0199).abs() < 1e-15);
        assert!(coupling_coefficient(1.0, 2.0).is_err());
    }

    #[test]
    fn frequency_objective() {
        assert_eq!(objective_f_omega(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(objective_f_omega(&[2.0], &[1.0]), 1.0);
        let t: Vec<f64> = [70.0, 435.0, 450.0, 500.0].iter().map(|f| 2.0 * PI * f).collect();
        let w: Vec<f64> = t.iter().zip([1.1, 0.9, 1.0, 1.05]).map(|(a, b)| a * b).collect();
        let expect = 0.01 + 0.01 + 0.0 + 0.0025;
        assert!((objective_f_omega(&w, &t) - expect).abs() < 1e-14);
    }

    #[test]
    fn coupling_objective() {
        let f = objective_f_k(&[2f64.sqrt()], &[1.0], &[1.0]).unwrap();
        assert!((f - 2.0).abs() < 1e-14);
        let oc = [10.0, 21.0, 33.0, 40.0];
        let sc = [9.0, 20.0, 30.0, 39.5];
        let t = [9.5, 20.0, 31.0, 41.0];
        let t2: Vec<f64> = t.iter().map(|x| 2.0 * x).collect();
        let a = objective_f_k(&oc, &sc, &t).unwrap();
        let b = objective_f_k(&oc, &sc, &t2).unwrap();
        assert!((a / b - 4.0).abs() < 1e-12);
        let brute: f64 = (0..4)
            .map(|i| oc[i] * oc[i] / ((oc[i] * oc[i] - sc[i] * sc[i]) * t[i] * t[i]))
            .sum();
        assert!((a - brute).abs() < 1e-15 * brute);
        assert!(matches!(
            objective_f_k(&[1.0, 2.0], &[0.5, 2.0], &[1.0, 1.0]),
            Err(Error::ZeroCoupling { mode: 2 })
        ));
    }

    #[test]
    fn combined_values() {
        assert_eq!(combined_objectives(2.0, 4.0, 1.0, 0.0), (2.0, 4.0));
        let (pe, _) = combined_objectives(2.0, 4.0, 0.95, 0.95);
        assert!((pe - 2.1).abs() < 1e-14);
    }

    #[test]
    fn unnormalized_coefficients() {
        let c = adjoint_coefficients(&[3.0], &[2.0], &[2.5], 0.0, 1.0, CoefficientForm::Unnormalized).unwrap();
        assert_eq!(c.c_sc_pe[0], 0.0);
        assert!((c.c_oc_pe[0] - 0.5 / (3.0 * 6.25)).abs() < 1e-15);
        let c = adjoint_coefficients(&[3.0], &[2.0], &[3.0], 0.7, 0.7, CoefficientForm::Unnormalized).unwrap();
        assert!((c.c_oc_pe[0] + 0.7 * 4.0 / 25.0).abs() < 1e-15);
        assert!((c.c_sc_pe[0] - 0.7 * 9.0 / 25.0).abs() < 1e-15);
        assert!(adjoint_coefficients(&[2.0], &[2.0], &[1.0], 0.5, 0.5, CoefficientForm::Exact).is_err());
    }

    #[test]
    fn exact_coefficients_match_finite_differences() {
        let (wo, ws, t, a) = (3.0f64, 2.0f64, 2.5f64, 0.6);
        let c = adjoint_coefficients(&[wo], &[ws], &[t], a, a, CoefficientForm::Exact).unwrap();
        let f = |lo: f64, ls: f64| {
            let (o, s) = (lo.sqrt(), ls.sqrt());
            let (pe, _) = combined_objectives(
                objective_f_k(&[o], &[s], &[t]).unwrap(),
                objective_f_omega(&[o], &[t]),
                a,
                a,
            );
            pe
        };
        let h = 1e-5;
        let (lo, ls) = (wo * wo, ws * ws);
        let d_oc = (f(lo + h, ls) - f(lo - h, ls)) / (2.0 * h);
        let d_sc = (f(lo, ls + h) - f(lo, ls - h)) / (2.0 * h);
        assert!((d_oc - c.c_oc_pe[0]).abs() < 1e-8);
        assert!((d_sc - c.c_sc_pe[0]).abs() < 1e-8);
    }

    #[test]
    fn on_target_tracking_vanishes() {
        let w = 2.0 * PI * 70.0;
        let t = (w / (2.0 * PI)) * 2.0 * PI;
        let c = adjoint_coefficients(&[w], &[0.9 * w], &[t], 0.0, 0.0, CoefficientForm::Exact).unwrap();
        assert_eq!(c.c_oc_pe[0], 0.0);
        assert_eq!(c.c_oc_sb[0], 0.0);
        let c = adjoint_coefficients(&[w * (1.0 + 1e-9)], &[0.9 * w], &[t], 0.0, 0.0, CoefficientForm::Exact).unwrap();
        assert!(c.c_oc_pe[0] > 0.0);
    }

    #[test]
    fn lambda_rule() {
        assert_eq!(update_lambda(-1.0, 0.0, 1.0, 2.0), 0.0);
        assert!(update_lambda(0.5, 0.0, 1.0, 2.0) > 0.0);
        let mut l = 0.0;
        for k in 1..=5 {
            l = update_lambda(0.4, l, 2.0, 4.0);
            assert!((l - 0.2 * k as f64).abs() < 1e-14);
        }
    }
}
