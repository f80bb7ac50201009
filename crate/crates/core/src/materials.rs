//! Material constants, the smoothed Heaviside and ersatz interpolation.

use nalgebra::{Matrix3, Matrix6, SMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix3x6 = SMatrix<f64, 3, 6>;

/// Vacuum permittivity in F/m.
pub const EPS_VACUUM: f64 = 8.854_187_812_8e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsotropicElastic {
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub density: f64,
}

impl IsotropicElastic {
    pub fn silicon() -> Self {
        Self {
            youngs_modulus: 169e9,
            poisson_ratio: 0.28,
            density: 2329.0,
        }
    }

    pub fn pzt() -> Self {
        Self {
            youngs_modulus: 60e9,
            poisson_ratio: 0.31,
            density: 7750.0,
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.youngs_modulus > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "{name}.youngs_modulus must be positive"
            )));
        }
        if !(self.poisson_ratio >= 0.0 && self.poisson_ratio < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "{name}.poisson_ratio must lie in [0, 0.5), got {}",
                self.poisson_ratio
            )));
        }
        if !(self.density > 0.0) {
            return Err(Error::InvalidConfig(format!("{name}.density must be positive")));
        }
        Ok(())
    }
}

/// Isotropic Voigt elasticity matrix, ordering `[xx, yy, zz, yz, xz, xy]`
/// with engineering shear strains.
pub fn elasticity_matrix(mat: &IsotropicElastic) -> Result<Matrix6<f64>> {
    mat.validate("material")?;
    let e = mat.youngs_modulus;
    let nu = mat.poisson_ratio;
    let lam = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = e / (2.0 * (1.0 + nu));
    let mut c = Matrix6::zeros();
    for i in 0..3 {
        for j in 0..3 {
            c[(i, j)] = lam;
        }
        c[(i, i)] = lam + 2.0 * mu;
        c[(i + 3, i + 3)] = mu;
    }
    Ok(c)
}

/// Piezoelectric stress constants and clamped permittivity, poled along +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiezoCoupling {
    pub e31: f64,
    pub e33: f64,
    pub e15: f64,
    /// relative clamped permittivity (x, y, z)
    pub eps_relative: [f64; 3],
    #[serde(default = "default_eps_vacuum")]
    pub eps_vacuum: f64,
}

fn default_eps_vacuum() -> f64 {
    EPS_VACUUM
}

impl PiezoCoupling {
    pub fn pzt() -> Self {
        Self {
            e31: -5.4,
            e33: 15.8,
            e15: 12.3,
            eps_relative: [1730.0, 1730.0, 1700.0],
            eps_vacuum: EPS_VACUUM,
        }
    }

    /// 3×6 coupling matrix `e` (charge per area) for polarization along z.
    pub fn e_matrix(&self) -> Matrix3x6 {
        let mut e = Matrix3x6::zeros();
        e[(2, 0)] = self.e31;
        e[(2, 1)] = self.e31;
        e[(2, 2)] = self.e33;
        e[(1, 3)] = self.e15;
        e[(0, 4)] = self.e15;
        e
    }

    pub fn eps_s(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&nalgebra::Vector3::from(self.eps_relative)) * self.eps_vacuum
    }

    /// Permittivity along the polarization axis.
    pub fn eps_z(&self) -> f64 {
        self.eps_relative[2] * self.eps_vacuum
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps_relative.iter().any(|v| !(*v > 0.0)) || !(self.eps_vacuum > 0.0) {
            return Err(Error::InvalidConfig(
                "materials.piezo permittivities must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeavisideParams {
    pub w: f64,
    pub d: f64,
}

impl Default for HeavisideParams {
    fn default() -> Self {
        Self { w: 0.9, d: 0.01 }
    }
}

impl HeavisideParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.w <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "heaviside.w must lie in (0, 1], got {}",
                self.w
            )));
        }
        if !(self.d > 0.0 && self.d < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "heaviside.d must lie in (0, 1), got {}",
                self.d
            )));
        }
        Ok(())
    }
}

/// Quintic smoothed Heaviside with floor `d`.
pub fn smoothed_heaviside(phi: f64, p: &HeavisideParams) -> f64 {
    if phi < -p.w {
        p.d
    } else if phi > p.w {
        1.0
    } else {
        let x = phi / p.w;
        let x2 = x * x;
        (0.5 + x * (15.0 / 16.0 - x2 * (5.0 / 8.0 - 3.0 / 16.0 * x2))) * (1.0 - p.d) + p.d
    }
}

/// Derivative of [`smoothed_heaviside`] with respect to `phi`.
pub fn heaviside_derivative(phi: f64, p: &HeavisideParams) -> f64 {
    if phi.abs() > p.w {
        0.0
    } else {
        let x = phi / p.w;
        let x2 = x * x;
        (15.0 / 16.0) * (1.0 - x2) * (1.0 - x2) * (1.0 - p.d) / p.w
    }
}

/// User-facing material configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaterialConfig {
    pub substrate: IsotropicElastic,
    pub piezo_elastic: IsotropicElastic,
    pub piezo: PiezoCoupling,
    pub heaviside: HeavisideParams,
}

impl Default for MaterialConfig {
    fn default() -> Self {
        Self {
            substrate: IsotropicElastic::silicon(),
            piezo_elastic: IsotropicElastic::pzt(),
            piezo: PiezoCoupling::pzt(),
            heaviside: HeavisideParams::default(),
        }
    }
}

/// Precomputed constitutive matrices.
#[derive(Debug, Clone)]
pub struct Materials {
    pub config: MaterialConfig,
    pub c_sb: Matrix6<f64>,
    pub c_pe: Matrix6<f64>,
    pub e: Matrix3x6,
    pub eps_s: Matrix3<f64>,
    pub eps0: f64,
    pub rho_sb: f64,
    pub rho_pe: f64,
    pub heaviside: HeavisideParams,
}

impl Materials {
    pub fn new(config: MaterialConfig) -> Result<Self> {
        config.substrate.validate("materials.substrate")?;
        config.piezo_elastic.validate("materials.piezo_elastic")?;
        config.piezo.validate()?;
        config.heaviside.validate()?;
        Ok(Self {
            c_sb: elasticity_matrix(&config.substrate)?,
            c_pe: elasticity_matrix(&config.piezo_elastic)?,
            e: config.piezo.e_matrix(),
            eps_s: config.piezo.eps_s(),
            eps0: config.piezo.eps_vacuum,
            rho_sb: config.substrate.density,
            rho_pe: config.piezo_elastic.density,
            heaviside: config.heaviside,
            config,
        })
    }

    pub fn h(&self, phi: f64) -> f64 {
        smoothed_heaviside(phi, &self.heaviside)
    }

    pub fn dh(&self, phi: f64) -> f64 {
        heaviside_derivative(phi, &self.heaviside)
    }

    pub fn eps_z(&self) -> f64 {
        self.eps_s[(2, 2)]
    }

    /// Constitutive data of the weight block: silicon stiffness, scaled
    /// density, vacuum permittivity, no coupling.
    pub fn weight_properties(&self, density_factor: f64) -> PointProperties {
        PointProperties {
            c: self.c_sb,
            e: Matrix3x6::zeros(),
            eps: Matrix3::identity() * self.eps0,
            rho: self.rho_sb * density_factor,
        }
    }
}

/// Effective constitutive data at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointProperties {
    pub c: Matrix6<f64>,
    pub e: Matrix3x6,
    pub eps: Matrix3<f64>,
    pub rho: f64,
}

/// Piezo and substrate material weights `(w_p, w_s)`.
///
/// `w_p = h_ps·h_p·h_xi`; the substrate weight uses the Heaviside of the
/// negated region indicator, `h_sp = 1 + d − h_ps` (the quintic is odd about
/// its midpoint), times `h_s`.
pub fn material_weights(h_p: f64, h_s: f64, h_xi: f64, h_ps: f64, d: f64) -> (f64, f64) {
    let h_sp = 1.0 + d - h_ps;
    (h_ps * h_p * h_xi, h_sp * h_s)
}

/// Ersatz-interpolated properties from the two material weights.
///
/// The vacuum background `ε₀(1 − w_p − w_s)` is floored at `d·ε₀` so the
/// permittivity stays positive definite where both weights overlap.
pub fn properties_from_weights(w_p: f64, w_s: f64, mats: &Materials) -> PointProperties {
    let background = (1.0 - (w_p + w_s)).max(mats.heaviside.d);
    PointProperties {
        c: mats.c_pe * w_p + mats.c_sb * w_s,
        e: mats.e * w_p,
        eps: Matrix3::identity() * (mats.eps0 * background) + mats.eps_s * w_p,
        rho: mats.rho_pe * w_p + mats.rho_sb * w_s,
    }
}

/// Partial derivatives of the permittivity background with respect to the
/// weights; zero where the floor is active.
pub fn background_slope(w_p: f64, w_s: f64, mats: &Materials) -> f64 {
    if 1.0 - (w_p + w_s) > mats.heaviside.d {
        -mats.eps0
    } else {
        0.0
    }
}

pub fn interpolate_properties(
    h_p: f64,
    h_s: f64,
    h_xi: f64,
    h_ps: f64,
    mats: &Materials,
) -> PointProperties {
    let (w_p, w_s) = material_weights(h_p, h_s, h_xi, h_ps, mats.heaviside.d);
    properties_from_weights(w_p, w_s, mats)
}
