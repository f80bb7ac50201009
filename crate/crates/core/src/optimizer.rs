//! Optimization loop: evaluate, record, check convergence, update.

use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::config::{RunConfig, RunMode};
use crate::eigen::LanczosOptions;
use crate::error::{Error, Result};
use crate::fem::{pair_modes, DesignState, ModeSet, PiezoModel};
use crate::history::{self, HistoryRow};
use crate::level_set::{manufacturability_metrics, normalize_sensitivity, FieldKind, LevelSetField, LevelSetUpdater};
use crate::materials::{smoothed_heaviside, Materials};
use crate::mesh::{build_benchmark_mesh, Mesh, RegionTag};
use crate::objectives::{
    adjoint_coefficients, combined_objectives, coupling_per_mode, objective_f_k, objective_f_omega,
    sensitivity_fields, update_lambda, ObjectiveReport,
};
use crate::response::{modal_amplitudes, modal_force, output_voltage, superpose, voltage_constraint, VoltageResult};
use crate::vtk;
use crate::xi::{effective_pe_characteristic, scaled_xi, solve_xi, XiField};

/// Loop state after a run.
#[derive(Debug, Clone)]
pub struct OptimizationState {
    pub field_p: LevelSetField,
    pub field_s: LevelSetField,
    pub xi: Option<XiField>,
    pub lambda: f64,
    pub iteration: usize,
    pub history: Vec<HistoryRow>,
    pub converged: bool,
}

/// Everything computed for one design.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub state: DesignState,
    pub xi: Option<XiField>,
    pub modes: ModeSet,
    pub voltage: VoltageResult,
    pub report: ObjectiveReport,
    pub n_phi: (f64, f64),
}

impl Evaluation {
    /// Nodal effective piezo characteristic and substrate characteristic.
    pub fn characteristics(&self, cfg: &RunConfig) -> (Vec<f64>, Vec<f64>) {
        let st = &self.state;
        let hp = &cfg.materials.heaviside;
        let chi_p = match &self.xi {
            Some(x) => effective_pe_characteristic(&st.phi_p, x, &cfg.xi, hp),
            None => st.phi_p.iter().map(|&p| smoothed_heaviside(p, hp)).collect(),
        };
        let chi_s = st.phi_s.iter().map(|&p| smoothed_heaviside(p, hp)).collect();
        (chi_p, chi_s)
    }
}

/// Nodal data handed to observers.
#[derive(Debug)]
pub struct Snapshot<'a> {
    pub iteration: usize,
    pub mesh: &'a Mesh,
    pub evaluation: &'a Evaluation,
    pub is_final: bool,
}

impl Snapshot<'_> {
    /// Named point fields in output order.
    pub fn point_fields(&self, cfg: &RunConfig) -> Vec<(&'static str, Vec<f64>)> {
        let st = &self.evaluation.state;
        let (chi_p, chi_s) = self.evaluation.characteristics(cfg);
        let mut out = vec![
            ("phi_p", st.phi_p.clone()),
            ("phi_s", st.phi_s.clone()),
            ("chi_p_eff", chi_p),
            ("chi_s", chi_s),
        ];
        if let Some(x) = &self.evaluation.xi {
            out.push(("xi", x.values.clone()));
        }
        out
    }
}

/// Receives history rows and scheduled snapshots.
pub trait RunObserver {
    fn row(&mut self, _row: &HistoryRow) -> Result<()> {
        Ok(())
    }

    fn snapshot(&mut self, _snap: &Snapshot<'_>) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoOutput;

impl RunObserver for NoOutput {}

/// Writes `history.csv`, `snapshot_<iter>.vtk` and `result.vtk` into a directory.
pub struct OutputWriter {
    dir: PathBuf,
    cfg: RunConfig,
    rows: Vec<HistoryRow>,
}

impl OutputWriter {
    pub fn new(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            cfg: cfg.clone(),
            rows: Vec::new(),
        })
    }
}

impl RunObserver for OutputWriter {
    fn row(&mut self, row: &HistoryRow) -> Result<()> {
        self.rows.push(row.clone());
        history::write_csv(&self.dir.join("history.csv"), &self.rows, self.cfg.objective.n_modes)
    }

    fn snapshot(&mut self, snap: &Snapshot<'_>) -> Result<()> {
        let fields = snap.point_fields(&self.cfg);
        let refs: Vec<(&str, &[f64])> = fields.iter().map(|(n, v)| (*n, v.as_slice())).collect();
        let scheduled = (snap.iteration - 1) % self.cfg.run.snapshot_every == 0;
        if scheduled || snap.is_final {
            let p = self.dir.join(format!("snapshot_{:04}.vtk", snap.iteration));
            vtk::write(&p, snap.mesh, &refs)?;
        }
        if snap.is_final {
            vtk::write(&self.dir.join("result.vtk"), snap.mesh, &refs)?;
        }
        Ok(())
    }
}

/// Builds the finite element model of the configured domain.
pub fn build_model(cfg: &RunConfig) -> Result<PiezoModel> {
    let mesh = build_benchmark_mesh(&cfg.domain)?;
    PiezoModel::new(mesh, Materials::new(cfg.materials)?)
}

/// Piezo-layer thickness in metres.
pub fn piezo_thickness(cfg: &RunConfig) -> f64 {
    cfg.domain.pe_thickness * cfg.domain.length_unit
}

/// Design state for the given level sets, solving the fictitious field when
/// it is enabled.
pub fn design_state(model: &PiezoModel, cfg: &RunConfig, phi_p: &[f64], phi_s: &[f64]) -> Result<(DesignState, Option<XiField>)> {
    let xi = if cfg.xi.enabled {
        Some(solve_xi(model.mesh(), phi_s, &cfg.xi, &cfg.materials.heaviside)?)
    } else {
        None
    };
    let state = DesignState {
        phi_p: phi_p.to_vec(),
        phi_s: phi_s.to_vec(),
        xi_scaled: xi.as_ref().map(|x| scaled_xi(x, &cfg.xi)),
    };
    Ok((state, xi))
}

/// Solves both eigenproblems and the harmonic response for one design.
///
/// Errors carry the stage name; the caller adds the iteration.
pub fn evaluate(model: &PiezoModel, cfg: &RunConfig, phi_p: &[f64], phi_s: &[f64], lambda: f64) -> std::result::Result<Evaluation, (&'static str, Error)> {
    let (state, xi) = design_state(model, cfg, phi_p, phi_s).map_err(|e| ("fictitious field", e))?;
    let system = model.assemble(&state).map_err(|e| ("assembly", e))?;
    let n = cfg.objective.n_modes;
    let opts = LanczosOptions::default();
    let (sc, oc) = rayon::join(
        || system.solve_short_circuit_modes(n, &opts),
        || system.solve_open_circuit_modes(n, &opts),
    );
    let sc = sc.map_err(|e| ("short-circuit eigenproblem", e))?;
    let oc = oc.map_err(|e| ("open-circuit eigenproblem", e))?;
    let modes = pair_modes(sc, oc, &system.m);
    for w in &modes.warnings {
        warn!("{w}");
    }

    let omega_oc: Vec<f64> = (0..modes.len()).map(|i| modes.omega_oc(i)).collect();
    let omega_sc: Vec<f64> = (0..modes.len()).map(|i| modes.omega_sc(i)).collect();
    let k2 = coupling_per_mode(&modes).map_err(|e| ("objectives", e))?;
    let targets = cfg.objective.target_omegas();
    let f_k = objective_f_k(&omega_oc, &omega_sc, &targets).unwrap_or(f64::INFINITY);
    let f_omega = objective_f_omega(&omega_oc, &targets);
    let (f_pe, f_sb) = combined_objectives(f_k, f_omega, cfg.objective.alpha_pe, cfg.objective.alpha_sb);

    let load = model.base_excitation_load(&system, cfg.excitation.base_acceleration);
    let forces = modal_force(&modes, &load);
    let q = modal_amplitudes(&forces, &omega_oc, cfg.eval_omega(), cfg.excitation.damping_ratio)
        .map_err(|e| ("response", e))?;
    let u = superpose(&modes, &q);
    let potential = system.recover_potential(&u).map_err(|e| ("response", e))?;
    let l_z = piezo_thickness(cfg);
    let voltage = output_voltage(model, &state, &potential, l_z).map_err(|e| ("output voltage", e))?;
    let g_v = match cfg.run.voltage_min {
        Some(v) => voltage_constraint(&voltage, v, model.materials().eps_z(), l_z).map_err(|e| ("output voltage", e))?,
        None => f64::NAN,
    };
    let n_phi = manufacturability_metrics(&state.phi_p, &state.phi_s, model.mesh());
    let report = ObjectiveReport {
        omega_oc,
        omega_sc,
        k2,
        f_k,
        f_omega,
        f_pe,
        f_sb,
        v_e: voltage.v_e,
        g_v,
        lambda,
    };
    Ok(Evaluation {
        state,
        xi,
        modes,
        voltage,
        report,
        n_phi,
    })
}

fn series_converged(series: &[f64], ratio: f64, window: usize) -> bool {
    if series.len() < window {
        return false;
    }
    let start = series.len() - window;
    (start.max(1)..series.len()).all(|t| {
        let (prev, cur) = (series[t - 1], series[t]);
        if prev == cur {
            return true;
        }
        (prev / cur - 1.0).abs() < ratio
    })
}

/// True when both objectives changed by less than `ratio` over each of the
/// last `window` iterations.
pub fn check_convergence(history: &[HistoryRow], ratio: f64, window: usize) -> bool {
    let pe: Vec<f64> = history.iter().map(|r| r.report.f_pe).collect();
    let sb: Vec<f64> = history.iter().map(|r| r.report.f_sb).collect();
    !history.is_empty() && series_converged(&pe, ratio, window) && series_converged(&sb, ratio, window)
}

fn masked_volumes(volumes: &[f64], design: &[bool]) -> Vec<f64> {
    volumes
        .iter()
        .zip(design)
        .map(|(&v, &d)| if d { v } else { 0.0 })
        .collect()
}

/// Descent direction `−c̃ F′` restricted to the field's design nodes.
fn descent(fprime: &[f64], field: &LevelSetField, volumes: &[f64], c_norm: f64) -> Result<Vec<f64>> {
    let raw: Vec<f64> = fprime
        .iter()
        .zip(&field.design)
        .map(|(&f, &d)| if d { -f } else { 0.0 })
        .collect();
    normalize_sensitivity(&raw, &masked_volumes(volumes, &field.design), c_norm)
}

fn quantize_field(field: &mut LevelSetField) {
    for v in field.values.iter_mut() {
        *v = vtk::quantize(*v);
    }
}

/// Runs the optimization loop.
pub fn run(cfg: &RunConfig, observer: &mut dyn RunObserver) -> Result<OptimizationState> {
    cfg.validate()?;
    let model = build_model(cfg)?;
    let mesh = model.mesh();
    let single = cfg.run.mode == RunMode::SingleFieldComparison;
    let length_scale = cfg
        .update
        .length_scale
        .unwrap_or(cfg.domain.plate_side_length * cfg.domain.length_unit);

    let (mut field_p, mut field_s, up_p, up_s) = if single {
        let f = LevelSetField::initial(mesh, FieldKind::Combined);
        let u = LevelSetUpdater::new(mesh, FieldKind::Combined, &cfg.tau_pe, length_scale)?;
        (f.clone(), f, u, None)
    } else {
        let fp = LevelSetField::initial(mesh, FieldKind::Piezo);
        let fs = LevelSetField::initial(mesh, FieldKind::Substrate);
        let up = LevelSetUpdater::new(mesh, FieldKind::Piezo, &cfg.tau_pe, length_scale)?;
        let us = LevelSetUpdater::new(mesh, FieldKind::Substrate, &cfg.tau_sb, length_scale)?;
        (fp, fs, up, Some(us))
    };
    let targets = cfg.objective.target_omegas();
    let volume_pe_design = mesh.region_volume(RegionTag::PeDesign);
    let mut lambda = 0.0;
    let mut history_rows: Vec<HistoryRow> = Vec::new();
    let mut converged = false;
    let mut last_xi = None;
    let mut iteration = 0;

    while iteration < cfg.run.max_iterations {
        iteration += 1;
        let eval = evaluate(&model, cfg, &field_p.values, &field_s.values, lambda)
            .map_err(|(stage, e)| e.at(iteration, stage))?;
        let row = HistoryRow {
            iteration,
            report: eval.report.clone(),
            n_phi1: eval.n_phi.0,
            n_phi2: eval.n_phi.1,
        };
        info!(
            "iter {iteration}: F_pe {:.6e} F_sb {:.6e} F_k {:.6e} F_omega {:.6e} V_E {:.6e} N_phi1 {:.5}",
            row.report.f_pe, row.report.f_sb, row.report.f_k, row.report.f_omega, row.report.v_e, row.n_phi1
        );
        observer.row(&row).map_err(|e| e.at(iteration, "history output"))?;
        history_rows.push(row);

        converged = check_convergence(&history_rows, cfg.run.convergence_ratio, cfg.run.convergence_window);
        let last = converged || iteration == cfg.run.max_iterations;
        observer
            .snapshot(&Snapshot {
                iteration,
                mesh,
                evaluation: &eval,
                is_final: last,
            })
            .map_err(|e| e.at(iteration, "snapshot output"))?;
        if last {
            last_xi = eval.xi;
            break;
        }

        // multiplier step and sensitivities
        let g_v = eval.report.g_v;
        if cfg.run.voltage_min.is_some() {
            lambda = update_lambda(g_v, lambda, cfg.run.lambda_rate, volume_pe_design);
        }
        let omega_oc = &eval.report.omega_oc;
        let omega_sc = &eval.report.omega_sc;
        let mut coeffs = adjoint_coefficients(
            omega_oc,
            omega_sc,
            &targets,
            cfg.objective.alpha_pe,
            cfg.objective.alpha_sb,
            cfg.objective.coefficient_form,
        )
        .map_err(|e| e.at(iteration, "sensitivity"))?;
        if single {
            coeffs.c_oc_sb = coeffs.c_oc_pe.clone();
            coeffs.c_sc_sb = coeffs.c_sc_pe.clone();
        }
        let no_lambda = vec![false; mesh.n_nodes()];
        let mut sens = sensitivity_fields(
            &model,
            &eval.state,
            &eval.modes,
            coeffs,
            0.0,
            &no_lambda,
            cfg.run.derivative_mode,
        );
        if lambda > 0.0 {
            // the multiplier is dimensionless; give it the objective's scale
            let flagged: Vec<usize> = (0..mesh.n_nodes())
                .filter(|&n| field_p.design[n] && mesh.node_touches(n, RegionTag::PeDesign))
                .collect();
            let scale = flagged.iter().map(|&n| sens.fprime_pe[n].abs()).sum::<f64>() / flagged.len().max(1) as f64;
            for &n in &flagged {
                sens.fprime_pe[n] += lambda * scale;
            }
        }

        let step = |up: &LevelSetUpdater, field: &LevelSetField, fprime: &[f64]| -> Result<LevelSetField> {
            let s = match descent(fprime, field, up.volumes(), cfg.update.c_norm) {
                Ok(s) => s,
                Err(Error::VanishedGradient) => {
                    info!("iter {iteration}: {:?} sensitivity vanished, field held", field.kind());
                    return Ok(field.clone());
                }
                Err(e) => return Err(e),
            };
            let mut next = up.step(field, &s, &cfg.update)?;
            quantize_field(&mut next);
            Ok(next)
        };
        match &up_s {
            None => {
                let total: Vec<f64> = sens.fprime_pe.iter().zip(&sens.fprime_sb).map(|(a, b)| a + b).collect();
                let next = step(&up_p, &field_p, &total).map_err(|e| e.at(iteration, "level-set update"))?;
                field_s = next.clone();
                field_p = next;
            }
            Some(us) => {
                let np = step(&up_p, &field_p, &sens.fprime_pe).map_err(|e| e.at(iteration, "piezo level-set update"))?;
                let ns = step(us, &field_s, &sens.fprime_sb).map_err(|e| e.at(iteration, "substrate level-set update"))?;
                field_p = np;
                field_s = ns;
            }
        }
    }

    Ok(OptimizationState {
        field_p,
        field_s,
        xi: last_xi,
        lambda,
        iteration,
        history: history_rows,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::ObjectiveReport;

    fn rows(f: &[f64]) -> Vec<HistoryRow> {
        f.iter()
            .enumerate()
            .map(|(i, &v)| HistoryRow {
                iteration: i + 1,
                report: ObjectiveReport {
                    omega_oc: vec![],
                    omega_sc: vec![],
                    k2: vec![],
                    f_k: 0.0,
                    f_omega: 0.0,
                    f_pe: v,
                    f_sb: 2.0 * v,
                    v_e: 0.0,
                    g_v: 0.0,
                    lambda: 0.0,
                },
                n_phi1: 0.0,
                n_phi2: 0.0,
            })
            .collect()
    }

    #[test]
    fn constant_history_converges() {
        assert!(check_convergence(&rows(&[3.0; 10]), 1e-6, 10));
        assert!(check_convergence(&rows(&[3.0; 14]), 1e-6, 10));
        assert!(!check_convergence(&rows(&[3.0; 9]), 1e-6, 10));
    }

    #[test]
    fn alternating_history_does_not_converge() {
        let f: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 1.0 } else { 1.001 }).collect();
        assert!(!check_convergence(&rows(&f), 1e-6, 10));
    }

    #[test]
    fn slow_geometric_decay_converges() {
        let f: Vec<f64> = (0..11).map(|i| (1.0 - 1e-7f64).powi(i)).collect();
        for t in 1..f.len() {
            assert!((f[t - 1] / f[t] - 1.0).abs() < 1e-6);
        }
        assert!(check_convergence(&rows(&f), 1e-6, 10));
        let g: Vec<f64> = (0..11).map(|i| (1.0 - 1e-5f64).powi(i)).collect();
        assert!(!check_convergence(&rows(&g), 1e-6, 10));
    }
}
