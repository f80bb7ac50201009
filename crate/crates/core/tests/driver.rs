use std::path::PathBuf;

use pehopt_core::config::{self, RunConfig};
use pehopt_core::fem::{DerivativeMode, GaussSample};
use pehopt_core::history::{self, HistoryRow};
use pehopt_core::level_set::{FieldKind, LevelSetField};
use pehopt_core::optimizer::{self, NoOutput, OutputWriter, RunObserver, Snapshot};
use pehopt_core::vtk;

fn coarse(overrides: &[&str]) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.toml");
    let mut o = vec!["run.coarse=true".to_string()];
    o.extend(overrides.iter().map(|s| s.to_string()));
    config::load(&path, &o).unwrap()
}

fn initial_omegas(cfg: &RunConfig) -> Vec<f64> {
    let model = optimizer::build_model(cfg).unwrap();
    let p = LevelSetField::initial(model.mesh(), FieldKind::Piezo).values;
    let s = LevelSetField::initial(model.mesh(), FieldKind::Substrate).values;
    let eval = optimizer::evaluate(&model, cfg, &p, &s, 0.0).map_err(|(_, e)| e).unwrap();
    eval.report.omega_oc
}

#[test]
fn one_iteration_writes_one_snapshot() {
    let cfg = coarse(&["run.max_iterations=1"]);
    let dir = tempfile::tempdir().unwrap();
    let mut out = OutputWriter::new(dir.path(), &cfg).unwrap();
    let state = optimizer::run(&cfg, &mut out).unwrap();
    assert_eq!(state.iteration, 1);
    assert_eq!(state.history.len(), 1);
    let snapshots: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("snapshot_"))
        .collect();
    assert_eq!(snapshots, vec!["snapshot_0001.vtk".to_string()]);
    assert!(dir.path().join("result.vtk").exists());
    let (head, rows) = history::read_csv(&dir.path().join("history.csv")).unwrap();
    assert_eq!(head, history::header(4));
    assert_eq!(rows.len(), 1);
}

#[test]
fn single_worker_runs_are_bitwise_identical() {
    let cfg = coarse(&["run.max_iterations=3"]);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let csv = || {
        let state = pool.install(|| optimizer::run(&cfg, &mut NoOutput)).unwrap();
        history::render_csv(&state.history, 4).unwrap()
    };
    let a = csv();
    assert_eq!(a, csv());
    assert_eq!(a.lines().count(), 4);
}

/// Records material weights at every Gauss point of nondesign elements.
struct FrozenProbe {
    model: pehopt_core::fem::PiezoModel,
    samples: Vec<Vec<(f64, f64, f64, f64)>>,
    frozen_nodes: Vec<Vec<(f64, f64)>>,
}

impl RunObserver for FrozenProbe {
    fn snapshot(&mut self, snap: &Snapshot<'_>) -> pehopt_core::Result<()> {
        let st = &snap.evaluation.state;
        let mesh = self.model.mesh();
        let mut s = Vec::new();
        for e in 0..mesh.n_elements() {
            if mesh.tag(e).is_design() {
                continue;
            }
            for g in 0..8 {
                let GaussSample { w_p, w_s, chi_p, chi_s, .. } = self.model.sample(st, e, g, DerivativeMode::Derivative);
                s.push((w_p, w_s, chi_p, chi_s));
            }
        }
        self.samples.push(s);
        let p = LevelSetField::initial(mesh, FieldKind::Piezo);
        let q = LevelSetField::initial(mesh, FieldKind::Substrate);
        self.frozen_nodes.push(
            (0..mesh.n_nodes())
                .filter(|&n| !p.design[n] && !q.design[n])
                .map(|n| (st.phi_p[n], st.phi_s[n]))
                .collect(),
        );
        Ok(())
    }
}

#[test]
fn nondesign_regions_stay_frozen() {
    let cfg = coarse(&["run.max_iterations=4"]);
    let mut probe = FrozenProbe {
        model: optimizer::build_model(&cfg).unwrap(),
        samples: Vec::new(),
        frozen_nodes: Vec::new(),
    };
    let state = optimizer::run(&cfg, &mut probe).unwrap();
    assert_eq!(probe.samples.len(), 4);
    assert!(!probe.samples[0].is_empty());
    assert!(probe.samples.iter().all(|s| s == &probe.samples[0]));
    assert!(probe.frozen_nodes.iter().all(|s| s == &probe.frozen_nodes[0]));
    // the design did move
    let init = LevelSetField::initial(probe.model.mesh(), FieldKind::Piezo);
    assert_ne!(state.field_p.values, init.values);
}

#[test]
fn frequency_objective_descends() {
    let mut cfg = coarse(&["run.max_iterations=20", "objective.alpha_pe=0.0", "objective.alpha_sb=0.0"]);
    let two_pi = 2.0 * std::f64::consts::PI;
    cfg.objective.target_frequencies = initial_omegas(&cfg).iter().map(|w| 0.9 * w / two_pi).collect();
    let state = optimizer::run(&cfg, &mut NoOutput).unwrap();
    let f: Vec<f64> = state.history.iter().map(|r: &HistoryRow| r.report.f_omega).collect();
    assert_eq!(f.len(), 20);
    assert!(f[19] < f[0], "F_omega {} -> {}", f[0], f[19]);
}

#[test]
fn on_target_design_is_stationary() {
    let mut cfg = coarse(&["run.max_iterations=3", "objective.alpha_pe=0.0", "objective.alpha_sb=0.0"]);
    let two_pi = 2.0 * std::f64::consts::PI;
    cfg.objective.target_frequencies = initial_omegas(&cfg).iter().map(|w| w / two_pi).collect();
    let state = optimizer::run(&cfg, &mut NoOutput).unwrap();
    assert!(state.history[0].report.f_omega < 1e-24);
    let mesh = optimizer::build_model(&cfg).unwrap();
    let init = LevelSetField::initial(mesh.mesh(), FieldKind::Piezo);
    assert_eq!(state.field_p.values, init.values);
    assert_eq!(state.history.len(), 3);
}

#[test]
fn saved_result_reanalyzes_to_final_row() {
    let cfg = coarse(&["run.max_iterations=3"]);
    let dir = tempfile::tempdir().unwrap();
    let mut out = OutputWriter::new(dir.path(), &cfg).unwrap();
    let state = optimizer::run(&cfg, &mut out).unwrap();
    let file = vtk::read(&dir.path().join("result.vtk")).unwrap();
    let model = optimizer::build_model(&cfg).unwrap();
    let eval = optimizer::evaluate(
        &model,
        &cfg,
        file.field("phi_p").unwrap(),
        file.field("phi_s").unwrap(),
        0.0,
    )
    .map_err(|(_, e)| e)
    .unwrap();
    let last = &state.history.last().unwrap().report;
    assert!((eval.report.v_e - last.v_e).abs() <= 1e-9 * last.v_e);
    for (a, b) in eval.report.omega_oc.iter().zip(&last.omega_oc) {
        assert!((a - b).abs() <= 1e-9 * b);
    }
    assert_eq!(file.regions.len(), model.mesh().n_elements());
}
