use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn benchmark() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.toml")
}

fn pehopt(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pehopt"))
        .args(args)
        .env("PEHOPT_OUT", out)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value_after(text: &str, key: &str) -> f64 {
    let line = text
        .lines()
        .find(|l| l.split_whitespace().next() == Some(key))
        .unwrap_or_else(|| panic!("no `{key}` line in\n{text}"));
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

const NO_COUPLING: [&str; 6] = [
    "--set",
    "materials.piezo.e31=0",
    "--set",
    "materials.piezo.e33=0",
    "--set",
    "materials.piezo.e15=0",
];

#[test]
fn bad_override_exits_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = benchmark();
    let o = pehopt(
        &["analyze", "-c", cfg.to_str().unwrap(), "--coarse", "--set", "run.lambda_rate=-1"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda_rate"));
}

#[test]
fn missing_domain_key_exits_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("partial.toml");
    std::fs::write(&cfg, "[domain]\nplate_side_length = 500.0\n").unwrap();
    let o = pehopt(&["mesh", "-c", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("domain.pe_thickness"));
}

#[test]
fn missing_fields_file_exits_with_runtime_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = benchmark();
    let missing = dir.path().join("absent.vtk");
    let o = pehopt(
        &["analyze", "-c", cfg.to_str().unwrap(), "--coarse", "--fields", missing.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn uncoupled_design_is_reported_and_cannot_be_optimized() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = benchmark();
    let mut args = vec!["analyze", "-c", cfg.to_str().unwrap(), "--coarse"];
    args.extend(NO_COUPLING);
    let o = pehopt(&args, dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("no electromechanical coupling"), "{text}");
    assert_eq!(value_after(&text, "V_E"), 0.0);

    let mut args = vec!["run", "-c", cfg.to_str().unwrap(), "--coarse", "--set", "run.max_iterations=3"];
    args.extend(NO_COUPLING);
    let o = pehopt(&args, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("coupling"));
}

#[test]
fn mesh_command_writes_mesh_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = benchmark();
    let o = pehopt(&["mesh", "-c", cfg.to_str().unwrap(), "--coarse"], dir.path());
    assert!(o.status.success());
    assert!(dir.path().join("mesh.vtk").exists());
    assert!(stdout(&o).contains("PeDesign"));
}

#[test]
fn short_run_writes_history_and_result_that_reanalyze() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = benchmark();
    let o = pehopt(
        &[
            "run",
            "-c",
            cfg.to_str().unwrap(),
            "--coarse",
            "--set",
            "run.max_iterations=5",
            "--set",
            "run.snapshot_every=2",
        ],
        &out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    for name in ["snapshot_0001.vtk", "snapshot_0003.vtk", "snapshot_0005.vtk", "result.vtk"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    assert!(!out.join("snapshot_0002.vtk").exists());

    let result = out.join("result.vtk");
    let a = pehopt(
        &["analyze", "-c", cfg.to_str().unwrap(), "--coarse", "--fields", result.to_str().unwrap()],
        dir.path(),
    );
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let v_run = value_after(&stdout(&o), "V_E");
    let v_again = value_after(&stdout(&a), "V_E");
    // the run summary prints 7 significant digits
    assert!((v_run - v_again).abs() <= 1e-6 * v_again, "{v_run} vs {v_again}");

    let head: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let last: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
    let col = head.iter().position(|h| *h == "V_E").expect("V_E column");
    let v_csv: f64 = last[col].parse().unwrap();
    assert!((v_csv - v_again).abs() <= 1e-9 * v_again, "{v_csv} vs {v_again}");

    let m = pehopt(
        &["metrics", "-c", cfg.to_str().unwrap(), "--coarse", "--fields", result.to_str().unwrap()],
        dir.path(),
    );
    assert!(m.status.success());
    let text = stdout(&m);
    assert!(value_after(&text, "N_phi1") >= 0.0);
    assert!((0.0..=1.0).contains(&value_after(&text, "unsupported_piezo")));
}
