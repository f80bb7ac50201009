//! `pehopt`: topology optimization of piezoelectric energy harvesters.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::info;

use pehopt_core::config::{self, RunConfig};
use pehopt_core::level_set::{manufacturability_metrics, FieldKind, LevelSetField};
use pehopt_core::mesh::{configured_volume, RegionTag};
use pehopt_core::optimizer::{self, OutputWriter};
use pehopt_core::xi::unsupported_piezo_fraction;
use pehopt_core::{vtk, Error};

/// Exit status for configuration problems.
const EXIT_CONFIG: u8 = 2;
/// Exit status for failures during a computation.
const EXIT_RUNTIME: u8 = 1;

#[derive(Parser, Debug)]
#[command(name = "pehopt", version, about = "Level-set topology optimization of piezoelectric energy harvesters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration file
    #[arg(long, short)]
    config: PathBuf,
    /// output directory
    #[arg(long, short, env = "PEHOPT_OUT", default_value = "pehopt-out")]
    out: PathBuf,
    /// override a configuration value, e.g. `--set update.dt=0.5`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// worker threads (default: all cores)
    #[arg(long)]
    threads: Option<usize>,
    /// use the coarse desk resolution
    #[arg(long)]
    coarse: bool,
    /// more log output (repeat for debug)
    #[arg(long, short, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the optimization and write history.csv, snapshots and result.vtk
    Run(Common),
    /// Evaluate one design without optimizing
    Analyze {
        #[command(flatten)]
        common: Common,
        /// saved fields (result.vtk or a snapshot); default is the full initial design
        #[arg(long)]
        fields: Option<PathBuf>,
    },
    /// Report cross-section metrics of saved fields
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fields: PathBuf,
    },
    /// Build the mesh, print its statistics and write mesh.vtk
    Mesh(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Run(c) | Command::Mesh(c) => c,
            Command::Analyze { common, .. } | Command::Metrics { common, .. } => common,
        }
    }
}

#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_config_error() { EXIT_CONFIG } else { EXIT_RUNTIME };
        Failure { code, error: e.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            error,
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut overrides = c.overrides.clone();
    if c.coarse {
        overrides.push("run.coarse=true".into());
    }
    config::load(&c.config, &overrides).map_err(|e| Failure {
        code: EXIT_CONFIG,
        error: anyhow::Error::new(e).context(format!("configuration {}", c.config.display())),
    })
}

fn read_fields(path: &Path, n_nodes: usize) -> Result<(Vec<f64>, Vec<f64>), Failure> {
    let file = vtk::read(path)?;
    let get = |name: &str| -> Result<Vec<f64>, Failure> {
        let f = file
            .field(name)
            .with_context(|| format!("{} has no `{name}` point data", path.display()))?;
        if f.len() != n_nodes {
            return Err(anyhow::anyhow!(
                "{} has {} nodes but the configured mesh has {n_nodes}",
                path.display(),
                f.len()
            )
            .into());
        }
        Ok(f.to_vec())
    };
    Ok((get("phi_p")?, get("phi_s")?))
}

fn initial_fields(cfg: &RunConfig, mesh: &pehopt_core::mesh::Mesh) -> (Vec<f64>, Vec<f64>) {
    match cfg.run.mode {
        config::RunMode::SingleFieldComparison => {
            let f = LevelSetField::initial(mesh, FieldKind::Combined).values;
            (f.clone(), f)
        }
        config::RunMode::ExtendedTwoFields => (
            LevelSetField::initial(mesh, FieldKind::Piezo).values,
            LevelSetField::initial(mesh, FieldKind::Substrate).values,
        ),
    }
}

fn print_modes(report: &pehopt_core::objectives::ObjectiveReport) {
    println!("{:>4} {:>14} {:>14} {:>14} {:>14}", "mode", "f_oc [Hz]", "f_sc [Hz]", "k2", "omega_oc");
    let two_pi = 2.0 * std::f64::consts::PI;
    for i in 0..report.omega_oc.len() {
        println!(
            "{:>4} {:>14.6} {:>14.6} {:>14.6e} {:>14.6e}",
            i + 1,
            report.omega_oc[i] / two_pi,
            report.omega_sc[i] / two_pi,
            report.k2[i],
            report.omega_oc[i]
        );
    }
}

fn cmd_run(c: &Common) -> Result<(), Failure> {
    let cfg = load_config(c)?;
    let mut writer = OutputWriter::new(&c.out, &cfg)?;
    let state = optimizer::run(&cfg, &mut writer)?;
    let last = state.history.last().expect("at least one iteration");
    let r = &last.report;
    println!("iterations      {}{}", state.iteration, if state.converged { " (converged)" } else { "" });
    println!("F_pe            {:.6e}", r.f_pe);
    println!("F_sb            {:.6e}", r.f_sb);
    println!("F_k             {:.6e}", r.f_k);
    println!("F_omega         {:.6e}", r.f_omega);
    print_modes(r);
    println!("V_E             {:.6e}", r.v_e);
    if let Some(v) = cfg.run.voltage_min {
        let active = state.lambda > 0.0 || r.g_v >= 0.0;
        println!("V_min           {v:.6e}");
        println!("G_V             {:.6e} ({})", r.g_v, if active { "constraint active" } else { "constraint inactive" });
        println!("lambda          {:.6e}", state.lambda);
    }
    println!("N_phi1          {:.5}", last.n_phi1);
    println!("N_phi2          {:.5}", last.n_phi2);
    println!("output          {}", c.out.display());
    Ok(())
}

fn cmd_analyze(c: &Common, fields: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(c)?;
    let model = optimizer::build_model(&cfg)?;
    let (phi_p, phi_s) = match fields {
        Some(p) => read_fields(p, model.mesh().n_nodes())?,
        None => initial_fields(&cfg, model.mesh()),
    };
    let eval = optimizer::evaluate(&model, &cfg, &phi_p, &phi_s, 0.0).map_err(|(stage, e)| Failure::from(e.at(0, stage)))?;
    let r = &eval.report;
    print_modes(r);
    if r.k2.iter().all(|&k| k == 0.0) {
        println!("no electromechanical coupling: k2 = 0 for all modes");
    }
    println!("V_E             {:.15e}", r.v_e);
    if cfg.run.voltage_min.is_some() {
        println!("G_V             {:.6e}", r.g_v);
    }
    println!("F_k             {:.6e}", r.f_k);
    println!("F_omega         {:.6e}", r.f_omega);
    println!("N_phi1          {:.5}", eval.n_phi.0);
    println!("N_phi2          {:.5}", eval.n_phi.1);
    Ok(())
}

fn cmd_metrics(c: &Common, fields: &Path) -> Result<(), Failure> {
    let cfg = load_config(c)?;
    let mesh = pehopt_core::mesh::build_benchmark_mesh(&cfg.domain)?;
    let (phi_p, phi_s) = read_fields(fields, mesh.n_nodes())?;
    let (n1, n2) = manufacturability_metrics(&phi_p, &phi_s, &mesh);
    println!("N_phi1 {n1:.5}");
    println!("N_phi2 {n2:.5}");
    let file = vtk::read(fields)?;
    if let (Some(chi_p), Some(chi_s)) = (file.field("chi_p_eff"), file.field("chi_s")) {
        let f = unsupported_piezo_fraction(&mesh, chi_p, chi_s);
        println!("unsupported_piezo {f:.5}");
    }
    Ok(())
}

fn cmd_mesh(c: &Common) -> Result<(), Failure> {
    let cfg = load_config(c)?;
    let mesh = pehopt_core::mesh::build_benchmark_mesh(&cfg.domain)?;
    println!("nodes     {}", mesh.n_nodes());
    println!("elements  {}", mesh.n_elements());
    for tag in RegionTag::ALL {
        let n = mesh.tags().iter().filter(|t| **t == tag).count();
        println!("{:<10} {:>6} elements, volume {:.6e} m^3", format!("{tag:?}"), n, mesh.region_volume(tag));
    }
    println!("configured volume {:.6e} m^3", configured_volume(&cfg.domain));
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    let path = c.out.join("mesh.vtk");
    vtk::write(&path, &mesh, &[])?;
    println!("wrote {}", path.display());
    info!("clamp nodes {}, pzt ground nodes {}", mesh.clamp_nodes().len(), mesh.pzt_ground_nodes().len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = cli.command.common();
    let level = match common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} threads: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    let result = match &cli.command {
        Command::Run(c) => cmd_run(c),
        Command::Analyze { common, fields } => cmd_analyze(common, fields.as_deref()),
        Command::Metrics { common, fields } => cmd_metrics(common, fields),
        Command::Mesh(c) => cmd_mesh(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
