//! Run configuration: TOML parsing, `key=value` overrides and validation.
//!
//! Diagnostics carry the dotted key path and, when the value came from a
//! file, the 1-based line number.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::DerivativeMode;
use crate::level_set::{RegularizationTensor, UpdateParams};
use crate::materials::MaterialConfig;
use crate::mesh::{DomainConfig, Resolution};
use crate::objectives::ObjectiveConfig;
use crate::response::ExcitationConfig;
use crate::xi::XiConfig;

/// Geometry keys without defaults.
pub const REQUIRED_DOMAIN_KEYS: [&str; 6] = [
    "plate_side_length",
    "pe_thickness",
    "sb_thickness",
    "clamp_strip_width",
    "weight_square_side",
    "weight_thickness",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// separate piezo and substrate level sets
    #[default]
    ExtendedTwoFields,
    /// one level set shared by both layers
    SingleFieldComparison,
}

fn default_max_iterations() -> usize {
    1000
}

fn default_ratio() -> f64 {
    1e-6
}

fn default_window() -> usize {
    10
}

fn default_snapshot_every() -> usize {
    50
}

fn default_lambda_rate() -> f64 {
    0.05
}

fn default_derivative_mode() -> DerivativeMode {
    DerivativeMode::Substitution
}

/// Loop control settings, the `[run]` table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_ratio")]
    pub convergence_ratio: f64,
    #[serde(default = "default_window")]
    pub convergence_window: usize,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    /// minimum output voltage; unset means unconstrained
    #[serde(default)]
    pub voltage_min: Option<f64>,
    #[serde(default = "default_lambda_rate")]
    pub lambda_rate: f64,
    #[serde(default = "default_derivative_mode")]
    pub derivative_mode: DerivativeMode,
    /// replace the domain resolution by the coarse desk preset
    #[serde(default)]
    pub coarse: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            mode: RunMode::default(),
            max_iterations: default_max_iterations(),
            convergence_ratio: default_ratio(),
            convergence_window: default_window(),
            snapshot_every: default_snapshot_every(),
            voltage_min: None,
            lambda_rate: default_lambda_rate(),
            derivative_mode: default_derivative_mode(),
            coarse: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainConfig,
    #[serde(default)]
    pub materials: MaterialConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub xi: XiConfig,
    #[serde(default)]
    pub excitation: ExcitationConfig,
    #[serde(default)]
    pub update: UpdateParams,
    #[serde(default)]
    pub tau_pe: RegularizationTensor,
    #[serde(default)]
    pub tau_sb: RegularizationTensor,
    #[serde(default)]
    pub run: RunSettings,
}

impl RunConfig {
    /// Benchmark problem with default settings.
    pub fn benchmark() -> Self {
        Self {
            domain: DomainConfig::benchmark(),
            materials: MaterialConfig::default(),
            objective: ObjectiveConfig::default(),
            xi: XiConfig::default(),
            excitation: ExcitationConfig::default(),
            update: UpdateParams::default(),
            tau_pe: RegularizationTensor::default(),
            tau_sb: RegularizationTensor::default(),
            run: RunSettings::default(),
        }
    }

    /// Applies the coarse switch.
    pub fn resolved(mut self) -> Self {
        if self.run.coarse {
            self.domain.resolution = Resolution::coarse();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.objective.validate()?;
        self.xi.validate()?;
        self.excitation.validate()?;
        self.update.validate()?;
        for (name, t) in [("tau_pe", &self.tau_pe), ("tau_sb", &self.tau_sb)] {
            t.validate(name)?;
            if t.tau_x == 0.0 && t.tau_y == 0.0 && t.tau_z == 0.0 {
                return Err(Error::InvalidConfig(format!("{name} needs at least one positive entry")));
            }
        }
        let r = &self.run;
        if r.max_iterations == 0 {
            return Err(Error::InvalidConfig("run.max_iterations must be at least 1".into()));
        }
        if r.convergence_window == 0 {
            return Err(Error::InvalidConfig("run.convergence_window must be at least 1".into()));
        }
        if r.snapshot_every == 0 {
            return Err(Error::InvalidConfig("run.snapshot_every must be at least 1".into()));
        }
        if !(r.convergence_ratio > 0.0) {
            return Err(Error::InvalidConfig("run.convergence_ratio must be positive".into()));
        }
        if !(r.lambda_rate > 0.0) {
            return Err(Error::InvalidConfig("run.lambda_rate must be positive".into()));
        }
        if let Some(v) = r.voltage_min {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig("run.voltage_min must be positive".into()));
            }
        }
        if self.excitation.eval_frequency.is_none() && self.excitation.eval_mode > self.objective.n_modes {
            return Err(Error::InvalidConfig(format!(
                "excitation.eval_mode {} exceeds objective.n_modes {}",
                self.excitation.eval_mode, self.objective.n_modes
            )));
        }
        Ok(())
    }

    /// Evaluation angular frequency for the harmonic response.
    pub fn eval_omega(&self) -> f64 {
        let hz = self
            .excitation
            .eval_frequency
            .unwrap_or(self.objective.target_frequencies[self.excitation.eval_mode - 1]);
        2.0 * std::f64::consts::PI * hz
    }
}

/// Reads and validates a configuration file with overrides applied.
pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, overrides)
}

/// Parses configuration text, applies `key=value` overrides and validates.
pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| span_error(text, &e))?;
    check_required(text, &table)?;
    // typed pass on the file alone so diagnostics point into it; a partial
    // [materials.*] table is only an error if defaults cannot complete it
    if let Err(e) = toml::from_str::<RunConfig>(text) {
        let mut merged = table.clone();
        fill_material_defaults(&mut merged)?;
        if toml::Value::Table(merged).try_into::<RunConfig>().is_err() {
            return Err(span_error(text, &e));
        }
    }

    for o in overrides {
        apply_override(&mut table, o)?;
    }
    fill_material_defaults(&mut table)?;
    let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
        let at = if overrides.is_empty() { "" } else { "after overrides: " };
        Error::InvalidConfig(format!("{at}{}", e.message()))
    })?;
    let cfg = cfg.resolved();
    cfg.validate().map_err(|e| annotate(text, overrides, e))?;
    Ok(cfg)
}

/// Completes partially given material tables with the default constants so
/// that e.g. `materials.piezo.e31 = 0` alone is accepted.
fn fill_material_defaults(table: &mut toml::Table) -> Result<()> {
    let Some(given) = table.get("materials").and_then(|v| v.as_table()) else {
        return Ok(());
    };
    let mut full = toml::Table::try_from(MaterialConfig::default())
        .map_err(|e| Error::InvalidConfig(format!("material defaults: {e}")))?;
    merge_tables(&mut full, given);
    table.insert("materials".into(), toml::Value::Table(full));
    Ok(())
}

fn merge_tables(base: &mut toml::Table, top: &toml::Table) {
    for (k, v) in top {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge_tables(b, t),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn check_required(text: &str, table: &toml::Table) -> Result<()> {
    let domain = table.get("domain").and_then(|v| v.as_table());
    let missing: Vec<String> = REQUIRED_DOMAIN_KEYS
        .iter()
        .filter(|k| domain.is_none_or(|d| !d.contains_key(**k)))
        .map(|k| format!("domain.{k}"))
        .collect();
    if missing.is_empty() {
        return Ok(());
    }
    let at = match locate(text, "domain") {
        Some(l) => format!("table [domain] at line {l}"),
        None => "no [domain] table".to_string(),
    };
    Err(Error::InvalidConfig(format!(
        "missing required key(s) {} ({at})",
        missing.join(", ")
    )))
}

/// Applies one `dotted.key=value` override. Values are read as TOML and
/// fall back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::InvalidConfig(format!("override {spec:?} has an empty key segment")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("override {key}: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn span_error(text: &str, e: &toml::de::Error) -> Error {
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            let path = key_path_at(text, span.start);
            let key = if path.is_empty() { String::new() } else { format!(" key `{path}`") };
            Error::InvalidConfig(format!("line {line}{key}: {}", e.message()))
        }
        None => Error::InvalidConfig(e.message().to_string()),
    }
}

fn header_name(line: &str) -> Option<&str> {
    let t = line.trim();
    if t.starts_with("[[") {
        return t.strip_prefix("[[")?.split("]]").next().map(str::trim);
    }
    t.strip_prefix('[')?.split(']').next().map(str::trim)
}

fn line_key(line: &str) -> Option<&str> {
    let t = line.trim();
    if t.starts_with('#') || t.starts_with('[') {
        return None;
    }
    let (k, _) = t.split_once('=')?;
    Some(k.trim().trim_matches('"'))
}

/// Dotted key path of the entry containing byte `offset`.
fn key_path_at(text: &str, offset: usize) -> String {
    let mut table = String::new();
    let mut start = 0;
    for line in text.split_inclusive('\n') {
        let end = start + line.len();
        if let Some(h) = header_name(line) {
            table = h.to_string();
        }
        if offset < end || end == text.len() {
            return match (header_name(line), line_key(line)) {
                (Some(h), _) => h.to_string(),
                (None, Some(k)) if table.is_empty() => k.to_string(),
                (None, Some(k)) => format!("{table}.{k}"),
                (None, None) => table,
            };
        }
        start = end;
    }
    table
}

/// 1-based line of a dotted key (or table header) in `text`.
pub fn locate(text: &str, path: &str) -> Option<usize> {
    let mut table = String::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(h) = header_name(line) {
            table = h.to_string();
            if table == path {
                return Some(i + 1);
            }
            continue;
        }
        if let Some(k) = line_key(line) {
            let full = if table.is_empty() { k.to_string() } else { format!("{table}.{k}") };
            if full == path {
                return Some(i + 1);
            }
        }
    }
    None
}

/// Adds the line number or override origin to a validation error whose
/// message starts with a key path.
fn annotate(text: &str, overrides: &[String], e: Error) -> Error {
    let Error::InvalidConfig(msg) = &e else { return e };
    let Some(path) = msg.split_whitespace().next() else { return e };
    if let Some(o) = overrides.iter().rev().find(|o| o.split('=').next().map(str::trim) == Some(path)) {
        return Error::InvalidConfig(format!("{msg} (from override {o:?})"));
    }
    match locate(text, path).or_else(|| path.rsplit_once('.').and_then(|(t, _)| locate(text, t))) {
        Some(l) => Error::InvalidConfig(format!("line {l}: {msg}")),
        None => e,
    }
}
