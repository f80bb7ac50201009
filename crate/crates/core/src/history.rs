//! Per-iteration history rows and their CSV form.

use std::path::Path;

use crate::error::{Error, Result};
use crate::objectives::ObjectiveReport;

/// One optimization iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub report: ObjectiveReport,
    pub n_phi1: f64,
    pub n_phi2: f64,
}

/// Column names for `n_modes` paired modes.
pub fn header(n_modes: usize) -> Vec<String> {
    let mut h: Vec<String> = ["iter", "F_k", "F_omega", "F_pe", "F_sb"].map(String::from).to_vec();
    for prefix in ["omega_oc", "omega_sc", "k2"] {
        h.extend((1..=n_modes).map(|i| format!("{prefix}_{i}")));
    }
    h.extend(["V_E", "G_V", "lambda", "N_phi1", "N_phi2"].map(String::from));
    h
}

impl HistoryRow {
    /// Numeric columns after `iter`, in header order.
    pub fn values(&self) -> Vec<f64> {
        let r = &self.report;
        let mut v = vec![r.f_k, r.f_omega, r.f_pe, r.f_sb];
        v.extend(&r.omega_oc);
        v.extend(&r.omega_sc);
        v.extend(&r.k2);
        v.extend([r.v_e, r.g_v, r.lambda, self.n_phi1, self.n_phi2]);
        v
    }
}

/// Renders rows as CSV with shortest round-trip float formatting.
pub fn render_csv(rows: &[HistoryRow], n_modes: usize) -> Result<String> {
    let head = header(n_modes);
    let mut out = head.join(",");
    out.push('\n');
    for row in rows {
        let vals = row.values();
        if vals.len() + 1 != head.len() {
            return Err(Error::SizeMismatch(format!(
                "history row {} has {} columns, header has {}",
                row.iteration,
                vals.len() + 1,
                head.len()
            )));
        }
        out.push_str(&row.iteration.to_string());
        for v in vals {
            out.push(',');
            out.push_str(&format!("{v:e}"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_csv(path: &Path, rows: &[HistoryRow], n_modes: usize) -> Result<()> {
    crate::vtk::write_atomic(path, &render_csv(rows, n_modes)?)
}

/// Reads a history file back as a header and numeric rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let head: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty history", path.display())))?
        .split(',')
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("{} line {}: {e}", path.display(), i + 2)))?;
        if row.len() != head.len() {
            return Err(Error::Parse(format!(
                "{} line {}: {} columns, header has {}",
                path.display(),
                i + 2,
                row.len(),
                head.len()
            )));
        }
        rows.push(row);
    }
    Ok((head, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: usize) -> HistoryRow {
        HistoryRow {
            iteration: i,
            report: ObjectiveReport {
                omega_oc: vec![1.0 / 3.0, 2.0],
                omega_sc: vec![0.3, 1.9],
                k2: vec![0.19, 0.0975],
                f_k: 1e-5 * i as f64,
                f_omega: 0.1,
                f_pe: f64::MIN_POSITIVE,
                f_sb: 123456.789,
                v_e: 0.01,
                g_v: f64::NAN,
                lambda: 0.0,
            },
            n_phi1: 0.0,
            n_phi2: 0.0,
        }
    }

    #[test]
    fn header_layout() {
        let h = header(2);
        assert_eq!(h.len(), 5 + 3 * 2 + 5);
        assert_eq!(h[5], "omega_oc_1");
        assert_eq!(h[10], "k2_2");
        assert_eq!(h.last().unwrap(), "N_phi2");
    }

    #[test]
    fn round_trip_is_exact() {
        let rows = vec![row(1), row(2)];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("history.csv");
        write_csv(&p, &rows, 2).unwrap();
        let (head, back) = read_csv(&p).unwrap();
        assert_eq!(head, header(2));
        for (r, b) in rows.iter().zip(&back) {
            assert_eq!(b[0], r.iteration as f64);
            for (x, y) in r.values().iter().zip(&b[1..]) {
                assert!(x == y || (x.is_nan() && y.is_nan()));
            }
        }
    }
}
