//! Legacy-ASCII VTK unstructured-grid output and a reader for the fields we write.
//!
//! Floating point values are written with 9 significant digits. [`quantize`]
//! rounds a value to exactly what the writer emits, so fields that were
//! quantized before writing read back bit-for-bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// VTK cell type id of an 8-node hexahedron.
const VTK_HEXAHEDRON: u8 = 12;

fn fmt9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Rounds to the 9-significant-digit decimal the writer emits.
pub fn quantize(v: f64) -> f64 {
    fmt9(v).parse().unwrap_or(v)
}

/// Writes `contents` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Renders the mesh with named nodal fields and the region code per cell.
pub fn render(mesh: &Mesh, point_fields: &[(&str, &[f64])]) -> Result<String> {
    for (name, f) in point_fields {
        if f.len() != mesh.n_nodes() {
            return Err(Error::SizeMismatch(format!(
                "field {name} has {} values for {} nodes",
                f.len(),
                mesh.n_nodes()
            )));
        }
    }
    let mut s = String::with_capacity(64 * mesh.n_nodes() * (1 + point_fields.len()));
    s.push_str("# vtk DataFile Version 3.0\npiezoelectric harvester design\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(s, "POINTS {} double", mesh.n_nodes());
    for p in mesh.nodes() {
        let _ = writeln!(s, "{} {} {}", fmt9(p[0]), fmt9(p[1]), fmt9(p[2]));
    }
    let ne = mesh.n_elements();
    let _ = writeln!(s, "CELLS {} {}", ne, ne * 9);
    for e in mesh.elements() {
        s.push('8');
        for n in e {
            let _ = write!(s, " {n}");
        }
        s.push('\n');
    }
    let _ = writeln!(s, "CELL_TYPES {ne}");
    for _ in 0..ne {
        let _ = writeln!(s, "{VTK_HEXAHEDRON}");
    }
    let _ = writeln!(s, "CELL_DATA {ne}\nSCALARS region int 1\nLOOKUP_TABLE default");
    for t in mesh.tags() {
        let _ = writeln!(s, "{}", t.code());
    }
    if !point_fields.is_empty() {
        let _ = writeln!(s, "POINT_DATA {}", mesh.n_nodes());
        for (name, f) in point_fields {
            let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
            for v in f.iter() {
                let _ = writeln!(s, "{}", fmt9(*v));
            }
        }
    }
    Ok(s)
}

pub fn write(path: &Path, mesh: &Mesh, point_fields: &[(&str, &[f64])]) -> Result<()> {
    write_atomic(path, &render(mesh, point_fields)?)
}

/// Contents of a file produced by [`write`].
#[derive(Debug, Clone, Default)]
pub struct VtkFile {
    pub points: Vec<[f64; 3]>,
    pub cells: Vec<[usize; 8]>,
    pub regions: Vec<i32>,
    pub point_fields: Vec<(String, Vec<f64>)>,
}

impl VtkFile {
    pub fn field(&self, name: &str) -> Option<&[f64]> {
        self.point_fields
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }
}

fn parse_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{}: {msg}", path.display()))
}

pub fn read(path: &Path) -> Result<VtkFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut toks = text.lines().skip(4).flat_map(str::split_whitespace).peekable();
    let mut out = VtkFile::default();
    let mut next = |what: &str| toks.next().ok_or_else(|| parse_err(path, format!("unexpected end of file reading {what}")));
    let num = |t: &str| -> Result<f64> { t.parse::<f64>().map_err(|e| parse_err(path, format!("bad number {t:?}: {e}"))) };
    let int = |t: &str| -> Result<usize> { t.parse::<usize>().map_err(|e| parse_err(path, format!("bad integer {t:?}: {e}"))) };
    let mut n_points = 0;
    let mut n_cells = 0;
    let mut in_point_data = false;
    loop {
        let kw = match next("keyword") {
            Ok(k) => k,
            Err(_) => break,
        };
        match kw {
            "POINTS" => {
                n_points = int(next("point count")?)?;
                next("point type")?;
                for _ in 0..n_points {
                    let p = [num(next("x")?)?, num(next("y")?)?, num(next("z")?)?];
                    out.points.push(p);
                }
            }
            "CELLS" => {
                n_cells = int(next("cell count")?)?;
                next("cell size")?;
                for _ in 0..n_cells {
                    if int(next("cell arity")?)? != 8 {
                        return Err(parse_err(path, "only hexahedral cells are supported"));
                    }
                    let mut c = [0; 8];
                    for v in c.iter_mut() {
                        *v = int(next("cell node")?)?;
                    }
                    out.cells.push(c);
                }
            }
            "CELL_TYPES" => {
                let n = int(next("cell type count")?)?;
                for _ in 0..n {
                    next("cell type")?;
                }
            }
            "CELL_DATA" => {
                next("cell data count")?;
                in_point_data = false;
            }
            "POINT_DATA" => {
                next("point data count")?;
                in_point_data = true;
            }
            "SCALARS" => {
                let name = next("scalar name")?.to_string();
                next("scalar type")?;
                next("components")?;
                if next("LOOKUP_TABLE")? != "LOOKUP_TABLE" {
                    return Err(parse_err(path, "expected LOOKUP_TABLE"));
                }
                next("table name")?;
                if in_point_data {
                    let mut v = Vec::with_capacity(n_points);
                    for _ in 0..n_points {
                        v.push(num(next(&name)?)?);
                    }
                    out.point_fields.push((name, v));
                } else {
                    for _ in 0..n_cells {
                        let code = int(next(&name)?)?;
                        if name == "region" {
                            out.regions.push(code as i32);
                        }
                    }
                }
            }
            other => return Err(parse_err(path, format!("unexpected token {other:?}"))),
        }
    }
    Ok(out)
}
