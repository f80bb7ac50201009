//! Structured hexahedral meshes of the harvester design domain.
//!
//! The mesh is a tensor-product lattice in which only cells that belong to a
//! tagged region are kept. Lattice coordinates are retained per node so that
//! column queries (same in-plane position, one layer down) are O(1).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Region membership of an element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionTag {
    PeDesign,
    SbDesign,
    PeNondesign,
    SbNondesign,
    Weight,
}

impl RegionTag {
    pub const ALL: [RegionTag; 5] = [
        RegionTag::PeDesign,
        RegionTag::SbDesign,
        RegionTag::PeNondesign,
        RegionTag::SbNondesign,
        RegionTag::Weight,
    ];

    /// Integer code written to VTK cell data.
    pub fn code(self) -> i32 {
        match self {
            RegionTag::PeDesign => 0,
            RegionTag::SbDesign => 1,
            RegionTag::PeNondesign => 2,
            RegionTag::SbNondesign => 3,
            RegionTag::Weight => 4,
        }
    }

    pub fn from_code(code: i32) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| t.code() == code)
    }

    pub fn is_piezo(self) -> bool {
        matches!(self, RegionTag::PeDesign | RegionTag::PeNondesign)
    }

    pub fn is_substrate(self) -> bool {
        matches!(self, RegionTag::SbDesign | RegionTag::SbNondesign)
    }

    pub fn is_design(self) -> bool {
        matches!(self, RegionTag::PeDesign | RegionTag::SbDesign)
    }

    fn bit(self) -> u8 {
        1 << self.code()
    }
}

/// Element counts per lattice segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolution {
    pub clamp_x: usize,
    pub design_x: usize,
    pub weight_x: usize,
    /// elements on each side of the weight strip in y
    pub side_y: usize,
    pub weight_y: usize,
    pub sb_bulk_z: usize,
    /// refined substrate layer under the piezo film; 0 disables the split
    pub sb_interface_z: usize,
    pub pe_z: usize,
}

impl Resolution {
    /// Element sizes matching the published mesh figure (mm units).
    pub fn benchmark() -> Self {
        Self {
            clamp_x: 2,
            design_x: 25,
            weight_x: 1,
            side_y: 24,
            weight_y: 2,
            sb_bulk_z: 4,
            sb_interface_z: 1,
            pe_z: 2,
        }
    }

    /// Desk-scale resolution used by `coarse = true`.
    pub fn coarse() -> Self {
        Self {
            clamp_x: 1,
            design_x: 10,
            weight_x: 1,
            side_y: 4,
            weight_y: 1,
            sb_bulk_z: 2,
            sb_interface_z: 1,
            pe_z: 2,
        }
    }
}

impl Default for Resolution {
    fn default() -> Self {
        Self::benchmark()
    }
}

fn default_interface_thickness() -> f64 {
    2.0
}

fn default_weight_factor() -> f64 {
    100.0
}

fn default_length_unit() -> f64 {
    1e-3
}

/// Geometry of the design domain. Lengths are in config units and converted
/// to metres with `length_unit` when the mesh is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub plate_side_length: f64,
    pub pe_thickness: f64,
    pub sb_thickness: f64,
    pub clamp_strip_width: f64,
    pub weight_square_side: f64,
    pub weight_thickness: f64,
    #[serde(default = "default_interface_thickness")]
    pub sb_interface_thickness: f64,
    #[serde(default = "default_weight_factor")]
    pub weight_density_factor: f64,
    #[serde(default = "default_length_unit")]
    pub length_unit: f64,
    #[serde(default)]
    pub resolution: Resolution,
}

impl DomainConfig {
    /// Benchmark geometry in millimetres.
    pub fn benchmark() -> Self {
        Self {
            plate_side_length: 500.0,
            pe_thickness: 4.0,
            sb_thickness: 36.0,
            clamp_strip_width: 20.0,
            weight_square_side: 20.0,
            weight_thickness: 40.0,
            sb_interface_thickness: 2.0,
            weight_density_factor: 100.0,
            length_unit: 1e-3,
            resolution: Resolution::benchmark(),
        }
    }

    pub fn benchmark_coarse() -> Self {
        Self {
            resolution: Resolution::coarse(),
            ..Self::benchmark()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lengths = [
            ("plate_side_length", self.plate_side_length),
            ("pe_thickness", self.pe_thickness),
            ("sb_thickness", self.sb_thickness),
            ("clamp_strip_width", self.clamp_strip_width),
            ("weight_square_side", self.weight_square_side),
            ("weight_thickness", self.weight_thickness),
            ("weight_density_factor", self.weight_density_factor),
            ("length_unit", self.length_unit),
        ];
        for (name, v) in lengths {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "domain.{name} must be strictly positive, got {v}"
                )));
            }
        }
        if self.sb_interface_thickness < 0.0 {
            return Err(Error::InvalidConfig(
                "domain.sb_interface_thickness must be nonnegative".into(),
            ));
        }
        let r = &self.resolution;
        let counts = [
            ("clamp_x", r.clamp_x),
            ("design_x", r.design_x),
            ("weight_x", r.weight_x),
            ("side_y", r.side_y),
            ("weight_y", r.weight_y),
            ("sb_bulk_z", r.sb_bulk_z),
            ("pe_z", r.pe_z),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!(
                    "domain.resolution.{name} must be at least 1"
                )));
            }
        }
        Ok(())
    }
}

fn segment_lines(lines: &mut Vec<f64>, end: f64, count: usize) {
    let start = *lines.last().unwrap();
    for k in 1..=count {
        lines.push(start + (end - start) * k as f64 / count as f64);
    }
}

/// Hexahedral mesh with region tags and node sets.
#[derive(Debug, Clone)]
pub struct Mesh {
    nodes: Vec<[f64; 3]>,
    elements: Vec<[usize; 8]>,
    tags: Vec<RegionTag>,
    lattice: Vec<[usize; 3]>,
    dims: [usize; 3],
    lookup: Vec<Option<usize>>,
    node_regions: Vec<u8>,
    clamp: Vec<usize>,
    gamma_xi: Vec<usize>,
    pzt_ground: Vec<usize>,
    weight_density_factor: f64,
}

/// Lattice offsets of the eight hexahedron vertices in local numbering.
pub const HEX_CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

impl Mesh {
    /// Builds a mesh from lattice lines; `tagger(ix, iy, iz, center)` decides
    /// which cells exist and their region.
    ///
    /// Node sets are derived from the tags: the clamp is the `x = min` face of
    /// substrate elements, `Γ_ξ` the `z = min` face of substrate design
    /// elements and the piezo ground the bottom face of the piezo layer.
    pub fn from_lattice<F>(xs: &[f64], ys: &[f64], zs: &[f64], mut tagger: F) -> Result<Self>
    where
        F: FnMut(usize, usize, usize, [f64; 3]) -> Option<RegionTag>,
    {
        for (axis, lines) in [("x", xs), ("y", ys), ("z", zs)] {
            if lines.len() < 2 || lines.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidConfig(format!(
                    "lattice lines along {axis} must be strictly increasing"
                )));
            }
        }
        let dims = [xs.len(), ys.len(), zs.len()];
        let lin = |i: usize, j: usize, k: usize| (i * dims[1] + j) * dims[2] + k;
        let mut cells = Vec::new();
        for i in 0..dims[0] - 1 {
            for j in 0..dims[1] - 1 {
                for k in 0..dims[2] - 1 {
                    let center = [
                        0.5 * (xs[i] + xs[i + 1]),
                        0.5 * (ys[j] + ys[j + 1]),
                        0.5 * (zs[k] + zs[k + 1]),
                    ];
                    if let Some(tag) = tagger(i, j, k, center) {
                        cells.push(([i, j, k], tag));
                    }
                }
            }
        }
        let mut used = vec![false; dims[0] * dims[1] * dims[2]];
        for (c, _) in &cells {
            for off in HEX_CORNERS {
                used[lin(c[0] + off[0], c[1] + off[1], c[2] + off[2])] = true;
            }
        }
        let mut lookup = vec![None; used.len()];
        let mut nodes = Vec::new();
        let mut lattice = Vec::new();
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    if used[lin(i, j, k)] {
                        lookup[lin(i, j, k)] = Some(nodes.len());
                        nodes.push([xs[i], ys[j], zs[k]]);
                        lattice.push([i, j, k]);
                    }
                }
            }
        }
        let mut elements = Vec::with_capacity(cells.len());
        let mut tags = Vec::with_capacity(cells.len());
        let mut node_regions = vec![0u8; nodes.len()];
        for (c, tag) in &cells {
            let mut conn = [0usize; 8];
            for (a, off) in HEX_CORNERS.iter().enumerate() {
                let n = lookup[lin(c[0] + off[0], c[1] + off[1], c[2] + off[2])].unwrap();
                conn[a] = n;
                node_regions[n] |= tag.bit();
            }
            elements.push(conn);
            tags.push(*tag);
        }

        let mut mesh = Mesh {
            nodes,
            elements,
            tags,
            lattice,
            dims,
            lookup,
            node_regions,
            clamp: Vec::new(),
            gamma_xi: Vec::new(),
            pzt_ground: Vec::new(),
            weight_density_factor: 1.0,
        };
        mesh.derive_node_sets();
        Ok(mesh)
    }

    /// Uniform box `[0,lx]×[0,ly]×[0,lz]` with every element tagged `tag`.
    pub fn uniform_box(counts: [usize; 3], lengths: [f64; 3], tag: RegionTag) -> Result<Self> {
        let lines = |n: usize, l: f64| (0..=n).map(|i| l * i as f64 / n as f64).collect::<Vec<_>>();
        Self::from_lattice(
            &lines(counts[0], lengths[0]),
            &lines(counts[1], lengths[1]),
            &lines(counts[2], lengths[2]),
            |_, _, _, _| Some(tag),
        )
    }

    /// Box with a substrate layer of `sb_layers` elements under a piezo layer
    /// of `pe_layers` elements. Used for small coupled models.
    pub fn bilayer_box(
        counts_xy: [usize; 2],
        lengths_xy: [f64; 2],
        sb: (usize, f64),
        pe: (usize, f64),
    ) -> Result<Self> {
        let lines = |n: usize, l: f64| (0..=n).map(|i| l * i as f64 / n as f64).collect::<Vec<_>>();
        let mut zs = lines(sb.0, sb.1);
        segment_lines(&mut zs, sb.1 + pe.1, pe.0);
        let interface = sb.1;
        Self::from_lattice(
            &lines(counts_xy[0], lengths_xy[0]),
            &lines(counts_xy[1], lengths_xy[1]),
            &zs,
            |_, _, _, c| {
                Some(if c[2] < interface {
                    RegionTag::SbDesign
                } else {
                    RegionTag::PeDesign
                })
            },
        )
    }

    fn derive_node_sets(&mut self) {
        let zs_min = self.nodes.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
        let xs_min = self.nodes.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let pe_bottom = self
            .elements
            .iter()
            .zip(&self.tags)
            .filter(|(_, t)| t.is_piezo())
            .map(|(e, _)| self.nodes[e[0]][2])
            .fold(f64::INFINITY, f64::min);
        let sb_mask = RegionTag::SbDesign.bit() | RegionTag::SbNondesign.bit();
        let pe_mask = RegionTag::PeDesign.bit() | RegionTag::PeNondesign.bit();
        let tol = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()));
        for (n, p) in self.nodes.iter().enumerate() {
            let regions = self.node_regions[n];
            if regions & sb_mask != 0 && tol(p[0], xs_min) {
                self.clamp.push(n);
            }
            if regions & RegionTag::SbDesign.bit() != 0 && tol(p[2], zs_min) {
                self.gamma_xi.push(n);
            }
            if regions & pe_mask != 0 && pe_bottom.is_finite() && tol(p[2], pe_bottom) {
                self.pzt_ground.push(n);
            }
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn node(&self, n: usize) -> [f64; 3] {
        self.nodes[n]
    }

    pub fn elements(&self) -> &[[usize; 8]] {
        &self.elements
    }

    pub fn element(&self, e: usize) -> &[usize; 8] {
        &self.elements[e]
    }

    pub fn tags(&self) -> &[RegionTag] {
        &self.tags
    }

    pub fn tag(&self, e: usize) -> RegionTag {
        self.tags[e]
    }

    pub fn clamp_nodes(&self) -> &[usize] {
        &self.clamp
    }

    pub fn gamma_xi_nodes(&self) -> &[usize] {
        &self.gamma_xi
    }

    pub fn pzt_ground_nodes(&self) -> &[usize] {
        &self.pzt_ground
    }

    /// Density multiplier applied to `Weight` elements.
    pub fn weight_density_factor(&self) -> f64 {
        self.weight_density_factor
    }

    pub fn set_weight_density_factor(&mut self, factor: f64) {
        self.weight_density_factor = factor;
    }

    /// True if any element containing `node` carries `tag`.
    pub fn node_touches(&self, node: usize, tag: RegionTag) -> bool {
        self.node_regions[node] & tag.bit() != 0
    }

    pub fn lattice_index(&self, node: usize) -> [usize; 3] {
        self.lattice[node]
    }

    /// Column id shared by all nodes at the same in-plane lattice position.
    pub fn column(&self, node: usize) -> usize {
        let [i, j, _] = self.lattice[node];
        i * self.dims[1] + j
    }

    /// The node one lattice layer below, if it exists.
    pub fn neighbor_below(&self, node: usize) -> Option<usize> {
        let [i, j, k] = self.lattice[node];
        if k == 0 {
            return None;
        }
        self.lookup[(i * self.dims[1] + j) * self.dims[2] + k - 1]
    }

    pub fn element_volume(&self, e: usize) -> f64 {
        let c = &self.elements[e];
        let p0 = self.nodes[c[0]];
        let p6 = self.nodes[c[6]];
        (p6[0] - p0[0]) * (p6[1] - p0[1]) * (p6[2] - p0[2])
    }

    pub fn element_center(&self, e: usize) -> [f64; 3] {
        let c = &self.elements[e];
        let mut s = [0.0; 3];
        for &n in c {
            for a in 0..3 {
                s[a] += self.nodes[n][a] / 8.0;
            }
        }
        s
    }

    pub fn element_coords(&self, e: usize) -> [[f64; 3]; 8] {
        let c = &self.elements[e];
        std::array::from_fn(|a| self.nodes[c[a]])
    }

    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.nodes {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// Total volume of elements with the given tag.
    pub fn region_volume(&self, tag: RegionTag) -> f64 {
        (0..self.n_elements())
            .filter(|&e| self.tags[e] == tag)
            .map(|e| self.element_volume(e))
            .sum()
    }
}

/// Builds the benchmark cantilever: clamp strip (silicon + PZT), the two
/// design layers and a tip weight spanning the full height.
pub fn build_benchmark_mesh(config: &DomainConfig) -> Result<Mesh> {
    config.validate()?;
    let r = &config.resolution;
    let u = config.length_unit;
    let plate = config.plate_side_length;
    let total_z = config.sb_thickness + config.pe_thickness;

    if config.weight_square_side >= plate {
        return Err(Error::NonConforming {
            interface: "weight/plate lateral edge".into(),
            detail: format!(
                "weight side {} must be smaller than the plate side {}",
                config.weight_square_side, plate
            ),
        });
    }
    let use_interface = r.sb_interface_z > 0 && config.sb_interface_thickness > 0.0;
    if use_interface && config.sb_interface_thickness >= config.sb_thickness {
        return Err(Error::NonConforming {
            interface: "substrate bulk/interface layer".into(),
            detail: format!(
                "interface layer thickness {} must be below the substrate thickness {}",
                config.sb_interface_thickness, config.sb_thickness
            ),
        });
    }

    let mut xs = vec![0.0];
    segment_lines(&mut xs, config.clamp_strip_width, r.clamp_x);
    segment_lines(&mut xs, config.clamp_strip_width + plate, r.design_x);
    segment_lines(
        &mut xs,
        config.clamp_strip_width + plate + config.weight_square_side,
        r.weight_x,
    );
    let y0 = 0.5 * (plate - config.weight_square_side);
    let mut ys = vec![0.0];
    segment_lines(&mut ys, y0, r.side_y);
    segment_lines(&mut ys, y0 + config.weight_square_side, r.weight_y);
    segment_lines(&mut ys, plate, r.side_y);
    let mut zs = vec![0.0];
    if use_interface {
        segment_lines(&mut zs, config.sb_thickness - config.sb_interface_thickness, r.sb_bulk_z);
        segment_lines(&mut zs, config.sb_thickness, r.sb_interface_z);
    } else {
        segment_lines(&mut zs, config.sb_thickness, r.sb_bulk_z);
    }
    segment_lines(&mut zs, total_z, r.pe_z);

    let tol = 1e-9 * total_z;
    if config.weight_thickness > total_z + tol {
        return Err(Error::NonConforming {
            interface: "weight top face".into(),
            detail: format!(
                "weight thickness {} exceeds the layer stack {}",
                config.weight_thickness, total_z
            ),
        });
    }
    let weight_top = zs
        .iter()
        .position(|z| (z - config.weight_thickness).abs() <= tol)
        .ok_or_else(|| Error::NonConforming {
            interface: "weight top face".into(),
            detail: format!(
                "weight thickness {} does not coincide with a z lattice plane {:?}",
                config.weight_thickness, zs
            ),
        })?;
    let weight_top_z = zs[weight_top];

    let clamp_end = config.clamp_strip_width;
    let design_end = clamp_end + plate;
    let sb_top = config.sb_thickness;
    let (wy0, wy1) = (y0, y0 + config.weight_square_side);

    let scale = |v: Vec<f64>| v.into_iter().map(|x| x * u).collect::<Vec<_>>();
    let (xs_m, ys_m, zs_m) = (scale(xs), scale(ys), scale(zs));
    let mut mesh = Mesh::from_lattice(&xs_m, &ys_m, &zs_m, |_, _, _, c| {
        let (x, y, z) = (c[0] / u, c[1] / u, c[2] / u);
        if x < clamp_end {
            Some(if z < sb_top {
                RegionTag::SbNondesign
            } else {
                RegionTag::PeNondesign
            })
        } else if x < design_end {
            Some(if z < sb_top {
                RegionTag::SbDesign
            } else {
                RegionTag::PeDesign
            })
        } else if y > wy0 && y < wy1 && z < weight_top_z {
            Some(RegionTag::Weight)
        } else {
            None
        }
    })?;
    mesh.set_weight_density_factor(config.weight_density_factor);
    Ok(mesh)
}

/// Sum of the configured region volumes in m³ (clamp strip, design layers
/// and weight block).
pub fn configured_volume(config: &DomainConfig) -> f64 {
    let u3 = config.length_unit.powi(3);
    let total_z = config.sb_thickness + config.pe_thickness;
    let plate = config.plate_side_length;
    (config.clamp_strip_width * plate * total_z
        + plate * plate * total_z
        + config.weight_square_side * config.weight_square_side * config.weight_thickness)
        * u3
}

/// Neighbor-below query by node id.
pub fn neighbor_below(mesh: &Mesh, node: usize) -> Option<usize> {
    mesh.neighbor_below(node)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_has_five_regions_and_no_untagged_cells() {
        let mesh = build_benchmark_mesh(&DomainConfig::benchmark()).unwrap();
        for tag in RegionTag::ALL {
            assert!(mesh.tags().contains(&tag), "missing {tag:?}");
        }
        let r = Resolution::benchmark();
        let per_layer_design = r.design_x * (2 * r.side_y + r.weight_y);
        let pe_design = mesh.tags().iter().filter(|t| **t == RegionTag::PeDesign).count();
        assert_eq!(pe_design, per_layer_design * r.pe_z);
    }

    #[test]
    fn coarse_counts_match_closed_form() {
        // 10 × 10 × 4 cells: clamp 1, design 8, weight 1 in x; y 4+2+4
        let cfg = DomainConfig {
            resolution: Resolution {
                clamp_x: 1,
                design_x: 8,
                weight_x: 1,
                side_y: 4,
                weight_y: 2,
                sb_bulk_z: 2,
                sb_interface_z: 1,
                pe_z: 1,
            },
            ..DomainConfig::benchmark()
        };
        let mesh = build_benchmark_mesh(&cfg).unwrap();
        // enumerate the lattice: clamp + design columns are full height,
        // weight columns only where y lies in the weight strip
        let (nx, ny, nz) = (10, 10, 4);
        let mut cells = 0;
        let mut used = std::collections::HashSet::new();
        for i in 0..nx {
            for j in 0..ny {
                if i == nx - 1 && !(4..6).contains(&j) {
                    continue;
                }
                for k in 0..nz {
                    cells += 1;
                    for o in HEX_CORNERS {
                        used.insert((i + o[0], j + o[1], k + o[2]));
                    }
                }
            }
        }
        assert_eq!(mesh.n_elements(), cells);
        assert_eq!(mesh.n_nodes(), used.len());
        assert_eq!(cells, 9 * 10 * 4 + 2 * 4);
        assert_eq!(used.len(), 10 * 11 * 5 + 3 * 5);
    }

    #[test]
    fn full_height_weight_is_conforming() {
        let cfg = DomainConfig {
            weight_thickness: 40.0,
            ..DomainConfig::benchmark_coarse()
        };
        let mesh = build_benchmark_mesh(&cfg).unwrap();
        let top = mesh.nodes().iter().map(|p| p[2]).fold(0.0, f64::max);
        let weight_top = (0..mesh.n_elements())
            .filter(|&e| mesh.tag(e) == RegionTag::Weight)
            .map(|e| mesh.node(mesh.element(e)[6])[2])
            .fold(0.0, f64::max);
        assert!((top - weight_top).abs() < 1e-12);
    }

    #[test]
    fn misaligned_weight_is_rejected() {
        let cfg = DomainConfig {
            weight_thickness: 37.0,
            ..DomainConfig::benchmark_coarse()
        };
        match build_benchmark_mesh(&cfg) {
            Err(Error::NonConforming { interface, .. }) => assert!(interface.contains("weight")),
            other => panic!("expected non-conforming error, got {other:?}"),
        }
    }

    #[test]
    fn volumes_add_up() {
        let cfg = DomainConfig::benchmark_coarse();
        let mesh = build_benchmark_mesh(&cfg).unwrap();
        let total: f64 = (0..mesh.n_elements()).map(|e| mesh.element_volume(e)).sum();
        let expected = configured_volume(&cfg);
        assert!(((total - expected) / expected).abs() < 1e-9);
        assert!((0..mesh.n_elements()).all(|e| mesh.element_volume(e) > 0.0));
    }

    #[test]
    fn neighbor_below_follows_columns() {
        let mesh = build_benchmark_mesh(&DomainConfig::benchmark_coarse()).unwrap();
        for n in 0..mesh.n_nodes() {
            let p = mesh.node(n);
            match mesh.neighbor_below(n) {
                None => assert_eq!(mesh.lattice_index(n)[2], 0),
                Some(b) => {
                    let q = mesh.node(b);
                    assert_eq!((p[0], p[1]), (q[0], q[1]));
                    assert!(q[2] < p[2]);
                    assert_eq!(mesh.column(n), mesh.column(b));
                }
            }
        }
        // top PE node lands on the layer below inside the piezo film
        let top = (0..mesh.n_nodes())
            .filter(|&n| mesh.node_touches(n, RegionTag::PeDesign))
            .max_by(|&a, &b| mesh.node(a)[2].total_cmp(&mesh.node(b)[2]))
            .unwrap();
        let below = mesh.neighbor_below(top).unwrap();
        assert!(mesh.node_touches(below, RegionTag::PeDesign));
    }

    #[test]
    fn node_sets() {
        let cfg = DomainConfig::benchmark_coarse();
        let mesh = build_benchmark_mesh(&cfg).unwrap();
        let sb_top = cfg.sb_thickness * cfg.length_unit;
        for &n in mesh.clamp_nodes() {
            let p = mesh.node(n);
            assert_eq!(p[0], 0.0);
            assert!(p[2] <= sb_top + 1e-12);
        }
        for &n in mesh.gamma_xi_nodes() {
            assert_eq!(mesh.node(n)[2], 0.0);
            assert!(mesh.node_touches(n, RegionTag::SbDesign));
        }
        for &n in mesh.pzt_ground_nodes() {
            assert!((mesh.node(n)[2] - sb_top).abs() < 1e-12);
        }
        let r = cfg.resolution;
        let ny = 2 * r.side_y + r.weight_y + 1;
        assert_eq!(mesh.clamp_nodes().len(), ny * (r.sb_bulk_z + r.sb_interface_z + 1));
        assert_eq!(mesh.gamma_xi_nodes().len(), (r.design_x + 1) * ny);
    }
}
