//! Grids, particle meshes, fields, parameter records and deformed-cell
//! geometry.
//!
//! Every array is row-major with the last spatial axis fastest. The spatial
//! domain is the unit square/cube; cells are indexed on the `shape` lattice
//! and mesh nodes (particles) on the `shape + 1` lattice.

use serde::{Deserialize, Serialize};

use crate::ad::{Ops, Plain};
use crate::error::{Error, Result};

/// Half-width of the band around the unit cube that particles may occupy.
pub const GUARD_BAND: f64 = 0.25;

/// Reference Eulerian grid and time discretization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    shape: Vec<usize>,
    nt: usize,
}

impl GridSpec {
    pub fn new(shape: &[usize], nt: usize) -> Result<Self> {
        if !(2..=3).contains(&shape.len()) {
            return Err(Error::InvalidGrid(format!("ndim must be 2 or 3, got {}", shape.len())));
        }
        if let Some(&s) = shape.iter().find(|&&s| s < 2) {
            return Err(Error::InvalidGrid(format!("axis length {s} < 2")));
        }
        if nt < 1 {
            return Err(Error::InvalidGrid("nt must be at least 1".into()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            nt,
        })
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.nt as f64
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        1.0 / self.shape[axis] as f64
    }

    pub fn spacings(&self) -> Vec<f64> {
        (0..self.ndim()).map(|a| self.spacing(a)).collect()
    }

    /// Volume of an undeformed cell.
    pub fn cell_volume(&self) -> f64 {
        self.spacings().iter().product()
    }

    pub fn num_cells(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn node_shape(&self) -> Vec<usize> {
        self.shape.iter().map(|s| s + 1).collect()
    }

    pub fn num_nodes(&self) -> usize {
        self.shape.iter().map(|s| s + 1).product()
    }

    pub fn with_nt(&self, nt: usize) -> Result<Self> {
        Self::new(&self.shape, nt)
    }

    /// Same time discretization, each axis divided by `factor`.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if let Some(a) = self.shape.iter().position(|s| s % factor != 0) {
            return Err(Error::InvalidGrid(format!(
                "axis {a} of length {} is not divisible by {factor}",
                self.shape[a]
            )));
        }
        let shape: Vec<usize> = self.shape.iter().map(|s| s / factor).collect();
        Self::new(&shape, self.nt)
    }

    /// Lattice of cell centers.
    pub fn cell_lattice(&self) -> Lattice {
        Lattice {
            dims: self.shape.clone(),
            origin: self.spacings().iter().map(|h| 0.5 * h).collect(),
            spacing: self.spacings(),
        }
    }

    /// Lattice of mesh nodes in the undeformed configuration.
    pub fn node_lattice(&self) -> Lattice {
        Lattice {
            dims: self.node_shape(),
            origin: vec![0.0; self.ndim()],
            spacing: self.spacings(),
        }
    }
}

/// Regular point lattice `origin + j * spacing`, `j_a < dims[a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub dims: Vec<usize>,
    pub origin: Vec<f64>,
    pub spacing: Vec<f64>,
}

impl Lattice {
    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn unflat(&self, mut k: usize) -> Vec<usize> {
        let mut out = vec![0; self.ndim()];
        for a in (0..self.ndim()).rev() {
            out[a] = k % self.dims[a];
            k /= self.dims[a];
        }
        out
    }

    pub fn point(&self, k: usize) -> Vec<f64> {
        self.unflat(k)
            .iter()
            .enumerate()
            .map(|(a, &j)| self.origin[a] + j as f64 * self.spacing[a])
            .collect()
    }

    /// All lattice points, flattened `[len][ndim]`.
    pub fn points(&self) -> Vec<f64> {
        (0..self.len()).flat_map(|k| self.point(k)).collect()
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.dims[axis + 1..].iter().product()
    }
}

/// A face shared by two neighboring cells.
#[derive(Debug, Clone)]
pub struct Face {
    pub lower: usize,
    pub upper: usize,
    pub axis: usize,
    /// Face corners in cyclic order (2 in 2D, 4 in 3D).
    pub nodes: [usize; 4],
}

/// Connectivity of the reference lattice, independent of the timestep.
#[derive(Debug, Clone)]
pub struct Topology {
    pub spec: GridSpec,
    pub cells: Lattice,
    pub nodes: Lattice,
    /// `2^ndim` corner nodes per cell. Corner `k` is offset by bit `a` of
    /// `k` along axis `a`.
    pub cell_nodes: Vec<usize>,
    pub faces: Vec<Face>,
    /// Per cell, indices into `faces`.
    pub cell_faces: Vec<Vec<usize>>,
    pub boundary: Vec<bool>,
    pub interior_nodes: Vec<usize>,
}

impl Topology {
    pub fn new(spec: &GridSpec) -> Self {
        let cells = spec.cell_lattice();
        let nodes = spec.node_lattice();
        let ndim = spec.ndim();
        let corners = 1usize << ndim;
        let mut cell_nodes = Vec::with_capacity(cells.len() * corners);
        for c in 0..cells.len() {
            let idx = cells.unflat(c);
            for k in 0..corners {
                let nidx: Vec<usize> = (0..ndim).map(|a| idx[a] + ((k >> a) & 1)).collect();
                cell_nodes.push(nodes.flat(&nidx));
            }
        }
        let mut faces = Vec::new();
        let mut cell_faces = vec![Vec::new(); cells.len()];
        for c in 0..cells.len() {
            let idx = cells.unflat(c);
            for axis in 0..ndim {
                if idx[axis] + 1 >= spec.shape()[axis] {
                    continue;
                }
                let mut up = idx.clone();
                up[axis] += 1;
                let upper = cells.flat(&up);
                let corner = |offs: &[(usize, usize)]| {
                    let mut n = idx.clone();
                    n[axis] += 1;
                    for &(a, o) in offs {
                        n[a] += o;
                    }
                    nodes.flat(&n)
                };
                let face_nodes = if ndim == 2 {
                    let b = 1 - axis;
                    [corner(&[]), corner(&[(b, 1)]), 0, 0]
                } else {
                    let b = (axis + 1) % 3;
                    let d = (axis + 2) % 3;
                    [
                        corner(&[]),
                        corner(&[(b, 1)]),
                        corner(&[(b, 1), (d, 1)]),
                        corner(&[(d, 1)]),
                    ]
                };
                let f = faces.len();
                faces.push(Face {
                    lower: c,
                    upper,
                    axis,
                    nodes: face_nodes,
                });
                cell_faces[c].push(f);
                cell_faces[upper].push(f);
            }
        }
        let boundary: Vec<bool> = (0..nodes.len())
            .map(|k| {
                nodes
                    .unflat(k)
                    .iter()
                    .zip(&nodes.dims)
                    .any(|(&j, &d)| j == 0 || j + 1 == d)
            })
            .collect();
        let interior_nodes = (0..nodes.len()).filter(|&k| !boundary[k]).collect();
        Self {
            spec: spec.clone(),
            cells,
            nodes,
            cell_nodes,
            faces,
            cell_faces,
            boundary,
            interior_nodes,
        }
    }

    pub fn ndim(&self) -> usize {
        self.spec.ndim()
    }

    pub fn corners(&self) -> usize {
        1 << self.ndim()
    }

    pub fn nodes_of(&self, cell: usize) -> &[usize] {
        let k = self.corners();
        &self.cell_nodes[cell * k..(cell + 1) * k]
    }
}

/// Node positions for every timestep, flattened `[nt + 1][num_nodes][ndim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleMesh {
    spec: GridSpec,
    positions: Vec<f64>,
}

impl ParticleMesh {
    pub fn new(spec: &GridSpec, positions: Vec<f64>) -> Result<Self> {
        let per = spec.num_nodes() * spec.ndim();
        if positions.len() != (spec.nt() + 1) * per {
            return Err(Error::ShapeMismatch(format!(
                "mesh positions: expected {} values, got {}",
                (spec.nt() + 1) * per,
                positions.len()
            )));
        }
        for (i, x) in positions.iter().enumerate() {
            if !x.is_finite() || *x < -GUARD_BAND || *x > 1.0 + GUARD_BAND {
                return Err(Error::OutOfGuardBand {
                    particle: (i % per) / spec.ndim(),
                    n: i / per,
                });
            }
        }
        Ok(Self {
            spec: spec.clone(),
            positions,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn into_positions(self) -> Vec<f64> {
        self.positions
    }

    pub fn slice(&self, n: usize) -> &[f64] {
        let per = self.spec.num_nodes() * self.spec.ndim();
        &self.positions[n * per..(n + 1) * per]
    }

    /// Displacement `p^n - p^0` of every node.
    pub fn displacement(&self, n: usize) -> Vec<f64> {
        self.slice(n).iter().zip(self.slice(0)).map(|(a, b)| a - b).collect()
    }
}

/// Uniform node lattice repeated at every timestep.
pub fn make_uniform_mesh(spec: &GridSpec) -> ParticleMesh {
    let slice = spec.node_lattice().points();
    let mut positions = Vec::with_capacity(slice.len() * (spec.nt() + 1));
    for _ in 0..=spec.nt() {
        positions.extend_from_slice(&slice);
    }
    ParticleMesh {
        spec: spec.clone(),
        positions,
    }
}

/// Tumor density per cell and timestep, flattened `[nt + 1][num_cells]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TumorField {
    pub num_cells: usize,
    pub values: Vec<f64>,
}

impl TumorField {
    pub fn zeros(spec: &GridSpec) -> Self {
        Self::constant(spec, 0.0)
    }

    pub fn constant(spec: &GridSpec, v: f64) -> Self {
        Self {
            num_cells: spec.num_cells(),
            values: vec![v; spec.num_cells() * (spec.nt() + 1)],
        }
    }

    pub fn slice(&self, n: usize) -> &[f64] {
        &self.values[n * self.num_cells..(n + 1) * self.num_cells]
    }

    pub fn slice_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.values[n * self.num_cells..(n + 1) * self.num_cells]
    }

    pub fn num_slices(&self) -> usize {
        self.values.len() / self.num_cells
    }
}

/// Tissue fractions `(WM, GM, CSF)` carried by the particles.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueField {
    pub intensities: Vec<[f64; 3]>,
}

impl TissueField {
    pub fn new(intensities: Vec<[f64; 3]>) -> Result<Self> {
        for (i, m) in intensities.iter().enumerate() {
            let ok = m.iter().all(|v| (0.0..=1.0).contains(v)) && m.iter().sum::<f64>() <= 1.0 + 1e-6;
            if !ok {
                return Err(Error::ShapeMismatch(format!(
                    "tissue fractions of particle {i} are not a sub-partition of unity: {m:?}"
                )));
            }
        }
        Ok(Self { intensities })
    }

    /// Particle intensities sampled from cell-centered tissue maps at the
    /// undeformed node positions.
    pub fn from_cells(spec: &GridSpec, cells: &[[f64; 3]]) -> Result<Self> {
        let lattice = spec.cell_lattice();
        let nodes = spec.node_lattice().points();
        let mut out = vec![[0.0; 3]; spec.num_nodes()];
        for k in 0..3 {
            let comp: Vec<f64> = cells.iter().map(|m| m[k]).collect();
            let vals = crate::transfer::grid_to_particles(&lattice, &comp, &nodes)?;
            for (o, v) in out.iter_mut().zip(vals.values) {
                o[k] = v;
            }
        }
        Self::new(out)
    }

    /// Fractions at cell centers in the Lagrangian frame: the shape-function
    /// interpolant of the cell's corner particles.
    pub fn at_cells(&self, topo: &Topology) -> Vec<[f64; 3]> {
        let k = topo.corners() as f64;
        (0..topo.cells.len())
            .map(|c| {
                let mut m = [0.0; 3];
                for &n in topo.nodes_of(c) {
                    for t in 0..3 {
                        m[t] += self.intensities[n][t] / k;
                    }
                }
                m
            })
            .collect()
    }

    pub fn component(&self, k: usize) -> Vec<f64> {
        self.intensities.iter().map(|m| m[k]).collect()
    }
}

/// Growth dynamics in dimensionless units (unit domain, unit growth time).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub d_gm: f64,
    pub r: f64,
    pub rho: f64,
    pub gamma: f64,
}

impl DynamicsParams {
    pub fn d_wm(&self) -> f64 {
        self.r * self.d_gm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialParams {
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagingParams {
    pub theta_up: f64,
    pub theta_down: f64,
}

impl ImagingParams {
    pub fn validate(&self) -> Result<()> {
        let inside = |t: f64| t > 0.0 && t < 1.0;
        if !(inside(self.theta_up) && inside(self.theta_down) && self.theta_down < self.theta_up) {
            return Err(Error::ThresholdOrder(format!(
                "0 < theta_down ({}) < theta_up ({}) < 1",
                self.theta_down, self.theta_up
            )));
        }
        Ok(())
    }
}

/// Observation bundle consumed by the data losses. All maps live on the
/// cell lattice of `spec`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientCase {
    pub spec: GridSpec,
    pub tissue_obs: Vec<[f64; 3]>,
    pub core_mask: Vec<bool>,
    pub edema_mask: Vec<bool>,
    pub pet_map: Vec<f64>,
    pub provenance: String,
}

impl PatientCase {
    pub fn validate(&self) -> Result<()> {
        let n = self.spec.num_cells();
        let lens = [
            self.tissue_obs.len(),
            self.core_mask.len(),
            self.edema_mask.len(),
            self.pet_map.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::ShapeMismatch(format!(
                "case maps {lens:?} do not match {n} cells"
            )));
        }
        if self.pet_map.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("PET map is not finite".into()));
        }
        Ok(())
    }

    pub fn core_centroid(&self) -> Option<Vec<f64>> {
        let lattice = self.spec.cell_lattice();
        let ndim = self.spec.ndim();
        let mut acc = vec![0.0; ndim];
        let mut count = 0usize;
        for (i, _) in self.core_mask.iter().enumerate().filter(|(_, &m)| m) {
            for (a, x) in lattice.point(i).into_iter().enumerate() {
                acc[a] += x;
            }
            count += 1;
        }
        (count > 0).then(|| acc.into_iter().map(|x| x / count as f64).collect())
    }

    /// Union of core and edema.
    pub fn visible_region(&self) -> Vec<bool> {
        self.core_mask
            .iter()
            .zip(&self.edema_mask)
            .map(|(a, b)| *a || *b)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Material {
    pub young_modulus: f64,
    pub poisson_ratio: f64,
}

/// Elastic constants per tissue type, in Pa.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaterialTable {
    pub gm: Material,
    pub wm: Material,
    pub csf: Material,
    pub tumor: Material,
}

impl Default for MaterialTable {
    fn default() -> Self {
        Self {
            gm: Material {
                young_modulus: 2100.0,
                poisson_ratio: 0.4,
            },
            wm: Material {
                young_modulus: 2100.0,
                poisson_ratio: 0.4,
            },
            csf: Material {
                young_modulus: 100.0,
                poisson_ratio: 0.1,
            },
            tumor: Material {
                young_modulus: 8000.0,
                poisson_ratio: 0.45,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lame {
    pub lambda: f64,
    pub mu: f64,
}

/// Lamé pairs in blend order `(WM, GM, CSF, Tumor)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LameTable {
    pub wm: Lame,
    pub gm: Lame,
    pub csf: Lame,
    pub tumor: Lame,
}

impl LameTable {
    fn ordered(&self) -> [Lame; 4] {
        [self.wm, self.gm, self.csf, self.tumor]
    }

    /// Every pair divided by `modulus`.
    pub fn scaled(&self, modulus: f64) -> Self {
        let s = |l: Lame| Lame {
            lambda: l.lambda / modulus,
            mu: l.mu / modulus,
        };
        Self {
            wm: s(self.wm),
            gm: s(self.gm),
            csf: s(self.csf),
            tumor: s(self.tumor),
        }
    }
}

pub fn lame_from(name: &'static str, m: Material) -> Result<Lame> {
    let nu = m.poisson_ratio;
    if !(0.0..0.5).contains(&nu) {
        return Err(Error::InvalidPoisson { material: name, nu });
    }
    let e = m.young_modulus;
    Ok(Lame {
        lambda: e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)),
        mu: e / (2.0 * (1.0 + nu)),
    })
}

pub fn lame_parameters(table: &MaterialTable) -> Result<LameTable> {
    Ok(LameTable {
        wm: lame_from("WM", table.wm)?,
        gm: lame_from("GM", table.gm)?,
        csf: lame_from("CSF", table.csf)?,
        tumor: lame_from("Tumor", table.tumor)?,
    })
}

/// Weight-averaged `(λ̄, μ̄)` for tissue fractions `m` and tumor density `c`.
pub fn blend_lame(table: &LameTable, m: [f64; 3], c: f64) -> Lame {
    let mut p = Plain;
    let (l, u) = blend_lame_with(&mut p, table, m, c);
    Lame { lambda: l, mu: u }
}

/// Differentiable blend; only `c` is a variable.
pub fn blend_lame_with<O: Ops>(o: &mut O, table: &LameTable, m: [f64; 3], c: O::V) -> (O::V, O::V) {
    let cv = o.value(c);
    let fixed = m[0] + m[1] + m[2];
    let total = fixed + cv;
    let mats = table.ordered();
    if total < 1e-8 {
        let l = o.constant(table.csf.lambda);
        let u = o.constant(table.csf.mu);
        return (l, u);
    }
    let sum_l = m[0] * mats[0].lambda + m[1] * mats[1].lambda + m[2] * mats[2].lambda;
    let sum_u = m[0] * mats[0].mu + m[1] * mats[1].mu + m[2] * mats[2].mu;
    let lam = (sum_l + cv * mats[3].lambda) / total;
    let mu = (sum_u + cv * mats[3].mu) / total;
    // d/dc of (s + c t) / (f + c) = (t - value) / total
    let l = o.node(lam, [c], || [(mats[3].lambda - lam) / total]);
    let u = o.node(mu, [c], || [(mats[3].mu - mu) / total]);
    (l, u)
}

/// Geometry of every deformed cell at one timestep.
#[derive(Debug, Clone)]
pub struct CellGeometry<V> {
    pub volumes: Vec<V>,
    /// One entry per [`Face`] of the topology.
    pub interface_areas: Vec<V>,
    /// Flattened `[num_cells][ndim]`.
    pub centroids: Vec<V>,
}

/// Geometry of mesh slice `n`; fails if any cell is folded.
pub fn cell_geometry(topo: &Topology, mesh: &ParticleMesh, n: usize) -> Result<CellGeometry<f64>> {
    let geom = geometry_kernel(&mut Plain, topo, mesh.slice(n));
    if let Some(cell) = geom.volumes.iter().position(|&v| v <= 0.0) {
        return Err(Error::NonPositiveVolume { cell, n });
    }
    Ok(geom)
}

/// Differentiable cell geometry for one slice of node positions.
pub fn geometry_kernel<O: Ops>(o: &mut O, topo: &Topology, pos: &[O::V]) -> CellGeometry<O::V> {
    let ndim = topo.ndim();
    let ncell = topo.cells.len();
    let corners = topo.corners();
    let mut volumes = Vec::with_capacity(ncell);
    let mut centroids = Vec::with_capacity(ncell * ndim);
    let w = 1.0 / corners as f64;
    let mut terms = Vec::with_capacity(corners);
    for c in 0..ncell {
        let nodes = topo.nodes_of(c);
        volumes.push(if ndim == 2 {
            quad_area(o, pos, nodes)
        } else {
            hex_volume(o, pos, nodes)
        });
        for a in 0..ndim {
            terms.clear();
            terms.extend(nodes.iter().map(|&n| (pos[n * ndim + a], w)));
            let x = o.lin(&terms, 0.0);
            centroids.push(x);
        }
    }
    let interface_areas = topo
        .faces
        .iter()
        .map(|f| {
            if ndim == 2 {
                segment_length(o, pos, f.nodes[0], f.nodes[1])
            } else {
                quad_face_area(o, pos, &f.nodes)
            }
        })
        .collect();
    CellGeometry {
        volumes,
        interface_areas,
        centroids,
    }
}

/// Shoelace area of a 2D cell, corners visited counterclockwise.
fn quad_area<O: Ops>(o: &mut O, pos: &[O::V], nodes: &[usize]) -> O::V {
    const ORDER: [usize; 4] = [0, 1, 3, 2];
    let ids: [usize; 4] = ORDER.map(|k| nodes[k]);
    let p: [O::V; 8] = [
        pos[ids[0] * 2],
        pos[ids[0] * 2 + 1],
        pos[ids[1] * 2],
        pos[ids[1] * 2 + 1],
        pos[ids[2] * 2],
        pos[ids[2] * 2 + 1],
        pos[ids[3] * 2],
        pos[ids[3] * 2 + 1],
    ];
    let v: [f64; 8] = p.map(|x| o.value(x));
    let x = |k: usize| v[2 * (k % 4)];
    let y = |k: usize| v[2 * (k % 4) + 1];
    let mut area = 0.0;
    for k in 0..4 {
        area += x(k) * y(k + 1) - x(k + 1) * y(k);
    }
    area *= 0.5;
    o.node(area, p, || {
        let mut g = [0.0; 8];
        for k in 0..4 {
            g[2 * k] = 0.5 * (y(k + 1) - y(k + 3));
            g[2 * k + 1] = 0.5 * (x(k + 3) - x(k + 1));
        }
        g
    })
}

fn segment_length<O: Ops>(o: &mut O, pos: &[O::V], a: usize, b: usize) -> O::V {
    let p = [pos[a * 2], pos[a * 2 + 1], pos[b * 2], pos[b * 2 + 1]];
    let dx = o.value(p[2]) - o.value(p[0]);
    let dy = o.value(p[3]) - o.value(p[1]);
    let len = (dx * dx + dy * dy).sqrt();
    o.node(len, p, || {
        let (ux, uy) = (dx / len, dy / len);
        [-ux, -uy, ux, uy]
    })
}

type V3 = [f64; 3];

fn sub3(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot3(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Half the cross product of the face diagonals.
fn quad_face_area<O: Ops>(o: &mut O, pos: &[O::V], nodes: &[usize; 4]) -> O::V {
    let mut p = [pos[0]; 12];
    for (k, &n) in nodes.iter().enumerate() {
        for a in 0..3 {
            p[3 * k + a] = pos[n * 3 + a];
        }
    }
    let v: [f64; 12] = p.map(|x| o.value(x));
    let pt = |k: usize| [v[3 * k], v[3 * k + 1], v[3 * k + 2]];
    let d1 = sub3(pt(2), pt(0));
    let d2 = sub3(pt(3), pt(1));
    let w = cross(d1, d2);
    let norm = dot3(w, w).sqrt();
    o.node(0.5 * norm, p, || {
        let mut g = [0.0; 12];
        if norm > 0.0 {
            let wh = [w[0] / norm, w[1] / norm, w[2] / norm];
            let g1 = cross(d2, wh);
            let g2 = cross(wh, d1);
            for a in 0..3 {
                g[6 + a] += 0.5 * g1[a];
                g[a] -= 0.5 * g1[a];
                g[9 + a] += 0.5 * g2[a];
                g[3 + a] -= 0.5 * g2[a];
            }
        }
        g
    })
}

/// Hexahedron volume from the closed surface: each face is split into four
/// triangles around its center and the signed tetrahedra against the origin
/// are summed. Shared faces cancel exactly between neighbors.
fn hex_volume<O: Ops>(o: &mut O, pos: &[O::V], nodes: &[usize]) -> O::V {
    let mut p = [pos[0]; 24];
    for (k, &n) in nodes.iter().enumerate() {
        for a in 0..3 {
            p[3 * k + a] = pos[n * 3 + a];
        }
    }
    let v: [f64; 24] = p.map(|x| o.value(x));
    let (vol, grad) = hex_volume_value(&v);
    o.node(vol, p, || grad)
}

/// Corner lists of the six faces, ordered counterclockwise about the outward
/// normal. Corner `k` has offset bit `a` along axis `a`.
fn hex_faces() -> [[usize; 4]; 6] {
    let mut out = [[0; 4]; 6];
    let mut f = 0;
    for axis in 0..3 {
        let b = (axis + 1) % 3;
        let d = (axis + 2) % 3;
        for side in 0..2 {
            let mk = |ob: usize, od: usize| (side << axis) | (ob << b) | (od << d);
            let ring = [mk(0, 0), mk(1, 0), mk(1, 1), mk(0, 1)];
            out[f] = if side == 1 {
                ring
            } else {
                [ring[0], ring[3], ring[2], ring[1]]
            };
            f += 1;
        }
    }
    out
}

fn hex_volume_value(v: &[f64; 24]) -> (f64, [f64; 24]) {
    let pt = |k: usize| [v[3 * k], v[3 * k + 1], v[3 * k + 2]];
    let mut vol = 0.0;
    let mut grad = [0.0; 24];
    for face in hex_faces() {
        let mut center = [0.0; 3];
        for &k in &face {
            let q = pt(k);
            for a in 0..3 {
                center[a] += 0.25 * q[a];
            }
        }
        let mut g_center = [0.0; 3];
        for i in 0..4 {
            let (ka, kb) = (face[i], face[(i + 1) % 4]);
            let (a, b) = (pt(ka), pt(kb));
            vol += dot3(center, cross(a, b)) / 6.0;
            let gc = cross(a, b);
            let ga = cross(b, center);
            let gb = cross(center, a);
            for x in 0..3 {
                g_center[x] += gc[x] / 6.0;
                grad[3 * ka + x] += ga[x] / 6.0;
                grad[3 * kb + x] += gb[x] / 6.0;
            }
        }
        for &k in &face {
            for x in 0..3 {
                grad[3 * k + x] += 0.25 * g_center[x];
            }
        }
    }
    (vol, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Tape;

    #[test]
    fn uniform_mesh_lattice() {
        let spec = GridSpec::new(&[2, 2], 1).unwrap();
        let mesh = make_uniform_mesh(&spec);
        let s = mesh.slice(0);
        assert_eq!(s.len(), 18);
        let pts: Vec<(f64, f64)> = s.chunks(2).map(|c| (c[0], c[1])).collect();
        for x in [0.0, 0.5, 1.0] {
            for y in [0.0, 0.5, 1.0] {
                assert!(pts.contains(&(x, y)));
            }
        }
        let spec3 = GridSpec::new(&[4, 4, 4], 1).unwrap();
        let mesh3 = make_uniform_mesh(&spec3);
        assert_eq!(spec3.num_nodes(), 125);
        assert_eq!(&mesh3.slice(0)[..3], &[0.0, 0.0, 0.0]);
        let spec = GridSpec::new(&[2, 2], 3).unwrap();
        assert_eq!(make_uniform_mesh(&spec).positions().len(), 4 * 9 * 2);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(GridSpec::new(&[4], 1).is_err());
        assert!(GridSpec::new(&[4, 4], 0).is_err());
        assert!(GridSpec::new(&[4, 1], 1).is_err());
    }

    #[test]
    fn undeformed_geometry_2d() {
        let spec = GridSpec::new(&[2, 2], 1).unwrap();
        let topo = Topology::new(&spec);
        let g = cell_geometry(&topo, &make_uniform_mesh(&spec), 0).unwrap();
        for v in &g.volumes {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert_eq!(g.interface_areas.len(), 4);
        for a in &g.interface_areas {
            assert!((a - 0.5).abs() < 1e-15);
        }
        assert_eq!(&g.centroids[..2], &[0.25, 0.25]);
    }

    #[test]
    fn sheared_cell_area_matches_shoelace() {
        // single cell with corners (0,0),(1,0),(1.5,1),(0.5,1)
        let spec = GridSpec::new(&[2, 2], 1).unwrap();
        let topo = Topology::new(&spec);
        let nodes = topo.nodes_of(0);
        let mut pos = spec.node_lattice().points();
        let coords = [(0.0, 0.0), (1.0, 0.0), (0.5, 1.0), (1.5, 1.0)];
        for (k, &n) in nodes.iter().enumerate() {
            pos[2 * n] = coords[k].0;
            pos[2 * n + 1] = coords[k].1;
        }
        let g = geometry_kernel(&mut Plain, &topo, &pos);
        // shoelace oracle over (0,0),(1,0),(1.5,1),(0.5,1)
        let poly = [(0.0, 0.0), (1.0, 0.0), (1.5, 1.0), (0.5, 1.0)];
        let mut s = 0.0;
        for i in 0..4 {
            let (a, b) = (poly[i], poly[(i + 1) % 4]);
            s += a.0 * b.1 - b.0 * a.1;
        }
        assert!((g.volumes[0] - 0.5 * s).abs() < 1e-14);
        assert!((g.volumes[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn undeformed_geometry_3d() {
        let spec = GridSpec::new(&[4, 4, 4], 1).unwrap();
        let topo = Topology::new(&spec);
        let g = cell_geometry(&topo, &make_uniform_mesh(&spec), 0).unwrap();
        for v in &g.volumes {
            assert!((v - 0.015625).abs() < 1e-15);
        }
        for a in &g.interface_areas {
            assert!((a - 0.0625).abs() < 1e-15);
        }
    }

    #[test]
    fn folded_cell_is_rejected() {
        let spec = GridSpec::new(&[4, 4], 1).unwrap();
        let topo = Topology::new(&spec);
        let mut pos = make_uniform_mesh(&spec).into_positions();
        // push interior node (1,1) past its diagonal neighbor
        let n = topo.nodes.flat(&[1, 1]);
        let per = spec.num_nodes() * 2;
        pos[per + 2 * n] = 0.6;
        pos[per + 2 * n + 1] = 0.6;
        let mesh = ParticleMesh::new(&spec, pos).unwrap();
        assert!(cell_geometry(&topo, &mesh, 0).is_ok());
        assert!(matches!(
            cell_geometry(&topo, &mesh, 1),
            Err(Error::NonPositiveVolume { n: 1, .. })
        ));
    }

    #[test]
    fn guard_band_enforced() {
        let spec = GridSpec::new(&[4, 4], 1).unwrap();
        let mut pos = make_uniform_mesh(&spec).into_positions();
        pos[3] = 1.3;
        assert!(matches!(
            ParticleMesh::new(&spec, pos),
            Err(Error::OutOfGuardBand { .. })
        ));
    }

    fn jittered(spec: &GridSpec, topo: &Topology, amp: f64, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut pos = spec.node_lattice().points();
        let ndim = spec.ndim();
        for n in 0..topo.nodes.len() {
            if !topo.boundary[n] {
                for a in 0..ndim {
                    pos[n * ndim + a] += amp * spec.spacing(a) * rng.gen_range(-1.0..1.0);
                }
            }
        }
        pos
    }

    #[test]
    fn volumes_telescope_to_unit_domain() {
        for shape in [vec![5usize, 7], vec![4, 3, 5]] {
            let spec = GridSpec::new(&shape, 1).unwrap();
            let topo = Topology::new(&spec);
            for seed in 0..3 {
                let pos = jittered(&spec, &topo, 0.3, seed);
                let g = geometry_kernel(&mut Plain, &topo, &pos);
                let total: f64 = g.volumes.iter().sum();
                assert!((total - 1.0).abs() < 1e-10, "{shape:?}: {total}");
                assert!(g.volumes.iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn geometry_partials_match_finite_differences() {
        for shape in [vec![3usize, 3], vec![2, 2, 2]] {
            let spec = GridSpec::new(&shape, 1).unwrap();
            let topo = Topology::new(&spec);
            let pos = jittered(&spec, &topo, 0.3, 11);
            // scalar probe: Σ_k w_k * (vol_k + area_k + centroid_k)
            let probe = |o: &mut Tape, p: &[f64]| {
                let vars: Vec<_> = p.iter().map(|&x| o.leaf(x)).collect();
                let g = geometry_kernel(o, &topo, &vars);
                let mut terms = Vec::new();
                for (i, &v) in g
                    .volumes
                    .iter()
                    .chain(&g.interface_areas)
                    .chain(&g.centroids)
                    .enumerate()
                {
                    terms.push((v, 1.0 + 0.1 * i as f64));
                }
                o.lin(&terms, 0.0)
            };
            let mut t = Tape::new();
            let out = probe(&mut t, &pos);
            let grad = t.gradient(out, pos.len());
            for i in 0..pos.len() {
                let h = 1e-6;
                let mut pp = pos.clone();
                pp[i] += h;
                let mut tp = Tape::new();
                let fp = probe(&mut tp, &pp);
                let fp = tp.value(fp);
                pp[i] -= 2.0 * h;
                let mut tm = Tape::new();
                let fm = probe(&mut tm, &pp);
                let fm = tm.value(fm);
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "{i}: {fd} vs {}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn lame_conversion() {
        let t = lame_parameters(&MaterialTable::default()).unwrap();
        assert!((t.gm.mu - 750.0).abs() < 1e-9);
        assert!((t.gm.lambda - 3000.0).abs() < 1e-9);
        assert!((t.csf.mu - 45.454545454545).abs() < 1e-9);
        assert!((t.csf.lambda - 11.363636363636).abs() < 1e-9);
        let zero = lame_from(
            "x",
            Material {
                young_modulus: 10.0,
                poisson_ratio: 0.0,
            },
        )
        .unwrap();
        assert_eq!(zero.lambda, 0.0);
        assert_eq!(zero.mu, 5.0);
        let bad = Material {
            young_modulus: 1.0,
            poisson_ratio: 0.5,
        };
        assert!(matches!(lame_from("x", bad), Err(Error::InvalidPoisson { .. })));
    }

    #[test]
    fn lame_blend_cases() {
        let t = lame_parameters(&MaterialTable::default()).unwrap();
        assert_eq!(blend_lame(&t, [1.0, 0.0, 0.0], 0.0), t.wm);
        let half = blend_lame(&t, [0.5, 0.5, 0.0], 0.0);
        assert!((half.lambda - t.wm.lambda).abs() < 1e-9 && (half.mu - t.wm.mu).abs() < 1e-9);
        let mix = blend_lame(&t, [0.0, 0.0, 0.5], 0.5);
        assert!((mix.lambda - 0.5 * (t.csf.lambda + t.tumor.lambda)).abs() < 1e-9);
        assert!((mix.mu - 0.5 * (t.csf.mu + t.tumor.mu)).abs() < 1e-9);
        assert_eq!(blend_lame(&t, [0.0; 3], 0.0), t.csf);
    }
}
