//! Discrete growth and elasticity residuals.
//!
//! The tumor residual is a finite-volume implicit-Euler balance on the
//! deformed cells. The elasticity residual is the nodal quasi-static balance
//! `∇·σ + γ∇c` with a Neo-Hookean stress, differenced on the reference
//! lattice.

use crate::ad::{Ops, Plain};
use crate::domain::{
    blend_lame_with, cell_geometry, geometry_kernel, lame_parameters, CellGeometry, DynamicsParams, GridSpec,
    LameTable, MaterialTable, ParticleMesh, TissueField, Topology, TumorField,
};
use crate::error::{Error, Result};
use crate::transfer::stencil;

/// Jacobian floor of the loss-mode stress.
pub const J_FLOOR: f64 = 1e-4;
/// Cells with less diffusive tissue than this do not diffuse.
pub const DIFFUSIVE_THRESHOLD: f64 = 0.1;
/// Modulus that Lamé values are divided by (gray-matter Young modulus).
pub const REFERENCE_MODULUS: f64 = 2100.0;

pub type Mat = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StressState {
    pub f: Mat,
    pub j: f64,
    pub sigma: Mat,
}

/// Precomputed, parameter-independent data for the residuals.
#[derive(Debug, Clone)]
pub struct PhysicsSetup {
    pub topo: Topology,
    /// Tissue fractions per cell (Lagrangian, time independent).
    pub cell_tissue: Vec<[f64; 3]>,
    /// Tissue fractions per particle.
    pub node_tissue: Vec<[f64; 3]>,
    /// Nondimensional Lamé pairs.
    pub lame: LameTable,
    pub diffusive_threshold: f64,
    /// Cell-to-node interpolation, CSR over nodes.
    node_c_start: Vec<usize>,
    node_c: Vec<(usize, f64)>,
}

impl PhysicsSetup {
    pub fn new(
        spec: &GridSpec,
        tissue: &TissueField,
        materials: &MaterialTable,
        reference_modulus: f64,
        diffusive_threshold: f64,
    ) -> Result<Self> {
        let topo = Topology::new(spec);
        if tissue.intensities.len() != topo.nodes.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tissue particles for {} mesh nodes",
                tissue.intensities.len(),
                topo.nodes.len()
            )));
        }
        let lame = lame_parameters(materials)?.scaled(reference_modulus);
        let cells = spec.cell_lattice();
        let mut node_c_start = vec![0];
        let mut node_c = Vec::new();
        for k in 0..topo.nodes.len() {
            let st = stencil(&cells, &topo.nodes.point(k));
            for c in 0..st.corners {
                if st.weights[c] != 0.0 {
                    node_c.push((st.nodes[c], st.weights[c]));
                }
            }
            node_c_start.push(node_c.len());
        }
        Ok(Self {
            cell_tissue: tissue.at_cells(&topo),
            node_tissue: tissue.intensities.clone(),
            topo,
            lame,
            diffusive_threshold,
            node_c_start,
            node_c,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.topo.spec
    }

    /// Tumor density at mesh nodes from one slice of cell values.
    pub fn c_at_nodes<O: Ops>(&self, o: &mut O, c: &[O::V]) -> Vec<O::V> {
        let mut terms = Vec::with_capacity(8);
        (0..self.topo.nodes.len())
            .map(|k| {
                terms.clear();
                terms.extend(
                    self.node_c[self.node_c_start[k]..self.node_c_start[k + 1]]
                        .iter()
                        .map(|&(cell, w)| (c[cell], w)),
                );
                o.lin(&terms, 0.0)
            })
            .collect()
    }

    pub fn diffusive_mask(&self) -> Vec<bool> {
        self.cell_tissue
            .iter()
            .map(|m| m[0] + m[1] >= self.diffusive_threshold)
            .collect()
    }
}

/// Finite-difference partners of `node` along `axis`: `(minus, plus, 1/Δx)`.
/// Central in the interior, one-sided on the boundary.
pub fn fd_pair(topo: &Topology, node: usize, axis: usize) -> (usize, usize, f64) {
    let stride = topo.nodes.stride(axis);
    let j = (node / stride) % topo.nodes.dims[axis];
    let h = topo.spec.spacing(axis);
    if j == 0 {
        (node, node + stride, 1.0 / h)
    } else if j + 1 == topo.nodes.dims[axis] {
        (node - stride, node, 1.0 / h)
    } else {
        (node - stride, node + stride, 0.5 / h)
    }
}

/// `F = I + ∇u` at every node of slice `n`, with `u = p^n - p^0`.
pub fn deformation_gradient(topo: &Topology, mesh: &ParticleMesh, n: usize) -> Vec<Mat> {
    let ndim = topo.ndim();
    let disp = mesh.displacement(n);
    (0..topo.nodes.len())
        .map(|k| {
            let mut f = identity();
            for j in 0..ndim {
                let (m, p, s) = fd_pair(topo, k, j);
                for i in 0..ndim {
                    f[i][j] += (disp[p * ndim + i] - disp[m * ndim + i]) * s;
                }
            }
            f
        })
        .collect()
}

fn identity() -> Mat {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

/// Determinant and cofactor matrix (`∂J/∂F`) of the leading `ndim` block.
pub fn det_cof(f: &Mat, ndim: usize) -> (f64, Mat) {
    let mut cof = [[0.0; 3]; 3];
    if ndim == 2 {
        cof[0][0] = f[1][1];
        cof[0][1] = -f[1][0];
        cof[1][0] = -f[0][1];
        cof[1][1] = f[0][0];
        (f[0][0] * f[1][1] - f[0][1] * f[1][0], cof)
    } else {
        for i in 0..3 {
            for j in 0..3 {
                let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
                let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
                cof[i][j] = f[i1][j1] * f[i2][j2] - f[i1][j2] * f[i2][j1];
            }
        }
        let det = (0..3).map(|j| f[0][j] * cof[0][j]).sum();
        (det, cof)
    }
}

/// `σ = (μ/J)(F Fᵀ - I) + λ ln(J) I`.
pub fn neo_hookean_stress(f: &Mat, ndim: usize, lambda: f64, mu: f64) -> Result<StressState> {
    let (j, _) = det_cof(f, ndim);
    if j <= 0.0 {
        return Err(Error::NonPositiveJacobian { node: 0, n: 0 });
    }
    let mut sigma = [[0.0; 3]; 3];
    for a in 0..ndim {
        for b in 0..ndim {
            let bb: f64 = (0..ndim).map(|k| f[a][k] * f[b][k]).sum();
            let delta = if a == b { 1.0 } else { 0.0 };
            sigma[a][b] = mu / j * (bb - delta) + lambda * j.ln() * delta;
        }
    }
    Ok(StressState { f: *f, j, sigma })
}

/// Loss-mode stress component `(a, b)` with its partials with respect to the
/// `ndim²` entries of `F` (row-major), `λ` and `μ`.
fn floored_stress(f: &Mat, ndim: usize, j: f64, cof: &Mat, a: usize, b: usize, lam: f64, mu: f64) -> (f64, [f64; 11]) {
    let jh = j.max(J_FLOOR);
    let active = j >= J_FLOOR;
    let bb: f64 = (0..ndim).map(|k| f[a][k] * f[b][k]).sum();
    let delta = if a == b { 1.0 } else { 0.0 };
    let s = mu / jh * (bb - delta) + lam * jh.ln() * delta;
    let mut g = [0.0; 11];
    let dj = if active {
        -mu * (bb - delta) / (jh * jh) + lam * delta / jh
    } else {
        0.0
    };
    for c in 0..ndim {
        for k in 0..ndim {
            let mut db = 0.0;
            if c == a {
                db += f[b][k];
            }
            if c == b {
                db += f[a][k];
            }
            g[c * ndim + k] = mu / jh * db + dj * cof[c][k];
        }
    }
    g[ndim * ndim] = jh.ln() * delta;
    g[ndim * ndim + 1] = (bb - delta) / jh;
    (s, g)
}

/// Terms of the elasticity loss.
#[derive(Debug, Clone)]
pub struct ElasticityTerms<V> {
    /// `Σ_n Σ_interior ‖∇·σ + γ∇c‖²`.
    pub residual_sq: V,
    /// Jacobian-floor barrier `Σ (J - ε)²/ε` over nodes with `J < ε`.
    pub barrier: V,
    /// Residual components, `[nt + 1][interior][ndim]`.
    pub residuals: Vec<V>,
    pub min_jacobian: f64,
}

/// Elasticity residual over all slices. `pos` holds every slice of node
/// positions, `c` every slice of cell densities.
pub fn elasticity_kernel<O: Ops>(
    o: &mut O,
    setup: &PhysicsSetup,
    pos: &[O::V],
    c: &[O::V],
    gamma: O::V,
) -> ElasticityTerms<O::V> {
    let topo = &setup.topo;
    let ndim = topo.ndim();
    let nn = topo.nodes.len();
    let ncell = topo.cells.len();
    let nt = setup.spec().nt();
    let per = nn * ndim;
    let sym: Vec<(usize, usize)> = (0..ndim).flat_map(|a| (a..ndim).map(move |b| (a, b))).collect();
    let nsym = sym.len();
    let sym_index = |a: usize, b: usize| {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        sym.iter().position(|&p| p == (a, b)).unwrap()
    };
    let sym_lookup: Vec<Vec<usize>> = (0..ndim)
        .map(|a| (0..ndim).map(|b| sym_index(a, b)).collect())
        .collect();
    let mut residuals = Vec::with_capacity((nt + 1) * topo.interior_nodes.len() * ndim);
    let mut barrier_terms = Vec::new();
    let mut min_j = f64::INFINITY;
    let mut terms: Vec<(O::V, f64)> = Vec::with_capacity(16);
    let mut fvars: Vec<O::V> = Vec::with_capacity(9);
    let mut parents: Vec<O::V> = Vec::with_capacity(11);
    for n in 0..=nt {
        let cn = &c[n * ncell..(n + 1) * ncell];
        let c_nodes = setup.c_at_nodes(o, cn);
        // stress at every node; slice 0 is undeformed by construction
        let mut sigma: Vec<O::V> = Vec::new();
        if n > 0 {
            sigma.reserve(nn * nsym);
            let p0 = &pos[..per];
            let pn = &pos[n * per..(n + 1) * per];
            for k in 0..nn {
                fvars.clear();
                let mut f = identity();
                for i in 0..ndim {
                    for jx in 0..ndim {
                        let (m, p, s) = fd_pair(topo, k, jx);
                        let delta = if i == jx { 1.0 } else { 0.0 };
                        terms.clear();
                        terms.push((pn[p * ndim + i], s));
                        terms.push((p0[p * ndim + i], -s));
                        terms.push((pn[m * ndim + i], -s));
                        terms.push((p0[m * ndim + i], s));
                        let v = o.lin(&terms, delta);
                        f[i][jx] = o.value(v);
                        fvars.push(v);
                    }
                }
                let (j, cof) = det_cof(&f, ndim);
                min_j = min_j.min(j);
                if j < J_FLOOR {
                    let val = (j - J_FLOOR).powi(2) / J_FLOOR;
                    let scale = 2.0 * (j - J_FLOOR) / J_FLOOR;
                    let parts: Vec<f64> = (0..ndim * ndim).map(|q| scale * cof[q / ndim][q % ndim]).collect();
                    barrier_terms.push(o.dyn_node(val, &fvars, &parts));
                }
                let (lam, mu) = blend_lame_with(o, &setup.lame, setup.node_tissue[k], c_nodes[k]);
                let (lv, mv) = (o.value(lam), o.value(mu));
                for &(a, b) in &sym {
                    let (s, g) = floored_stress(&f, ndim, j, &cof, a, b, lv, mv);
                    parents.clear();
                    parents.extend_from_slice(&fvars);
                    parents.push(lam);
                    parents.push(mu);
                    sigma.push(o.dyn_node(s, &parents, &g[..ndim * ndim + 2]));
                }
            }
        } else {
            min_j = min_j.min(1.0);
        }
        for &k in &topo.interior_nodes {
            for a in 0..ndim {
                terms.clear();
                if n > 0 {
                    for b in 0..ndim {
                        let (m, p, s) = fd_pair(topo, k, b);
                        let q = sym_lookup[a][b];
                        terms.push((sigma[p * nsym + q], s));
                        terms.push((sigma[m * nsym + q], -s));
                    }
                }
                let (m, p, s) = fd_pair(topo, k, a);
                let grad_c = o.lin(&[(c_nodes[p], s), (c_nodes[m], -s)], 0.0);
                let force = o.mul(gamma, grad_c);
                terms.push((force, 1.0));
                residuals.push(o.lin(&terms, 0.0));
            }
        }
    }
    let residual_sq = o.sum_sq(&residuals);
    let barrier = o.sum(&barrier_terms);
    ElasticityTerms {
        residual_sq,
        barrier,
        residuals,
        min_jacobian: min_j,
    }
}

/// Strict elasticity residual: the loss and the per-node residual vectors
/// `[nt + 1][num_nodes][ndim]` (zero on boundary nodes).
pub fn elasticity_residual(
    setup: &PhysicsSetup,
    mesh: &ParticleMesh,
    tumor: &TumorField,
    params: &DynamicsParams,
) -> Result<(f64, Vec<f64>)> {
    let topo = &setup.topo;
    let ndim = topo.ndim();
    for n in 0..=setup.spec().nt() {
        for (node, f) in deformation_gradient(topo, mesh, n).iter().enumerate() {
            if det_cof(f, ndim).0 <= 0.0 {
                return Err(Error::NonPositiveJacobian { node, n });
            }
        }
    }
    let terms = elasticity_kernel(&mut Plain, setup, mesh.positions(), &tumor.values, params.gamma);
    let nn = topo.nodes.len();
    let mut field = vec![0.0; (setup.spec().nt() + 1) * nn * ndim];
    let ni = topo.interior_nodes.len();
    for (q, r) in terms.residuals.iter().enumerate() {
        let n = q / (ni * ndim);
        let k = topo.interior_nodes[(q / ndim) % ni];
        field[(n * nn + k) * ndim + q % ndim] = *r;
    }
    Ok((terms.residual_sq, field))
}

/// Quasi-static balance `∇·σ + γ∇c` of one slice for a fixed density.
/// Material blends and the tumor force are evaluated once, so repeated
/// residual evaluations only redo the kinematics.
#[derive(Debug, Clone)]
pub struct Equilibrium {
    ndim: usize,
    lam: Vec<f64>,
    mu: Vec<f64>,
    /// `λ̄ + 2μ̄` per node.
    pub stiffness: Vec<f64>,
    force: Vec<f64>,
    pairs: Vec<[(u32, u32, f64); 3]>,
    interior: Vec<usize>,
    sigma: Vec<[f64; 6]>,
}

impl Equilibrium {
    pub fn new(setup: &PhysicsSetup, c: &[f64], gamma: f64) -> Self {
        let topo = &setup.topo;
        let ndim = topo.ndim();
        let nn = topo.nodes.len();
        let c_nodes = setup.c_at_nodes(&mut Plain, c);
        let mut lam = Vec::with_capacity(nn);
        let mut mu = Vec::with_capacity(nn);
        for k in 0..nn {
            let (l, m) = blend_lame_with(&mut Plain, &setup.lame, setup.node_tissue[k], c_nodes[k]);
            lam.push(l);
            mu.push(m);
        }
        let stiffness = lam.iter().zip(&mu).map(|(l, m)| l + 2.0 * m).collect();
        let pairs: Vec<[(u32, u32, f64); 3]> = (0..nn)
            .map(|k| {
                let mut row = [(0, 0, 0.0); 3];
                for (a, slot) in row.iter_mut().enumerate().take(ndim) {
                    let (m, p, s) = fd_pair(topo, k, a);
                    *slot = (m as u32, p as u32, s);
                }
                row
            })
            .collect();
        let mut force = vec![0.0; nn * ndim];
        for &k in &topo.interior_nodes {
            for a in 0..ndim {
                let (m, p, s) = pairs[k][a];
                force[k * ndim + a] = gamma * (c_nodes[p as usize] - c_nodes[m as usize]) * s;
            }
        }
        Self {
            ndim,
            lam,
            mu,
            stiffness,
            force,
            pairs,
            interior: topo.interior_nodes.clone(),
            sigma: vec![[0.0; 6]; nn],
        }
    }

    /// Residual at every node (`[num_nodes][ndim]`, boundary left at 0).
    /// Returns the largest absolute component.
    pub fn residual(&mut self, p0: &[f64], pn: &[f64], out: &mut [f64]) -> f64 {
        let ndim = self.ndim;
        for k in 0..self.lam.len() {
            let mut f = identity();
            for jx in 0..ndim {
                let (m, p, s) = self.pairs[k][jx];
                let (m, p) = (m as usize, p as usize);
                for (i, row) in f.iter_mut().enumerate().take(ndim) {
                    row[jx] += (pn[p * ndim + i] - p0[p * ndim + i] - pn[m * ndim + i] + p0[m * ndim + i]) * s;
                }
            }
            let (j, _) = det_cof(&f, ndim);
            let jh = j.max(J_FLOOR);
            let (l, u) = (self.lam[k], self.mu[k]);
            let iso = l * jh.ln();
            let sig = &mut self.sigma[k];
            for a in 0..ndim {
                for b in a..ndim {
                    let bb: f64 = (0..ndim).map(|q| f[a][q] * f[b][q]).sum();
                    let delta = if a == b { 1.0 } else { 0.0 };
                    sig[a * 3 + b - a * (a + 1) / 2] = u / jh * (bb - delta) + iso * delta;
                }
            }
        }
        let idx = |a: usize, b: usize| {
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            a * 3 + b - a * (a + 1) / 2
        };
        let mut worst: f64 = 0.0;
        for &k in &self.interior {
            for a in 0..ndim {
                let mut v = self.force[k * ndim + a];
                for b in 0..ndim {
                    let (m, p, s) = self.pairs[k][b];
                    v += (self.sigma[p as usize][idx(a, b)] - self.sigma[m as usize][idx(a, b)]) * s;
                }
                out[k * ndim + a] = v;
                worst = worst.max(v.abs());
            }
        }
        worst
    }
}

/// Quasi-static residual `∇·σ + γ∇c` of one slice at every node
/// (`[num_nodes][ndim]`, zero on the boundary).
pub fn nodal_residual(setup: &PhysicsSetup, p0: &[f64], pn: &[f64], c: &[f64], gamma: f64) -> Vec<f64> {
    let mut eq = Equilibrium::new(setup, c, gamma);
    let mut r = vec![0.0; pn.len()];
    eq.residual(p0, pn, &mut r);
    r
}

/// `D_i = D_gm (R m_WM + m_GM)`, zero below the diffusive threshold.
pub fn effective_diffusivity(tissue_at_cells: &[[f64; 3]], params: &DynamicsParams, threshold: f64) -> Vec<f64> {
    diffusivity_kernel(&mut Plain, tissue_at_cells, params.d_gm, params.r, threshold)
        .into_iter()
        .map(|d| d.unwrap_or(0.0))
        .collect()
}

/// Per-cell diffusivity; `None` marks non-diffusive cells.
pub fn diffusivity_kernel<O: Ops>(
    o: &mut O,
    tissue: &[[f64; 3]],
    d_gm: O::V,
    r: O::V,
    threshold: f64,
) -> Vec<Option<O::V>> {
    let (dv, rv) = (o.value(d_gm), o.value(r));
    tissue
        .iter()
        .map(|m| {
            if m[0] + m[1] < threshold {
                None
            } else {
                let w = rv * m[0] + m[1];
                Some(o.node(dv * w, [d_gm, r], || [w, dv * m[0]]))
            }
        })
        .collect()
}

/// Harmonic mean, zero when both inputs vanish.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b <= 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Flux `|Γ| D_ij (c_j - c_i) / d` into cell `i` across one face.
pub fn face_flux(area: f64, d_i: f64, d_j: f64, c_i: f64, c_j: f64, dist: f64) -> f64 {
    area * harmonic_mean(d_i, d_j) * (c_j - c_i) / dist
}

/// Face diffusivities, constant in time. `None` for faces with no flux.
pub fn face_diffusivity<O: Ops>(o: &mut O, topo: &Topology, diff: &[Option<O::V>]) -> Vec<Option<O::V>> {
    topo.faces
        .iter()
        .map(|f| match (diff[f.lower], diff[f.upper]) {
            (Some(a), Some(b)) => {
                let (x, y) = (o.value(a), o.value(b));
                if x + y <= 0.0 {
                    return None;
                }
                let s = x + y;
                Some(o.node(2.0 * x * y / s, [a, b], || {
                    [2.0 * y * y / (s * s), 2.0 * x * x / (s * s)]
                }))
            }
            _ => None,
        })
        .collect()
}

/// Outgoing-positive flux per face for one slice (`lower` gains, `upper`
/// loses).
pub fn face_fluxes<O: Ops>(
    o: &mut O,
    topo: &Topology,
    geom: &CellGeometry<O::V>,
    c: &[O::V],
    face_d: &[Option<O::V>],
) -> Vec<Option<O::V>> {
    let ndim = topo.ndim();
    topo.faces
        .iter()
        .zip(face_d)
        .enumerate()
        .map(|(fi, (f, hd))| {
            let h = (*hd)?;
            let (i, j) = (f.lower, f.upper);
            // centroid distance
            let mut pp = [geom.centroids[0]; 6];
            let mut d2 = 0.0;
            let mut diffs = [0.0; 3];
            for a in 0..ndim {
                pp[a] = geom.centroids[i * ndim + a];
                pp[ndim + a] = geom.centroids[j * ndim + a];
                diffs[a] = o.value(pp[ndim + a]) - o.value(pp[a]);
                d2 += diffs[a] * diffs[a];
            }
            let dist = d2.sqrt();
            let parts: Vec<f64> = (0..2 * ndim)
                .map(|q| {
                    let u = diffs[q % ndim] / dist;
                    if q < ndim {
                        -u
                    } else {
                        u
                    }
                })
                .collect();
            let dv = o.dyn_node(dist, &pp[..2 * ndim], &parts);
            let area = geom.interface_areas[fi];
            let (av, hv, ci, cj) = (o.value(area), o.value(h), o.value(c[i]), o.value(c[j]));
            let dc = cj - ci;
            let flux = av * hv * dc / dist;
            Some(o.node(flux, [area, h, c[i], c[j], dv], || {
                [
                    hv * dc / dist,
                    av * dc / dist,
                    -av * hv / dist,
                    av * hv / dist,
                    -flux / dist,
                ]
            }))
        })
        .collect()
}

/// `D[c]_i = Σ_j |Γ_ij| D_ij (c_j - c_i) / ‖x_j - x_i‖`.
pub fn diffusion_operator(topo: &Topology, c: &[f64], d: &[f64], geom: &CellGeometry<f64>) -> Vec<f64> {
    let diff: Vec<Option<f64>> = d.iter().map(|&x| Some(x)).collect();
    let mut p = Plain;
    let hd = face_diffusivity(&mut p, topo, &diff);
    let fluxes = face_fluxes(&mut p, topo, geom, c, &hd);
    let mut out = vec![0.0; c.len()];
    for (f, flux) in topo.faces.iter().zip(fluxes) {
        if let Some(q) = flux {
            out[f.lower] += q;
            out[f.upper] -= q;
        }
    }
    out
}

/// `S_i = |Ω_i| ρ c_i (1 - c_i)`.
pub fn reaction_operator(c: &[f64], rho: f64, geom: &CellGeometry<f64>) -> Vec<f64> {
    c.iter()
        .zip(&geom.volumes)
        .map(|(&c, &v)| v * rho * c * (1.0 - c))
        .collect()
}

/// Growth residuals `[nt][num_cells]` and their squared sum.
pub fn growth_kernel<O: Ops>(
    o: &mut O,
    setup: &PhysicsSetup,
    geoms: &[CellGeometry<O::V>],
    c: &[O::V],
    d_gm: O::V,
    r: O::V,
    rho: O::V,
) -> (O::V, Vec<O::V>) {
    let topo = &setup.topo;
    let ncell = topo.cells.len();
    let nt = setup.spec().nt();
    let inv_dt = nt as f64;
    let diff = diffusivity_kernel(o, &setup.cell_tissue, d_gm, r, setup.diffusive_threshold);
    let hd = face_diffusivity(o, topo, &diff);
    let rho_v = o.value(rho);
    let mut residuals = Vec::with_capacity(nt * ncell);
    let mut parents = Vec::new();
    let mut parts = Vec::new();
    for n in 1..=nt {
        let cn = &c[n * ncell..(n + 1) * ncell];
        let cp = &c[(n - 1) * ncell..n * ncell];
        let geom = &geoms[n];
        let fluxes = face_fluxes(o, topo, geom, cn, &hd);
        for i in 0..ncell {
            let (v, x, xp) = (o.value(geom.volumes[i]), o.value(cn[i]), o.value(cp[i]));
            let logistic = x * (1.0 - x);
            let mut val = v * inv_dt * (x - xp) - v * rho_v * logistic;
            parents.clear();
            parts.clear();
            parents.extend_from_slice(&[geom.volumes[i], cn[i], cp[i], rho]);
            parts.extend_from_slice(&[
                inv_dt * (x - xp) - rho_v * logistic,
                v * inv_dt - v * rho_v * (1.0 - 2.0 * x),
                -v * inv_dt,
                -v * logistic,
            ]);
            for &fi in &topo.cell_faces[i] {
                if let Some(q) = fluxes[fi] {
                    let sign = if topo.faces[fi].lower == i { 1.0 } else { -1.0 };
                    val -= sign * o.value(q);
                    parents.push(q);
                    parts.push(-sign);
                }
            }
            residuals.push(o.dyn_node(val, &parents, &parts));
        }
    }
    (o.sum_sq(&residuals), residuals)
}

/// Growth loss and the residual field `[nt][num_cells]`; fails on folded
/// cells.
pub fn tumor_residual(
    setup: &PhysicsSetup,
    tumor: &TumorField,
    mesh: &ParticleMesh,
    params: &DynamicsParams,
) -> Result<(f64, Vec<f64>)> {
    let spec = setup.spec();
    if tumor.num_slices() != spec.nt() + 1 || tumor.num_cells != spec.num_cells() {
        return Err(Error::ShapeMismatch("tumor field does not match the grid".into()));
    }
    let geoms = (0..=spec.nt())
        .map(|n| cell_geometry(&setup.topo, mesh, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(growth_kernel(
        &mut Plain,
        setup,
        &geoms,
        &tumor.values,
        params.d_gm,
        params.r,
        params.rho,
    ))
}

/// Geometry of every slice without the folding check.
pub fn all_geometries<O: Ops>(o: &mut O, topo: &Topology, pos: &[O::V]) -> Vec<CellGeometry<O::V>> {
    let per = topo.nodes.len() * topo.ndim();
    pos.chunks_exact(per).map(|s| geometry_kernel(o, topo, s)).collect()
}
