//! Combined loss assembly, reverse-mode gradients, Adam and the
//! coarse-to-fine fitting schedule.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{logit, Ops, Plain, Tape, Var};
use crate::domain::{
    geometry_kernel, DynamicsParams, GridSpec, ImagingParams, MaterialTable, PatientCase, TissueField, TumorField,
};
use crate::error::{Error, Result};
use crate::forward::{project_cells, SamplingRanges, Units};
use crate::imaging::{core_kernel, edema_kernel, pet_kernel, tissue_kernel};
use crate::physics::{
    all_geometries, elasticity_kernel, growth_kernel, PhysicsSetup, DIFFUSIVE_THRESHOLD, REFERENCE_MODULUS,
};
use crate::priors::{check_symmetry_shape, gaussian_kernel, symmetry_term, SEED_WIDTH, SYMMETRY_SCALES};
use crate::transfer::{stencil, P2gPlan};

/// Names of the loss terms in weight order.
pub const TERM_NAMES: [&str; 8] = [
    "growth",
    "elasticity",
    "seed",
    "symmetry",
    "core",
    "edema",
    "pet",
    "tissue",
];
/// Steps producing a cell volume below this are halved once.
pub const MIN_STEP_VOLUME: f64 = 1e-6;
/// Consecutive non-finite losses tolerated before giving up.
pub const DIVERGENCE_PATIENCE: usize = 10;
/// Background density of the initial guess.
pub const INIT_BACKGROUND: f64 = 0.01;
/// Peak added at the core centroid in the initial guess.
pub const INIT_BUMP: f64 = 0.5;
/// Half-width of the uniform jitter on initial density latents.
pub const INIT_JITTER: f64 = 1e-3;

/// Weights of the eight loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub growth: f64,
    pub elasticity: f64,
    pub seed: f64,
    pub symmetry: f64,
    pub core: f64,
    pub edema: f64,
    pub pet: f64,
    pub tissue: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::from_array([1.0, 0.1, 0.05, 0.05, 10.0, 10.0, 5.0, 1.0])
    }
}

impl LossWeights {
    pub fn from_array(a: [f64; 8]) -> Self {
        Self {
            growth: a[0],
            elasticity: a[1],
            seed: a[2],
            symmetry: a[3],
            core: a[4],
            edema: a[5],
            pet: a[6],
            tissue: a[7],
        }
    }

    pub fn as_array(&self) -> [f64; 8] {
        [
            self.growth,
            self.elasticity,
            self.seed,
            self.symmetry,
            self.core,
            self.edema,
            self.pet,
            self.tissue,
        ]
    }

    /// Only term `k` active with weight 1.
    pub fn only(k: usize) -> Self {
        let mut a = [0.0; 8];
        a[k] = 1.0;
        Self::from_array(a)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in TERM_NAMES.iter().zip(self.as_array()) {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!(
                    "weight {name} = {w} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

/// Raw and weighted loss terms at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub level: usize,
    pub iter: usize,
    pub raw: [f64; 8],
    pub weighted: [f64; 8],
    pub total: f64,
    pub wall_seconds: f64,
}

impl LossReport {
    fn new(raw: [f64; 8], weights: &LossWeights) -> Self {
        let w = weights.as_array();
        let weighted: [f64; 8] = std::array::from_fn(|k| if w[k] == 0.0 { 0.0 } else { w[k] * raw[k] });
        Self {
            level: 0,
            iter: 0,
            raw,
            weighted,
            total: weighted.iter().sum(),
            wall_seconds: 0.0,
        }
    }
}

/// Ranges of the bounded parameters in nondimensional units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamBounds {
    pub d_gm: (f64, f64),
    pub r: (f64, f64),
    pub rho: (f64, f64),
    pub gamma: (f64, f64),
    pub theta_up: (f64, f64),
    pub theta_down: (f64, f64),
}

impl Default for ParamBounds {
    fn default() -> Self {
        Self::from_ranges(&SamplingRanges::default(), &Units::default())
    }
}

impl ParamBounds {
    /// Nondimensional bounds implied by physical sampling ranges.
    pub fn from_ranges(rg: &SamplingRanges, u: &Units) -> Self {
        Self {
            d_gm: (u.diffusivity(rg.d_w.0) / rg.r.1, u.diffusivity(rg.d_w.1) / rg.r.0),
            r: rg.r,
            rho: (u.rate(rg.rho.0), u.rate(rg.rho.1)),
            gamma: rg.gamma,
            theta_up: rg.theta_up,
            theta_down: rg.theta_down,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("d_gm", self.d_gm),
            ("r", self.r),
            ("rho", self.rho),
            ("gamma", self.gamma),
            ("theta_up", self.theta_up),
            ("theta_down", self.theta_down),
        ];
        for (name, (lo, hi)) in all {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("bound {name} = ({lo}, {hi}) is not ordered")));
            }
        }
        if self.d_gm.0 < 0.0 || self.r.0 < 0.0 || self.gamma.0 < 0.0 {
            return Err(Error::Config("physical bounds must be nonnegative".into()));
        }
        if self.theta_down.1 >= self.theta_up.0 {
            return Err(Error::ThresholdOrder(
                "theta_down bounds must lie below theta_up bounds".into(),
            ));
        }
        Ok(())
    }

    fn dynamics(&self) -> [(f64, f64); 4] {
        [self.d_gm, self.r, self.rho, self.gamma]
    }

    fn imaging(&self) -> [(f64, f64); 2] {
        [self.theta_up, self.theta_down]
    }
}

fn bounded(z: f64, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * crate::ad::logistic(z)
}

/// Offsets of the learnable groups inside the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub ndim: usize,
    pub nt: usize,
    pub num_cells: usize,
    pub num_nodes: usize,
    pub interior: Vec<usize>,
    /// Reference node coordinates, one slice.
    pub reference: Vec<f64>,
}

impl Layout {
    pub fn new(spec: &GridSpec) -> Self {
        let topo = crate::domain::Topology::new(spec);
        Self {
            ndim: spec.ndim(),
            nt: spec.nt(),
            num_cells: spec.num_cells(),
            num_nodes: spec.num_nodes(),
            interior: topo.interior_nodes.clone(),
            reference: spec.node_lattice().points(),
        }
    }

    pub fn tumor(&self) -> std::ops::Range<usize> {
        0..(self.nt + 1) * self.num_cells
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        let s = self.tumor().end;
        s..s + (self.nt + 1) * self.interior.len() * self.ndim
    }

    pub fn dynamics(&self) -> std::ops::Range<usize> {
        let s = self.positions().end;
        s..s + 4
    }

    pub fn x0(&self) -> std::ops::Range<usize> {
        let s = self.dynamics().end;
        s..s + self.ndim
    }

    pub fn imaging(&self) -> std::ops::Range<usize> {
        let s = self.x0().end;
        s..s + 2
    }

    pub fn len(&self) -> usize {
        self.imaging().end
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Full node positions `[nt + 1][num_nodes][ndim]` with pinned boundary.
    pub fn expand_positions<T: Copy>(&self, learn: &[T], mut pinned: impl FnMut(f64) -> T) -> Vec<T> {
        let per = self.num_nodes * self.ndim;
        let ni = self.interior.len() * self.ndim;
        let mut out = Vec::with_capacity((self.nt + 1) * per);
        for n in 0..=self.nt {
            let base = out.len();
            out.extend(self.reference.iter().map(|&x| pinned(x)));
            for (q, &k) in self.interior.iter().enumerate() {
                for a in 0..self.ndim {
                    out[base + k * self.ndim + a] = learn[n * ni + q * self.ndim + a];
                }
            }
        }
        out
    }
}

/// Learnable vector, Adam moments and bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub spec: GridSpec,
    pub params: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub seed: u64,
}

impl OptimState {
    pub fn layout(&self) -> Layout {
        Layout::new(&self.spec)
    }

    pub fn tumor(&self) -> TumorField {
        let l = self.layout();
        TumorField {
            num_cells: l.num_cells,
            values: self.params[l.tumor()].iter().map(|&z| crate::ad::logistic(z)).collect(),
        }
    }

    /// Node positions of every slice.
    pub fn positions(&self) -> Vec<f64> {
        let l = self.layout();
        l.expand_positions(&self.params[l.positions()], |x| x)
    }

    pub fn dynamics(&self, b: &ParamBounds) -> DynamicsParams {
        let z = &self.params[self.layout().dynamics()];
        let bd = b.dynamics();
        DynamicsParams {
            d_gm: bounded(z[0], bd[0]),
            r: bounded(z[1], bd[1]),
            rho: bounded(z[2], bd[2]),
            gamma: bounded(z[3], bd[3]),
        }
    }

    pub fn x0(&self) -> Vec<f64> {
        self.params[self.layout().x0()]
            .iter()
            .map(|&z| crate::ad::logistic(z))
            .collect()
    }

    pub fn imaging(&self, b: &ParamBounds) -> ImagingParams {
        let z = &self.params[self.layout().imaging()];
        ImagingParams {
            theta_up: bounded(z[0], b.theta_up),
            theta_down: bounded(z[1], b.theta_down),
        }
    }

    /// Density of slice `n` projected onto the cell lattice.
    pub fn grid_density(&self, n: usize) -> Result<Vec<f64>> {
        let l = self.layout();
        let topo = crate::domain::Topology::new(&self.spec);
        let per = l.num_nodes * l.ndim;
        let pos = self.positions();
        let tumor = self.tumor();
        project_cells(&topo, &pos[n * per..(n + 1) * per], tumor.slice(n))
    }

    /// Smallest deformed cell volume over all slices.
    pub fn min_volume(&self) -> f64 {
        let l = self.layout();
        let topo = crate::domain::Topology::new(&self.spec);
        min_volume(&topo, &self.positions(), l.num_nodes * l.ndim)
    }
}

fn min_volume(topo: &crate::domain::Topology, pos: &[f64], per: usize) -> f64 {
    pos.chunks_exact(per)
        .map(|s| {
            geometry_kernel(&mut Plain, topo, s)
                .volumes
                .into_iter()
                .fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Everything about one case and grid level that stays fixed while fitting.
#[derive(Debug, Clone)]
pub struct Problem {
    pub case: PatientCase,
    pub setup: PhysicsSetup,
    pub bounds: ParamBounds,
    pub symmetry_axis: usize,
    layout: Layout,
    visible: Vec<bool>,
    cell_points: Vec<f64>,
    tissue_components: [Vec<f64>; 3],
    n_core: f64,
    n_edema: f64,
    n_outside: f64,
}

impl Problem {
    /// Particles carry the observed tissue sampled at the reference nodes.
    pub fn new(
        case: &PatientCase,
        materials: &MaterialTable,
        bounds: &ParamBounds,
        symmetry_axis: usize,
    ) -> Result<Self> {
        case.validate()?;
        bounds.validate()?;
        let spec = &case.spec;
        if symmetry_axis >= spec.ndim() {
            return Err(Error::Config(format!("symmetry axis {symmetry_axis} out of range")));
        }
        check_symmetry_shape(spec.shape(), symmetry_axis)?;
        let tissue = TissueField::from_cells(spec, &case.tissue_obs)?;
        let setup = PhysicsSetup::new(spec, &tissue, materials, REFERENCE_MODULUS, DIFFUSIVE_THRESHOLD)?;
        let count = |m: &[bool]| m.iter().filter(|&&x| x).count() as f64;
        let n_core = count(&case.core_mask);
        Ok(Self {
            layout: Layout::new(spec),
            visible: case.visible_region(),
            cell_points: spec.cell_lattice().points(),
            tissue_components: std::array::from_fn(|k| tissue.component(k)),
            n_core,
            n_edema: count(&case.edema_mask),
            n_outside: spec.num_cells() as f64 - n_core,
            case: case.clone(),
            setup,
            bounds: *bounds,
            symmetry_axis,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.case.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// The eight raw loss terms as functions of the learnable vector.
    pub fn terms<O: Ops>(&self, o: &mut O, x: &[O::V]) -> [O::V; 8] {
        let l = &self.layout;
        let spec = self.spec();
        let topo = &self.setup.topo;
        let ncell = l.num_cells;
        let nt = l.nt;
        let per = l.num_nodes * l.ndim;
        let c: Vec<O::V> = x[l.tumor()].iter().map(|&z| o.logistic(z, 1.0)).collect();
        let pos = l.expand_positions(&x[l.positions()], |v| o.constant(v));
        let bd = self.bounds.dynamics();
        let dz = &x[l.dynamics()];
        let dynp: Vec<O::V> = (0..4).map(|k| o.bounded(dz[k], bd[k].0, bd[k].1)).collect();
        let x0: Vec<O::V> = x[l.x0()].iter().map(|&z| o.bounded(z, 0.0, 1.0)).collect();
        let bi = self.bounds.imaging();
        let iz = &x[l.imaging()];
        let (theta_up, theta_down) = (o.bounded(iz[0], bi[0].0, bi[0].1), o.bounded(iz[1], bi[1].0, bi[1].1));

        let geoms = all_geometries(o, topo, &pos);
        let vref = spec.cell_volume();
        let (g_sq, _) = growth_kernel(o, &self.setup, &geoms, &c, dynp[0], dynp[1], dynp[2]);
        let growth = o.scale(g_sq, 1.0 / (nt as f64 * ncell as f64 * vref * vref));

        let el = elasticity_kernel(o, &self.setup, &pos, &c, dynp[3]);
        let count = ((nt + 1) * l.interior.len() * l.ndim).max(1) as f64;
        let elasticity = o.lin(&[(el.residual_sq, 1.0 / count), (el.barrier, 1.0)], 0.0);

        let cells = spec.cell_lattice();
        let project = |o: &mut O, field: &[O::V], at: &[O::V]| {
            let vals: Vec<f64> = at.iter().map(|&v| o.value(v)).collect();
            P2gPlan::new(&cells, &vals).apply(o, field, at).0
        };
        let c0_grid = project(o, &c[..ncell], &geoms[0].centroids);
        let g = gaussian_kernel(o, &c0_grid, &self.cell_points, &x0);
        let seed = o.scale(g, 1.0 / ncell as f64);

        let p0 = &pos[..per];
        let mut sym_terms = Vec::with_capacity(9);
        for k in 0..3 {
            let field: Vec<O::V> = self.tissue_components[k].iter().map(|&v| o.constant(v)).collect();
            let grid = project(o, &field, p0);
            for &f in &SYMMETRY_SCALES {
                sym_terms.push(symmetry_term(o, &grid, spec.shape(), f, self.symmetry_axis));
            }
        }
        let symmetry = o.sum(&sym_terms);

        let cn_grid = project(o, &c[nt * ncell..], &geoms[nt].centroids);
        let core_raw = core_kernel(o, &cn_grid, &self.case.core_mask, theta_up);
        let core = o.scale(core_raw, 1.0 / self.n_core.max(1.0));
        let edema_raw = edema_kernel(o, &cn_grid, &self.case.edema_mask, theta_down, theta_up);
        let edema = o.scale(edema_raw, 1.0 / self.n_edema.max(1.0));
        let pet = pet_kernel(o, &cn_grid, &self.case.pet_map, &self.visible);

        let pn = &pos[nt * per..];
        let grids: [Vec<O::V>; 3] = std::array::from_fn(|k| {
            let field: Vec<O::V> = self.tissue_components[k].iter().map(|&v| o.constant(v)).collect();
            project(o, &field, pn)
        });
        let t = tissue_kernel(o, &grids, &self.case.tissue_obs, &self.case.core_mask);
        let tissue = o.scale(t, 1.0 / self.n_outside.max(1.0));

        [growth, elasticity, seed, symmetry, core, edema, pet, tissue]
    }

    fn check_state(&self, state: &OptimState) -> Result<()> {
        if state.spec != *self.spec() || state.params.len() != self.layout.len() {
            return Err(Error::ShapeMismatch("state does not match the problem grid".into()));
        }
        Ok(())
    }
}

/// Loss terms and total at `state`.
pub fn total_loss(state: &OptimState, problem: &Problem, weights: &LossWeights) -> Result<LossReport> {
    problem.check_state(state)?;
    let raw = problem.terms(&mut Plain, &state.params);
    Ok(LossReport::new(raw, weights))
}

/// Reusable tape for repeated gradient evaluations.
#[derive(Debug, Default)]
pub struct Evaluator {
    tape: Tape,
}

impl Evaluator {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&mut self, params: &[f64], problem: &Problem) -> [Var; 8] {
        self.tape.clear();
        let leaves: Vec<Var> = params.iter().map(|&p| self.tape.leaf(p)).collect();
        problem.terms(&mut self.tape, &leaves)
    }

    /// Loss report and exact gradient of the weighted total.
    pub fn gradient(
        &mut self,
        state: &OptimState,
        problem: &Problem,
        weights: &LossWeights,
    ) -> Result<(LossReport, Vec<f64>)> {
        problem.check_state(state)?;
        let n = state.params.len();
        let vars = self.record(&state.params, problem);
        let raw = vars.map(|v| self.tape.value(v));
        let w = weights.as_array();
        let active: Vec<(Var, f64)> = (0..8).filter(|&k| w[k] != 0.0).map(|k| (vars[k], w[k])).collect();
        let total = self.tape.lin(&active, 0.0);
        let grad = self.tape.gradient(total, n);
        if grad.iter().any(|g| !g.is_finite()) {
            for k in (0..8).filter(|&k| w[k] != 0.0) {
                if self.tape.gradient(vars[k], n).iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFiniteGradient { term: TERM_NAMES[k] });
                }
            }
            return Err(Error::NonFiniteGradient { term: "total" });
        }
        Ok((LossReport::new(raw, weights), grad))
    }

    /// Exact gradient of one raw term.
    pub fn term_gradient(&mut self, state: &OptimState, problem: &Problem, term: usize) -> Result<(f64, Vec<f64>)> {
        problem.check_state(state)?;
        let vars = self.record(&state.params, problem);
        let g = self.tape.gradient(vars[term], state.params.len());
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { term: TERM_NAMES[term] });
        }
        Ok((self.tape.value(vars[term]), g))
    }

    pub fn tape_size(&self) -> (usize, usize) {
        (self.tape.len(), self.tape.num_edges())
    }
}

/// Exact gradient of the weighted total with respect to every learnable.
pub fn gradient(state: &OptimState, problem: &Problem, weights: &LossWeights) -> Result<Vec<f64>> {
    Ok(Evaluator::new().gradient(state, problem, weights)?.1)
}

/// Gradient on the full node layout `[nt + 1][num_nodes][ndim]`; pinned
/// boundary entries are zero.
pub fn position_gradient(layout: &Layout, grad: &[f64]) -> Vec<f64> {
    let mut full = layout.expand_positions(&grad[layout.positions()], |_| 0.0);
    for n in 0..=layout.nt {
        let per = layout.num_nodes * layout.ndim;
        let mut interior = vec![false; layout.num_nodes];
        layout.interior.iter().for_each(|&k| interior[k] = true);
        for k in (0..layout.num_nodes).filter(|&k| !interior[k]) {
            for a in 0..layout.ndim {
                full[n * per + k * layout.ndim + a] = 0.0;
            }
        }
    }
    full
}

/// Adam with per-coordinate learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One update of `x` in place; `step` is incremented first.
    pub fn step(
        &self,
        x: &mut [f64],
        g: &[f64],
        m: &mut [f64],
        v: &mut [f64],
        step: &mut u64,
        lr: impl Fn(usize) -> f64,
    ) {
        *step += 1;
        let t = *step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..x.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            x[i] -= lr(i) * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Optimizer controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    /// Learning rate of density, parameter and seed latents.
    pub lr: f64,
    /// Learning rate of particle positions relative to `lr`, per unit of
    /// cell spacing.
    pub position_lr_scale: f64,
    /// Iterations per level.
    pub iters: usize,
    pub seed: u64,
    pub levels: usize,
    /// A report is recorded every this many iterations.
    pub report_every: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lr: 0.05,
            position_lr_scale: 0.02,
            iters: 200,
            seed: 0,
            levels: 2,
            report_every: 10,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        if !(self.lr.is_finite()
            && self.lr > 0.0
            && self.position_lr_scale.is_finite()
            && self.position_lr_scale >= 0.0)
        {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.report_every == 0 {
            return Err(Error::Config("report_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything a fit needs besides the case.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub weights: LossWeights,
    pub bounds: ParamBounds,
    pub materials: MaterialTable,
    pub symmetry_axis: usize,
    pub options: FitOptions,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            bounds: ParamBounds::default(),
            materials: MaterialTable::default(),
            symmetry_axis: 0,
            options: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: OptimState,
    pub history: Vec<LossReport>,
}

/// Initial guess: a small density background with a bump at the core
/// centroid, uniform mesh, parameters at the middle of their bounds.
pub fn init_state(case: &PatientCase, seed: u64) -> Result<OptimState> {
    let centroid = case.core_centroid().ok_or(Error::EmptyCore)?;
    Ok(init_at(&case.spec, Some(&centroid), seed))
}

/// Like [`init_state`] but falls back to the domain center without a bump
/// when the core is empty.
pub fn init_state_lenient(case: &PatientCase, seed: u64) -> OptimState {
    init_at(&case.spec, case.core_centroid().as_deref(), seed)
}

fn init_at(spec: &GridSpec, centroid: Option<&[f64]>, seed: u64) -> OptimState {
    let l = Layout::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; l.len()];
    let pts = spec.cell_lattice().points();
    let base: Vec<f64> = pts
        .chunks_exact(l.ndim)
        .map(|p| {
            let bump = centroid.map_or(0.0, |x0| {
                let r2: f64 = p.iter().zip(x0).map(|(a, b)| (a - b).powi(2)).sum();
                INIT_BUMP * (-r2 / SEED_WIDTH).exp()
            });
            logit(INIT_BACKGROUND + bump)
        })
        .collect();
    for (i, z) in params[l.tumor()].iter_mut().enumerate() {
        *z = base[i % l.num_cells] + rng.gen_range(-INIT_JITTER..=INIT_JITTER);
    }
    let ni = l.interior.len() * l.ndim;
    let pr = l.positions();
    for n in 0..=l.nt {
        for (q, &k) in l.interior.iter().enumerate() {
            for a in 0..l.ndim {
                params[pr.start + n * ni + q * l.ndim + a] = l.reference[k * l.ndim + a];
            }
        }
    }
    let center = vec![0.5; l.ndim];
    let x0 = centroid.unwrap_or(&center);
    for (z, &x) in params[l.x0()].iter_mut().zip(x0) {
        *z = logit(x);
    }
    OptimState {
        spec: spec.clone(),
        m: vec![0.0; params.len()],
        v: vec![0.0; params.len()],
        params,
        step: 0,
        seed,
    }
}

/// Random admissible state for gradient checks: densities inside (0, 1),
/// interior nodes jittered by up to `0.2` cell spacings.
pub fn random_state(spec: &GridSpec, seed: u64) -> OptimState {
    let mut s = init_at(spec, None, seed);
    let l = s.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let hmin = spec.spacings().into_iter().fold(f64::INFINITY, f64::min);
    for z in &mut s.params[l.tumor()] {
        *z = rng.gen_range(-2.0..2.0);
    }
    for p in &mut s.params[l.positions()] {
        *p += rng.gen_range(-0.2..0.2) * hmin;
    }
    for r in [l.dynamics(), l.x0(), l.imaging()] {
        for z in &mut s.params[r] {
            *z = rng.gen_range(-1.5..1.5);
        }
    }
    s
}

/// Average-pool observations by `factor`; masks keep cells at least half
/// covered.
pub fn pool_case(case: &PatientCase, factor: usize) -> Result<PatientCase> {
    if factor == 1 {
        return Ok(case.clone());
    }
    let spec = case.spec.coarsened(factor)?;
    let fine = case.spec.cell_lattice();
    let coarse = spec.cell_lattice();
    let nc = spec.num_cells();
    let mut tissue = vec![[0.0; 3]; nc];
    let mut core = vec![0.0; nc];
    let mut edema = vec![0.0; nc];
    let mut pet = vec![0.0; nc];
    let w = 1.0 / factor.pow(spec.ndim() as u32) as f64;
    for i in 0..fine.len() {
        let idx: Vec<usize> = fine.unflat(i).into_iter().map(|j| j / factor).collect();
        let c = coarse.flat(&idx);
        for k in 0..3 {
            tissue[c][k] += w * case.tissue_obs[i][k];
        }
        core[c] += w * f64::from(u8::from(case.core_mask[i]));
        edema[c] += w * f64::from(u8::from(case.edema_mask[i]));
        pet[c] += w * case.pet_map[i];
    }
    let core_mask: Vec<bool> = core.iter().map(|&f| f >= 0.5).collect();
    let edema_mask = edema.iter().zip(&core_mask).map(|(&f, &c)| f >= 0.5 && !c).collect();
    Ok(PatientCase {
        spec,
        tissue_obs: tissue,
        core_mask,
        edema_mask,
        pet_map: pet,
        provenance: format!("{} (pooled by {factor})", case.provenance),
    })
}

/// Multilinear interpolation of a field on `from` at `points`; points
/// outside the lattice hull take the clamped value.
fn interpolate(from: &crate::domain::Lattice, field: &[f64], points: &[f64]) -> Vec<f64> {
    points
        .chunks_exact(from.ndim())
        .map(|x| {
            let st = stencil(from, x);
            (0..st.corners).map(|k| st.weights[k] * field[st.nodes[k]]).sum()
        })
        .collect()
}

/// Cell field on `coarse` interpolated to the cell centers of `fine`.
pub fn prolong_cells(coarse: &GridSpec, fine: &GridSpec, field: &[f64]) -> Vec<f64> {
    interpolate(&coarse.cell_lattice(), field, &fine.cell_lattice().points())
}

/// Node displacement on `coarse` interpolated to the nodes of `fine`.
pub fn prolong_nodes(coarse: &GridSpec, fine: &GridSpec, disp: &[f64]) -> Vec<f64> {
    let ndim = coarse.ndim();
    let pts = fine.node_lattice().points();
    let lat = coarse.node_lattice();
    let mut out = vec![0.0; pts.len()];
    for a in 0..ndim {
        let comp: Vec<f64> = disp.iter().skip(a).step_by(ndim).copied().collect();
        for (k, v) in interpolate(&lat, &comp, &pts).into_iter().enumerate() {
            out[k * ndim + a] = v;
        }
    }
    out
}

/// Carry a state to a finer grid with the same number of slices.
pub fn prolong_state(state: &OptimState, fine: &GridSpec) -> Result<OptimState> {
    let cs = &state.spec;
    if fine.nt() != cs.nt() || fine.ndim() != cs.ndim() {
        return Err(Error::ShapeMismatch("levels must share ndim and nt".into()));
    }
    let lc = state.layout();
    let lf = Layout::new(fine);
    let mut params = vec![0.0; lf.len()];
    for n in 0..=lc.nt {
        let src = &state.params[n * lc.num_cells..(n + 1) * lc.num_cells];
        let dst = prolong_cells(cs, fine, src);
        params[n * lf.num_cells..(n + 1) * lf.num_cells].copy_from_slice(&dst);
    }
    let pos = state.positions();
    let per_c = lc.num_nodes * lc.ndim;
    let ni = lf.interior.len() * lf.ndim;
    let pr = lf.positions();
    for n in 0..=lc.nt {
        let disp: Vec<f64> = pos[n * per_c..(n + 1) * per_c]
            .iter()
            .zip(&lc.reference)
            .map(|(p, r)| p - r)
            .collect();
        let fd = prolong_nodes(cs, fine, &disp);
        for (q, &k) in lf.interior.iter().enumerate() {
            for a in 0..lf.ndim {
                params[pr.start + n * ni + q * lf.ndim + a] = lf.reference[k * lf.ndim + a] + fd[k * lf.ndim + a];
            }
        }
    }
    for (rc, rf) in [
        (lc.dynamics(), lf.dynamics()),
        (lc.x0(), lf.x0()),
        (lc.imaging(), lf.imaging()),
    ] {
        params[rf].copy_from_slice(&state.params[rc]);
    }
    Ok(OptimState {
        spec: fine.clone(),
        m: vec![0.0; params.len()],
        v: vec![0.0; params.len()],
        params,
        step: 0,
        seed: state.seed,
    })
}

/// Grid sizes of every level, coarsest first.
pub fn level_specs(spec: &GridSpec, levels: usize) -> Result<Vec<GridSpec>> {
    if levels == 0 {
        return Err(Error::Config("levels must be at least 1".into()));
    }
    let coarsest = 1usize << (levels - 1);
    let specs = (0..levels)
        .map(|l| spec.coarsened(coarsest >> l))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Config(format!("grid cannot be coarsened {levels} times: {e}")))?;
    if specs[0].shape().iter().any(|s| s % 4 != 0) {
        return Err(Error::Config(format!(
            "coarsest grid {:?} must be divisible by 4",
            specs[0].shape()
        )));
    }
    Ok(specs)
}

/// Per-coordinate learning rates of a layout.
fn learning_rates(l: &Layout, spec: &GridSpec, opts: &FitOptions) -> impl Fn(usize) -> f64 {
    let pos = l.positions();
    let hmin = spec.spacings().into_iter().fold(f64::INFINITY, f64::min);
    let lr = opts.lr;
    let lr_pos = opts.lr * opts.position_lr_scale * hmin;
    move |i| if pos.contains(&i) { lr_pos } else { lr }
}

/// Adam on one problem, starting from `state`.
pub fn run_level(
    state: &mut OptimState,
    problem: &Problem,
    weights: &LossWeights,
    opts: &FitOptions,
    level: usize,
    history: &mut Vec<LossReport>,
    progress: &mut dyn FnMut(&LossReport),
) -> Result<()> {
    let start = Instant::now();
    let l = problem.layout().clone();
    let topo = &problem.setup.topo;
    let per = l.num_nodes * l.ndim;
    let base_lr = learning_rates(&l, problem.spec(), opts);
    let adam = Adam::default();
    let mut eval = Evaluator::new();
    let mut bad = 0usize;
    let mut scale = 1.0;
    let mut last_good = state.params.clone();
    for it in 0..opts.iters {
        let (mut report, grad) = match eval.gradient(state, problem, weights) {
            Ok(x) if x.0.total.is_finite() => x,
            Ok(_) | Err(Error::NonFiniteGradient { .. }) if bad + 1 < DIVERGENCE_PATIENCE => {
                bad += 1;
                scale *= 0.5;
                state.params.clone_from(&last_good);
                continue;
            }
            Ok(_) => return Err(Error::Diverged { iter: it }),
            Err(e) => return Err(e),
        };
        bad = 0;
        last_good.clone_from(&state.params);
        if it % opts.report_every == 0 {
            report.level = level;
            report.iter = it;
            report.wall_seconds = start.elapsed().as_secs_f64();
            progress(&report);
            history.push(report);
        }
        let old = state.params.clone();
        adam.step(
            &mut state.params,
            &grad,
            &mut state.m,
            &mut state.v,
            &mut state.step,
            |i| scale * base_lr(i),
        );
        let vmin = min_volume(topo, &l.expand_positions(&state.params[l.positions()], |x| x), per);
        if !(vmin >= MIN_STEP_VOLUME) {
            for (p, o) in state.params.iter_mut().zip(&old) {
                *p = o + 0.5 * (*p - o);
            }
        }
    }
    let mut report = total_loss(state, problem, weights)?;
    report.level = level;
    report.iter = opts.iters;
    report.wall_seconds = start.elapsed().as_secs_f64();
    progress(&report);
    history.push(report);
    Ok(())
}

/// Coarse-to-fine fit of one case.
pub fn fit(case: &PatientCase, settings: &FitSettings) -> Result<FitResult> {
    fit_with_progress(case, settings, &mut |_| {})
}

/// [`fit`] calling `progress` with every recorded report.
pub fn fit_with_progress(
    case: &PatientCase,
    settings: &FitSettings,
    progress: &mut dyn FnMut(&LossReport),
) -> Result<FitResult> {
    let opts = &settings.options;
    opts.validate()?;
    settings.weights.validate()?;
    case.validate()?;
    let centroid = case.core_centroid().ok_or(Error::EmptyCore)?;
    let mut history = Vec::new();
    if opts.iters == 0 {
        let problem = Problem::new(case, &settings.materials, &settings.bounds, settings.symmetry_axis)?;
        let state = init_state(case, opts.seed)?;
        history.push(total_loss(&state, &problem, &settings.weights)?);
        return Ok(FitResult { state, history });
    }
    let specs = level_specs(&case.spec, opts.levels)?;
    let mut state = init_at(&specs[0], Some(&centroid), opts.seed);
    for (lvl, spec) in specs.iter().enumerate() {
        if lvl > 0 {
            state = prolong_state(&state, spec)?;
        }
        let factor = case.spec.shape()[0] / spec.shape()[0];
        let obs = pool_case(case, factor)?;
        let problem = Problem::new(&obs, &settings.materials, &settings.bounds, settings.symmetry_axis)?;
        run_level(
            &mut state,
            &problem,
            &settings.weights,
            opts,
            lvl,
            &mut history,
            progress,
        )?;
    }
    Ok(FitResult { state, history })
}

/// Result of comparing reverse-mode and central-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub term: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative errors use `max(|a|, |b|, GRAD_CHECK_FLOOR)` as denominator.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Central differences with step `h` on every learnable (or every
/// `stride`-th one) of one term (`Some(k)`) or the weighted total.
pub fn grad_check(
    state: &OptimState,
    problem: &Problem,
    weights: &LossWeights,
    term: Option<usize>,
    h: f64,
    stride: usize,
) -> Result<GradCheck> {
    let mut eval = Evaluator::new();
    let name = term.map_or("total", |k| TERM_NAMES[k]);
    let ad = match term {
        Some(k) => eval.term_gradient(state, problem, k)?.1,
        None => eval.gradient(state, problem, weights)?.1,
    };
    let value = |p: &[f64]| {
        let raw = problem.terms(&mut Plain, p);
        match term {
            Some(k) => raw[k],
            None => LossReport::new(raw, weights).total,
        }
    };
    let mut p = state.params.clone();
    let mut worst = (0.0, 0usize);
    let mut checked = 0;
    for i in (0..p.len()).step_by(stride.max(1)) {
        let x = p[i];
        p[i] = x + h;
        let fp = value(&p);
        p[i] = x - h;
        let fm = value(&p);
        p[i] = x;
        let fd = (fp - fm) / (2.0 * h);
        let rel = (fd - ad[i]).abs() / fd.abs().max(ad[i].abs()).max(GRAD_CHECK_FLOOR);
        if !rel.is_finite() {
            return Err(Error::NonFiniteGradient { term: name });
        }
        if rel > worst.0 {
            worst = (rel, i);
        }
        checked += 1;
    }
    Ok(GradCheck {
        term: name.to_string(),
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::phantom_tissue;

    fn small_case(shape: &[usize], nt: usize) -> PatientCase {
        let spec = GridSpec::new(shape, nt).unwrap();
        let tissue = phantom_tissue(&spec);
        let pts = spec.cell_lattice().points();
        let c: Vec<f64> = pts
            .chunks_exact(spec.ndim())
            .map(|p| 0.9 * (-((p[0] - 0.4).powi(2) + (p[1] - 0.45).powi(2)) / 0.02).exp())
            .collect();
        let theta = ImagingParams {
            theta_up: 0.5,
            theta_down: 0.25,
        };
        crate::imaging::render_observations(&spec, &c, &tissue, &theta, 0.8, None).unwrap()
    }

    fn problem(case: &PatientCase) -> Problem {
        Problem::new(case, &MaterialTable::default(), &ParamBounds::default(), 0).unwrap()
    }

    #[test]
    fn theta_up_starts_mid_range() {
        let case = small_case(&[8, 8], 2);
        let s = init_state(&case, 3).unwrap();
        let b = ParamBounds::default();
        assert!((s.imaging(&b).theta_up - 0.525).abs() < 1e-15);
        assert!((s.dynamics(&b).gamma - 0.75).abs() < 1e-15);
        assert_eq!(s, init_state(&case, 3).unwrap());
        assert_eq!(
            s.positions(),
            crate::domain::make_uniform_mesh(&case.spec).into_positions()
        );
    }

    #[test]
    fn empty_core_defaults_to_center() {
        let mut case = small_case(&[8, 8], 2);
        case.core_mask.iter_mut().for_each(|m| *m = false);
        assert!(matches!(init_state(&case, 0), Err(Error::EmptyCore)));
        let s = init_state_lenient(&case, 0);
        assert!(s.x0().iter().all(|&x| (x - 0.5).abs() < 1e-12));
    }

    #[test]
    fn zero_weights_give_zero_total() {
        let case = small_case(&[8, 8], 2);
        let p = problem(&case);
        let s = init_state(&case, 0).unwrap();
        let r = total_loss(&s, &p, &LossWeights::from_array([0.0; 8])).unwrap();
        assert_eq!(r.total, 0.0);
        let ones = total_loss(&s, &p, &LossWeights::from_array([1.0; 8])).unwrap();
        let sum: f64 = ones.raw.iter().sum();
        assert!((ones.total - sum).abs() <= 1e-10 * sum.abs());
    }

    #[test]
    fn adam_ignores_zero_gradient_and_solves_quadratic() {
        let adam = Adam::default();
        let mut x = vec![1.0, -2.0];
        let (mut m, mut v, mut t) = (vec![0.0; 2], vec![0.0; 2], 0);
        adam.step(&mut x, &[0.0, 0.0], &mut m, &mut v, &mut t, |_| 0.1);
        assert_eq!(x, vec![1.0, -2.0]);
        let target = [3.0, -0.5];
        let mut x = vec![0.0, 0.0];
        let (mut m, mut v, mut t) = (vec![0.0; 2], vec![0.0; 2], 0);
        for k in 0..2000 {
            let g: Vec<f64> = x.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            let lr = 0.1 * 0.997f64.powi(k);
            adam.step(&mut x, &g, &mut m, &mut v, &mut t, |_| lr);
        }
        for (a, b) in x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn tape_sanity() {
        let mut t = Tape::new();
        let x = t.leaf(3.0);
        let y = t.square(x);
        assert_eq!(t.gradient(y, 1), vec![6.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let case = small_case(&[8, 8], 2);
        let p = problem(&case);
        let s = random_state(&case.spec, 7);
        for k in 0..8 {
            let r = grad_check(&s, &p, &LossWeights::default(), Some(k), 1e-5, 3).unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn pinned_nodes_have_zero_gradient() {
        let case = small_case(&[8, 8], 2);
        let p = problem(&case);
        let s = random_state(&case.spec, 1);
        let g = gradient(&s, &p, &LossWeights::default()).unwrap();
        let full = position_gradient(p.layout(), &g);
        let topo = &p.setup.topo;
        for n in 0..=2 {
            for k in (0..topo.nodes.len()).filter(|&k| topo.boundary[k]) {
                assert_eq!(full[(n * topo.nodes.len() + k) * 2], 0.0);
                assert_eq!(full[(n * topo.nodes.len() + k) * 2 + 1], 0.0);
            }
        }
    }

    #[test]
    fn prolongation_preserves_constant_and_affine() {
        let c = GridSpec::new(&[8, 8], 1).unwrap();
        let f = GridSpec::new(&[16, 16], 1).unwrap();
        let out = prolong_cells(&c, &f, &[0.3; 64]);
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let aff = |p: &[f64]| 0.2 + 0.7 * p[0] - 0.4 * p[1];
        let coarse: Vec<f64> = c.cell_lattice().points().chunks_exact(2).map(aff).collect();
        let out = prolong_cells(&c, &f, &coarse);
        let lo = c.spacing(0) / 2.0;
        for (v, p) in out.iter().zip(f.cell_lattice().points().chunks_exact(2)) {
            if p.iter().all(|&x| x >= lo && x <= 1.0 - lo) {
                assert!((v - aff(p)).abs() < 1e-12);
            }
        }
        let disp: Vec<f64> = c.node_lattice().points().iter().map(|x| 0.01 * x).collect();
        let fd = prolong_nodes(&c, &f, &disp);
        for (v, x) in fd.iter().zip(f.node_lattice().points()) {
            assert!((v - 0.01 * x).abs() < 1e-15);
        }
    }

    #[test]
    fn fit_with_zero_iterations_is_init() {
        let case = small_case(&[8, 8], 2);
        let settings = FitSettings {
            options: FitOptions {
                iters: 0,
                levels: 1,
                ..FitOptions::default()
            },
            ..FitSettings::default()
        };
        let r = fit(&case, &settings).unwrap();
        assert_eq!(r.state, init_state(&case, 0).unwrap());
    }

    #[test]
    fn short_fit_lowers_loss_and_is_reproducible() {
        let case = small_case(&[16, 16], 2);
        let settings = FitSettings {
            options: FitOptions {
                iters: 30,
                levels: 2,
                report_every: 5,
                ..FitOptions::default()
            },
            ..FitSettings::default()
        };
        let a = fit(&case, &settings).unwrap();
        let b = fit(&case, &settings).unwrap();
        assert_eq!(a.state.params, b.state.params);
        let fine: Vec<&LossReport> = a.history.iter().filter(|r| r.level == 1).collect();
        assert!(fine.last().unwrap().total < fine[0].total);
    }

    #[test]
    fn pooled_masks_use_majority() {
        let case = small_case(&[16, 16], 1);
        let pooled = pool_case(&case, 2).unwrap();
        assert_eq!(pooled.spec.shape(), &[8, 8]);
        assert!(pooled
            .core_mask
            .iter()
            .zip(&pooled.edema_mask)
            .all(|(a, b)| !(*a && *b)));
        let s: f64 = pooled.tissue_obs.iter().map(|m| m.iter().sum::<f64>()).sum();
        let t: f64 = case.tissue_obs.iter().map(|m| m.iter().sum::<f64>()).sum();
        assert!((4.0 * s - t).abs() < 1e-9);
    }
}
