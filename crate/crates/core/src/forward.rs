//! Forward simulator and synthetic cohort generator.
//!
//! The density lives on mesh cells and moves with them, so mesh motion needs
//! no resampling of `c`. Each step applies the exact logistic reaction, then
//! explicit finite-volume diffusion on the current cell geometry, then (for
//! `γ > 0`) relaxes the particle positions towards quasi-static equilibrium.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad::Plain;
use crate::domain::{
    DynamicsParams, GridSpec, ImagingParams, MaterialTable, ParticleMesh, PatientCase, TissueField, Topology,
    TumorField,
};
use crate::error::{Error, Result};
use crate::imaging::render_observations;
use crate::physics::{diffusion_operator, effective_diffusivity, Equilibrium, PhysicsSetup};
use crate::priors::gaussian_seed;
use crate::transfer::P2gPlan;

/// Relaxation step relative to `h² / (λ̄ + 2μ̄)`.
const RELAX_STEP: f64 = 0.3;
const RELAX_MOMENTUM: f64 = 0.95;

/// Controls of one forward run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimOptions {
    /// Steps per unit of growth time; rounded up to a multiple of `nt`.
    pub steps: usize,
    /// Final time; values above 1 continue past the observation time.
    pub t_end: f64,
    pub elastic_tol: f64,
    pub elastic_max_iter: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            steps: 100,
            t_end: 1.0,
            elastic_tol: 1e-6,
            elastic_max_iter: 500,
        }
    }
}

/// Simulated trajectory sampled at the `nt + 1` slices of the grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub tumor: TumorField,
    pub mesh: ParticleMesh,
    /// Cell densities and positions at `t_end`.
    pub final_c: Vec<f64>,
    pub final_positions: Vec<f64>,
    /// `false` if some elastic solve stopped at the iteration cap.
    pub elasticity_converged: bool,
    /// Largest equilibrium residual left by any elastic solve.
    pub max_elastic_residual: f64,
}

/// Exact solution of `c' = ρ c (1 - c)` over `dt`.
pub fn logistic_step(c: f64, rho: f64, dt: f64) -> f64 {
    let e = (rho * dt).exp();
    c * e / (1.0 + c * (e - 1.0))
}

/// Initial density: the seed Gaussian (summed and clipped for several foci)
/// at reference cell centers.
pub fn initial_density(spec: &GridSpec, centers: &[Vec<f64>]) -> Vec<f64> {
    let pts = spec.cell_lattice().points();
    let mut c = vec![0.0; spec.num_cells()];
    for x0 in centers {
        for (ci, g) in c.iter_mut().zip(gaussian_seed(&pts, x0)) {
            *ci += g;
        }
    }
    c.iter_mut().for_each(|v| *v = v.min(1.0));
    c
}

/// Run the forward model from `c0` (cell values at `t = 0`).
pub fn simulate(setup: &PhysicsSetup, params: &DynamicsParams, c0: &[f64], opts: &SimOptions) -> Result<Trajectory> {
    let spec = setup.spec().clone();
    let topo = &setup.topo;
    let nt = spec.nt();
    let steps = opts.steps.max(1).div_ceil(nt) * nt;
    let dtau = 1.0 / steps as f64;
    let per_slice = steps / nt;
    let total_steps = (opts.t_end * steps as f64).round() as usize;
    let d = effective_diffusivity(&setup.cell_tissue, params, setup.diffusive_threshold);
    let p0 = spec.node_lattice().points();
    let mut pos = p0.clone();
    let mut vel = vec![0.0; pos.len()];
    let mut c = c0.to_vec();
    let mut tumor = TumorField::zeros(&spec);
    let mut positions = Vec::with_capacity((nt + 1) * pos.len());
    tumor.slice_mut(0).copy_from_slice(&c);
    positions.extend_from_slice(&pos);
    let mut converged = true;
    let mut max_res: f64 = 0.0;
    for step in 1..=total_steps {
        for v in c.iter_mut() {
            *v = logistic_step(*v, params.rho, dtau);
        }
        diffuse(topo, &pos, &mut c, &d, dtau)?;
        if params.gamma > 0.0 {
            let (ok, res) = relax(setup, &p0, &mut pos, &mut vel, &c, params.gamma, opts);
            converged &= ok;
            max_res = max_res.max(res);
        }
        if step % per_slice == 0 && step / per_slice <= nt {
            tumor.slice_mut(step / per_slice).copy_from_slice(&c);
            positions.extend_from_slice(&pos);
        }
    }
    if positions.len() < (nt + 1) * pos.len() {
        return Err(Error::Config(format!(
            "t_end {} ends before the observation time",
            opts.t_end
        )));
    }
    Ok(Trajectory {
        tumor,
        mesh: ParticleMesh::new(&spec, positions)?,
        final_c: c,
        final_positions: pos,
        elasticity_converged: converged,
        max_elastic_residual: max_res,
    })
}

/// Explicit finite-volume diffusion over `dt` with stable substeps.
fn diffuse(topo: &Topology, pos: &[f64], c: &mut [f64], d: &[f64], dt: f64) -> Result<()> {
    let mesh_slice = crate::domain::geometry_kernel(&mut Plain, topo, pos);
    if let Some(cell) = mesh_slice.volumes.iter().position(|&v| v <= 0.0) {
        return Err(Error::NonPositiveVolume { cell, n: 0 });
    }
    let ndim = topo.ndim();
    let mut rate = vec![0.0; c.len()];
    for (fi, f) in topo.faces.iter().enumerate() {
        let h = crate::physics::harmonic_mean(d[f.lower], d[f.upper]);
        if h == 0.0 {
            continue;
        }
        let dist: f64 = (0..ndim)
            .map(|a| (mesh_slice.centroids[f.upper * ndim + a] - mesh_slice.centroids[f.lower * ndim + a]).powi(2))
            .sum::<f64>()
            .sqrt();
        let k = mesh_slice.interface_areas[fi] * h / dist;
        rate[f.lower] += k;
        rate[f.upper] += k;
    }
    let dt_max = rate
        .iter()
        .zip(&mesh_slice.volumes)
        .filter(|(r, _)| **r > 0.0)
        .map(|(r, v)| v / r)
        .fold(f64::INFINITY, f64::min);
    let sub = if dt_max.is_finite() {
        (dt / (0.9 * dt_max)).ceil().max(1.0) as usize
    } else {
        1
    };
    let h = dt / sub as f64;
    for _ in 0..sub {
        let dc = diffusion_operator(topo, c, d, &mesh_slice);
        for ((ci, q), v) in c.iter_mut().zip(dc).zip(&mesh_slice.volumes) {
            *ci += h * q / v;
        }
    }
    Ok(())
}

/// Damped fixed-point relaxation with heavy-ball momentum, warm-started
/// from the current positions. Returns convergence and the final residual.
fn relax(
    setup: &PhysicsSetup,
    p0: &[f64],
    pos: &mut [f64],
    vel: &mut [f64],
    c: &[f64],
    gamma: f64,
    opts: &SimOptions,
) -> (bool, f64) {
    let spec = setup.spec();
    let ndim = spec.ndim();
    let h2 = spec.spacings().iter().fold(f64::INFINITY, |a, &b| a.min(b)).powi(2);
    let mut eq = Equilibrium::new(setup, c, gamma);
    let steps: Vec<f64> = eq.stiffness.iter().map(|s| RELAX_STEP * h2 / s).collect();
    let mut r = vec![0.0; pos.len()];
    for _ in 0..opts.elastic_max_iter {
        let res = eq.residual(p0, pos, &mut r);
        if res < opts.elastic_tol {
            return (true, res);
        }
        for &k in &setup.topo.interior_nodes {
            for a in 0..ndim {
                let q = k * ndim + a;
                vel[q] = RELAX_MOMENTUM * vel[q] + steps[k] * r[q];
                pos[q] += vel[q];
            }
        }
    }
    let res = eq.residual(p0, pos, &mut r);
    (res < opts.elastic_tol, res)
}

/// Cell values of `c` at deformed `positions` projected onto the cell
/// lattice.
pub fn project_cells(topo: &Topology, positions: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    let geom = crate::domain::geometry_kernel(&mut Plain, topo, positions);
    if let Some(cell) = geom.volumes.iter().position(|&v| v <= 0.0) {
        return Err(Error::NonPositiveVolume { cell, n: 0 });
    }
    let plan = P2gPlan::new(&topo.spec.cell_lattice(), &geom.centroids);
    Ok(plan.apply(&mut Plain, c, &geom.centroids).0)
}

/// Particle tissue at `positions` projected onto the cell lattice.
pub fn project_tissue(spec: &GridSpec, tissue: &TissueField, positions: &[f64]) -> Vec<[f64; 3]> {
    let plan = P2gPlan::new(&spec.cell_lattice(), positions);
    let mut out = vec![[0.0; 3]; spec.num_cells()];
    for k in 0..3 {
        let (g, _) = plan.apply(&mut Plain, &tissue.component(k), positions);
        for (o, v) in out.iter_mut().zip(g) {
            o[k] = v;
        }
    }
    out
}

fn smoothstep(edge: f64, width: f64, x: f64) -> f64 {
    // 1 inside (x < edge - width), 0 outside (x > edge + width)
    let t = ((edge + width - x) / (2.0 * width)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Synthetic anatomy: two mirror-symmetric white-matter blobs with
/// gray-matter shells in a CSF background. Mirror axis is axis 0.
pub fn phantom_tissue(spec: &GridSpec) -> Vec<[f64; 3]> {
    const CENTER: f64 = 0.3;
    const WM_AXES: [f64; 3] = [0.17, 0.25, 0.25];
    const SHELL: f64 = 0.06;
    const EDGE: f64 = 0.02;
    let lattice = spec.cell_lattice();
    (0..lattice.len())
        .map(|k| {
            // Evaluated at the folded index so both halves match bitwise.
            let mut idx = lattice.unflat(k);
            idx[0] = idx[0].min(lattice.dims[0] - 1 - idx[0]);
            let x = lattice.point(lattice.flat(&idx));
            let mut wm: f64 = 0.0;
            let mut outer: f64 = 0.0;
            for cx in [CENTER, 1.0 - CENTER] {
                let radius = |grow: f64| {
                    x.iter()
                        .enumerate()
                        .map(|(a, &v)| {
                            let c = if a == 0 { cx } else { 0.5 };
                            ((v - c) / (WM_AXES[a] + grow)).powi(2)
                        })
                        .sum::<f64>()
                        .sqrt()
                };
                wm = wm.max(smoothstep(1.0, EDGE / WM_AXES[1], radius(0.0)));
                outer = outer.max(smoothstep(1.0, EDGE / (WM_AXES[1] + SHELL), radius(SHELL)));
            }
            let outer = outer.max(wm);
            [wm, outer - wm, 1.0 - outer]
        })
        .collect()
}

/// Conversion between physical units and the unit domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Units {
    /// Physical extent of the unit domain, in mm.
    pub mm_per_domain: f64,
    /// Days represented by one unit of growth time.
    pub days_per_unit: f64,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            mm_per_domain: 192.0,
            days_per_unit: 20.0,
        }
    }
}

impl Units {
    pub fn mm(&self, v: f64) -> f64 {
        v / self.mm_per_domain
    }

    /// Diffusivity in cm²/day to domain units.
    pub fn diffusivity(&self, d: f64) -> f64 {
        let l_cm = self.mm_per_domain / 10.0;
        d * self.days_per_unit / (l_cm * l_cm)
    }

    /// Rate in 1/day to domain units.
    pub fn rate(&self, r: f64) -> f64 {
        r * self.days_per_unit
    }
}

/// Sampling ranges of the synthetic cohort (physical units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingRanges {
    /// White-matter diffusivity, cm²/day.
    pub d_w: (f64, f64),
    /// Proliferation rate, 1/day.
    pub rho: (f64, f64),
    pub r: (f64, f64),
    pub gamma: (f64, f64),
    pub theta_necro: (f64, f64),
    pub theta_up: (f64, f64),
    pub theta_down: (f64, f64),
    /// Tumor center per axis, mm.
    pub center_mm: (f64, f64),
    /// Offset of secondary foci per axis, mm.
    pub focal_offset_mm: f64,
}

impl Default for SamplingRanges {
    fn default() -> Self {
        Self {
            d_w: (0.035, 0.2),
            rho: (0.035, 0.2),
            r: (10.0, 30.0),
            gamma: (0.0, 1.5),
            theta_necro: (0.70, 0.85),
            theta_up: (0.45, 0.60),
            theta_down: (0.15, 0.35),
            center_mm: (57.6, 96.0),
            focal_offset_mm: 9.6,
        }
    }
}

impl SamplingRanges {
    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("d_w", self.d_w),
            ("rho", self.rho),
            ("r", self.r),
            ("gamma", self.gamma),
            ("theta_necro", self.theta_necro),
            ("theta_up", self.theta_up),
            ("theta_down", self.theta_down),
            ("center_mm", self.center_mm),
        ];
        for (name, (lo, hi)) in pairs {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("range {name} = ({lo}, {hi}) is not ordered")));
            }
        }
        if self.theta_down.1 >= self.theta_up.0 || self.theta_up.1 >= self.theta_necro.0 {
            return Err(Error::ThresholdOrder(
                "theta_down < theta_up < theta_necro over the whole ranges".into(),
            ));
        }
        Ok(())
    }
}

/// Cohort controls.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortOptions {
    pub spec: GridSpec,
    pub ranges: SamplingRanges,
    pub units: Units,
    pub sim: SimOptions,
    pub focal_count: usize,
    /// Final time of the continued run that defines recurrence.
    pub recurrence_t_end: f64,
    /// Cases with fewer visible core cells are redrawn.
    pub min_core_cells: usize,
    pub materials: MaterialTable,
    pub pet_noise: bool,
}

impl CohortOptions {
    pub fn new(spec: GridSpec) -> Self {
        Self {
            spec,
            ranges: SamplingRanges::default(),
            units: Units::default(),
            sim: SimOptions::default(),
            focal_count: 1,
            recurrence_t_end: 1.25,
            min_core_cells: 4,
            materials: MaterialTable::default(),
            pet_noise: true,
        }
    }
}

/// Hidden state of a synthetic patient.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub params: DynamicsParams,
    pub centers: Vec<Vec<f64>>,
    pub imaging: ImagingParams,
    pub theta_necro: f64,
    pub tissue: TissueField,
    pub trajectory: Trajectory,
    /// Final density projected onto the cell lattice.
    pub c_final_grid: Vec<f64>,
    /// Progression region of the continued run.
    pub recurrence: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub truth: GroundTruth,
    pub case: PatientCase,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws, simulates and renders `n_cases` synthetic patients.
pub fn generate_cohort(n_cases: usize, seed: u64, opts: &CohortOptions) -> Result<Vec<SyntheticCase>> {
    opts.ranges.validate()?;
    if !(opts.focal_count == 1 || opts.focal_count == 3) {
        return Err(Error::Config(format!("focal count {} is not 1 or 3", opts.focal_count)));
    }
    let spec = &opts.spec;
    let cells = phantom_tissue(spec);
    let tissue = TissueField::from_cells(spec, &cells)?;
    let setup = PhysicsSetup::new(
        spec,
        &tissue,
        &opts.materials,
        crate::physics::REFERENCE_MODULUS,
        crate::physics::DIFFUSIVE_THRESHOLD,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_cases);
    let max_attempts = 50 * n_cases.max(1);
    let mut attempts = 0;
    while out.len() < n_cases {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Config("could not draw cases with a visible core".into()));
        }
        let case_seed: u64 = rng.gen();
        if let Some(sc) = draw_case(&setup, &tissue, case_seed, opts)? {
            out.push(sc);
        }
    }
    Ok(out)
}

fn draw_case(
    setup: &PhysicsSetup,
    tissue: &TissueField,
    seed: u64,
    opts: &CohortOptions,
) -> Result<Option<SyntheticCase>> {
    let spec = &opts.spec;
    let rg = &opts.ranges;
    let u = &opts.units;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_w = uniform(&mut rng, rg.d_w);
    let rho = uniform(&mut rng, rg.rho);
    let r = uniform(&mut rng, rg.r);
    let gamma = uniform(&mut rng, rg.gamma);
    let theta_necro = uniform(&mut rng, rg.theta_necro);
    let theta_up = uniform(&mut rng, rg.theta_up);
    let theta_down = uniform(&mut rng, rg.theta_down);
    let first: Vec<f64> = (0..spec.ndim())
        .map(|_| u.mm(uniform(&mut rng, rg.center_mm)))
        .collect();
    let mut centers = vec![first.clone()];
    for _ in 1..opts.focal_count {
        let off = u.mm(rg.focal_offset_mm);
        centers.push(first.iter().map(|&x| x + rng.gen_range(-off..=off)).collect());
    }
    let params = DynamicsParams {
        d_gm: u.diffusivity(d_w) / r,
        r,
        rho: u.rate(rho),
        gamma,
    };
    let imaging = ImagingParams { theta_up, theta_down };
    let c0 = initial_density(spec, &centers);
    let sim = SimOptions {
        t_end: opts.recurrence_t_end.max(1.0),
        ..opts.sim
    };
    let trajectory = simulate(setup, &params, &c0, &sim)?;
    let topo = &setup.topo;
    let nt = spec.nt();
    let final_positions = trajectory.mesh.slice(nt).to_vec();
    let c_final_grid = project_cells(topo, &final_positions, trajectory.tumor.slice(nt))?;
    let tissue_proj = project_tissue(spec, tissue, &final_positions);
    let noise_seed = opts.pet_noise.then(|| rng.gen());
    let case = render_observations(spec, &c_final_grid, &tissue_proj, &imaging, theta_necro, noise_seed)?;
    if case.core_mask.iter().filter(|&&m| m).count() < opts.min_core_cells {
        return Ok(None);
    }
    let later = project_cells(topo, &trajectory.final_positions, &trajectory.final_c)?;
    let recurrence: Vec<bool> = later.iter().map(|&c| c >= theta_down).collect();
    Ok(Some(SyntheticCase {
        truth: GroundTruth {
            params,
            centers,
            imaging,
            theta_necro,
            tissue: tissue.clone(),
            trajectory,
            c_final_grid,
            recurrence,
        },
        case,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{DIFFUSIVE_THRESHOLD, REFERENCE_MODULUS};

    fn uniform_setup(shape: &[usize], nt: usize) -> PhysicsSetup {
        let spec = GridSpec::new(shape, nt).unwrap();
        let tissue = TissueField::new(vec![[1.0, 0.0, 0.0]; spec.num_nodes()]).unwrap();
        PhysicsSetup::new(
            &spec,
            &tissue,
            &MaterialTable::default(),
            REFERENCE_MODULUS,
            DIFFUSIVE_THRESHOLD,
        )
        .unwrap()
    }

    #[test]
    fn frozen_dynamics_keep_density() {
        let s = uniform_setup(&[8, 8], 4);
        let c0: Vec<f64> = (0..64).map(|i| (i % 7) as f64 / 7.0).collect();
        let p = DynamicsParams {
            d_gm: 0.0,
            r: 1.0,
            rho: 0.0,
            gamma: 0.0,
        };
        let t = simulate(&s, &p, &c0, &SimOptions::default()).unwrap();
        for n in 0..=4 {
            assert_eq!(t.tumor.slice(n), &c0[..]);
        }
    }

    #[test]
    fn exact_logistic_reaction() {
        let s = uniform_setup(&[4, 4], 1);
        let p = DynamicsParams {
            d_gm: 0.0,
            r: 1.0,
            rho: std::f64::consts::LN_2,
            gamma: 0.0,
        };
        let opts = SimOptions {
            steps: 1,
            ..Default::default()
        };
        let t = simulate(&s, &p, &[0.5; 16], &opts).unwrap();
        for &v in t.tumor.slice(1) {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn diffusion_conserves_mass() {
        let s = uniform_setup(&[8, 8], 2);
        let c0: Vec<f64> = (0..64).map(|i| if i == 27 { 1.0 } else { 0.0 }).collect();
        let p = DynamicsParams {
            d_gm: 0.02,
            r: 1.0,
            rho: 0.0,
            gamma: 0.0,
        };
        let t = simulate(&s, &p, &c0, &SimOptions::default()).unwrap();
        let mass: f64 = t.tumor.slice(2).iter().sum();
        assert!((mass - 1.0).abs() < 1e-12);
        assert!(t.tumor.slice(2).iter().all(|&c| c >= 0.0));
    }

    #[test]
    fn phantom_is_mirror_symmetric() {
        let spec = GridSpec::new(&[16, 16], 1).unwrap();
        let m = phantom_tissue(&spec);
        for i in 0..16 {
            for j in 0..16 {
                let a = m[i * 16 + j];
                let b = m[(15 - i) * 16 + j];
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-12);
                }
                assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_mapping() {
        let u = Units::default();
        assert!((u.mm(57.6) - 0.3).abs() < 1e-15);
        assert!((u.mm(96.0) - 0.5).abs() < 1e-15);
        assert!((u.mm(15.0) - 0.078125).abs() < 1e-15);
    }
}
