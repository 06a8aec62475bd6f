//! Implementations of the command-line operations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::domain::{GridSpec, ImagingParams, PatientCase};
use crate::error::{Error, Result};
use crate::evaluate::{
    cohort_report, equal_volume_plan, metrics_csv, recurrence_coverage, rmse, standard_plan, CaseMetrics, CohortSummary,
};
use crate::forward::{generate_cohort, phantom_tissue, CohortOptions, SyntheticCase};
use crate::io::{load_archive, save_archive, FieldArchive, NamedArray, RunConfig, MANIFEST};
use crate::optimize::{
    fit_with_progress, grad_check, random_state, FitResult, GradCheck, LossReport, Problem, TERM_NAMES,
};
use crate::physics::DIFFUSIVE_THRESHOLD;

/// Name of the loss history file inside a fit directory.
pub const HISTORY_FILE: &str = "loss_history.csv";

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn with_axes(lead: &[usize], shape: &[usize], trail: &[usize]) -> Vec<usize> {
    lead.iter().chain(shape).chain(trail).copied().collect()
}

fn tissue_array(name: &str, shape: &[usize], t: &[[f64; 3]]) -> Result<NamedArray> {
    let flat: Vec<f64> = t.iter().flatten().copied().collect();
    NamedArray::from_f64(name, &with_axes(&[], shape, &[3]), &flat)
}

fn tissue_from(a: &NamedArray) -> Vec<[f64; 3]> {
    a.to_f64().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Archive of one synthetic case: observations plus hidden truth.
pub fn case_archive(sc: &SyntheticCase, seed: u64, cfg: &RunConfig) -> Result<FieldArchive> {
    let spec = &sc.case.spec;
    let shape = spec.shape();
    let nodes = spec.node_shape();
    let nt = spec.nt();
    let t = &sc.truth;
    let mut a = FieldArchive::new(Some(spec.clone()));
    a.push(tissue_array("tissue_obs", shape, &sc.case.tissue_obs)?)
        .push(NamedArray::from_mask("core_mask", shape, &sc.case.core_mask)?)
        .push(NamedArray::from_mask("edema_mask", shape, &sc.case.edema_mask)?)
        .push(NamedArray::from_f64("pet_map", shape, &sc.case.pet_map)?)
        .push(NamedArray::from_mask("recurrence", shape, &t.recurrence)?)
        .push(NamedArray::from_f64(
            "c_true",
            &with_axes(&[nt + 1], shape, &[]),
            &t.trajectory.tumor.values,
        )?)
        .push(NamedArray::from_f64(
            "positions_true",
            &with_axes(&[nt + 1], &nodes, &[spec.ndim()]),
            t.trajectory.mesh.positions(),
        )?)
        .push(NamedArray::from_f64("c_final_grid_true", shape, &t.c_final_grid)?)
        .push(tissue_array("tissue_particles", &nodes, &t.tissue.intensities)?);
    let centers: Vec<String> = t.centers.iter().map(|c| format!("{c:?}")).collect();
    a.meta("kind", "synthetic_case")
        .meta("seed", seed)
        .meta("d_gm", t.params.d_gm)
        .meta("r", t.params.r)
        .meta("rho", t.params.rho)
        .meta("gamma", t.params.gamma)
        .meta("theta_up", t.imaging.theta_up)
        .meta("theta_down", t.imaging.theta_down)
        .meta("theta_necro", t.theta_necro)
        .meta("centers", centers.join(";"))
        .meta("elasticity_converged", t.trajectory.elasticity_converged)
        .meta("max_elastic_residual", t.trajectory.max_elastic_residual)
        .meta(
            "mm_per_domain",
            format!("{} (assumed physical extent)", cfg.units.mm_per_domain),
        )
        .meta("days_per_unit", cfg.units.days_per_unit)
        .meta("provenance", &sc.case.provenance);
    Ok(a)
}

/// Observations stored in a case archive.
pub fn load_case(dir: &Path) -> Result<PatientCase> {
    let a = load_archive(dir)?;
    let spec = a.grid()?.clone();
    let case = PatientCase {
        tissue_obs: tissue_from(a.get("tissue_obs")?),
        core_mask: a.get("core_mask")?.to_mask(),
        edema_mask: a.get("edema_mask")?.to_mask(),
        pet_map: a.get("pet_map")?.to_f64(),
        provenance: a.metadata.get("provenance").cloned().unwrap_or_default(),
        spec,
    };
    case.validate()?;
    Ok(case)
}

/// Name of case `i` inside a cohort directory.
pub fn case_name(i: usize) -> String {
    format!("case_{i:03}")
}

pub fn cohort_options(cfg: &RunConfig, spec: GridSpec, focal: usize) -> CohortOptions {
    let mut opts = CohortOptions::new(spec);
    opts.ranges = cfg.ranges;
    opts.units = cfg.units;
    opts.sim = cfg.simulation;
    opts.focal_count = focal;
    opts.recurrence_t_end = cfg.cohort.recurrence_t_end;
    opts.min_core_cells = cfg.cohort.min_core_cells;
    opts.materials = cfg.materials;
    opts.pet_noise = cfg.cohort.pet_noise;
    opts
}

/// Simulates `n` cases and writes one archive per case plus a summary table.
pub fn generate(cfg: &RunConfig, out: &Path, n: usize, seed: u64, focal: Option<usize>) -> Result<Vec<PathBuf>> {
    let spec = cfg.grid_spec()?;
    let focal = focal.unwrap_or(cfg.cohort.focal_count);
    let opts = cohort_options(cfg, spec, focal);
    let cohort = generate_cohort(n, seed, &opts)?;
    let mut table =
        String::from("case,d_gm,r,rho,gamma,theta_up,theta_down,theta_necro,core_cells,edema_cells,recurrence_cells\n");
    let mut dirs = Vec::with_capacity(n);
    for (i, sc) in cohort.iter().enumerate() {
        let dir = out.join(case_name(i));
        save_archive(&dir, &case_archive(sc, seed, cfg)?)?;
        let count = |m: &[bool]| m.iter().filter(|&&x| x).count();
        let t = &sc.truth;
        let _ = writeln!(
            table,
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{},{}",
            case_name(i),
            t.params.d_gm,
            t.params.r,
            t.params.rho,
            t.params.gamma,
            t.imaging.theta_up,
            t.imaging.theta_down,
            t.theta_necro,
            count(&sc.case.core_mask),
            count(&sc.case.edema_mask),
            count(&t.recurrence)
        );
        dirs.push(dir);
    }
    write_text(&out.join("cohort.csv"), &table)?;
    Ok(dirs)
}

/// Loss history as delimited records (wall time omitted so reruns match).
pub fn history_csv(history: &[LossReport]) -> String {
    let mut s = String::from("level,iter,total");
    for n in TERM_NAMES {
        let _ = write!(s, ",{n}");
    }
    s.push('\n');
    for r in history {
        let _ = write!(s, "{},{},{:.9e}", r.level, r.iter, r.total);
        for v in r.raw {
            let _ = write!(s, ",{v:.9e}");
        }
        s.push('\n');
    }
    s
}

/// Archive of a fitted state.
pub fn fit_archive(result: &FitResult, cfg: &RunConfig) -> Result<FieldArchive> {
    let st = &result.state;
    let spec = &st.spec;
    let shape = spec.shape();
    let nt = spec.nt();
    let bounds = cfg.param_bounds();
    let mut a = FieldArchive::new(Some(spec.clone()));
    a.push(NamedArray::from_f64(
        "c",
        &with_axes(&[nt + 1], shape, &[]),
        &st.tumor().values,
    )?)
    .push(NamedArray::from_f64(
        "positions",
        &with_axes(&[nt + 1], &spec.node_shape(), &[spec.ndim()]),
        &st.positions(),
    )?)
    .push(NamedArray::from_f64("c_final_grid", shape, &st.grid_density(nt)?)?)
    .push(NamedArray::from_f64("latents", &[st.params.len()], &st.params)?);
    let d = st.dynamics(&bounds);
    let im = st.imaging(&bounds);
    let x0: Vec<String> = st.x0().iter().map(|x| format!("{x:.9e}")).collect();
    a.meta("kind", "fit")
        .meta("seed", cfg.optimizer.seed)
        .meta("levels", cfg.optimizer.levels)
        .meta("iters", cfg.optimizer.iters)
        .meta("d_gm", d.d_gm)
        .meta("r", d.r)
        .meta("rho", d.rho)
        .meta("gamma", d.gamma)
        .meta("theta_up", im.theta_up)
        .meta("theta_down", im.theta_down)
        .meta("x0", x0.join(";"));
    if let Some(last) = result.history.last() {
        a.meta("final_total_loss", format!("{:.9e}", last.total));
    }
    Ok(a)
}

/// Fits one case archive and writes the fitted archive and its history.
pub fn fit_case(
    cfg: &RunConfig,
    case_dir: &Path,
    out: &Path,
    progress: &mut dyn FnMut(&LossReport),
) -> Result<FitResult> {
    let case = load_case(case_dir)?;
    let result = fit_with_progress(&case, &cfg.fit_settings(), progress)?;
    save_archive(out, &fit_archive(&result, cfg)?)?;
    write_text(&out.join(HISTORY_FILE), &history_csv(&result.history))?;
    Ok(result)
}

fn is_archive(dir: &Path) -> bool {
    dir.join(MANIFEST).is_file()
}

/// Sorted case subdirectories of a cohort directory.
fn case_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_archive(p))
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Diffusive cells of an observed tissue map.
pub fn diffusive_cells(tissue: &[[f64; 3]]) -> Vec<bool> {
    tissue.iter().map(|m| m[0] + m[1] >= DIFFUSIVE_THRESHOLD).collect()
}

/// Metrics of one fitted case.
pub fn case_metrics(
    name: &str,
    case: &PatientCase,
    c_true: &[f64],
    recurrence: &[bool],
    c_fit: &[f64],
    margin: f64,
) -> Result<CaseMetrics> {
    let diffusive = diffusive_cells(&case.tissue_obs);
    let plan = standard_plan(&case.core_mask, &diffusive, &case.spec, margin)?;
    let admissible: Vec<bool> = diffusive.iter().zip(&case.core_mask).map(|(a, b)| *a || *b).collect();
    let (model, _) = equal_volume_plan(c_fit, plan.volume, &admissible)?;
    Ok(CaseMetrics {
        name: name.to_string(),
        rmse: rmse(c_fit, c_true)?,
        coverage_model: recurrence_coverage(&model.mask, recurrence)?,
        coverage_standard: recurrence_coverage(&plan.mask, recurrence)?,
        plan_volume: plan.volume,
    })
}

fn eval_one(name: &str, truth: &Path, fitted: &Path, margin: f64) -> Result<CaseMetrics> {
    let case = load_case(truth)?;
    let t = load_archive(truth)?;
    let f = load_archive(fitted)?;
    if f.grid()? != &case.spec {
        return Err(Error::ShapeMismatch(format!(
            "fit {} and case {} use different grids",
            fitted.display(),
            truth.display()
        )));
    }
    case_metrics(
        name,
        &case,
        &t.get("c_final_grid_true")?.to_f64(),
        &t.get("recurrence")?.to_mask(),
        &f.get("c_final_grid")?.to_f64(),
        margin,
    )
}

/// Evaluates one case or a whole cohort; writes per-case records to `out`
/// and the summary next to it.
pub fn eval(truth: &Path, fitted: &Path, out: &Path, margin: f64) -> Result<CohortSummary> {
    let records = if is_archive(truth) {
        let name = truth
            .file_name()
            .map_or("case".into(), |n| n.to_string_lossy().into_owned());
        vec![eval_one(&name, truth, fitted, margin)?]
    } else {
        let dirs = case_dirs(truth)?;
        if dirs.is_empty() {
            return Err(Error::Config(format!("{} holds no case archives", truth.display())));
        }
        dirs.iter()
            .map(|d| {
                let name = d
                    .file_name()
                    .expect("case dir has a name")
                    .to_string_lossy()
                    .into_owned();
                eval_one(&name, d, &fitted.join(&name), margin)
            })
            .collect::<Result<Vec<_>>>()?
    };
    write_text(out, &metrics_csv(&records))?;
    let summary = cohort_report(&records)?;
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&summary_path(out), &format!("{text}\n"))?;
    Ok(summary)
}

pub fn summary_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".summary.json");
    PathBuf::from(s)
}

/// Small synthetic case on the phantom anatomy, used by gradient checks.
pub fn demo_case(spec: &GridSpec) -> Result<PatientCase> {
    let tissue = phantom_tissue(spec);
    let pts = spec.cell_lattice().points();
    let center = [0.4, 0.45, 0.5];
    let c: Vec<f64> = pts
        .chunks_exact(spec.ndim())
        .map(|p| {
            let r2: f64 = p.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum();
            0.9 * (-r2 / 0.02).exp()
        })
        .collect();
    let theta = ImagingParams {
        theta_up: 0.5,
        theta_down: 0.25,
    };
    crate::imaging::render_observations(spec, &c, &tissue, &theta, 0.8, None)
}

/// Gradient check of each term (or one named term) and the total on the
/// configured small instance.
pub fn grad_check_command(cfg: &RunConfig, term: Option<&str>) -> Result<Vec<GradCheck>> {
    let gc = &cfg.grad_check;
    let spec = GridSpec::new(&gc.shape, gc.nt).map_err(|e| Error::Config(e.to_string()))?;
    let case = demo_case(&spec)?;
    let problem = Problem::new(&case, &cfg.materials, &cfg.param_bounds(), cfg.symmetry_axis)?;
    let state = random_state(&spec, gc.seed);
    let terms: Vec<Option<usize>> = match term {
        None => (0..8).map(Some).chain([None]).collect(),
        Some("total") => vec![None],
        Some(name) => match TERM_NAMES.iter().position(|&n| n == name) {
            Some(k) => vec![Some(k)],
            None => {
                return Err(Error::Config(format!(
                    "unknown term {name}; expected one of {TERM_NAMES:?} or total"
                )))
            }
        },
    };
    terms
        .into_iter()
        .map(|t| grad_check(&state, &problem, &cfg.weights, t, gc.step, gc.stride))
        .collect()
}

/// Linear-interpolated isoline segments of a 2D cell map (marching squares
/// on cell centers).
pub fn isolines(lattice: &crate::domain::Lattice, field: &[f64], level: f64) -> Vec<[f64; 4]> {
    let (nx, ny) = (lattice.dims[0], lattice.dims[1]);
    let at = |i: usize, j: usize| field[i * ny + j];
    let pt = |i: f64, j: f64| {
        [
            lattice.origin[0] + i * lattice.spacing[0],
            lattice.origin[1] + j * lattice.spacing[1],
        ]
    };
    let mut segs = Vec::new();
    for i in 0..nx.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let mut cross = Vec::with_capacity(4);
            for e in 0..4 {
                let (a, b) = (corners[e], corners[(e + 1) % 4]);
                let (va, vb) = (at(a.0, a.1), at(b.0, b.1));
                if (va >= level) != (vb >= level) {
                    let t = (level - va) / (vb - va);
                    cross.push(pt(
                        a.0 as f64 + t * (b.0 as f64 - a.0 as f64),
                        a.1 as f64 + t * (b.1 as f64 - a.1 as f64),
                    ));
                }
            }
            for pair in cross.chunks_exact(2) {
                segs.push([pair[0][0], pair[0][1], pair[1][0], pair[1][1]]);
            }
        }
    }
    segs
}

fn parse_meta(a: &FieldArchive, key: &str) -> Result<f64> {
    a.metadata
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::ShapeMismatch(format!("archive metadata lacks numeric {key}")))
}

/// Writes plot-ready tables of a fitted archive: density slices, isolines at
/// the fitted thresholds, the final mesh and the loss history.
pub fn plot_data(fit_dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let a = load_archive(fit_dir)?;
    let spec = a.grid()?.clone();
    let shape = spec.shape().to_vec();
    let ndim = spec.ndim();
    let lattice = spec.cell_lattice();
    let c = a.get("c_final_grid")?.to_f64();
    // 2D plane: the middle slice along the last axis for 3D grids
    let (plane, plane_lattice) = if ndim == 3 {
        let k = shape[2] / 2;
        let vals: Vec<f64> = (0..shape[0] * shape[1]).map(|q| c[q * shape[2] + k]).collect();
        let lat = crate::domain::Lattice {
            dims: shape[..2].to_vec(),
            origin: lattice.origin[..2].to_vec(),
            spacing: lattice.spacing[..2].to_vec(),
        };
        (vals, lat)
    } else {
        (c, lattice)
    };
    let mut written = Vec::new();
    let mut density = String::from("x,y,c\n");
    for (q, v) in plane.iter().enumerate() {
        let p = plane_lattice.point(q);
        let _ = writeln!(density, "{:.6},{:.6},{:.6e}", p[0], p[1], v);
    }
    let path = out.join("density_final.csv");
    write_text(&path, &density)?;
    written.push(path);
    let mut lines = String::from("level_name,level,x0,y0,x1,y1\n");
    for key in ["theta_down", "theta_up"] {
        let level = parse_meta(&a, key)?;
        for s in isolines(&plane_lattice, &plane, level) {
            let _ = writeln!(
                lines,
                "{key},{level:.6},{:.6},{:.6},{:.6},{:.6}",
                s[0], s[1], s[2], s[3]
            );
        }
    }
    let path = out.join("isolines.csv");
    write_text(&path, &lines)?;
    written.push(path);
    let pos = a.get("positions")?.to_f64();
    let per = spec.num_nodes() * ndim;
    let last = &pos[spec.nt() * per..];
    let nodes = spec.node_lattice();
    let mut mesh = String::from(if ndim == 3 { "i,j,k,x,y,z\n" } else { "i,j,x,y\n" });
    for (q, p) in last.chunks_exact(ndim).enumerate() {
        let idx = nodes.unflat(q);
        let cols: Vec<String> = idx
            .iter()
            .map(|i| i.to_string())
            .chain(p.iter().map(|x| format!("{x:.6}")))
            .collect();
        let _ = writeln!(mesh, "{}", cols.join(","));
    }
    let path = out.join("mesh_final.csv");
    write_text(&path, &mesh)?;
    written.push(path);
    let hist = fit_dir.join(HISTORY_FILE);
    if hist.is_file() {
        let text = fs::read_to_string(&hist).map_err(|e| Error::io(&hist, e))?;
        let path = out.join(HISTORY_FILE);
        write_text(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}
