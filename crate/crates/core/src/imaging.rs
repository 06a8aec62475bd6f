//! Imaging model: soft segmentation losses, the metabolic-map correlation
//! loss, tissue matching, and synthetic observation rendering.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use crate::ad::{Ops, Plain};
use crate::domain::{GridSpec, ImagingParams, PatientCase};
use crate::error::{Error, Result};

/// Steepness of the soft threshold.
pub const BETA: f64 = 50.0;
/// Threshold offset.
pub const ALPHA: f64 = 0.05;
/// Log-normal sigma of synthetic metabolic noise.
pub const PET_NOISE_SIGMA: f64 = 0.1;
/// Variance below which the correlation is undefined.
pub const MIN_VARIANCE: f64 = 1e-12;

pub fn sigmoid(x: f64, beta: f64) -> f64 {
    crate::ad::logistic(beta * x)
}

/// `Σ_core σ(θ_up - c - α)`.
pub fn core_kernel<O: Ops>(o: &mut O, c: &[O::V], core: &[bool], theta_up: O::V) -> O::V {
    let tu = o.value(theta_up);
    let mut terms = Vec::new();
    for (i, _) in core.iter().enumerate().filter(|(_, &m)| m) {
        let s = sigmoid(tu - o.value(c[i]) - ALPHA, BETA);
        let d = BETA * s * (1.0 - s);
        terms.push(o.node(s, [theta_up, c[i]], || [d, -d]));
    }
    o.sum(&terms)
}

/// `Σ_edema σ(θ_down - c - α) + 1 - σ(θ_up - c + α)`.
pub fn edema_kernel<O: Ops>(o: &mut O, c: &[O::V], edema: &[bool], theta_down: O::V, theta_up: O::V) -> O::V {
    let (td, tu) = (o.value(theta_down), o.value(theta_up));
    let mut terms = Vec::new();
    for (i, _) in edema.iter().enumerate().filter(|(_, &m)| m) {
        let x = o.value(c[i]);
        let lo = sigmoid(td - x - ALPHA, BETA);
        let hi = sigmoid(tu - x + ALPHA, BETA);
        let (dl, dh) = (BETA * lo * (1.0 - lo), BETA * hi * (1.0 - hi));
        terms.push(o.node(lo + 1.0 - hi, [theta_down, theta_up, c[i]], || [dl, -dh, dh - dl]));
    }
    o.sum(&terms)
}

/// `1 - corr(c, pet)` over `region`; 1 when either variance vanishes.
pub fn pet_kernel<O: Ops>(o: &mut O, c: &[O::V], pet: &[f64], region: &[bool]) -> O::V {
    let idx: Vec<usize> = (0..region.len()).filter(|&i| region[i]).collect();
    let n = idx.len() as f64;
    if idx.len() < 2 {
        return o.constant(1.0);
    }
    let cv: Vec<f64> = idx.iter().map(|&i| o.value(c[i])).collect();
    let pv: Vec<f64> = idx.iter().map(|&i| pet[i]).collect();
    let cm = cv.iter().sum::<f64>() / n;
    let pm = pv.iter().sum::<f64>() / n;
    let a: Vec<f64> = cv.iter().map(|x| x - cm).collect();
    let b: Vec<f64> = pv.iter().map(|x| x - pm).collect();
    let saa: f64 = a.iter().map(|x| x * x).sum();
    let sbb: f64 = b.iter().map(|x| x * x).sum();
    if saa / n < MIN_VARIANCE || sbb / n < MIN_VARIANCE {
        return o.constant(1.0);
    }
    let sab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let norm = (saa * sbb).sqrt();
    let corr = sab / norm;
    if !o.tracks_partials() {
        return o.constant(1.0 - corr);
    }
    let parents: Vec<O::V> = idx.iter().map(|&i| c[i]).collect();
    let parts: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(ai, bi)| -(bi / norm - corr * ai / saa))
        .collect();
    o.dyn_node(1.0 - corr, &parents, &parts)
}

/// `Σ_{outside core} Σ_k (g_k - obs_k)²` with `grids[k]` the projected
/// tissue components.
pub fn tissue_kernel<O: Ops>(o: &mut O, grids: &[Vec<O::V>; 3], obs: &[[f64; 3]], core: &[bool]) -> O::V {
    let mut res = Vec::new();
    for (i, m) in obs.iter().enumerate() {
        if core[i] {
            continue;
        }
        for k in 0..3 {
            res.push(o.add_const(grids[k][i], -m[k]));
        }
    }
    o.sum_sq(&res)
}

pub fn core_loss(c: &[f64], core: &[bool], theta_up: f64) -> f64 {
    core_kernel(&mut Plain, c, core, theta_up)
}

pub fn edema_loss(c: &[f64], edema: &[bool], theta_down: f64, theta_up: f64) -> f64 {
    edema_kernel(&mut Plain, c, edema, theta_down, theta_up)
}

pub fn pet_loss(c: &[f64], pet: &[f64], region: &[bool]) -> f64 {
    pet_kernel(&mut Plain, c, pet, region)
}

/// Tissue loss for already projected component grids.
pub fn tissue_loss(grids: &[Vec<f64>; 3], obs: &[[f64; 3]], core: &[bool]) -> f64 {
    tissue_kernel(&mut Plain, grids, obs, core)
}

/// Synthetic observations from a final tumor map on the cell lattice.
pub fn render_observations(
    spec: &GridSpec,
    c_final: &[f64],
    tissue_proj: &[[f64; 3]],
    theta: &ImagingParams,
    theta_necro: f64,
    pet_noise_seed: Option<u64>,
) -> Result<PatientCase> {
    theta.validate()?;
    if !(theta.theta_up < theta_necro && theta_necro < 1.0) {
        return Err(Error::ThresholdOrder(format!(
            "theta_up ({}) < theta_necro ({theta_necro}) < 1",
            theta.theta_up
        )));
    }
    if c_final.len() != spec.num_cells() || tissue_proj.len() != spec.num_cells() {
        return Err(Error::ShapeMismatch("rendered maps do not match the grid".into()));
    }
    let core_mask: Vec<bool> = c_final.iter().map(|&c| c >= theta.theta_up).collect();
    let edema_mask: Vec<bool> = c_final
        .iter()
        .map(|&c| c >= theta.theta_down && c < theta.theta_up)
        .collect();
    let mut rng = pet_noise_seed.map(ChaCha8Rng::seed_from_u64);
    let noise = LogNormal::new(0.0, PET_NOISE_SIGMA).expect("valid sigma");
    let pet_map = c_final
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if core_mask[i] || edema_mask[i] {
                match rng.as_mut() {
                    Some(r) => c * noise.sample(r),
                    None => c,
                }
            } else {
                0.0
            }
        })
        .collect();
    Ok(PatientCase {
        spec: spec.clone(),
        tissue_obs: tissue_proj.to_vec(),
        core_mask,
        edema_mask,
        pet_map,
        provenance: format!(
            "synthetic: theta_up={} theta_down={} theta_necro={theta_necro}",
            theta.theta_up, theta.theta_down
        ),
    })
}
