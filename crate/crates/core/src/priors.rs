//! Initial-condition priors: a Gaussian tumor seed and hemispheric symmetry
//! of the initial anatomy.

use crate::ad::{Ops, Plain};
use crate::domain::{cell_geometry, GridSpec, ParticleMesh, TissueField, Topology, TumorField};
use crate::error::{Error, Result};
use crate::transfer::P2gPlan;

/// Peak of the seed Gaussian.
pub const SEED_PEAK: f64 = 0.5;
/// Width parameter of the seed Gaussian.
pub const SEED_WIDTH: f64 = 0.02;
/// Pooling factors `2^κ` of the symmetry prior.
pub const SYMMETRY_SCALES: [usize; 3] = [1, 2, 4];

/// `D₁ exp(-‖x - x0‖² / D₂)` at every point of `points` (`[n][ndim]`).
pub fn gaussian_seed(points: &[f64], x0: &[f64]) -> Vec<f64> {
    let ndim = x0.len();
    points
        .chunks_exact(ndim)
        .map(|p| {
            let r2: f64 = p.iter().zip(x0).map(|(a, b)| (a - b).powi(2)).sum();
            SEED_PEAK * (-r2 / SEED_WIDTH).exp()
        })
        .collect()
}

/// `Σ_i (g_i - seed(x_i))²` for grid values `g` at `points`.
pub fn gaussian_kernel<O: Ops>(o: &mut O, grid_c: &[O::V], points: &[f64], x0: &[O::V]) -> O::V {
    let ndim = x0.len();
    let xv: Vec<f64> = x0.iter().map(|&v| o.value(v)).collect();
    let mut res = Vec::with_capacity(grid_c.len());
    let mut parents = Vec::with_capacity(4);
    let mut parts = Vec::with_capacity(4);
    for (i, p) in points.chunks_exact(ndim).enumerate() {
        let r2: f64 = p.iter().zip(&xv).map(|(a, b)| (a - b).powi(2)).sum();
        let e = SEED_PEAK * (-r2 / SEED_WIDTH).exp();
        let g = o.value(grid_c[i]);
        parents.clear();
        parts.clear();
        parents.push(grid_c[i]);
        parts.push(1.0);
        for a in 0..ndim {
            parents.push(x0[a]);
            parts.push(-e * 2.0 * (p[a] - xv[a]) / SEED_WIDTH);
        }
        res.push(o.dyn_node(g - e, &parents, &parts));
    }
    o.sum_sq(&res)
}

/// Tumor density of slice `n` projected onto the cell-center lattice.
pub fn tumor_on_grid(topo: &Topology, tumor: &TumorField, mesh: &ParticleMesh, n: usize) -> Result<Vec<f64>> {
    let geom = cell_geometry(topo, mesh, n)?;
    let plan = P2gPlan::new(&topo.spec.cell_lattice(), &geom.centroids);
    Ok(plan.apply(&mut Plain, tumor.slice(n), &geom.centroids).0)
}

/// Seed loss of the initial tumor slice.
pub fn gaussian_seed_loss(topo: &Topology, tumor: &TumorField, mesh: &ParticleMesh, x0: &[f64]) -> Result<f64> {
    let grid = tumor_on_grid(topo, tumor, mesh, 0)?;
    let points = topo.spec.cell_lattice().points();
    Ok(gaussian_kernel(&mut Plain, &grid, &points, x0))
}

/// Checks that every pooled grid is exact and has an even mirror axis.
pub fn check_symmetry_shape(shape: &[usize], axis: usize) -> Result<()> {
    for &f in &SYMMETRY_SCALES {
        for (a, &len) in shape.iter().enumerate() {
            let odd = len % f != 0 || (a == axis && (len / f) % 2 != 0);
            if odd {
                return Err(Error::AxisNotEven { axis: a, len, scale: f });
            }
        }
    }
    Ok(())
}

/// Mean absolute mirror difference of `field` after average pooling by
/// `factor`.
pub fn symmetry_term<O: Ops>(o: &mut O, field: &[O::V], shape: &[usize], factor: usize, axis: usize) -> O::V {
    let ndim = shape.len();
    let pooled_shape: Vec<usize> = shape.iter().map(|s| s / factor).collect();
    let n_pooled: usize = pooled_shape.iter().product();
    let w = 1.0 / (factor.pow(ndim as u32)) as f64;
    let flat = |idx: &[usize], dims: &[usize]| idx.iter().zip(dims).fold(0, |acc, (&i, &d)| acc * d + i);
    let unflat = |mut k: usize, dims: &[usize]| {
        let mut out = vec![0; dims.len()];
        for a in (0..dims.len()).rev() {
            out[a] = k % dims[a];
            k /= dims[a];
        }
        out
    };
    let pooled: Vec<O::V> = if factor == 1 {
        field.to_vec()
    } else {
        let mut terms = Vec::with_capacity(factor.pow(ndim as u32));
        (0..n_pooled)
            .map(|q| {
                let base = unflat(q, &pooled_shape);
                terms.clear();
                // Mirrored blocks are summed in mirrored order so that
                // symmetric inputs pool to bitwise equal values.
                let upper = base[axis] >= pooled_shape[axis] / 2;
                for off in 0..factor.pow(ndim as u32) {
                    let mut o_idx = unflat(off, &vec![factor; ndim]);
                    if upper {
                        o_idx[axis] = factor - 1 - o_idx[axis];
                    }
                    let idx: Vec<usize> = (0..ndim).map(|a| base[a] * factor + o_idx[a]).collect();
                    terms.push((field[flat(&idx, shape)], w));
                }
                o.lin(&terms, 0.0)
            })
            .collect()
    };
    let half = pooled_shape[axis] / 2;
    let mut diffs = Vec::with_capacity(n_pooled / 2);
    for q in 0..n_pooled {
        let idx = unflat(q, &pooled_shape);
        if idx[axis] >= half {
            continue;
        }
        let mut m = idx.clone();
        m[axis] = pooled_shape[axis] - 1 - idx[axis];
        let d = o.sub(pooled[q], pooled[flat(&m, &pooled_shape)]);
        diffs.push(o.abs(d));
    }
    let k = 1.0 / diffs.len() as f64;
    let terms: Vec<(O::V, f64)> = diffs.iter().map(|&d| (d, k)).collect();
    o.lin(&terms, 0.0)
}

/// Per-scale symmetry terms of one grid map.
pub fn symmetry_scales(field: &[f64], shape: &[usize], axis: usize) -> Result<[f64; 3]> {
    check_symmetry_shape(shape, axis)?;
    if field.len() != shape.iter().product::<usize>() {
        return Err(Error::ShapeMismatch("symmetry field does not match its shape".into()));
    }
    Ok(SYMMETRY_SCALES.map(|f| symmetry_term(&mut Plain, field, shape, f, axis)))
}

/// Sum over tissues and scales for the initial anatomy of `mesh`.
pub fn symmetry_loss(spec: &GridSpec, tissue: &TissueField, mesh: &ParticleMesh, axis: usize) -> Result<f64> {
    check_symmetry_shape(spec.shape(), axis)?;
    let plan = P2gPlan::new(&spec.cell_lattice(), mesh.slice(0));
    let mut total = 0.0;
    for k in 0..3 {
        let comp = tissue.component(k);
        let (grid, _) = plan.apply(&mut Plain, &comp, mesh.slice(0));
        total += symmetry_scales(&grid, spec.shape(), axis)?.iter().sum::<f64>();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::make_uniform_mesh;

    #[test]
    fn seed_peak_and_zero_loss() {
        let spec = GridSpec::new(&[8, 8], 2).unwrap();
        let topo = Topology::new(&spec);
        let mesh = make_uniform_mesh(&spec);
        let pts = spec.cell_lattice().points();
        let x0 = [0.4375, 0.5625];
        let seed = gaussian_seed(&pts, &x0);
        assert_eq!(gaussian_seed(&x0, &x0)[0], 0.5);
        let mut tumor = TumorField::zeros(&spec);
        tumor.slice_mut(0).copy_from_slice(&seed);
        assert!(gaussian_seed_loss(&topo, &tumor, &mesh, &x0).unwrap() < 1e-28);
        let zero = TumorField::zeros(&spec);
        let expect: f64 = pts
            .chunks(2)
            .map(|p| {
                let r2 = (p[0] - x0[0]).powi(2) + (p[1] - x0[1]).powi(2);
                0.25 * (-2.0 * r2 / 0.02).exp()
            })
            .sum();
        let got = gaussian_seed_loss(&topo, &zero, &mesh, &x0).unwrap();
        assert!((got - expect).abs() < 1e-13);
    }

    #[test]
    fn half_map_asymmetry() {
        let shape = [8, 8];
        let field: Vec<f64> = (0..64).map(|k| if k / 8 < 4 { 1.0 } else { 0.0 }).collect();
        let s = symmetry_scales(&field, &shape, 0).unwrap();
        assert_eq!(s, [1.0, 1.0, 1.0]);
        let sym: Vec<f64> = (0..64).map(|k| ((k / 8) as f64 - 3.5).abs() + (k % 8) as f64).collect();
        assert_eq!(symmetry_scales(&sym, &shape, 0).unwrap(), [0.0; 3]);
    }

    #[test]
    fn odd_pooled_axis_rejected() {
        assert!(matches!(
            check_symmetry_shape(&[12, 8], 0),
            Err(Error::AxisNotEven { .. })
        ));
        assert!(check_symmetry_shape(&[16, 8], 0).is_ok());
        assert!(check_symmetry_shape(&[16, 6], 0).is_err());
    }
}
