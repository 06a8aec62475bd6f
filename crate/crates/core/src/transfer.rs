//! Particle/grid projections with multilinear hat functions.
//!
//! Grid fields live on a [`Lattice`]. Positions outside the lattice hull are
//! clamped onto it; the clamped direction then carries no derivative.

use crate::ad::Ops;
use crate::domain::{Lattice, GUARD_BAND};
use crate::error::{Error, Result};

const MAX_CORNERS: usize = 8;

/// Hat-function stencil of one particle.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub nodes: [usize; MAX_CORNERS],
    pub weights: [f64; MAX_CORNERS],
    /// `d weight / d x_a`, one row per corner.
    pub dweights: [[f64; 3]; MAX_CORNERS],
    pub corners: usize,
}

/// Weights of every particle against a lattice.
#[derive(Debug, Clone)]
pub struct ShapeWeights {
    pub stencils: Vec<Stencil>,
    /// Particles found outside the guard band (values come from the clamped
    /// position).
    pub out_of_domain: Vec<usize>,
}

impl ShapeWeights {
    pub fn new(lattice: &Lattice, positions: &[f64]) -> Self {
        let ndim = lattice.ndim();
        let mut out_of_domain = Vec::new();
        let stencils = positions
            .chunks_exact(ndim)
            .enumerate()
            .map(|(p, x)| {
                if x.iter().any(|&v| !(-GUARD_BAND..=1.0 + GUARD_BAND).contains(&v)) {
                    out_of_domain.push(p);
                }
                stencil(lattice, x)
            })
            .collect();
        Self {
            stencils,
            out_of_domain,
        }
    }
}

/// Multilinear weights of the lattice cell enclosing `x`.
pub fn stencil(lattice: &Lattice, x: &[f64]) -> Stencil {
    let ndim = lattice.ndim();
    let mut base = [0usize; 3];
    let mut t = [0.0; 3];
    let mut dt = [0.0; 3];
    for a in 0..ndim {
        let top = (lattice.dims[a] - 1) as f64;
        let s = (x[a] - lattice.origin[a]) / lattice.spacing[a];
        let (s, ds) = if s < 0.0 {
            (0.0, 0.0)
        } else if s > top {
            (top, 0.0)
        } else {
            (s, 1.0 / lattice.spacing[a])
        };
        let i = (s.floor() as usize).min(lattice.dims[a] - 2);
        base[a] = i;
        t[a] = s - i as f64;
        dt[a] = ds;
    }
    let corners = 1 << ndim;
    let mut st = Stencil {
        nodes: [0; MAX_CORNERS],
        weights: [0.0; MAX_CORNERS],
        dweights: [[0.0; 3]; MAX_CORNERS],
        corners,
    };
    let mut idx = [0usize; 3];
    for k in 0..corners {
        let mut w = 1.0;
        let mut factors = [0.0; 3];
        let mut dfac = [0.0; 3];
        for a in 0..ndim {
            let bit = (k >> a) & 1;
            idx[a] = base[a] + bit;
            if bit == 1 {
                factors[a] = t[a];
                dfac[a] = dt[a];
            } else {
                factors[a] = 1.0 - t[a];
                dfac[a] = -dt[a];
            }
            w *= factors[a];
        }
        for a in 0..ndim {
            let mut d = dfac[a];
            for b in (0..ndim).filter(|&b| b != a) {
                d *= factors[b];
            }
            st.dweights[k][a] = d;
        }
        st.nodes[k] = lattice.flat(&idx[..ndim]);
        st.weights[k] = w;
    }
    st
}

/// Values sampled at particles.
#[derive(Debug, Clone)]
pub struct Sampled {
    pub values: Vec<f64>,
    pub out_of_domain: Vec<usize>,
}

/// `F_p = Σ_i w_ip F_i`.
pub fn grid_to_particles(lattice: &Lattice, grid: &[f64], positions: &[f64]) -> Result<Sampled> {
    if grid.len() != lattice.len() {
        return Err(Error::ShapeMismatch(format!(
            "grid field has {} values, lattice {}",
            grid.len(),
            lattice.len()
        )));
    }
    let sw = ShapeWeights::new(lattice, positions);
    let values = sw
        .stencils
        .iter()
        .map(|s| (0..s.corners).map(|k| s.weights[k] * grid[s.nodes[k]]).sum())
        .collect();
    Ok(Sampled {
        values,
        out_of_domain: sw.out_of_domain,
    })
}

/// Grid values projected from particles.
#[derive(Debug, Clone)]
pub struct Projected {
    pub values: Vec<f64>,
    /// Nodes whose total weight fell below the threshold; they hold 0.
    pub empty_nodes: Vec<usize>,
}

/// Total weight below which a grid node counts as empty.
pub const EMPTY_WEIGHT: f64 = 1e-12;

/// Node-major gather plan for particle-to-grid projection.
#[derive(Debug, Clone)]
pub struct P2gPlan {
    pub ndim: usize,
    pub num_particles: usize,
    /// Per grid node, `(particle, corner)` pairs in particle order.
    start: Vec<usize>,
    entries: Vec<(u32, u8)>,
    weights: ShapeWeights,
}

impl P2gPlan {
    pub fn new(lattice: &Lattice, positions: &[f64]) -> Self {
        let weights = ShapeWeights::new(lattice, positions);
        let mut counts = vec![0usize; lattice.len() + 1];
        for s in &weights.stencils {
            for k in 0..s.corners {
                if s.weights[k] != 0.0 || s.dweights[k].iter().any(|&d| d != 0.0) {
                    counts[s.nodes[k] + 1] += 1;
                }
            }
        }
        for i in 0..lattice.len() {
            counts[i + 1] += counts[i];
        }
        let start = counts.clone();
        let mut fill = counts;
        let mut entries = vec![(0u32, 0u8); *start.last().unwrap()];
        for (p, s) in weights.stencils.iter().enumerate() {
            for k in 0..s.corners {
                if s.weights[k] != 0.0 || s.dweights[k].iter().any(|&d| d != 0.0) {
                    let n = s.nodes[k];
                    entries[fill[n]] = (p as u32, k as u8);
                    fill[n] += 1;
                }
            }
        }
        Self {
            ndim: lattice.ndim(),
            num_particles: weights.stencils.len(),
            start,
            entries,
            weights,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.start.len() - 1
    }

    pub fn out_of_domain(&self) -> &[usize] {
        &self.weights.out_of_domain
    }

    /// Weighted average at every node. `positions` supplies the particle
    /// coordinates as variables so the projection is differentiable in them;
    /// their values must match the ones the plan was built from.
    pub fn apply<O: Ops>(&self, o: &mut O, field: &[O::V], positions: &[O::V]) -> (Vec<O::V>, Vec<usize>) {
        let ndim = self.ndim;
        let mut out = Vec::with_capacity(self.num_nodes());
        let mut empty = Vec::new();
        let track = o.tracks_partials();
        let mut parents = Vec::new();
        let mut partials = Vec::new();
        for n in 0..self.num_nodes() {
            let ents = &self.entries[self.start[n]..self.start[n + 1]];
            let mut den = 0.0;
            let mut num = 0.0;
            for &(p, k) in ents {
                let w = self.weights.stencils[p as usize].weights[k as usize];
                den += w;
                num += w * o.value(field[p as usize]);
            }
            if den < EMPTY_WEIGHT {
                empty.push(n);
                out.push(o.constant(0.0));
                continue;
            }
            let v = num / den;
            if !track {
                out.push(o.constant(v));
                continue;
            }
            parents.clear();
            partials.clear();
            for &(p, k) in ents {
                let st = &self.weights.stencils[p as usize];
                let k = k as usize;
                let f = o.value(field[p as usize]);
                parents.push(field[p as usize]);
                partials.push(st.weights[k] / den);
                for a in 0..ndim {
                    let d = st.dweights[k][a];
                    if d != 0.0 {
                        parents.push(positions[p as usize * ndim + a]);
                        partials.push((f - v) * d / den);
                    }
                }
            }
            out.push(o.dyn_node(v, &parents, &partials));
        }
        (out, empty)
    }
}

/// `F_i = Σ_p w_ip F_p / Σ_p w_ip`.
pub fn particles_to_grid(lattice: &Lattice, field: &[f64], positions: &[f64]) -> Result<Projected> {
    if field.len() * lattice.ndim() != positions.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} particle values for {} coordinates",
            field.len(),
            positions.len()
        )));
    }
    let plan = P2gPlan::new(lattice, positions);
    let (values, empty_nodes) = plan.apply(&mut crate::ad::Plain, field, positions);
    Ok(Projected { values, empty_nodes })
}
