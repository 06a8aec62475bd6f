//! Scalar evaluation backends shared by every loss kernel.
//!
//! Kernels are written once against [`Ops`]. Running them with [`Plain`]
//! evaluates plain `f64` values; running them with [`Tape`] records a
//! Wengert list that can be swept backwards for exact gradients.
//!
//! Nodes on the tape are n-ary: a fused kernel (for example the shoelace
//! area of a quadrilateral) is recorded as one node carrying the analytic
//! partial derivative with respect to each of its parents.

/// Evaluation context for differentiable kernels.
pub trait Ops {
    type V: Copy;

    fn constant(&mut self, x: f64) -> Self::V;
    fn value(&self, v: Self::V) -> f64;

    /// Record a node with `N` parents. `partials` is only invoked when the
    /// backend tracks derivatives.
    fn node<const N: usize>(
        &mut self,
        value: f64,
        parents: [Self::V; N],
        partials: impl FnOnce() -> [f64; N],
    ) -> Self::V;

    /// `k0 + Σ w_i x_i`.
    fn lin(&mut self, terms: &[(Self::V, f64)], k0: f64) -> Self::V;

    /// Node with a runtime number of parents and precomputed partials.
    fn dyn_node(&mut self, value: f64, parents: &[Self::V], partials: &[f64]) -> Self::V;

    fn tracks_partials(&self) -> bool;

    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V {
        let v = self.value(a) + self.value(b);
        self.node(v, [a, b], || [1.0, 1.0])
    }

    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V {
        let v = self.value(a) - self.value(b);
        self.node(v, [a, b], || [1.0, -1.0])
    }

    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V {
        let (x, y) = (self.value(a), self.value(b));
        self.node(x * y, [a, b], || [y, x])
    }

    fn div(&mut self, a: Self::V, b: Self::V) -> Self::V {
        let (x, y) = (self.value(a), self.value(b));
        self.node(x / y, [a, b], || [1.0 / y, -x / (y * y)])
    }

    fn scale(&mut self, a: Self::V, k: f64) -> Self::V {
        let v = self.value(a) * k;
        self.node(v, [a], || [k])
    }

    fn add_const(&mut self, a: Self::V, k: f64) -> Self::V {
        let v = self.value(a) + k;
        self.node(v, [a], || [1.0])
    }

    fn square(&mut self, a: Self::V) -> Self::V {
        let x = self.value(a);
        self.node(x * x, [a], || [2.0 * x])
    }

    fn sqrt(&mut self, a: Self::V) -> Self::V {
        let s = self.value(a).sqrt();
        self.node(s, [a], || [0.5 / s])
    }

    fn exp(&mut self, a: Self::V) -> Self::V {
        let e = self.value(a).exp();
        self.node(e, [a], || [e])
    }

    fn ln(&mut self, a: Self::V) -> Self::V {
        let x = self.value(a);
        self.node(x.ln(), [a], || [1.0 / x])
    }

    fn abs(&mut self, a: Self::V) -> Self::V {
        let x = self.value(a);
        self.node(x.abs(), [a], || [if x >= 0.0 { 1.0 } else { -1.0 }])
    }

    /// `1 / (1 + exp(-beta x))`.
    fn logistic(&mut self, a: Self::V, beta: f64) -> Self::V {
        let s = logistic(beta * self.value(a));
        self.node(s, [a], || [beta * s * (1.0 - s)])
    }

    /// `lo + (hi - lo) * logistic(a)`.
    fn bounded(&mut self, a: Self::V, lo: f64, hi: f64) -> Self::V {
        let s = logistic(self.value(a));
        self.node(lo + (hi - lo) * s, [a], || [(hi - lo) * s * (1.0 - s)])
    }

    fn sum(&mut self, xs: &[Self::V]) -> Self::V {
        if self.tracks_partials() {
            let terms: Vec<(Self::V, f64)> = xs.iter().map(|&x| (x, 1.0)).collect();
            self.lin(&terms, 0.0)
        } else {
            let v = xs.iter().map(|&x| self.value(x)).sum();
            self.constant(v)
        }
    }

    /// `Σ x_i²` as a single node.
    fn sum_sq(&mut self, xs: &[Self::V]) -> Self::V {
        let vals: Vec<f64> = xs.iter().map(|&x| self.value(x)).collect();
        let v = vals.iter().map(|x| x * x).sum();
        if self.tracks_partials() {
            let parts: Vec<f64> = vals.iter().map(|x| 2.0 * x).collect();
            self.dyn_node(v, xs, &parts)
        } else {
            self.constant(v)
        }
    }
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`logistic`], clamped away from the asymptotes.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Plain `f64` evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Plain;

impl Ops for Plain {
    type V = f64;

    #[inline]
    fn constant(&mut self, x: f64) -> f64 {
        x
    }

    #[inline]
    fn value(&self, v: f64) -> f64 {
        v
    }

    #[inline]
    fn node<const N: usize>(&mut self, value: f64, _parents: [f64; N], _partials: impl FnOnce() -> [f64; N]) -> f64 {
        value
    }

    #[inline]
    fn lin(&mut self, terms: &[(f64, f64)], k0: f64) -> f64 {
        terms.iter().fold(k0, |acc, &(x, w)| acc + w * x)
    }

    #[inline]
    fn dyn_node(&mut self, value: f64, _parents: &[f64], _partials: &[f64]) -> f64 {
        value
    }

    #[inline]
    fn tracks_partials(&self) -> bool {
        false
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Reverse-mode tape. Parents of node `i` live in
/// `args[start[i]..start[i + 1]]`.
#[derive(Debug, Clone)]
pub struct Tape {
    vals: Vec<f64>,
    start: Vec<u32>,
    args: Vec<u32>,
    parts: Vec<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            vals: Vec::new(),
            start: vec![0],
            args: Vec::new(),
            parts: Vec::new(),
        }
    }

    /// Drop all nodes but keep the allocations.
    pub fn clear(&mut self) {
        self.vals.clear();
        self.start.clear();
        self.start.push(0);
        self.args.clear();
        self.parts.clear();
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn num_edges(&self) -> usize {
        self.args.len()
    }

    /// New independent variable.
    pub fn leaf(&mut self, x: f64) -> Var {
        self.push(x)
    }

    #[inline]
    fn push(&mut self, x: f64) -> Var {
        let id = self.vals.len() as u32;
        self.vals.push(x);
        self.start.push(self.args.len() as u32);
        Var(id)
    }

    /// Adjoints of every node with respect to `output`.
    pub fn adjoints(&self, output: Var) -> Vec<f64> {
        let mut adj = vec![0.0; self.vals.len()];
        adj[output.index()] = 1.0;
        for i in (0..=output.index()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let (s, e) = (self.start[i] as usize, self.start[i + 1] as usize);
            for k in s..e {
                adj[self.args[k] as usize] += a * self.parts[k];
            }
        }
        adj
    }

    /// Gradient of `output` with respect to the first `n` leaves.
    pub fn gradient(&self, output: Var, n: usize) -> Vec<f64> {
        let mut adj = self.adjoints(output);
        adj.truncate(n);
        adj
    }
}

impl Ops for Tape {
    type V = Var;

    #[inline]
    fn constant(&mut self, x: f64) -> Var {
        self.push(x)
    }

    #[inline]
    fn value(&self, v: Var) -> f64 {
        self.vals[v.index()]
    }

    #[inline]
    fn node<const N: usize>(&mut self, value: f64, parents: [Var; N], partials: impl FnOnce() -> [f64; N]) -> Var {
        let p = partials();
        for k in 0..N {
            self.args.push(parents[k].0);
            self.parts.push(p[k]);
        }
        let id = self.vals.len() as u32;
        self.vals.push(value);
        self.start.push(self.args.len() as u32);
        Var(id)
    }

    fn lin(&mut self, terms: &[(Var, f64)], k0: f64) -> Var {
        let mut v = k0;
        for &(x, w) in terms {
            v += w * self.vals[x.index()];
            self.args.push(x.0);
            self.parts.push(w);
        }
        let id = self.vals.len() as u32;
        self.vals.push(v);
        self.start.push(self.args.len() as u32);
        Var(id)
    }

    fn dyn_node(&mut self, value: f64, parents: &[Var], partials: &[f64]) -> Var {
        debug_assert_eq!(parents.len(), partials.len());
        for (p, &d) in parents.iter().zip(partials) {
            self.args.push(p.0);
            self.parts.push(d);
        }
        let id = self.vals.len() as u32;
        self.vals.push(value);
        self.start.push(self.args.len() as u32);
        Var(id)
    }

    #[inline]
    fn tracks_partials(&self) -> bool {
        true
    }
}
