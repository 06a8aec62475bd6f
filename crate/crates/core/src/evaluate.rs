//! Recovery and radiotherapy-coverage metrics.

use serde::{Deserialize, Serialize};

use crate::domain::GridSpec;
use crate::error::{Error, Result};

/// `100 · sqrt(mean((pred - truth)²))`.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "rmse over {} and {} values",
            pred.len(),
            truth.len()
        )));
    }
    let ms = pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(100.0 * ms.sqrt())
}

/// Squared distance transform of one line (lower envelope of parabolas).
fn edt_line(f: &[f64], spacing: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let h2 = spacing * spacing;
    let pos = |q: usize| q as f64;
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] / h2 + pos(q) * pos(q)) - (f[p] / h2 + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let p = v[k];
        *o = h2 * (pos(q) - pos(p)).powi(2) + f[p];
    }
}

/// Exact Euclidean distance from every cell center to the nearest set cell,
/// in domain units.
pub fn distance_transform(mask: &[bool], spec: &GridSpec) -> Vec<f64> {
    let shape = spec.shape();
    let ndim = shape.len();
    let mut d: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let lattice = spec.cell_lattice();
    for axis in 0..ndim {
        let len = shape[axis];
        let stride = lattice.stride(axis);
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        let mut v = vec![0usize; len];
        let mut z = vec![0.0; len + 1];
        for start in 0..d.len() {
            if (start / stride) % len != 0 {
                continue;
            }
            for i in 0..len {
                line[i] = d[start + i * stride];
            }
            edt_line(&line, spec.spacing(axis), &mut out, &mut v, &mut z);
            for i in 0..len {
                d[start + i * stride] = out[i];
            }
        }
    }
    d.into_iter().map(f64::sqrt).collect()
}

/// A binary treatment plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub mask: Vec<bool>,
    /// Number of planned cells.
    pub volume: usize,
}

impl Plan {
    fn from_mask(mask: Vec<bool>) -> Self {
        let volume = mask.iter().filter(|&&m| m).count();
        Self { mask, volume }
    }
}

/// Core plus every diffusive cell within `margin` of the core.
pub fn standard_plan(core: &[bool], diffusive: &[bool], spec: &GridSpec, margin: f64) -> Result<Plan> {
    if core.len() != spec.num_cells() || diffusive.len() != core.len() {
        return Err(Error::ShapeMismatch("plan masks do not match the grid".into()));
    }
    if !core.iter().any(|&m| m) {
        return Err(Error::EmptyCore);
    }
    let dist = distance_transform(core, spec);
    let mask = (0..core.len())
        .map(|i| core[i] || (diffusive[i] && dist[i] <= margin + 1e-12))
        .collect();
    Ok(Plan::from_mask(mask))
}

/// Highest-density admissible cells enclosing exactly `target` cells.
/// Ties are broken by descending density, then ascending cell index. The
/// returned threshold is the smallest selected density (`+∞` when empty).
pub fn equal_volume_plan(c_pred: &[f64], target: usize, admissible: &[bool]) -> Result<(Plan, f64)> {
    if c_pred.len() != admissible.len() {
        return Err(Error::ShapeMismatch(
            "density and admissible mask differ in length".into(),
        ));
    }
    let mut order: Vec<usize> = (0..c_pred.len()).filter(|&i| admissible[i]).collect();
    if target > order.len() {
        return Err(Error::UnreachableVolume {
            target,
            available: order.len(),
        });
    }
    order.sort_by(|&a, &b| c_pred[b].total_cmp(&c_pred[a]).then(a.cmp(&b)));
    let mut mask = vec![false; c_pred.len()];
    for &i in &order[..target] {
        mask[i] = true;
    }
    let tau = if target == 0 {
        f64::INFINITY
    } else {
        c_pred[order[target - 1]]
    };
    Ok((Plan::from_mask(mask), tau))
}

/// Percentage of the recurrence region inside the plan.
pub fn recurrence_coverage(plan: &[bool], recurrence: &[bool]) -> Result<f64> {
    if plan.len() != recurrence.len() {
        return Err(Error::ShapeMismatch("plan and recurrence differ in length".into()));
    }
    let total = recurrence.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::EmptyRecurrence);
    }
    let hit = plan.iter().zip(recurrence).filter(|(&p, &r)| p && r).count();
    Ok(100.0 * hit as f64 / total as f64)
}

/// Metrics of one fitted case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub name: String,
    pub rmse: f64,
    pub coverage_model: f64,
    pub coverage_standard: f64,
    pub plan_volume: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSem {
    pub mean: f64,
    pub sem: f64,
}

/// Mean and standard error (sample deviation over `√n`; 0 for one value).
pub fn mean_sem(xs: &[f64]) -> MeanSem {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sem = if xs.len() < 2 {
        0.0
    } else {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    MeanSem { mean, sem }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Greater,
    Equal,
    Less,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub cases: usize,
    pub rmse: MeanSem,
    pub coverage_model: MeanSem,
    pub coverage_standard: MeanSem,
    pub outcomes: Vec<Outcome>,
    pub greater: usize,
    pub equal: usize,
    pub less: usize,
}

/// Coverages closer than this count as equal.
pub const COVERAGE_TIE: f64 = 1e-9;

pub fn cohort_report(records: &[CaseMetrics]) -> Result<CohortSummary> {
    if records.is_empty() {
        return Err(Error::Config("cohort report needs at least one case".into()));
    }
    let col = |f: fn(&CaseMetrics) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let outcomes: Vec<Outcome> = records
        .iter()
        .map(|r| {
            let d = r.coverage_model - r.coverage_standard;
            if d.abs() <= COVERAGE_TIE {
                Outcome::Equal
            } else if d > 0.0 {
                Outcome::Greater
            } else {
                Outcome::Less
            }
        })
        .collect();
    let count = |o: Outcome| outcomes.iter().filter(|&&x| x == o).count();
    Ok(CohortSummary {
        cases: records.len(),
        rmse: mean_sem(&col(|r| r.rmse)),
        coverage_model: mean_sem(&col(|r| r.coverage_model)),
        coverage_standard: mean_sem(&col(|r| r.coverage_standard)),
        greater: count(Outcome::Greater),
        equal: count(Outcome::Equal),
        less: count(Outcome::Less),
        outcomes,
    })
}

/// Header of the delimited metric records.
pub const METRICS_HEADER: &str = "case,rmse_percent,coverage_model,coverage_standard,plan_volume_cells";

pub fn metrics_csv(records: &[CaseMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{}\n",
            r.name, r.rmse, r.coverage_model, r.coverage_standard, r.plan_volume
        ));
    }
    s
}
