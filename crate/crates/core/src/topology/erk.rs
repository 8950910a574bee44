//! Erdős–Rényi-Kernel density allocation.
//!
//! Layer density is proportional to `Σ dims / Π dims` (for a conv kernel
//! `(c_out + c_in + k_h + k_w) / (c_out·c_in·k_h·k_w)`, for a linear layer
//! `(n_in + n_out) / (n_in·n_out)`). Layers whose scaled density exceeds one
//! are made dense and the remaining budget is re-spread over the others until
//! no layer overflows.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Real;

use super::MaskedParam;

#[derive(Clone, Debug, PartialEq)]
pub struct ErkPlan {
    /// Real-valued density per layer.
    pub densities: Vec<f64>,
    /// Integer active count per layer; sums to the rounded target.
    pub counts: Vec<usize>,
    pub global_density: f64,
}

impl ErkPlan {
    pub fn total_active(&self) -> usize {
        self.counts.iter().sum()
    }
}

fn score(shape: &[usize]) -> f64 {
    let sum: usize = shape.iter().sum();
    let prod: usize = shape.iter().product();
    sum as f64 / prod as f64
}

/// Plans densities for `global_density` of the layers' own dense count.
pub fn erk_plan(shapes: &[Vec<usize>], global_density: f64) -> Result<ErkPlan> {
    if !(global_density > 0.0 && global_density < 1.0) {
        return Err(Error::Input(format!("global density {global_density} outside (0, 1)")));
    }
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    erk_plan_for_budget(shapes, global_density * total as f64)
}

/// Plans densities for a real-valued active budget. Used when the budget is
/// set against a larger theoretical count, as under weight sharing.
pub fn erk_plan_for_budget(shapes: &[Vec<usize>], budget: f64) -> Result<ErkPlan> {
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let total: usize = sizes.iter().sum();
    if shapes.is_empty() || total == 0 {
        return Err(Error::Input("no layers to allocate".into()));
    }
    if budget > total as f64 + 1e-9 {
        return Err(Error::InfeasibleDensity(format!(
            "budget {budget} exceeds the {total} available weights"
        )));
    }
    let scores: Vec<f64> = shapes.iter().map(|s| score(s)).collect();
    let mut dense = vec![false; shapes.len()];
    let eps = loop {
        let fixed: f64 = sizes.iter().zip(&dense).filter(|(_, &d)| d).map(|(&n, _)| n as f64).sum();
        let weight: f64 = sizes
            .iter()
            .zip(&scores)
            .zip(&dense)
            .filter(|(_, &d)| !d)
            .map(|((&n, &s), _)| n as f64 * s)
            .sum();
        if weight == 0.0 {
            if budget - fixed > 1e-9 {
                return Err(Error::InfeasibleDensity(format!(
                    "every layer saturated with {} of {budget} weights placed",
                    fixed
                )));
            }
            break 0.0;
        }
        let eps = (budget - fixed) / weight;
        let mut changed = false;
        for (i, &s) in scores.iter().enumerate() {
            if !dense[i] && eps * s > 1.0 {
                dense[i] = true;
                changed = true;
            }
        }
        if !changed {
            break eps;
        }
    };
    let densities: Vec<f64> = scores
        .iter()
        .zip(&dense)
        .map(|(&s, &d)| if d { 1.0 } else { (eps * s).min(1.0) })
        .collect();
    let target = budget.round() as usize;
    let counts = apportion(
        target,
        &densities.iter().zip(&sizes).map(|(&d, &n)| d * n as f64).collect::<Vec<_>>(),
        &sizes,
    )?;
    Ok(ErkPlan {
        densities,
        counts,
        global_density: budget / total as f64,
    })
}

/// Integer split of `total` following real `shares`, capped by `caps`:
/// floors first, then largest fractional remainder, lower index on ties.
pub fn apportion(total: usize, shares: &[f64], caps: &[usize]) -> Result<Vec<usize>> {
    let capacity: usize = caps.iter().sum();
    if total > capacity {
        return Err(Error::InfeasibleDensity(format!("{total} weights exceed capacity {capacity}")));
    }
    let mut counts: Vec<usize> = shares
        .iter()
        .zip(caps)
        .map(|(&s, &c)| (s.max(0.0).floor() as usize).min(c))
        .collect();
    let mut placed: usize = counts.iter().sum();
    // Shares may not sum to `total` exactly; trim from the smallest
    // remainders if floors overshoot.
    while placed > total {
        let i = (0..counts.len())
            .filter(|&i| counts[i] > 0)
            .min_by(|&a, &b| (shares[a] - counts[a] as f64).total_cmp(&(shares[b] - counts[b] as f64)))
            .expect("placed > 0");
        counts[i] -= 1;
        placed -= 1;
    }
    while placed < total {
        let mut order: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] < caps[i]).collect();
        order.sort_by(|&a, &b| {
            let fa = shares[a] - counts[a] as f64;
            let fb = shares[b] - counts[b] as f64;
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for i in order {
            if placed == total {
                break;
            }
            counts[i] += 1;
            placed += 1;
        }
    }
    Ok(counts)
}

/// Fan-in used for initialisation: `c_in·k·k` for conv kernels stored as
/// `[c_out, c_in, k, k]`, `n_in` for linear weights stored as `[n_in, n_out]`.
pub fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        4 => shape[1..].iter().product(),
        2 => shape[0],
        _ => shape.iter().product::<usize>().max(1),
    }
}

/// Places `plan.counts[l]` active bits uniformly at random in each layer and
/// draws the kept weights from `N(0, 2/fan_in)`. Pruned entries are zero.
pub fn erk_init<T: Real, R: Rng + ?Sized>(
    params: &mut [MaskedParam<T>],
    plan: &ErkPlan,
    rng: &mut R,
) -> Result<()> {
    if plan.counts.len() != params.len() {
        return Err(Error::Input("plan does not match layer count".into()));
    }
    for (p, &count) in params.iter_mut().zip(&plan.counts) {
        let n = p.dense_count();
        let std = (2.0 / fan_in(p.shape()) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Input(e.to_string()))?;
        let mut mask = vec![false; n];
        let mut weights = vec![T::zero(); n];
        let mut picked = rand::seq::index::sample(rng, n, count).into_vec();
        picked.sort_unstable();
        for i in picked {
            mask[i] = true;
            weights[i] = T::from_f64(normal.sample(rng));
        }
        p.reset(weights, mask)?;
    }
    Ok(())
}
