//! DyReLU-B with linear phasing into plain ReLU.
//!
//! Per-sample, per-channel coefficients come from a two-layer hyper-function
//! on the globally pooled input:
//!
//! ```text
//! θ   = 2σ(fc2(relu(fc1(gap(x))))) − 1          ∈ (−1, 1)^{2KC}
//! a_k = α_k + λ_a·θ_{a,k},   b_k = λ_b·θ_{b,k}
//! y_c = max_k (a_k^c·x_c + b_k^c)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

/// Hyper-parameters of the DyReLU-B variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DyReluConfig {
    pub k: usize,
    pub reduction: usize,
    /// Base slopes `α_k`; length `k`.
    pub alpha: Vec<f64>,
    pub lambda_a: f64,
    pub lambda_b: f64,
}

impl Default for DyReluConfig {
    fn default() -> Self {
        Self {
            k: 2,
            reduction: 8,
            alpha: vec![1.0, 0.0],
            lambda_a: 1.0,
            lambda_b: 0.5,
        }
    }
}

impl DyReluConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.alpha.len() != self.k || self.reduction == 0 {
            return Err(Error::Config(format!(
                "dyrelu needs k ≥ 1, {} base slopes and reduction ≥ 1",
                self.k
            )));
        }
        Ok(())
    }

    /// Width of the hidden hyper-function layer for `channels` inputs.
    pub fn hidden(&self, channels: usize) -> usize {
        (channels / self.reduction).max(1)
    }

    /// Shapes of `(fc1.weight, fc1.bias, fc2.weight, fc2.bias)`.
    pub fn hyper_shapes(&self, channels: usize) -> [Vec<usize>; 4] {
        let h = self.hidden(channels);
        let out = 2 * self.k * channels;
        [vec![channels, h], vec![h], vec![h, out], vec![out]]
    }

    pub fn hyper_param_count(&self, channels: usize) -> usize {
        self.hyper_shapes(channels)
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

/// Graph handles for one site's hyper-function parameters.
#[derive(Clone, Copy, Debug)]
pub struct HyperVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// Reshapes `B×C` coefficients so they broadcast over `x`'s trailing dims.
fn per_channel<T: Real>(g: &mut Graph<T>, coeff: Var, x_shape: &[usize]) -> Result<Var> {
    let mut shape = vec![x_shape[0], x_shape[1]];
    shape.resize(x_shape.len(), 1);
    g.reshape(coeff, &shape)
}

/// `max_k (a_k ⊙ x + b_k)` for explicit `B×C` coefficient tensors.
pub fn dyrelu_with_coefficients<T: Real>(g: &mut Graph<T>, x: Var, a: &[Var], b: &[Var]) -> Result<Var> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Input(format!("{} slopes and {} intercepts", a.len(), b.len())));
    }
    let xs = g.shape(x).to_vec();
    let mut out: Option<Var> = None;
    for (&ak, &bk) in a.iter().zip(b) {
        for c in [ak, bk] {
            if g.shape(c) != [xs[0], xs[1]] {
                return Err(Error::shape("dyrelu", &xs, g.shape(c)));
            }
        }
        let ak = per_channel(g, ak, &xs)?;
        let bk = per_channel(g, bk, &xs)?;
        let ax = g.mul(x, ak)?;
        let branch = g.add(ax, bk)?;
        out = Some(match out {
            None => branch,
            Some(prev) => g.maximum(prev, branch)?,
        });
    }
    Ok(out.expect("at least one branch"))
}

/// Full DyReLU-B forward for `x` of shape `B×C×…`.
pub fn dyrelu_forward<T: Real>(g: &mut Graph<T>, x: Var, hyper: &HyperVars, cfg: &DyReluConfig) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if xs.len() < 2 {
        return Err(Error::shape("dyrelu", &xs, &[0, 0]));
    }
    let c = xs[1];
    if g.shape(hyper.fc1_w)[0] != c || g.shape(hyper.fc2_b)[0] != 2 * cfg.k * c {
        return Err(Error::shape("dyrelu", &xs, g.shape(hyper.fc1_w)));
    }
    let pooled = if xs.len() == 4 {
        g.global_avg_pool(x)?
    } else {
        g.reshape(x, &[xs[0], c])?
    };
    let h = g.matmul(pooled, hyper.fc1_w)?;
    let h = g.bias_add(h, hyper.fc1_b)?;
    let h = g.relu(h);
    let z = g.matmul(h, hyper.fc2_w)?;
    let z = g.bias_add(z, hyper.fc2_b)?;
    let s = g.sigmoid(z);
    let theta = g.affine(s, T::from_f64(2.0), -T::one());
    let mut a = Vec::with_capacity(cfg.k);
    let mut b = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let ta = g.slice_cols(theta, k * c, c)?;
        a.push(g.affine(ta, T::from_f64(cfg.lambda_a), T::from_f64(cfg.alpha[k])));
        let tb = g.slice_cols(theta, (cfg.k + k) * c, c)?;
        b.push(g.scale(tb, T::from_f64(cfg.lambda_b)));
    }
    dyrelu_with_coefficients(g, x, &a, &b)
}

/// `β·DyReLU(x) + (1−β)·ReLU(x)`. At `β = 1` the DyReLU branch is returned
/// as is; with no hyper-function (phased out) or `β = 0` only ReLU runs.
pub fn blended_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    hyper: Option<&HyperVars>,
    cfg: &DyReluConfig,
    beta: f64,
) -> Result<Var> {
    let Some(hyper) = hyper.filter(|_| beta > 0.0) else {
        return Ok(g.relu(x));
    };
    let dy = dyrelu_forward(g, x, hyper, cfg)?;
    if beta >= 1.0 {
        return Ok(dy);
    }
    let r = g.relu(x);
    let dy = g.scale(dy, T::from_f64(beta));
    let r = g.scale(r, T::from_f64(1.0 - beta));
    g.add(dy, r)
}

/// Linear decay of the blend weight over epochs `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasingSchedule {
    pub start: u32,
    pub end: u32,
}

impl PhasingSchedule {
    pub fn new(start: u32, end: u32) -> Result<Self> {
        if end <= start {
            return Err(Error::Config(format!("phasing end {end} must follow start {start}")));
        }
        Ok(Self { start, end })
    }

    pub fn beta(&self, epoch: f64) -> f64 {
        let (s, e) = (self.start as f64, self.end as f64);
        if epoch <= s {
            1.0
        } else if epoch >= e {
            0.0
        } else {
            1.0 - (epoch - s) / (e - s)
        }
    }
}

/// Strictly positive entries and total entries.
pub fn positive_count<T: Real>(values: &[T]) -> (usize, usize) {
    let pos = values.iter().filter(|&&v| v > T::zero()).count();
    (pos, values.len())
}

pub fn positive_fraction<T: Real>(values: &[T]) -> f64 {
    let (pos, total) = positive_count(values);
    if total == 0 {
        0.0
    } else {
        pos as f64 / total as f64
    }
}
