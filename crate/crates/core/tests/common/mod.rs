#![allow(dead_code)]

use east_core::model::{DenseKind, Phase};
use east_core::tensor::{GradMode, Graph, Tensor, Var};
use east_core::{Model, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-8;
pub const COORDS: usize = 20;

#[derive(Debug, Default)]
pub struct CheckStats {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl CheckStats {
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    fn record(&mut self, what: String, analytic: f64, numeric: f64) {
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if diff <= ABS_FLOOR { 0.0 } else { diff / scale };
        self.checked += 1;
        self.worst = self.worst.max(rel);
        if rel >= REL_TOL {
            self.failures
                .push(format!("{what}: analytic {analytic:e} numeric {numeric:e} rel {rel:e}"));
        }
    }

    pub fn merge(&mut self, o: CheckStats) {
        self.checked += o.checked;
        self.skipped += o.skipped;
        self.worst = self.worst.max(o.worst);
        self.failures.extend(o.failures);
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Up to [`COORDS`] distinct coordinates of an `n`-element tensor.
pub fn coords(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    if n <= COORDS {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, COORDS).into_vec()
    }
}

/// Central-difference check of `f` with respect to every input tensor.
///
/// `f` builds a scalar loss from one leaf per input. Coordinates whose
/// perturbed forwards take a different branch at any relu or maximum are
/// skipped.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> CheckStats
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> (f64, Option<u64>) {
        let mut g = Graph::new(GradMode::Dense);
        g.track_kinks();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars).expect("forward");
        (g.value(loss).data()[0], g.kink_signature())
    };
    let mut g = Graph::new(GradMode::Dense);
    g.track_kinks();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars).expect("forward");
    let base = g.kink_signature();
    g.backward(loss).expect("backward");
    let mut stats = CheckStats::default();
    let mut r = rng(seed);
    for (k, (t, &v)) in inputs.iter().zip(&vars).enumerate() {
        let grad = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for i in coords(&mut r, t.len()) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let (fp, sp) = eval(&plus);
            let (fm, sm) = eval(&minus);
            if sp != base || sm != base {
                stats.skipped += 1;
                continue;
            }
            stats.record(format!("input {k}[{i}]"), grad[i], (fp - fm) / (2.0 * H));
        }
    }
    stats
}

/// A fixed random linear read-out so that every output entry matters.
pub fn projection_loss(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let r = random_tensor(&mut rng(seed), &shape, 1.0);
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

fn model_loss(m: &Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> (f64, Option<u64>) {
    let mut g = Graph::new(GradMode::Dense);
    g.track_kinks();
    let xv = g.constant(x.clone());
    let out = m.forward(&mut g, xv, Phase::Train).expect("forward");
    let loss = g.softmax_cross_entropy(out.logits, labels).expect("loss");
    (g.value(loss).data()[0], g.kink_signature())
}

/// Finite-difference check of every stored parameter of `model` (active
/// masked coordinates and every dense tensor) under a train-phase forward.
pub fn model_gradcheck(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize], seed: u64) -> CheckStats {
    let mut g = Graph::new(GradMode::Dense);
    g.track_kinks();
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, xv, Phase::Train).expect("forward");
    let loss = g.softmax_cross_entropy(out.logits, labels).expect("loss");
    let base = g.kink_signature();
    g.backward(loss).expect("backward");
    let grads = model.gradients(&g);
    let mut stats = CheckStats::default();
    let mut r = rng(seed);
    let probe = |stats: &mut CheckStats, what: String, analytic: f64, set: &dyn Fn(&mut Model<f64>, f64)| {
        let mut p = model.clone();
        set(&mut p, H);
        let (fp, sp) = model_loss(&p, x, labels);
        let mut m = model.clone();
        set(&mut m, -H);
        let (fm, sm) = model_loss(&m, x, labels);
        if sp != base || sm != base {
            stats.skipped += 1;
            return;
        }
        stats.record(what, analytic, (fp - fm) / (2.0 * H));
    };
    for (l, p) in model.store.masked.iter().enumerate() {
        let support = p.support();
        let g = grads.masked[l].as_ref().expect("masked gradient");
        for j in coords(&mut r, support.len()) {
            let i = support[j] as usize;
            probe(&mut stats, format!("{}[{i}]", p.name()), g[i], &|m, d| {
                m.store.masked[l].weights_mut()[i] += d;
            });
        }
    }
    for (k, d) in model.store.dense.iter().enumerate() {
        let Some(d) = d else { continue };
        let g = grads.dense[k].clone().unwrap_or_else(|| vec![0.0; d.value.len()]);
        for i in coords(&mut r, d.value.len()) {
            probe(&mut stats, format!("{}[{i}]", d.name), g[i], &|m, dv| {
                m.store.dense[k].as_mut().unwrap().value.data_mut()[i] += dv;
            });
        }
    }
    stats
}

/// Sets every sharing gain to a value drawn from `[0.5, 1.5)`.
pub fn randomise_gains(model: &mut Model<f64>, seed: u64) {
    let mut r = rng(seed);
    for d in model.store.dense.iter_mut().flatten() {
        if d.kind == DenseKind::Gain {
            for v in d.value.data_mut() {
                *v = r.random_range(0.5..1.5);
            }
        }
    }
}

/// Sets BatchNorm scales and shifts to non-default values.
pub fn randomise_bn(model: &mut Model<f64>, seed: u64) {
    let mut r = rng(seed);
    for d in model.store.dense.iter_mut().flatten() {
        match d.kind {
            DenseKind::BnScale => d.value.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.5..1.5)),
            DenseKind::BnShift | DenseKind::Bias => {
                d.value.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3))
            }
            _ => {}
        }
    }
}

pub mod primitives;
pub mod oracles;
