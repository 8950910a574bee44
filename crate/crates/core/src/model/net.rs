use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::activation::{blended_forward, positive_count, HyperVars};
use crate::error::{Error, Result};
use crate::sharing::Census;
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::topology::{fan_in, MaskedParam};

use super::spec::{ArchSpec, Body, BlockLayout, ConvRef, DenseKind, Layout, LinearRef, Storage};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParam<T> {
    pub name: String,
    pub kind: DenseKind,
    pub value: Tensor<T>,
}

/// Running BatchNorm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBuffers<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Stored parameters. Removed DyReLU hyper-functions leave `None` behind so
/// that indices stay stable.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    pub masked: Vec<MaskedParam<T>>,
    pub dense: Vec<Option<DenseParam<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn masked_key(i: usize) -> u64 {
        2 * i as u64
    }

    pub fn dense_key(i: usize) -> u64 {
        2 * i as u64 + 1
    }

    /// Stored trainable scalars: dense size of every stored masked tensor plus
    /// every dense parameter still present.
    pub fn trainable_count(&self) -> usize {
        self.masked.iter().map(|p| p.dense_count()).sum::<usize>()
            + self.dense.iter().flatten().map(|d| d.value.len()).sum::<usize>()
    }

    pub fn active_count(&self) -> usize {
        self.masked.iter().map(|p| p.active_count()).sum()
    }
}

/// Parameter gradients read back from a graph, aligned with the store.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub masked: Vec<Option<Vec<T>>>,
    pub dense: Vec<Option<Vec<T>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Output of one forward pass.
#[derive(Debug)]
pub struct Forward<T> {
    pub logits: Var,
    /// Batch statistics `(bn index, mean, unbiased var)` in train phase.
    pub bn_stats: Vec<(usize, Vec<T>, Vec<T>)>,
    /// `(positive, total)` pre-activation entries per activation site.
    pub preact: Vec<(usize, usize)>,
}

impl<T> Forward<T> {
    /// Positive fraction over all sites.
    pub fn preact_fraction(&self) -> f64 {
        let (p, t) = self
            .preact
            .iter()
            .fold((0usize, 0usize), |(p, t), &(a, b)| (p + a, t + b));
        if t == 0 {
            0.0
        } else {
            p as f64 / t as f64
        }
    }
}

/// An instantiated network.
#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: ArchSpec,
    layout: Layout,
    pub store: ParamStore<T>,
    pub bn: Vec<BnBuffers<T>>,
    beta: f64,
}

impl<T: Real> Model<T> {
    /// Builds the network with Kaiming-normal weights (all entries active),
    /// unit BatchNorm scales, zero shifts and biases, unit gains, and
    /// PyTorch-style uniform hyper-function weights.
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Self> {
        let layout = Layout::new(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masked = Vec::with_capacity(layout.stored.len());
        for &w in &layout.stored {
            let geom = &layout.weights[w];
            let std = (2.0 / fan_in(&geom.shape) as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::Input(e.to_string()))?;
            let data = (0..geom.numel()).map(|_| T::from_f64(normal.sample(&mut rng))).collect();
            masked.push(MaskedParam::dense(geom.name.clone(), Tensor::new(&geom.shape, data)?));
        }
        let mut dense = Vec::with_capacity(layout.dense.len());
        for (i, d) in layout.dense.iter().enumerate() {
            let value = match d.kind {
                DenseKind::BnScale | DenseKind::Gain => Tensor::full(&d.shape, T::one()),
                DenseKind::BnShift | DenseKind::Bias => Tensor::zeros(&d.shape),
                DenseKind::Hyper => {
                    let fan = hyper_fan_in(&layout, i);
                    let bound = 1.0 / (fan as f64).sqrt();
                    let u = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Input(e.to_string()))?;
                    let n: usize = d.shape.iter().product();
                    Tensor::new(&d.shape, (0..n).map(|_| T::from_f64(u.sample(&mut rng))).collect())?
                }
            };
            dense.push(Some(DenseParam {
                name: d.name.clone(),
                kind: d.kind,
                value,
            }));
        }
        let bn = layout
            .bns
            .iter()
            .map(|b| BnBuffers {
                mean: vec![T::zero(); b.channels],
                var: vec![T::one(); b.channels],
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layout,
            store: ParamStore { masked, dense },
            bn,
            beta: if spec.activation == super::ActivationMode::DyreluPhased { 1.0 } else { 0.0 },
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Whether activation site `a` still carries its hyper-function.
    pub fn hyper_alive(&self, a: usize) -> bool {
        self.layout.acts[a]
            .hyper
            .is_some_and(|ids| ids.iter().all(|&i| self.store.dense[i].is_some()))
    }

    /// Number of sites still running DyReLU.
    pub fn dyrelu_sites(&self) -> usize {
        (0..self.layout.acts.len()).filter(|&a| self.hyper_alive(a)).count()
    }

    /// Sets the blend weight. At zero every hyper-function is removed from
    /// the store for good.
    pub fn set_beta(&mut self, beta: f64) {
        self.beta = beta.clamp(0.0, 1.0);
        if self.beta == 0.0 {
            self.phase_out();
        }
    }

    /// Drops every DyReLU hyper-function parameter. Returns how many scalars
    /// were removed.
    pub fn phase_out(&mut self) -> usize {
        let mut removed = 0;
        for (d, geom) in self.store.dense.iter_mut().zip(&self.layout.dense) {
            if geom.kind == DenseKind::Hyper {
                if let Some(p) = d.take() {
                    removed += p.value.len();
                }
            }
        }
        self.beta = 0.0;
        removed
    }

    /// Census of the live model.
    pub fn census(&self) -> Census {
        Census {
            theoretical: self.layout.theoretical(),
            stored: self.layout.stored_count(),
            replaced: self.layout.replaced(),
            gains: self.layout.gain_count(),
            maskable: self.layout.maskable(),
            unique_active: self.store.active_count(),
        }
    }

    /// Global sparsity over unique learnable tensors against the
    /// unmodified architecture.
    pub fn sparsity(&self) -> f64 {
        self.census().sparsity()
    }

    fn weight_var(&self, g: &mut Graph<T>, w: usize) -> Result<Var> {
        match self.layout.weights[w].storage {
            Storage::Own(m) => {
                let p = &self.store.masked[m];
                Ok(g.param(ParamStore::<T>::masked_key(m), p.weights(), Some(p.support())))
            }
            Storage::Shared { donor, gain } => {
                let base = self.weight_var(g, donor)?;
                let s = self.dense_var(g, gain)?;
                g.scalar_mul(s, base)
            }
        }
    }

    fn dense_var(&self, g: &mut Graph<T>, i: usize) -> Result<Var> {
        let p = self.store.dense[i]
            .as_ref()
            .ok_or_else(|| Error::State(format!("parameter {} was removed", self.layout.dense[i].name)))?;
        Ok(g.param(ParamStore::<T>::dense_key(i), &p.value, None))
    }

    fn conv_bn(&self, g: &mut Graph<T>, x: Var, c: &ConvRef, phase: Phase, out: &mut Forward<T>) -> Result<Var> {
        let w = self.weight_var(g, c.weight)?;
        let y = g.conv2d(x, w, c.stride, c.pad)?;
        let bn = &self.layout.bns[c.bn];
        let gamma = self.dense_var(g, bn.gamma)?;
        let beta = self.dense_var(g, bn.beta)?;
        let eps = T::from_f64(BN_EPS);
        match phase {
            Phase::Train => {
                let (v, mean, var) = g.batch_norm_train(y, gamma, beta, eps)?;
                out.bn_stats.push((c.bn, mean, var));
                Ok(v)
            }
            Phase::Eval => {
                let buf = &self.bn[c.bn];
                g.batch_norm_eval(y, gamma, beta, &buf.mean, &buf.var, eps)
            }
        }
    }

    fn activate(&self, g: &mut Graph<T>, x: Var, site: usize, out: &mut Forward<T>) -> Result<Var> {
        out.preact[site] = positive_count(g.value(x).data());
        let hyper = if self.beta > 0.0 && self.hyper_alive(site) {
            let ids = self.layout.acts[site].hyper.expect("alive site has ids");
            Some(HyperVars {
                fc1_w: self.dense_var(g, ids[0])?,
                fc1_b: self.dense_var(g, ids[1])?,
                fc2_w: self.dense_var(g, ids[2])?,
                fc2_b: self.dense_var(g, ids[3])?,
            })
        } else {
            None
        };
        blended_forward(g, x, hyper.as_ref(), &self.spec.dyrelu, self.beta)
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, l: &LinearRef) -> Result<Var> {
        let w = self.weight_var(g, l.weight)?;
        let b = self.dense_var(g, l.bias)?;
        let y = g.matmul(x, w)?;
        g.bias_add(y, b)
    }

    fn block(&self, g: &mut Graph<T>, x: Var, b: &BlockLayout, phase: Phase, out: &mut Forward<T>) -> Result<Var> {
        let mut h = x;
        for (j, c) in b.convs.iter().enumerate() {
            h = self.conv_bn(g, h, c, phase, out)?;
            if let Some(&site) = b.inner_acts.get(j) {
                h = self.activate(g, h, site, out)?;
            }
        }
        let skip = match &b.shortcut {
            Some(c) => self.conv_bn(g, x, c, phase, out)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        self.activate(g, sum, b.out_act, out)
    }

    /// Runs the network on `x` (`B×C×H×W`, or `B×D` for the MLP).
    pub fn forward(&self, g: &mut Graph<T>, x: Var, phase: Phase) -> Result<Forward<T>> {
        let [c, h, w] = self.spec.input;
        let xs = g.shape(x).to_vec();
        let per_sample: usize = xs.iter().skip(1).product();
        if xs.is_empty() || per_sample != c * h * w {
            return Err(Error::shape("model input", &xs, &[0, c, h, w]));
        }
        let mut out = Forward {
            logits: x,
            bn_stats: Vec::new(),
            preact: vec![(0, 0); self.layout.acts.len()],
        };
        let logits = match &self.layout.body {
            Body::Mlp { layers, acts } => {
                let mut h = g.reshape(x, &[xs[0], per_sample])?;
                for (i, l) in layers.iter().enumerate() {
                    h = self.linear(g, h, l)?;
                    if let Some(&site) = acts.get(i) {
                        h = self.activate(g, h, site, &mut out)?;
                    }
                }
                h
            }
            Body::Resnet {
                stem,
                stem_act,
                stages,
                fc,
            } => {
                let x = g.reshape(x, &[xs[0], c, h, w])?;
                let mut h = self.conv_bn(g, x, stem, phase, &mut out)?;
                h = self.activate(g, h, *stem_act, &mut out)?;
                for stage in stages {
                    for b in stage {
                        h = self.block(g, h, b, phase, &mut out)?;
                    }
                }
                let pooled = g.global_avg_pool(h)?;
                self.linear(g, pooled, fc)?
            }
        };
        out.logits = logits;
        Ok(out)
    }

    /// Folds train-phase batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(usize, Vec<T>, Vec<T>)]) {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        for (i, mean, var) in stats {
            let buf = &mut self.bn[*i];
            for (r, &v) in buf.mean.iter_mut().zip(mean) {
                *r = keep * *r + m * v;
            }
            for (r, &v) in buf.var.iter_mut().zip(var) {
                *r = keep * *r + m * v;
            }
        }
    }

    /// Reads every parameter gradient recorded on `g`.
    pub fn gradients(&self, g: &Graph<T>) -> Gradients<T> {
        let read = |key: u64| g.param_var(key).and_then(|v| g.grad(v)).map(<[T]>::to_vec);
        Gradients {
            masked: (0..self.store.masked.len())
                .map(|i| read(ParamStore::<T>::masked_key(i)))
                .collect(),
            dense: (0..self.store.dense.len())
                .map(|i| read(ParamStore::<T>::dense_key(i)))
                .collect(),
        }
    }

    /// Converts to another element type, keeping masks and state.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            store: ParamStore {
                masked: self
                    .store
                    .masked
                    .iter()
                    .map(|p| {
                        MaskedParam::with_mask(p.name(), p.weights().cast(), p.mask().to_vec())
                            .expect("same shape")
                    })
                    .collect(),
                dense: self
                    .store
                    .dense
                    .iter()
                    .map(|d| {
                        d.as_ref().map(|d| DenseParam {
                            name: d.name.clone(),
                            kind: d.kind,
                            value: d.value.cast(),
                        })
                    })
                    .collect(),
            },
            bn: self
                .bn
                .iter()
                .map(|b| BnBuffers {
                    mean: b.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    var: b.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
            beta: self.beta,
        }
    }

    /// Re-initialises every stored masked weight from `N(0, 2/fan_in)` using
    /// `rng`, keeping masks. Used by tests that need non-default weights.
    pub fn reinit_masked<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        for p in &mut self.store.masked {
            let std = scale * (2.0 / fan_in(p.shape()) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for w in p.weights_mut() {
                *w = T::from_f64(normal.sample(rng));
            }
            p.apply_mask();
        }
    }
}

/// Fan-in of hyper-function tensor `i`: its weight's input width.
fn hyper_fan_in(layout: &Layout, i: usize) -> usize {
    let d = &layout.dense[i];
    if d.shape.len() == 2 {
        return d.shape[0];
    }
    // Bias: fan-in of the weight immediately before it.
    layout.dense[i - 1].shape[0]
}
