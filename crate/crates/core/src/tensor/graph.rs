use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::conv::{self, ConvGeom};
use super::{Real, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which weight-gradient entries the backward pass materialises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Every entry, including masked-out positions. Needed for regrowth.
    Dense,
    /// Only entries on each parameter's support (its active mask bits).
    Masked,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Add { a: Var, b: Var, block: usize },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var, block: usize },
    Affine { a: Var, scale: T },
    ScalarMul { s: Var, a: Var },
    Relu { a: Var },
    Maximum { a: Var, b: Var },
    Sigmoid { a: Var },
    GlobalAvgPool { a: Var, spatial: usize },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        spatial: usize,
        train: bool,
    },
    Reshape { a: Var },
    BiasAdd { a: Var, bias: Var },
    SliceCols { a: Var, start: usize, cols: usize },
    Sum { a: Var },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    support: Option<Arc<[u32]>>,
    op: Op<T>,
}

/// Tape of primitive operations with reverse-mode differentiation.
///
/// Nodes are appended in execution order; [`Graph::backward`] walks them in
/// reverse and accumulates into per-node gradient buffers.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    mode: GradMode,
    params: HashMap<u64, Var>,
    kinks: Option<u64>,
}

fn grad_buf<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Number of consecutive `a` elements covered by one `b` element when `b`
/// equals `a`'s leading dims followed by singleton dims.
fn broadcast_block(a: &[usize], b: &[usize]) -> Option<usize> {
    if a == b {
        return Some(1);
    }
    if a.len() != b.len() {
        return None;
    }
    let lead = b.iter().zip(a).take_while(|(x, y)| x == y).count();
    if b[lead..].iter().all(|&d| d == 1) {
        Some(a[lead..].iter().product())
    } else {
        None
    }
}

impl<T: Real> Graph<T> {
    pub fn new(mode: GradMode) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            mode,
            params: HashMap::new(),
            kinks: None,
        }
    }

    pub fn mode(&self) -> GradMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Starts hashing the branch pattern of every relu and maximum.
    ///
    /// Finite-difference checks compare signatures of the perturbed forwards
    /// to discard coordinates whose perturbation crosses a kink.
    pub fn track_kinks(&mut self) {
        self.kinks = Some(FNV_OFFSET);
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    fn note_kinks(&mut self, bits: impl Iterator<Item = bool>) {
        if let Some(h) = self.kinks.as_mut() {
            for b in bits {
                *h = (*h ^ b as u64).wrapping_mul(FNV_PRIME);
            }
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            support: None,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Binds a parameter under `key`. Repeated binds return the same node, so
    /// every use site accumulates into one gradient.
    pub fn param(&mut self, key: u64, value: &Tensor<T>, support: Option<Arc<[u32]>>) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), true, Op::Leaf);
        self.nodes[v.0].support = support;
        self.params.insert(key, v);
        v
    }

    pub fn param_var(&self, key: u64) -> Option<Var> {
        self.params.get(&key).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let x = av[i * k + kk];
                if x == T::zero() {
                    continue;
                }
                for (o, &y) in orow.iter_mut().zip(&bv[kk * n..(kk + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// Cross-correlation of `x` (`B×C_in×H×W`) with `w` (`C_out×C_in×k×k`).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        let out = conv::forward(&geom, self.value(x).data(), self.value(w).data());
        let rg = self.rg(x) || self.rg(w);
        let value = Tensor::new(&geom.out_shape(), out)?;
        Ok(self.push(value, rg, Op::Conv2d { x, w, geom }))
    }

    /// `a + b`, where `b` may broadcast over trailing singleton dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let block = broadcast_block(self.shape(a), self.shape(b))
            .ok_or_else(|| Error::shape("add", self.shape(a), self.shape(b)))?;
        let bv = self.value(b).data();
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(block)
            .zip(bv)
            .flat_map(|(c, &y)| c.iter().map(move |&x| x + y))
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Add { a, b, block }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("sub", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Sub { a, b }))
    }

    /// `a ⊙ b`, where `b` may broadcast over trailing singleton dims.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let block = broadcast_block(self.shape(a), self.shape(b))
            .ok_or_else(|| Error::shape("mul", self.shape(a), self.shape(b)))?;
        let bv = self.value(b).data();
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(block)
            .zip(bv)
            .flat_map(|(c, &y)| c.iter().map(move |&x| x * y))
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Mul { a, b, block }))
    }

    pub fn scale(&mut self, a: Var, scale: T) -> Var {
        self.affine(a, scale, T::zero())
    }

    /// `scale * a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let src = self.value(a);
        let out = src.data().iter().map(|&x| scale * x + shift).collect();
        let value = Tensor::new(src.shape(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(value, rg, Op::Affine { a, scale })
    }

    /// Multiplies `a` by the single-element tensor `s`. The result keeps the
    /// gradient support of `a`.
    pub fn scalar_mul(&mut self, s: Var, a: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scalar_mul", self.shape(s), &[1]));
        }
        let k = self.value(s).data()[0];
        let src = self.value(a);
        let out = src.data().iter().map(|&x| k * x).collect();
        let value = Tensor::new(src.shape(), out)?;
        let rg = self.rg(s) || self.rg(a);
        let support = self.nodes[a.0].support.clone();
        let v = self.push(value, rg, Op::ScalarMul { s, a });
        self.nodes[v.0].support = support;
        Ok(v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let out: Vec<T> = src
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let value = Tensor::new(src.shape(), out).expect("same shape");
        if self.kinks.is_some() {
            let bits: Vec<bool> = self.value(a).data().iter().map(|&x| x > T::zero()).collect();
            self.note_kinks(bits.into_iter());
        }
        let rg = self.rg(a);
        self.push(value, rg, Op::Relu { a })
    }

    /// Elementwise maximum; ties resolve to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("maximum", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        if self.kinks.is_some() {
            let bits: Vec<bool> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x >= y)
                .collect();
            self.note_kinks(bits.into_iter());
        }
        let value = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Maximum { a, b }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let out = src
            .data()
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let value = Tensor::new(src.shape(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(value, rg, Op::Sigmoid { a })
    }

    /// Mean over the spatial dims of a `B×C×H×W` tensor, giving `B×C`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("global_avg_pool", &shape, &[0, 0, 0, 0]));
        }
        let spatial = shape[2] * shape[3];
        let inv = T::one() / T::from_f64(spatial as f64);
        let out = self
            .value(a)
            .data()
            .chunks(spatial)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&shape[..2], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::GlobalAvgPool { a, spatial }))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape("batchnorm", s, self.shape(gamma)));
        }
        let (b, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batchnorm", s, self.shape(gamma)));
        }
        Ok((b, c, spatial))
    }

    /// Batch normalisation with batch statistics. Returns the output together
    /// with the per-channel batch mean and unbiased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (b, c, spatial) = self.bn_dims(x, gamma, beta)?;
        let n = b * spatial;
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for (ch, m) in mean.iter_mut().enumerate() {
                let off = (bi * c + ch) * spatial;
                *m += xv[off..off + spatial].iter().copied().sum::<T>();
            }
        }
        let nf = T::from_f64(n as f64);
        mean.iter_mut().for_each(|m| *m /= nf);
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * spatial;
                var[ch] += xv[off..off + spatial]
                    .iter()
                    .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<T>();
            }
        }
        let biased: Vec<T> = var.iter().map(|&v| v / nf).collect();
        let unbiased: Vec<T> = if n > 1 {
            var.iter().map(|&v| v / T::from_f64((n - 1) as f64)).collect()
        } else {
            biased.clone()
        };
        let inv_std: Vec<T> = biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let v = self.bn_apply(x, gamma, beta, &mean, &inv_std, spatial, true)?;
        Ok((v, mean, unbiased))
    }

    /// Batch normalisation with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (_, c, spatial) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batchnorm", &[c], &[mean.len(), var.len()]));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, &inv_std, spatial, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        spatial: usize,
        train: bool,
    ) -> Result<Var> {
        let c = mean.len();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (chunk_idx, chunk) in xv.chunks(spatial).enumerate() {
            let ch = chunk_idx % c;
            for &v in chunk {
                let h = (v - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(gv[ch] * h + bv[ch]);
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std: inv_std.to_vec(),
            spatial,
            train,
        };
        Ok(self.push(value, rg, op))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Reshape { a }))
    }

    /// Collapses all dims after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let rest: usize = s[1..].iter().product();
        let b = s[0];
        self.reshape(a, &[b, rest])
    }

    /// Adds a length-`N` bias to every row of an `M×N` matrix.
    pub fn bias_add(&mut self, a: Var, bias: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || self.value(bias).len() != s[1] {
            return Err(Error::shape("bias_add", s, self.shape(bias)));
        }
        let n = s[1];
        let bv = self.value(bias).data();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, rg, Op::BiasAdd { a, bias }))
    }

    /// Columns `start..start+cols` of an `M×N` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, cols: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start + cols > s[1] {
            return Err(Error::shape("slice_cols", s, &[start, cols]));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * cols);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + cols]);
        }
        let value = Tensor::new(&[m, cols], out)?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::SliceCols { a, start, cols }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), rg, Op::Sum { a })
    }

    /// Mean cross-entropy of row-wise softmax over `B×K` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", s, &[labels.len()]));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} outside {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = T::zero();
        for (row, &label) in lv.chunks(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
            let total: T = exps.iter().copied().sum();
            loss += total.ln() - (row[label] - max);
            probs.extend(exps.iter().map(|&e| e / total));
        }
        loss /= T::from_f64(b as f64);
        let rg = self.rg(logits);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), rg, op))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let mode = self.mode;
        macro_rules! with_buf {
            ($v:expr, |$d:ident| $body:expr) => {
                if let Some($d) = grad_buf(grads, nodes, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let support = |v: Var| match mode {
            GradMode::Dense => None,
            GradMode::Masked => nodes[v.0].support.as_deref(),
        };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (val(a), val(b));
                with_buf!(a, |da| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            da[r * k + kk] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<T>();
                        }
                    }
                });
                with_buf!(b, |db| match support(b) {
                    None => {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for kk in 0..k {
                                let x = av[r * k + kk];
                                if x == T::zero() {
                                    continue;
                                }
                                for (d, &y) in db[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                    *d += x * y;
                                }
                            }
                        }
                    }
                    Some(idx) => {
                        for &flat in idx {
                            let (kk, j) = (flat as usize / n, flat as usize % n);
                            let mut acc = T::zero();
                            for r in 0..m {
                                acc += av[r * k + kk] * g[r * n + j];
                            }
                            db[flat as usize] += acc;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, geom } => {
                let (x, w) = (*x, *w);
                with_buf!(x, |dx| conv::backward_input(geom, val(w), g, dx));
                with_buf!(w, |dw| conv::backward_weight(geom, val(x), g, support(w), dw));
            }
            &Op::Add { a, b, block } => {
                with_buf!(a, |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
                with_buf!(b, |db| {
                    for (j, chunk) in g.chunks(block).enumerate() {
                        db[j] += chunk.iter().copied().sum::<T>();
                    }
                });
            }
            &Op::Sub { a, b } => {
                with_buf!(a, |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
                with_buf!(b, |db| db.iter_mut().zip(g).for_each(|(d, &x)| *d -= x));
            }
            &Op::Mul { a, b, block } => {
                let (av, bv) = (val(a), val(b));
                with_buf!(a, |da| {
                    for ((dc, gc), &y) in da.chunks_mut(block).zip(g.chunks(block)).zip(bv) {
                        dc.iter_mut().zip(gc).for_each(|(d, &x)| *d += x * y);
                    }
                });
                with_buf!(b, |db| {
                    for (j, (gc, ac)) in g.chunks(block).zip(av.chunks(block)).enumerate() {
                        db[j] += gc.iter().zip(ac).map(|(&x, &y)| x * y).sum::<T>();
                    }
                });
            }
            &Op::Affine { a, scale } => {
                with_buf!(a, |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += scale * x));
            }
            &Op::ScalarMul { s, a } => {
                let k = val(s)[0];
                let av = val(a);
                with_buf!(a, |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += k * x));
                with_buf!(s, |ds| {
                    ds[0] += g.iter().zip(av).map(|(&x, &y)| x * y).sum::<T>();
                });
            }
            &Op::Relu { a } => {
                let av = val(a);
                with_buf!(a, |da| {
                    for ((d, &x), &z) in da.iter_mut().zip(g).zip(av) {
                        if z > T::zero() {
                            *d += x;
                        }
                    }
                });
            }
            &Op::Maximum { a, b } => {
                let (av, bv) = (val(a), val(b));
                with_buf!(a, |da| {
                    for (j, d) in da.iter_mut().enumerate() {
                        if av[j] >= bv[j] {
                            *d += g[j];
                        }
                    }
                });
                with_buf!(b, |db| {
                    for (j, d) in db.iter_mut().enumerate() {
                        if av[j] < bv[j] {
                            *d += g[j];
                        }
                    }
                });
            }
            &Op::Sigmoid { a } => {
                let y = nodes[i].value.data();
                with_buf!(a, |da| {
                    for ((d, &x), &s) in da.iter_mut().zip(g).zip(y) {
                        *d += x * s * (T::one() - s);
                    }
                });
            }
            &Op::GlobalAvgPool { a, spatial } => {
                let inv = T::one() / T::from_f64(spatial as f64);
                with_buf!(a, |da| {
                    for (chunk, &x) in da.chunks_mut(spatial).zip(g) {
                        chunk.iter_mut().for_each(|d| *d += x * inv);
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                spatial,
                train,
            } => {
                let (x, gamma, beta, spatial, train) = (*x, *gamma, *beta, *spatial, *train);
                let c = inv_std.len();
                let gv = val(gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dot = vec![T::zero(); c];
                for (j, (gc, hc)) in g.chunks(spatial).zip(xhat.chunks(spatial)).enumerate() {
                    let ch = j % c;
                    dbeta[ch] += gc.iter().copied().sum::<T>();
                    dot[ch] += gc.iter().zip(hc).map(|(&a, &b)| a * b).sum::<T>();
                }
                dgamma.copy_from_slice(&dot);
                with_buf!(x, |dx| {
                    let n = T::from_f64((g.len() / c) as f64);
                    for (j, ((dc, gc), hc)) in dx
                        .chunks_mut(spatial)
                        .zip(g.chunks(spatial))
                        .zip(xhat.chunks(spatial))
                        .enumerate()
                    {
                        let ch = j % c;
                        let k = gv[ch] * inv_std[ch];
                        if train {
                            let mean_g = dbeta[ch] / n;
                            let mean_gh = dot[ch] / n;
                            for ((d, &gg), &h) in dc.iter_mut().zip(gc).zip(hc) {
                                *d += k * (gg - mean_g - h * mean_gh);
                            }
                        } else {
                            for (d, &gg) in dc.iter_mut().zip(gc) {
                                *d += k * gg;
                            }
                        }
                    }
                });
                with_buf!(gamma, |d| d.iter_mut().zip(&dgamma).for_each(|(d, &v)| *d += v));
                with_buf!(beta, |d| d.iter_mut().zip(&dbeta).for_each(|(d, &v)| *d += v));
            }
            &Op::Reshape { a } => {
                with_buf!(a, |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
            }
            &Op::BiasAdd { a, bias } => {
                let n = nodes[bias.0].value.len();
                with_buf!(a, |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
                with_buf!(bias, |db| {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                    }
                });
            }
            &Op::SliceCols { a, start, cols } => {
                let n = nodes[a.0].value.shape()[1];
                with_buf!(a, |da| {
                    for (r, row) in g.chunks(cols).enumerate() {
                        let dst = &mut da[r * n + start..r * n + start + cols];
                        dst.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                    }
                });
            }
            &Op::Sum { a } => {
                let x = g[0];
                with_buf!(a, |da| da.iter_mut().for_each(|d| *d += x));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / T::from_f64(labels.len() as f64);
                with_buf!(*logits, |dl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let target = if j == label { T::one() } else { T::zero() };
                            dl[r * k + j] += scale * (probs[r * k + j] - target);
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new(GradMode::Dense);
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new(GradMode::Dense);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let mut g = Graph::new(GradMode::Dense);
        let x = g.constant(Tensor::<f64>::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn centred_delta_kernel_is_identity() {
        let mut g = Graph::new(GradMode::Dense);
        let xs: Vec<f64> = (0..2 * 5 * 5).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = g.constant(t(&[1, 2, 5, 5], &xs));
        let mut wv = vec![0.0; 2 * 2 * 9];
        wv[4] = 1.0; // out 0 <- in 0 centre
        wv[18 + 9 + 4] = 1.0; // out 1 <- in 1 centre
        let w = g.constant(t(&[2, 2, 3, 3], &wv));
        let y = g.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &xs[..]);
    }

    #[test]
    fn relu_and_uniform_cross_entropy() {
        let mut g = Graph::new(GradMode::Dense);
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let logits = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let loss = g.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = Graph::<f64>::new(GradMode::Dense);
        let logits = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            g.softmax_cross_entropy(logits, &[0, 3]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let mut g = Graph::new(GradMode::Dense);
        let logits = g.constant(t(&[1, 2], &[1000.0, 1000.0]));
        let loss = g.softmax_cross_entropy(logits, &[1]).unwrap();
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn maximum_routes_ties_to_first_branch() {
        let mut g = Graph::new(GradMode::Dense);
        let a = g.leaf(t(&[3], &[1.0, 2.0, 5.0]));
        let b = g.leaf(t(&[3], &[1.0, 3.0, 4.0]));
        let m = g.maximum(a, b).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 0.0, 1.0]);
        assert_eq!(g.grad(b).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn reused_leaf_accumulates_both_uses() {
        let mut g = Graph::new(GradMode::Dense);
        let x = g.leaf(t(&[2], &[3.0, -2.0]));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap(); // 2x^2
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0, -8.0]);
    }

    #[test]
    fn parameters_bind_once_per_key() {
        let mut g = Graph::new(GradMode::Dense);
        let w = t(&[1], &[2.0]);
        let a = g.param(7, &w, None);
        let b = g.param(7, &w, None);
        assert_eq!(a, b);
        assert_eq!(g.param_var(7), Some(a));
    }

    #[test]
    fn masked_mode_restricts_weight_gradient_to_support() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let w = t(&[2, 2], &[0.5, 0.0, 0.0, -1.0]);
        let support: Arc<[u32]> = Arc::from(vec![0u32, 3]);
        let run = |mode| {
            let mut g = Graph::new(mode);
            let xv = g.constant(x.clone());
            let wv = g.param(0, &w, Some(support.clone()));
            let y = g.matmul(xv, wv).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            g.grad(wv).unwrap().to_vec()
        };
        assert_eq!(run(GradMode::Dense), vec![1.0, 1.0, 2.0, 2.0]);
        assert_eq!(run(GradMode::Masked), vec![1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn broadcast_over_trailing_singletons() {
        let mut g = Graph::new(GradMode::Dense);
        let x = g.leaf(t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = g.leaf(t(&[1, 2, 1, 1], &[10.0, 100.0]));
        let y = g.mul(x, c).unwrap();
        assert_eq!(g.value(y).data(), &[10.0, 20.0, 300.0, 400.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(c).unwrap(), &[3.0, 7.0]);
        let bad = g.constant(Tensor::zeros(&[1, 1, 1, 2]));
        assert!(g.add(x, bad).is_err());
    }

    #[test]
    fn kink_signature_tracks_branch_pattern() {
        let sig = |v: f64| {
            let mut g = Graph::new(GradMode::Dense);
            g.track_kinks();
            let x = g.constant(t(&[2], &[v, 1.0]));
            g.relu(x);
            g.kink_signature().unwrap()
        };
        assert_eq!(sig(0.5), sig(0.7));
        assert_ne!(sig(0.5), sig(-0.5));
    }
}
