//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "EAST" u16:version u64:config_hash u64:step u32:next_epoch
//! u32:n_masked  { str:name  shape  f32[numel]  u8[ceil(numel/8)]:mask }
//! u32:n_dense   { u8:present [ str:name u8:kind shape f32[numel] ] }
//! u32:n_bn      { u32:channels f32[c]:mean f32[c]:var }
//! u32:n_stages  { u32:donor }  u8:gain_scope
//! f64:momentum f64:weight_decay
//!               { u64:len f32[len] }             per masked tensor
//!               { u8:present [ u64:len f32[len] ] } per dense tensor
//! u8:has_controller [ u64:t f64:s_current f64:remainder u8[32]:seed u64:stream u128:word_pos ]
//! f64:beta u32:n_sites { u8:dyrelu_present }
//! ```
//!
//! `str` is `u32:len` followed by UTF-8 bytes; `shape` is `u32:ndim u64[ndim]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ArchSpec, BnBuffers, DenseKind, Model};
use crate::sharing::GainScope;
use crate::tensor::Tensor;
use crate::topology::{pack_mask, unpack_mask, ControllerState, MaskedParam};

use super::optim::Sgd;

pub const MAGIC: &[u8; 4] = b"EAST";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub weights: Vec<f32>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseRecord {
    pub name: String,
    pub kind: u8,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Everything needed to resume a run, decoupled from a live model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u16,
    pub config_hash: u64,
    pub step: u64,
    pub next_epoch: u32,
    pub masked: Vec<MaskedRecord>,
    pub dense: Vec<Option<DenseRecord>>,
    pub bn: Vec<(Vec<f32>, Vec<f32>)>,
    pub donors: Vec<usize>,
    pub gain_scope: GainScope,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity_masked: Vec<Vec<f32>>,
    pub velocity_dense: Vec<Option<Vec<f32>>>,
    pub controller: Option<ControllerState>,
    pub beta: f64,
    pub dyrelu_sites: Vec<bool>,
}

/// Live training state restored from a checkpoint.
pub struct Restored {
    pub model: Model<f32>,
    pub optimizer: Sgd<f32>,
    pub controller: Option<ControllerState>,
    pub step: u64,
    pub next_epoch: u32,
}

impl Checkpoint {
    pub fn capture(
        config_hash: u64,
        model: &Model<f32>,
        opt: &Sgd<f32>,
        controller: Option<ControllerState>,
        step: u64,
        next_epoch: u32,
    ) -> Self {
        let plan = &model.spec().sharing;
        Self {
            version: VERSION,
            config_hash,
            step,
            next_epoch,
            masked: model
                .store
                .masked
                .iter()
                .map(|p| MaskedRecord {
                    name: p.name().to_string(),
                    shape: p.shape().to_vec(),
                    weights: p.weights().data().to_vec(),
                    mask: p.mask().to_vec(),
                })
                .collect(),
            dense: model
                .store
                .dense
                .iter()
                .map(|d| {
                    d.as_ref().map(|d| DenseRecord {
                        name: d.name.clone(),
                        kind: d.kind.code(),
                        shape: d.value.shape().to_vec(),
                        values: d.value.data().to_vec(),
                    })
                })
                .collect(),
            bn: model.bn.iter().map(|b| (b.mean.clone(), b.var.clone())).collect(),
            donors: plan.donors.clone(),
            gain_scope: plan.gains,
            momentum: opt.momentum,
            weight_decay: opt.weight_decay,
            velocity_masked: opt.masked.clone(),
            velocity_dense: opt.dense.clone(),
            controller,
            beta: model.beta(),
            dyrelu_sites: (0..model.layout().acts.len()).map(|a| model.hyper_alive(a)).collect(),
        }
    }

    /// Rebuilds live state on top of a model built from `spec`.
    pub fn restore(&self, spec: &ArchSpec) -> Result<Restored> {
        if self.donors != spec.sharing.donors || self.gain_scope != spec.sharing.gains {
            return Err(Error::State("sharing plan differs from the architecture".into()));
        }
        let mut model = Model::<f32>::build(spec, 0)?;
        if self.masked.len() != model.store.masked.len()
            || self.dense.len() != model.store.dense.len()
            || self.bn.len() != model.bn.len()
            || self.dyrelu_sites.len() != model.layout().acts.len()
        {
            return Err(Error::State("checkpoint does not match the architecture".into()));
        }
        for (p, r) in model.store.masked.iter_mut().zip(&self.masked) {
            if p.name() != r.name || p.shape() != r.shape.as_slice() {
                return Err(Error::State(format!("masked tensor {} does not match {}", r.name, p.name())));
            }
            *p = MaskedParam::with_mask(r.name.clone(), Tensor::new(&r.shape, r.weights.clone())?, r.mask.clone())?;
        }
        for (slot, r) in model.store.dense.iter_mut().zip(&self.dense) {
            match (slot.as_mut(), r) {
                (Some(p), Some(r)) => {
                    if p.name != r.name || p.value.shape() != r.shape.as_slice() || p.kind.code() != r.kind {
                        return Err(Error::State(format!("dense tensor {} does not match {}", r.name, p.name)));
                    }
                    p.value = Tensor::new(&r.shape, r.values.clone())?;
                }
                (Some(p), None) if p.kind == DenseKind::Hyper => *slot = None,
                (Some(p), None) => {
                    return Err(Error::State(format!("checkpoint lacks {}", p.name)));
                }
                (None, _) => unreachable!("fresh models hold every dense tensor"),
            }
        }
        for (b, (mean, var)) in model.bn.iter_mut().zip(&self.bn) {
            if mean.len() != b.mean.len() || var.len() != b.var.len() {
                return Err(Error::State("BatchNorm buffer size mismatch".into()));
            }
            *b = BnBuffers {
                mean: mean.clone(),
                var: var.clone(),
            };
        }
        model.set_beta(self.beta);
        for (a, &alive) in self.dyrelu_sites.iter().enumerate() {
            if alive != model.hyper_alive(a) {
                return Err(Error::State(format!("activation site {a} presence mismatch")));
            }
        }
        let mut optimizer = Sgd::new(&model.store, self.momentum, self.weight_decay);
        if self.velocity_masked.len() != optimizer.masked.len() || self.velocity_dense.len() != optimizer.dense.len() {
            return Err(Error::State("optimizer state does not match the model".into()));
        }
        for (v, r) in optimizer.masked.iter_mut().zip(&self.velocity_masked) {
            if v.len() != r.len() {
                return Err(Error::State("velocity size mismatch".into()));
            }
            v.copy_from_slice(r);
        }
        for (v, r) in optimizer.dense.iter_mut().zip(&self.velocity_dense) {
            match (v.as_mut(), r) {
                (Some(v), Some(r)) if v.len() == r.len() => v.copy_from_slice(r),
                (None, None) => {}
                _ => return Err(Error::State("velocity presence mismatch".into())),
            }
        }
        Ok(Restored {
            model,
            optimizer,
            controller: self.controller.clone(),
            step: self.step,
            next_epoch: self.next_epoch,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u16(self.version);
        w.u64(self.config_hash);
        w.u64(self.step);
        w.u32(self.next_epoch);
        w.u32(self.masked.len() as u32);
        for r in &self.masked {
            w.str(&r.name);
            w.shape(&r.shape);
            w.f32s(&r.weights);
            w.0.extend_from_slice(&pack_mask(&r.mask));
        }
        w.u32(self.dense.len() as u32);
        for r in &self.dense {
            match r {
                None => w.u8(0),
                Some(r) => {
                    w.u8(1);
                    w.str(&r.name);
                    w.u8(r.kind);
                    w.shape(&r.shape);
                    w.f32s(&r.values);
                }
            }
        }
        w.u32(self.bn.len() as u32);
        for (mean, var) in &self.bn {
            w.u32(mean.len() as u32);
            w.f32s(mean);
            w.f32s(var);
        }
        w.u32(self.donors.len() as u32);
        for &d in &self.donors {
            w.u32(d as u32);
        }
        w.u8(match self.gain_scope {
            GainScope::PerConv => 0,
            GainScope::PerBlock => 1,
        });
        w.f64(self.momentum);
        w.f64(self.weight_decay);
        for v in &self.velocity_masked {
            w.u64(v.len() as u64);
            w.f32s(v);
        }
        for v in &self.velocity_dense {
            match v {
                None => w.u8(0),
                Some(v) => {
                    w.u8(1);
                    w.u64(v.len() as u64);
                    w.f32s(v);
                }
            }
        }
        match &self.controller {
            None => w.u8(0),
            Some(c) => {
                w.u8(1);
                w.u64(c.t);
                w.f64(c.s_current);
                w.f64(c.remainder);
                w.0.extend_from_slice(&c.rng_seed);
                w.u64(c.rng_stream);
                w.0.extend_from_slice(&c.rng_word_pos.to_le_bytes());
            }
        }
        w.f64(self.beta);
        w.u32(self.dyrelu_sites.len() as u32);
        for &s in &self.dyrelu_sites {
            w.u8(s as u8);
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = r.u64()?;
        let step = r.u64()?;
        let next_epoch = r.u32()?;
        let n = r.u32()? as usize;
        let mut masked = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.str()?;
            let shape = r.shape()?;
            let numel: usize = shape.iter().product();
            let weights = r.f32s(numel)?;
            let mask = unpack_mask(r.take(numel.div_ceil(8))?, numel)?;
            masked.push(MaskedRecord {
                name,
                shape,
                weights,
                mask,
            });
        }
        let n = r.u32()? as usize;
        let mut dense = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            dense.push(match r.flag()? {
                false => None,
                true => {
                    let name = r.str()?;
                    let kind = r.u8()?;
                    let shape = r.shape()?;
                    let values = r.f32s(shape.iter().product())?;
                    Some(DenseRecord {
                        name,
                        kind,
                        shape,
                        values,
                    })
                }
            });
        }
        let n = r.u32()? as usize;
        let mut bn = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let c = r.u32()? as usize;
            bn.push((r.f32s(c)?, r.f32s(c)?));
        }
        let n = r.u32()? as usize;
        let donors = (0..n).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let gain_scope = match r.u8()? {
            0 => GainScope::PerConv,
            1 => GainScope::PerBlock,
            v => return Err(Error::Format(format!("unknown gain scope {v}"))),
        };
        let momentum = r.f64()?;
        let weight_decay = r.f64()?;
        let velocity_masked = (0..masked.len())
            .map(|_| {
                let len = r.u64()? as usize;
                r.f32s(len)
            })
            .collect::<Result<_>>()?;
        let velocity_dense = (0..dense.len())
            .map(|_| {
                if r.flag()? {
                    let len = r.u64()? as usize;
                    r.f32s(len).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        let controller = if r.flag()? {
            let t = r.u64()?;
            let s_current = r.f64()?;
            let remainder = r.f64()?;
            let rng_seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let rng_stream = r.u64()?;
            let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            Some(ControllerState {
                t,
                s_current,
                remainder,
                rng_seed,
                rng_stream,
                rng_word_pos,
            })
        } else {
            None
        };
        let beta = r.f64()?;
        let n = r.u32()? as usize;
        let dyrelu_sites = (0..n).map(|_| r.flag()).collect::<Result<_>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            version,
            config_hash,
            step,
            next_epoch,
            masked,
            dense,
            bn,
            donors,
            gain_scope,
            momentum,
            weight_decay,
            velocity_masked,
            velocity_dense,
            controller,
            beta,
            dyrelu_sites,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn active_count(&self) -> usize {
        self.masked.iter().map(|r| r.mask.iter().filter(|&&m| m).count()).sum()
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn shape(&mut self, s: &[usize]) {
        self.u32(s.len() as u32);
        for &d in s {
            self.u64(d as u64);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Format(format!("bad flag byte {v}"))),
        }
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
    fn shape(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()? as usize;
        if n > 8 {
            return Err(Error::Format(format!("tensor rank {n}")));
        }
        (0..n).map(|_| self.u64().map(|d| d as usize)).collect()
    }
}
