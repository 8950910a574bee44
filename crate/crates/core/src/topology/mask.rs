use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A weight tensor paired with its binary connectivity mask.
///
/// Masked-out entries of `weights` are kept at exactly zero. The active count
/// and the list of active flat indices are maintained alongside the mask.
#[derive(Clone, Debug)]
pub struct MaskedParam<T> {
    name: String,
    weights: Tensor<T>,
    mask: Vec<bool>,
    active: usize,
    support: Arc<[u32]>,
}

impl<T: Real> MaskedParam<T> {
    /// All entries active.
    pub fn dense(name: impl Into<String>, weights: Tensor<T>) -> Self {
        let mask = vec![true; weights.len()];
        Self::with_mask(name, weights, mask).expect("mask sized from weights")
    }

    /// Zero weights, nothing active.
    pub fn empty(name: impl Into<String>, shape: &[usize]) -> Self {
        let weights = Tensor::zeros(shape);
        let mask = vec![false; weights.len()];
        Self::with_mask(name, weights, mask).expect("mask sized from weights")
    }

    pub fn with_mask(name: impl Into<String>, weights: Tensor<T>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != weights.len() {
            return Err(Error::shape("mask", weights.shape(), &[mask.len()]));
        }
        let mut p = Self {
            name: name.into(),
            weights,
            mask,
            active: 0,
            support: Arc::from(Vec::new()),
        };
        p.apply_mask();
        p.refresh();
        Ok(p)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        self.weights.shape()
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    /// Mutable access to the raw weights. Callers must restore the masked
    /// zeros (see [`MaskedParam::apply_mask`]) before the next read.
    pub fn weights_mut(&mut self) -> &mut [T] {
        self.weights.data_mut()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// ‖θ‖₀ of the unpruned tensor.
    pub fn dense_count(&self) -> usize {
        self.mask.len()
    }

    pub fn active_count(&self) -> usize {
        self.active
    }

    pub fn density(&self) -> f64 {
        self.active as f64 / self.mask.len().max(1) as f64
    }

    /// Sorted flat indices of active entries.
    pub fn support(&self) -> Arc<[u32]> {
        self.support.clone()
    }

    /// Zeroes every masked-out weight.
    pub fn apply_mask(&mut self) {
        for (w, &m) in self.weights.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *w = T::zero();
            }
        }
    }

    /// Largest |θ| over masked-out entries; zero when the invariant holds.
    pub fn masked_residual(&self) -> f64 {
        self.weights
            .data()
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| !m)
            .map(|(w, _)| w.abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn recount(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn refresh(&mut self) {
        let idx: Vec<u32> = self
            .mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i as u32)
            .collect();
        self.active = idx.len();
        self.support = Arc::from(idx);
    }

    /// Deactivates the given entries and zeroes their weights.
    pub fn deactivate(&mut self, positions: &[usize]) {
        let data = self.weights.data_mut();
        for &i in positions {
            self.mask[i] = false;
            data[i] = T::zero();
        }
        self.refresh();
    }

    /// Activates the given entries with zero-initialised weights.
    pub fn activate(&mut self, positions: &[usize]) {
        let data = self.weights.data_mut();
        for &i in positions {
            if !self.mask[i] {
                self.mask[i] = true;
                data[i] = T::zero();
            }
        }
        self.refresh();
    }

    /// Replaces weights and mask together.
    pub fn reset(&mut self, weights: Vec<T>, mask: Vec<bool>) -> Result<()> {
        if weights.len() != self.mask.len() || mask.len() != self.mask.len() {
            return Err(Error::shape("mask", self.weights.shape(), &[weights.len(), mask.len()]));
        }
        self.weights = Tensor::new(self.weights.shape(), weights)?;
        self.mask = mask;
        self.apply_mask();
        self.refresh();
        Ok(())
    }
}

/// Packs a mask into little-endian bit order: entry `i` is bit `i % 8` of
/// byte `i / 8`.
pub fn pack_mask(mask: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; mask.len().div_ceil(8)];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

pub fn unpack_mask(bytes: &[u8], len: usize) -> Result<Vec<bool>> {
    if bytes.len() != len.div_ceil(8) {
        return Err(Error::Format(format!(
            "bitset of {} bytes cannot hold {len} entries",
            bytes.len()
        )));
    }
    let mask: Vec<bool> = (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
    let pad = len % 8;
    if pad != 0 && bytes[len / 8] >> pad != 0 {
        return Err(Error::Format("nonzero padding bits in bitset".into()));
    }
    Ok(mask)
}
