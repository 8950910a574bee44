//! Inference multiply-accumulate counts and parameter census.
//!
//! Only conv and linear products are counted; BatchNorm, activations,
//! pooling and additions are free. Every reuse of a shared tensor is counted
//! at its own site.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sharing::Census;
use crate::tensor::Real;

use super::net::Model;
use super::spec::{ArchSpec, Layout};

/// How densities are assigned to stored tensors.
#[derive(Clone, Copy, Debug)]
pub enum Density<'a> {
    Dense,
    /// Uniform density chosen so that the active count equals `p` times the
    /// unmodified architecture's maskable count.
    Global(f64),
    /// One density per stored masked tensor.
    PerStored(&'a [f64]),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerFlops {
    pub name: String,
    pub shared: bool,
    pub density: f64,
    pub dense_macs: u64,
    pub macs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    pub dense_macs: u64,
    pub macs: f64,
}

impl FlopsReport {
    /// Two FLOPs per multiply-accumulate.
    pub fn flops(&self) -> f64 {
        2.0 * self.macs
    }

    pub fn dense_flops(&self) -> u64 {
        2 * self.dense_macs
    }

    /// `macs / dense_macs`.
    pub fn ratio(&self) -> f64 {
        self.macs / self.dense_macs as f64
    }
}

/// Per-layer and total inference MACs for one sample.
pub fn flops_report(layout: &Layout, density: Density<'_>) -> Result<FlopsReport> {
    let stored = layout.stored.len();
    let per_stored: Vec<f64> = match density {
        Density::Dense => vec![1.0; stored],
        Density::Global(p) => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Input(format!("density {p} outside [0, 1]")));
            }
            let own = (layout.maskable() - layout.replaced()) as f64;
            let d = (p * layout.maskable() as f64 / own).min(1.0);
            vec![d; stored]
        }
        Density::PerStored(d) => {
            if d.len() != stored {
                return Err(Error::Input(format!("{} densities for {stored} stored tensors", d.len())));
            }
            d.to_vec()
        }
    };
    let mut layers = Vec::with_capacity(layout.weights.len());
    for (i, w) in layout.weights.iter().enumerate() {
        let density = per_stored[layout.stored_index(i)];
        let dense_macs = w.macs() as u64;
        let macs = if density == 1.0 {
            dense_macs as f64
        } else {
            density * w.numel() as f64 * w.positions as f64
        };
        layers.push(LayerFlops {
            name: w.name.clone(),
            shared: matches!(w.storage, super::Storage::Shared { .. }),
            density,
            dense_macs,
            macs,
        });
    }
    Ok(FlopsReport {
        dense_macs: layers.iter().map(|l| l.dense_macs).sum(),
        macs: layers.iter().map(|l| l.macs).sum(),
        layers,
    })
}

/// Report for a built model using its realised masks.
pub fn model_flops<T: Real>(model: &Model<T>) -> Result<FlopsReport> {
    let d: Vec<f64> = model.store.masked.iter().map(|p| p.density()).collect();
    flops_report(model.layout(), Density::PerStored(&d))
}

/// Census of an architecture without instantiating it. `unique_active` is
/// filled from a global density when given.
pub fn learnable_census(spec: &ArchSpec, density: Option<f64>) -> Result<Census> {
    let layout = Layout::new(spec)?;
    let maskable = layout.maskable();
    let unique_active = match density {
        Some(p) => (p * maskable as f64).round() as usize,
        None => maskable - layout.replaced(),
    };
    Ok(Census {
        theoretical: layout.theoretical(),
        stored: layout.stored_count(),
        replaced: layout.replaced(),
        gains: layout.gain_count(),
        maskable,
        unique_active,
    })
}
