//! Intra-stage weight sharing for residual networks.
//!
//! Inside a stage of `L` blocks with donor `R`, blocks `i > R` reuse the
//! main conv tensors (and masks) of block `R`, each use scaled by its own
//! learnable gain `γ`. Shortcut convs and BatchNorm are never shared.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Granularity of the learnable gains on recipient blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainScope {
    /// One gain per reused conv tensor per recipient block.
    #[default]
    PerConv,
    /// One gain per recipient block, shared by all its convs.
    PerBlock,
}

/// Per-stage donor choice. `donors[s] = 0` disables sharing in stage `s`;
/// otherwise it is the 1-based donor block index `R`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SharingPlan {
    pub donors: Vec<usize>,
    pub gains: GainScope,
}

/// Where a block's main conv tensors come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolved {
    /// The block's own tensors, unscaled.
    Own,
    /// Block `donor`'s tensors (1-based), scaled by a learnable gain.
    Donor { donor: usize },
}

impl SharingPlan {
    pub fn disabled(stages: usize) -> Self {
        Self {
            donors: vec![0; stages],
            gains: GainScope::PerConv,
        }
    }

    /// `R = 2` on every stage with at least three blocks.
    pub fn default_for(blocks: &[usize]) -> Self {
        Self {
            donors: blocks.iter().map(|&l| if l >= 3 { 2 } else { 0 }).collect(),
            gains: GainScope::PerConv,
        }
    }

    /// The same donor index on every stage.
    pub fn uniform(blocks: &[usize], donor: usize) -> Self {
        Self {
            donors: vec![donor; blocks.len()],
            gains: GainScope::PerConv,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.donors.iter().any(|&r| r > 0)
    }

    pub fn donor(&self, stage: usize) -> Option<usize> {
        self.donors.get(stage).copied().filter(|&r| r > 0)
    }

    pub fn validate(&self, blocks: &[usize]) -> Result<()> {
        if !self.is_enabled() {
            return Ok(());
        }
        if self.donors.len() != blocks.len() {
            return Err(Error::Config(format!(
                "sharing plan lists {} stages, architecture has {}",
                self.donors.len(),
                blocks.len()
            )));
        }
        for (s, (&r, &l)) in self.donors.iter().zip(blocks).enumerate() {
            if r == 0 {
                continue;
            }
            if l < 2 {
                return Err(Error::Config(format!(
                    "stage {} has {l} block(s); sharing needs at least two",
                    s + 1
                )));
            }
            if r < 2 || r > l {
                return Err(Error::Config(format!(
                    "stage {} donor {r} outside 2..={l}",
                    s + 1
                )));
            }
        }
        Ok(())
    }

    /// Source of block `i` (1-based) in `stage`.
    pub fn resolve(&self, stage: usize, i: usize) -> Resolved {
        match self.donor(stage) {
            Some(r) if i > r => Resolved::Donor { donor: r },
            _ => Resolved::Own,
        }
    }

    /// Recipient blocks (1-based) of `stage` given its block count.
    pub fn recipients(&self, stage: usize, blocks: usize) -> Vec<usize> {
        match self.donor(stage) {
            Some(r) => (r + 1..=blocks).collect(),
            None => Vec::new(),
        }
    }
}

/// Parameter counts with and without sharing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    /// Every learnable scalar of the unmodified architecture (weights,
    /// biases, BatchNorm), replaced blocks included.
    pub theoretical: usize,
    /// What is physically stored: `theoretical − replaced + gains`.
    pub stored: usize,
    /// `N_s`: dense size of the conv tensors replaced by donor references.
    pub replaced: usize,
    /// Learnable gain scalars introduced by sharing.
    pub gains: usize,
    /// Dense size of all maskable weight tensors of the unmodified
    /// architecture; the sparsity denominator.
    pub maskable: usize,
    /// Active entries over unique stored maskable tensors.
    pub unique_active: usize,
}

impl Census {
    /// `1 − unique_active / maskable`.
    pub fn sparsity(&self) -> f64 {
        if self.maskable == 0 {
            return 0.0;
        }
        1.0 - self.unique_active as f64 / self.maskable as f64
    }
}
