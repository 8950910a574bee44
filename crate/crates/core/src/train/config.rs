use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::PhasingSchedule;
use crate::error::{Error, Result};
use crate::model::{ActivationMode, ArchSpec};
use crate::topology::{CyclePhase, Regrowth, ScheduleMode, SelectionScope, TopologyConfig};

use super::data::DataSpec;

/// Steps per epoch the reference intervals were tuned for (CIFAR, 50k
/// samples at batch 128).
pub const REFERENCE_STEPS_PER_EPOCH: usize = 391;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub arch: ArchSpec,
    pub data: DataSpec,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub topology: TopologySettings,
    #[serde(default)]
    pub phasing: PhasingSettings,
    /// Where `train` writes its files; the CLI flag takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn default_name() -> String {
    "run".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_factor`.
    /// Empty means half-way and three-quarters.
    pub lr_drops: Vec<u32>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Log a train row every this many steps (plus every topology update).
    pub log_every: u64,
    /// Evaluate on at most this many test samples per epoch.
    pub eval_limit: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 128,
            lr: 0.1,
            lr_drops: Vec::new(),
            lr_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            log_every: 50,
            eval_limit: None,
        }
    }
}

impl TrainSettings {
    pub fn drops(&self) -> Vec<u32> {
        if self.lr_drops.is_empty() {
            vec![self.epochs / 2, self.epochs * 3 / 4]
        } else {
            self.lr_drops.clone()
        }
    }

    /// Piecewise-constant rate: one factor per drop epoch already reached.
    pub fn lr_at(&self, epoch: u32) -> f64 {
        let hits = self.drops().iter().filter(|&&d| epoch >= d).count();
        self.lr * self.lr_factor.powi(hits as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    Erk,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologySettings {
    /// Sparsity at the end of training (`s_max`).
    pub sparsity: f64,
    /// Explicit `s_min`; otherwise derived from `multiplier`.
    pub min_sparsity: Option<f64>,
    /// Maximum density multiplier `m`: `s_min = 1 − m·(1 − s_max)`.
    pub multiplier: f64,
    pub schedule: ScheduleMode,
    pub cycles: u32,
    /// Length of one cosine cycle in epochs (`l`).
    pub cycle_epochs: u32,
    /// Cyclic-phase update interval in reference iterations (`ΔT_cs`).
    pub interval_cyclic: u64,
    /// Fixed-phase update interval in reference iterations (`ΔT_dst`).
    pub interval_fixed: u64,
    /// Scale intervals so updates-per-epoch match the reference setting.
    pub scale_intervals: bool,
    pub prune_rate: f64,
    pub regrowth: Regrowth,
    pub phase: CyclePhase,
    pub scope: SelectionScope,
    pub init: InitScheme,
    /// Disable the topology controller entirely (dense training).
    pub dense: bool,
}

impl Default for TopologySettings {
    fn default() -> Self {
        Self {
            sparsity: 0.9,
            min_sparsity: None,
            multiplier: 3.0,
            schedule: ScheduleMode::Cyclic,
            cycles: 2,
            cycle_epochs: 50,
            interval_cyclic: 350,
            interval_fixed: 4000,
            scale_intervals: true,
            prune_rate: 0.3,
            regrowth: Regrowth::Gradient,
            phase: CyclePhase::HighStart,
            scope: SelectionScope::Global,
            init: InitScheme::Erk,
            dense: false,
        }
    }
}

impl TopologySettings {
    pub fn s_min(&self) -> f64 {
        self.min_sparsity
            .unwrap_or_else(|| TopologyConfig::s_min_from_multiplier(self.sparsity, self.multiplier))
    }

    fn scaled(&self, interval: u64, steps_per_epoch: usize) -> u64 {
        if !self.scale_intervals {
            return interval.max(1);
        }
        let v = interval as f64 * steps_per_epoch as f64 / REFERENCE_STEPS_PER_EPOCH as f64;
        (v.round() as u64).max(1)
    }

    /// Controller settings in iterations for a given epoch length.
    pub fn controller(&self, steps_per_epoch: usize, seed: u64) -> TopologyConfig {
        TopologyConfig {
            s_max: self.sparsity,
            s_min: self.s_min(),
            cyclic_end: (self.cycles as u64 * self.cycle_epochs as u64) * steps_per_epoch as u64,
            cycles: self.cycles,
            interval_cyclic: self.scaled(self.interval_cyclic, steps_per_epoch),
            interval_fixed: self.scaled(self.interval_fixed, steps_per_epoch),
            prune_rate: self.prune_rate,
            regrowth: self.regrowth,
            schedule: self.schedule,
            phase: self.phase,
            scope: self.scope,
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhasingSettings {
    pub start: u32,
    /// Defaults to the epoch before the first learning-rate drop.
    pub end: Option<u32>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// First 8 bytes of the SHA-256 of the canonical TOML form, ignoring the
    /// output directory.
    pub fn hash(&self) -> u64 {
        let canonical = Self {
            out_dir: None,
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn phasing(&self) -> Result<PhasingSchedule> {
        let first_drop = self.train.drops().into_iter().min().unwrap_or(self.train.epochs);
        let end = self.phasing.end.unwrap_or(first_drop.saturating_sub(1));
        PhasingSchedule::new(self.phasing.start, end)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.log_every == 0 {
            return Err(Error::Config("epochs, batch size and log interval must be ≥ 1".into()));
        }
        if t.lr.is_nan() || t.lr <= 0.0 || !(0.0..1.0).contains(&t.momentum) || t.weight_decay < 0.0 {
            return Err(Error::Config("lr > 0, momentum in [0, 1), weight decay ≥ 0 required".into()));
        }
        if !(t.lr_factor > 0.0 && t.lr_factor < 1.0) {
            return Err(Error::Config(format!("lr factor {} outside (0, 1)", t.lr_factor)));
        }
        let topo = &self.topology;
        if !topo.dense {
            topo.controller(1, 0).validate()?;
            if topo.schedule == ScheduleMode::Cyclic && topo.cycle_epochs == 0 {
                return Err(Error::Config("cycle length must be ≥ 1 epoch".into()));
            }
        }
        if self.arch.activation == ActivationMode::DyreluPhased {
            let p = self.phasing()?;
            let first = self.train.drops().into_iter().min().unwrap_or(t.epochs);
            if p.end > first {
                return Err(Error::Config(format!(
                    "phasing ends at epoch {} after the first lr drop at {first}",
                    p.end
                )));
            }
        }
        Ok(())
    }
}
