use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

use super::erk::apportion;
use super::select::{gradient_grow, magnitude_prune, random_grow, Position};
use super::MaskedParam;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regrowth {
    Gradient,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    /// Cosine sparsity cycles up to `cyclic_end`, fixed-rate updates after.
    Cyclic,
    /// Fixed-rate prune/regrow at constant sparsity throughout.
    Static,
}

/// Where each cosine cycle starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CyclePhase {
    /// Starts at `s_max`, dips to `s_min` mid-cycle.
    HighStart,
    /// Starts at `s_min`, peaks at `s_max` mid-cycle.
    LowStart,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionScope {
    Global,
    PerLayer,
}

/// Topology controller settings. Times are in training iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub s_max: f64,
    pub s_min: f64,
    /// Last iteration of the cyclic phase (`T_c`).
    pub cyclic_end: u64,
    /// Number of back-to-back cosine cycles within `cyclic_end`.
    pub cycles: u32,
    /// Update interval during the cyclic phase.
    pub interval_cyclic: u64,
    /// Update interval during the fixed phase (and in static mode).
    pub interval_fixed: u64,
    /// Fraction of active weights swapped per fixed-phase update.
    pub prune_rate: f64,
    pub regrowth: Regrowth,
    pub schedule: ScheduleMode,
    pub phase: CyclePhase,
    pub scope: SelectionScope,
    pub seed: u64,
}

impl TopologyConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| v > 0.0 && v < 1.0;
        if !frac(self.s_max) || !frac(self.s_min) || !frac(self.prune_rate) {
            return Err(Error::Config("sparsities and prune rate must lie in (0, 1)".into()));
        }
        if self.schedule == ScheduleMode::Cyclic && self.s_min >= self.s_max {
            return Err(Error::Config(format!(
                "s_min {} must be below s_max {}",
                self.s_min, self.s_max
            )));
        }
        if self.interval_cyclic == 0 || self.interval_fixed == 0 || self.cycles == 0 {
            return Err(Error::Config("update intervals and cycle count must be positive".into()));
        }
        if self.schedule == ScheduleMode::Cyclic && self.cyclic_end < self.cycles as u64 {
            return Err(Error::Config("cyclic phase shorter than its cycle count".into()));
        }
        Ok(())
    }

    /// `s_min` from a density multiplier: `1 − m·(1 − s_max)`.
    pub fn s_min_from_multiplier(s_max: f64, m: f64) -> f64 {
        1.0 - m * (1.0 - s_max)
    }

    pub fn cycle_length(&self) -> f64 {
        self.cyclic_end as f64 / self.cycles as f64
    }

    pub fn in_cyclic_phase(&self, t: u64) -> bool {
        self.schedule == ScheduleMode::Cyclic && t <= self.cyclic_end
    }

    pub fn interval_at(&self, t: u64) -> u64 {
        if self.in_cyclic_phase(t) {
            self.interval_cyclic
        } else {
            self.interval_fixed
        }
    }

    /// Interval hits, plus the last cyclic iteration so that the cycle
    /// closes at `s_max` whatever the interval.
    pub fn is_update_step(&self, t: u64) -> bool {
        t > 0 && (t.is_multiple_of(self.interval_at(t)) || (self.schedule == ScheduleMode::Cyclic && t == self.cyclic_end))
    }

    /// Sparsity the network starts from.
    pub fn initial_sparsity(&self) -> f64 {
        match self.schedule {
            ScheduleMode::Cyclic => cyclic_target(0, self),
            ScheduleMode::Static => self.s_max,
        }
    }
}

/// Cosine sparsity target at iteration `t`:
/// `s_min + (s_max − s_min)/2 · (1 + cos(2πt / P))`, with `P` the cycle length.
pub fn cyclic_target(t: u64, cfg: &TopologyConfig) -> f64 {
    let c = (2.0 * PI * t as f64 / cfg.cycle_length()).cos();
    let half = (cfg.s_max - cfg.s_min) / 2.0;
    match cfg.phase {
        CyclePhase::HighStart => cfg.s_min + half * (1.0 + c),
        CyclePhase::LowStart => cfg.s_min + half * (1.0 - c),
    }
}

/// Sparsity over learnable tensors against the theoretical dense count.
///
/// `shared_replaced` is the dense size of tensors replaced by references to a
/// donor (`N_s`); they count in the denominator only.
pub fn global_sparsity<T: Real>(params: &[MaskedParam<T>], shared_replaced: usize) -> f64 {
    let active: usize = params.iter().map(|p| p.active_count()).sum();
    let dense: usize = params.iter().map(|p| p.dense_count()).sum::<usize>() + shared_replaced;
    if dense == 0 {
        return 0.0;
    }
    1.0 - active as f64 / dense as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdatePhase {
    Cyclic,
    Fixed,
}

#[derive(Clone, Debug)]
pub struct UpdateReport {
    pub t: u64,
    pub phase: UpdatePhase,
    pub s_target: f64,
    pub target_active: usize,
    pub pruned: Vec<Position>,
    pub grown: Vec<Position>,
    pub active: usize,
    pub s_current: f64,
}

/// Serialisable controller state.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerState {
    pub t: u64,
    pub s_current: f64,
    pub remainder: f64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

/// Owns the sparsity schedule and applies prune/grow updates.
#[derive(Clone, Debug)]
pub struct TopologyController {
    cfg: TopologyConfig,
    denominator: usize,
    t: u64,
    s_current: f64,
    remainder: f64,
    rng: ChaCha8Rng,
}

impl TopologyController {
    /// `denominator` is the theoretical dense weight count `‖θ‖₀`.
    pub fn new(cfg: TopologyConfig, denominator: usize) -> Result<Self> {
        cfg.validate()?;
        if denominator == 0 {
            return Err(Error::Config("empty parameter set".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            s_current: cfg.initial_sparsity(),
            cfg,
            denominator,
            t: 0,
            remainder: 0.0,
            rng,
        })
    }

    pub fn config(&self) -> &TopologyConfig {
        &self.cfg
    }

    pub fn denominator(&self) -> usize {
        self.denominator
    }

    pub fn s_current(&self) -> f64 {
        self.s_current
    }

    /// Fractional part carried from the last rounded target.
    pub fn remainder(&self) -> f64 {
        self.remainder
    }

    pub fn last_update(&self) -> u64 {
        self.t
    }

    pub fn is_update_step(&self, t: u64) -> bool {
        self.cfg.is_update_step(t)
    }

    /// Re-reads the current sparsity from the masks.
    pub fn sync<T: Real>(&mut self, params: &[MaskedParam<T>]) {
        let active: usize = params.iter().map(|p| p.active_count()).sum();
        self.s_current = 1.0 - active as f64 / self.denominator as f64;
    }

    fn active<T: Real>(params: &[MaskedParam<T>]) -> usize {
        params.iter().map(|p| p.active_count()).sum()
    }

    /// Applies the update scheduled for iteration `t`.
    ///
    /// During the cyclic phase the active count moves to the rounded cosine
    /// target (pure level change: prune only or grow only). Afterwards, or in
    /// static mode, `round(prune_rate · active)` weights are pruned and the
    /// same number regrown elsewhere.
    pub fn update<T: Real>(
        &mut self,
        t: u64,
        params: &mut [MaskedParam<T>],
        dense_grads: Option<&[Option<Vec<T>>]>,
    ) -> Result<UpdateReport> {
        let active = Self::active(params);
        let mut report = UpdateReport {
            t,
            phase: UpdatePhase::Fixed,
            s_target: self.s_current,
            target_active: active,
            pruned: Vec::new(),
            grown: Vec::new(),
            active,
            s_current: self.s_current,
        };
        if self.cfg.in_cyclic_phase(t) {
            let s_target = if t == self.cfg.cyclic_end {
                self.cfg.s_max
            } else {
                cyclic_target(t, &self.cfg)
            };
            let exact = (1.0 - s_target) * self.denominator as f64;
            let target = exact.round() as usize;
            self.remainder = exact - target as f64;
            report.phase = UpdatePhase::Cyclic;
            report.s_target = s_target;
            report.target_active = target;
            if target < active {
                report.pruned = self.prune(params, active - target)?;
            } else if target > active {
                report.grown = self.grow(params, dense_grads, target - active, &[])?;
            }
        } else {
            let k = (self.cfg.prune_rate * active as f64).round() as usize;
            report.pruned = self.prune(params, k)?;
            report.grown = self.grow(params, dense_grads, k, &report.pruned.clone())?;
        }
        self.t = t;
        self.sync(params);
        report.active = Self::active(params);
        report.s_current = self.s_current;
        Ok(report)
    }

    fn split<T: Real>(params: &[MaskedParam<T>], count: usize, grow: bool) -> Result<Vec<usize>> {
        let shares: Vec<f64> = params.iter().map(|p| p.active_count() as f64).collect();
        let total: f64 = shares.iter().sum();
        let shares: Vec<f64> = if total > 0.0 {
            shares.iter().map(|s| s / total * count as f64).collect()
        } else {
            let dense: f64 = params.iter().map(|p| p.dense_count() as f64).sum();
            params.iter().map(|p| p.dense_count() as f64 / dense * count as f64).collect()
        };
        let caps: Vec<usize> = params
            .iter()
            .map(|p| if grow { p.dense_count() - p.active_count() } else { p.active_count() })
            .collect();
        apportion(count, &shares, &caps)
    }

    fn prune<T: Real>(&mut self, params: &mut [MaskedParam<T>], count: usize) -> Result<Vec<Position>> {
        match self.cfg.scope {
            SelectionScope::Global => magnitude_prune(params, count),
            SelectionScope::PerLayer => {
                let counts = Self::split(params, count, false)?;
                let mut out = Vec::new();
                for (l, k) in counts.into_iter().enumerate() {
                    let got = magnitude_prune(&mut params[l..=l], k)?;
                    out.extend(got.into_iter().map(|p| Position { layer: l, index: p.index }));
                }
                Ok(out)
            }
        }
    }

    fn grow<T: Real>(
        &mut self,
        params: &mut [MaskedParam<T>],
        dense_grads: Option<&[Option<Vec<T>>]>,
        count: usize,
        exclude: &[Position],
    ) -> Result<Vec<Position>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let grads = match (self.cfg.regrowth, dense_grads) {
            (Regrowth::Gradient, None) => {
                return Err(Error::State("gradient regrowth without dense gradients".into()))
            }
            (Regrowth::Gradient, Some(g)) => Some(g),
            (Regrowth::Random, _) => None,
        };
        match self.cfg.scope {
            SelectionScope::Global => match grads {
                Some(g) => gradient_grow(params, g, count, exclude),
                None => random_grow(params, count, &mut self.rng, exclude),
            },
            SelectionScope::PerLayer => {
                let counts = Self::split(params, count, true)?;
                let mut out = Vec::new();
                for (l, k) in counts.into_iter().enumerate() {
                    let ex: Vec<Position> = exclude
                        .iter()
                        .filter(|p| p.layer == l)
                        .map(|p| Position { layer: 0, index: p.index })
                        .collect();
                    let got = match grads {
                        Some(g) => gradient_grow(&mut params[l..=l], &g[l..=l], k, &ex)?,
                        None => random_grow(&mut params[l..=l], k, &mut self.rng, &ex)?,
                    };
                    out.extend(got.into_iter().map(|p| Position { layer: l, index: p.index }));
                }
                Ok(out)
            }
        }
    }

    pub fn state(&self) -> ControllerState {
        ControllerState {
            t: self.t,
            s_current: self.s_current,
            remainder: self.remainder,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(&mut self, state: &ControllerState) {
        self.t = state.t;
        self.s_current = state.s_current;
        self.remainder = state.remainder;
        let mut rng = ChaCha8Rng::from_seed(state.rng_seed);
        rng.set_stream(state.rng_stream);
        rng.set_word_pos(state.rng_word_pos);
        self.rng = rng;
    }
}
