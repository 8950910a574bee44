//! Sparse connectivity: masks, prune/grow selection, ERK allocation and the
//! sparsity schedule.

mod erk;
mod mask;
mod schedule;
mod select;

pub use erk::{apportion, erk_init, erk_plan, erk_plan_for_budget, fan_in, ErkPlan};
pub use mask::{pack_mask, unpack_mask, MaskedParam};
pub use schedule::{
    cyclic_target, global_sparsity, ControllerState, CyclePhase, Regrowth, ScheduleMode, SelectionScope,
    TopologyConfig, TopologyController, UpdatePhase, UpdateReport,
};
pub use select::{gradient_grow, magnitude_prune, random_grow, Position};
