//! Objective assignment, sequential module training, the end-to-end
//! baseline, checkpoints and training reports.

pub mod checkpoint;
mod model;
mod plan;
mod report;
mod train;

pub use model::Model;
pub use plan::{
    build_plan, Hyper, MiXTarget, ModuleHyper, ModuleOverride, ModulePlan, Objective, PlannedModule, Suite,
};
pub use report::{ModuleTrace, TrainMode, TrainReport};
pub use train::{cross_entropy, cross_entropy_var, train_bp, train_module, train_sequential};
