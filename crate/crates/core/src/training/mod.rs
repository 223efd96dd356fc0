//! Two-stage training of the encoder and its off-ramps.
//!
//! Stage 1 minimises the depth-weighted joint loss of all ramps on full
//! forward passes. Stage 2 re-forwards every sequence with halt-and-copy
//! under a sampled exit assignment, in sandwich with the deepest and the
//! shallowest paths, optionally flooded.

mod loss;
mod optimizer;
mod sampling;
mod trainer;

pub use loss::{
    flooded_step_loss, forward_with_assignment, joint_loss, joint_loss_taped, ramp_weight,
    sandwich_step, LossReduction, SandwichTerms,
};
pub use optimizer::{clip_global_norm, AdamW, Schedule};
pub use sampling::{
    exit_assignment_for, sample_exit_assignment_random, sample_exit_assignment_self,
    ExitAssignment, SamplingRanges,
};
pub use trainer::{
    EpochRecord, FloodTarget, Stage, Stage2Mode, StageReport, TrainConfig, Trainer,
};
