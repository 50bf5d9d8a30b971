//! The joint distillation + gradient-scored preference optimization loop.
//!
//! One training step:
//!
//! 1. draw a batch, a schedule time `t`, and the generator input `z_t`
//!    (either a data interpolation or a detached rollout of the generator);
//! 2. generate `x0` in one solver step;
//! 3. collect `eta` distribution-matching directions, varying the noise
//!    level, the fake-score version, or both, and score each implicit target
//!    `x_tar = x0 - grad` against `x0` with the reward model;
//! 4. update the generator once per entry on `lambda * L_dmd + gamma * L_rl`,
//!    where both losses regress towards the same `x_tar`.
//!
//! The sample-scored baseline in [`baseline_sample_scoring_step`] replaces
//! step 3's scoring with stochastic rollouts scored directly.

mod config;
mod group;
mod napo;
mod state;
mod step;

pub use config::{CollectionStrategy, GdmdConfig, Method, UpdateMode};
pub use group::{collect_group, group_computation, GradientGroup, GroupEntry};
pub use napo::{napo_loss_and_grads, napo_output_grad};
pub use state::{Batch, TrainContext, TrainState};
pub use step::{
    baseline_sample_scoring_step, divergence_diagnostic, gdmd_train_step, joint_entry_grads, train_step, EntryGrads,
    StepMetrics,
};
