//! Shared-parameter actors with a centralized critic (MADDPG-style), trained
//! through a categorical relaxation of the discrete action heads.

mod checkpoint;
mod maddpg;
mod policy;
mod replay;

pub use checkpoint::Checkpoint;
pub use maddpg::{
    actor_loss_grad, critic_loss_grad, critic_targets, maddpg_update, Batch, Hyperparams, Learner,
    UpdateStats,
};
pub use policy::{
    act_batch, actor_forward, add_noise, critic_forward, ActMode, AgentSpec, CriticView,
    PolicyParams,
};
pub use replay::{ExperienceTuple, Provenance, ReplayBuffer};
