//! Replay storage for off-policy learners and rollout storage with GAE for
//! on-policy learners.

mod replay;
mod rollout;

pub use replay::{EditMode, ReplayBatch, ReplayBuffer, Transition, DEFAULT_REPLAY_CAPACITY};
pub use rollout::{gae, normalize_advantages, RolloutBatch};
