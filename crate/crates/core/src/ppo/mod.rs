//! Clipped-objective PPO over a pool of robots: parallel episodic rollout
//! collection with replay balancing, GAE, minibatch updates, and the
//! iteration loop.

pub mod gae;
pub mod loss;
pub mod rollout;
pub mod train;

use crate::obs::ObservationBundle;
use thiserror::Error;

pub use gae::compute_gae;
pub use loss::{ppo_minibatch_update, LossStats, Minibatch};
pub use rollout::{collect_rollouts, RewardNormalizer, RolloutCtx};
pub use train::{IterationMetrics, Trainer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("simulation failed for robot {robot} (episode seed {seed}): {source}")]
    Sim {
        robot: usize,
        seed: u64,
        source: crate::sim::SimError,
    },
    #[error("{0}")]
    Nn(#[from] crate::nn::NnError),
    #[error("{0}")]
    Obs(#[from] crate::obs::ObsError),
    #[error("{0}")]
    Morphology(#[from] crate::morphology::MorphologyError),
    #[error("{0}")]
    Balancer(#[from] crate::balancer::BalancerError),
    #[error("non-finite loss in iteration {iteration}: {details}")]
    NonFiniteLoss { iteration: usize, details: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Checkpoint(String),
}

/// One recorded transition. Observations are stored raw; normalization is
/// re-applied from the iteration's frozen statistics wherever needed.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub obs: ObservationBundle,
    /// Action in the padded [n_max * 2] layout, zeros at dead slots.
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub reward_raw: f64,
    /// Normalized and clipped reward used for GAE.
    pub reward: f64,
    pub value: f64,
    pub done: bool,
}

/// One episode (or budget-truncated episode prefix) from a single robot.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub robot: usize,
    pub steps: Vec<StepRecord>,
    /// Critic value of the state after the last step; zero when the episode
    /// actually terminated.
    pub bootstrap_value: f64,
    /// True when the episode ended by itself (fall or horizon) rather than
    /// being cut by the collection budget.
    pub completed: bool,
    pub episode_seed: u64,
    pub env_slot: usize,
}

impl Trajectory {
    pub fn raw_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward_raw).sum()
    }
}

/// All experience of one iteration, trajectories in env-slot order.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub trajectories: Vec<Trajectory>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (trajectory, step) indices in storage order.
    pub fn flat_index(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.len());
        for (ti, t) in self.trajectories.iter().enumerate() {
            for si in 0..t.steps.len() {
                out.push((ti, si));
            }
        }
        out
    }
}
