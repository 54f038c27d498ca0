//! Training and evaluation of a single transformer locomotion controller
//! across many modular robot morphologies.
//!
//! The crate is organized around a pipeline:
//!
//! 1. [`morphology`] — kinematic trees of sphere/cylinder modules, their file
//!    format, validation, depth-first tokenization, and a seeded sampler.
//! 2. [`variation`] — dynamics/kinematics perturbations for zero-shot test
//!    suites.
//! 3. [`terrain`] / [`sim`] — a deterministic planar reduced-coordinate
//!    locomotion simulator with flat, variable, obstacle, and escape tasks.
//! 4. [`obs`] — per-module observation construction, padding, and running
//!    normalization.
//! 5. [`nn`] — a small reverse-mode tape sufficient for the policy networks,
//!    plus Adam and a finite-difference gradient checker.
//! 6. [`policy`] — the morphology-conditioned transformer policy and critic.
//! 7. [`balancer`] — episode-length based robot sampling for experience
//!    collection.
//! 8. [`ppo`] — rollout collection, GAE, the clipped PPO update, and the
//!    training loop.
//! 9. [`analysis`] — attention stable rank, position-embedding similarity,
//!    learning-curve aggregation.
//! 10. [`harness`] — the command implementations behind the CLI, including
//!     checkpointing and the zero-shot protocol.

pub mod analysis;
pub mod balancer;
pub mod checkpoint;
pub mod config;
pub mod harness;
pub mod morphology;
pub mod nn;
pub mod obs;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod sim;
pub mod terrain;
pub mod variation;

pub use config::{ModelConfig, RunConfig, SimParams, SpaceConfig, Task, TaskConfig, TrainConfig};
pub use morphology::MorphologyGraph;
