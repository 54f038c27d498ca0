//! Configuration types for the design space, simulator, model, and training
//! loop, plus the top-level run configuration consumed by the CLI.
//!
//! `TrainConfig::default()` and `ModelConfig::default()` are the full-scale
//! defaults; `::desk()` variants are scaled down so a complete training run
//! finishes in minutes on a laptop. Every field can be overridden from a JSON
//! config file or a CLI flag; unknown keys are rejected when deserializing.

use serde::{Deserialize, Serialize};

/// Joint-range vocabulary in degrees: every joint in the design space uses
/// one of these 13 (lo, hi) pairs.
pub const JOINT_ANGLE_SET_DEG: [(f64, f64); 13] = [
    (-30.0, 0.0),
    (0.0, 30.0),
    (-30.0, 30.0),
    (-45.0, 45.0),
    (-45.0, 0.0),
    (0.0, 45.0),
    (-60.0, 0.0),
    (0.0, 60.0),
    (-60.0, 60.0),
    (-90.0, 0.0),
    (0.0, 90.0),
    (-60.0, 30.0),
    (-30.0, 60.0),
];

/// The joint-range vocabulary converted to radians.
pub fn joint_angle_set_rad() -> Vec<(f64, f64)> {
    JOINT_ANGLE_SET_DEG
        .iter()
        .map(|&(lo, hi)| (lo.to_radians(), hi.to_radians()))
        .collect()
}

/// Locomotion task selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Flat,
    Variable,
    Obstacles,
    Escape,
    ObstaclesCylinders,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Flat => "flat",
            Task::Variable => "variable",
            Task::Obstacles => "obstacles",
            Task::Escape => "escape",
            Task::ObstaclesCylinders => "obstacles_cylinders",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "flat" => Some(Task::Flat),
            "variable" => Some(Task::Variable),
            "obstacles" => Some(Task::Obstacles),
            "escape" => Some(Task::Escape),
            "obstacles_cylinders" => Some(Task::ObstaclesCylinders),
            _ => None,
        }
    }
}

/// Parameter ranges of the modular design space. Used by the morphology
/// sampler and by graph validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    /// Inclusive module-count range for sampled robots (root included).
    pub min_modules: usize,
    pub max_modules: usize,
    /// Hard cap on module count accepted by validation (token budget).
    pub n_max: usize,
    /// Torso sphere radius range, meters.
    pub sphere_radius: [f64; 2],
    /// Limb cylinder radius range, meters.
    pub limb_radius: [f64; 2],
    /// Limb cylinder length range, meters.
    pub limb_length: [f64; 2],
    /// Material density range, kg/m^3 (spheres and cylinders).
    pub density: [f64; 2],
    /// Motor gear range (torque per unit action).
    pub gear: [f64; 2],
    /// Probability that an edge carries two hinge joints instead of one.
    pub two_joint_prob: f64,
    /// Attachment rotation angles about the plane normal, degrees.
    pub attach_angles_deg: Vec<f64>,
    /// Joint axis vocabulary (unit vectors).
    pub joint_axes: Vec<[f64; 3]>,
    /// Armature (reflected rotor inertia) shared by all sampled joints.
    pub armature: f64,
    /// Joint damping shared by all sampled joints, N·m·s/rad.
    pub damping: f64,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig {
            min_modules: 4,
            max_modules: 8,
            n_max: 12,
            sphere_radius: [0.05, 0.10],
            limb_radius: [0.03, 0.05],
            limb_length: [0.15, 0.45],
            density: [800.0, 1200.0],
            gear: [20.0, 60.0],
            two_joint_prob: 0.5,
            attach_angles_deg: vec![-90.0, -60.0, -45.0, -30.0, 0.0, 30.0, 45.0, 60.0, 90.0],
            joint_axes: vec![
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
                [-1.0, 0.0, 0.0],
                [0.0, -1.0, 0.0],
                [0.0, 0.0, -1.0],
            ],
            armature: 1.0,
            damping: 1.0,
        }
    }
}

/// Physics constants of the planar simulator. All values are surrogate
/// constants, not taken from any published robot model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    /// Integration substeps per control step.
    pub substeps: usize,
    /// Ground penalty-spring stiffness, N/m.
    pub contact_stiffness: f64,
    /// Ground penalty-spring damping, N·s/m.
    pub contact_damping: f64,
    /// Coulomb friction coefficient bounding tangential contact force.
    pub friction_mu: f64,
    /// Tangential contact damping inside the friction cone, N·s/m.
    pub friction_damping: f64,
    /// Gravitational acceleration, m/s^2.
    pub gravity: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            substeps: 4,
            contact_stiffness: 2.0e4,
            contact_damping: 200.0,
            friction_mu: 1.0,
            friction_damping: 200.0,
            gravity: 9.81,
        }
    }
}

/// Per-task episode configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub task: Task,
    /// Episode length cap in control steps.
    pub episode_horizon: usize,
    /// Episode ends when torso height drops below this fraction of its
    /// initial value.
    pub termination_fraction: f64,
    /// Forward-progress reward weight.
    pub w_forward: f64,
    /// Energy-usage penalty weight.
    pub w_energy: f64,
    /// Control timestep, seconds.
    pub dt: f64,
}

impl TaskConfig {
    /// Task defaults: 1000-step horizon, fall termination at 50% of the
    /// initial torso height (30% on rough terrain).
    pub fn for_task(task: Task) -> TaskConfig {
        let termination_fraction = match task {
            Task::Flat | Task::Obstacles | Task::ObstaclesCylinders => 0.5,
            Task::Variable | Task::Escape => 0.3,
        };
        TaskConfig {
            task,
            episode_horizon: 1000,
            termination_fraction,
            w_forward: 1.0,
            w_energy: 1e-3,
            dt: 0.01,
        }
    }
}

/// Transformer policy/critic architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Token embedding width D.
    pub d_model: usize,
    /// Number of transformer blocks.
    pub layers: usize,
    /// Attention heads (d_model must be divisible by this).
    pub heads: usize,
    /// Feedforward hidden width inside each block.
    pub ff_dim: usize,
    /// Maximum token count; observations are zero-padded to this length.
    pub n_max: usize,
    /// Dropout probability used during policy updates.
    pub dropout: f64,
    /// Fixed standard deviation of the action distribution.
    pub action_std: f64,
    /// Hidden widths of the global-observation encoder MLP.
    pub global_hidden: [usize; 2],
    /// Forward offsets (meters, relative to the root) where terrain height is
    /// sampled for the global observation.
    pub global_grid: Vec<f64>,
}

/// Default non-uniform terrain sampling grid: dense near the robot, sparser
/// out to 4 m ahead, 23 points total.
pub fn default_global_grid() -> Vec<f64> {
    let mut grid = vec![-1.0, -0.5, -0.25];
    for i in 0..=10 {
        grid.push(i as f64 * 0.1);
    }
    for i in 1..=5 {
        grid.push(1.0 + i as f64 * 0.2);
    }
    grid.extend_from_slice(&[2.5, 3.0, 3.5, 4.0]);
    grid
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            layers: 5,
            heads: 1,
            ff_dim: 1024,
            n_max: 12,
            dropout: 0.1,
            action_std: 0.9,
            global_hidden: [64, 64],
            global_grid: default_global_grid(),
        }
    }
}

impl ModelConfig {
    /// Scaled-down architecture for fast local runs and tests.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            layers: 2,
            ff_dim: 128,
            n_max: 10,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    pub fn global_dim(&self) -> usize {
        self.global_grid.len()
    }
}

/// PPO training hyperparameters. Defaults are the full-scale settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Discount factor.
    pub gamma: f64,
    /// GAE lambda.
    pub gae_lambda: f64,
    /// PPO clipping parameter.
    pub clip_eps: f64,
    /// Optimization epochs per iteration (policy and value together).
    pub epochs: usize,
    /// Minibatch size in transitions.
    pub minibatch_size: usize,
    /// Entropy bonus coefficient.
    pub entropy_coef: f64,
    /// Value-loss coefficient.
    pub value_coef: f64,
    /// Symmetric reward clip applied after normalization.
    pub reward_clip: f64,
    /// Symmetric observation clip applied after normalization.
    pub obs_clip: f64,
    /// Per-environment transition budget per iteration.
    pub timesteps_per_rollout: usize,
    /// Worker threads collecting experience.
    pub workers: usize,
    /// Environment instances (spread across workers).
    pub envs: usize,
    /// Total environment transitions to collect over the run.
    pub total_timesteps: u64,
    /// Peak learning rate.
    pub lr: f64,
    /// Linear warmup length in iterations.
    pub lr_warmup_iters: usize,
    /// Global l2 gradient-norm clip.
    pub grad_clip: f64,
    /// EMA discount for the episode-length tracker.
    pub balance_alpha: f64,
    /// Prioritization exponent; 0 disables balancing (uniform sampling).
    pub balance_beta: f64,
    /// Iterations of uniform robot sampling before balancing activates.
    pub balance_warmup_iters: usize,
    /// Shuffle equal-depth siblings in the token order each episode.
    pub dfs_shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            epochs: 8,
            minibatch_size: 5120,
            entropy_coef: 0.01,
            value_coef: 0.5,
            reward_clip: 10.0,
            obs_clip: 10.0,
            timesteps_per_rollout: 2560,
            workers: 16,
            envs: 32,
            total_timesteps: 100_000_000,
            lr: 3e-4,
            lr_warmup_iters: 5,
            grad_clip: 0.5,
            balance_alpha: 0.1,
            balance_beta: 1.0,
            balance_warmup_iters: 100,
            dfs_shuffle: false,
        }
    }
}

impl TrainConfig {
    /// Scaled-down training profile: ~2e5 transitions, 4 worker threads,
    /// short horizons. Finishes in minutes while still learning visible
    /// forward locomotion on flat terrain.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            minibatch_size: 640,
            timesteps_per_rollout: 640,
            workers: 4,
            envs: 8,
            total_timesteps: 200_000,
            balance_warmup_iters: 5,
            ..TrainConfig::default()
        }
    }

    /// Transitions collected per iteration.
    pub fn iteration_budget(&self) -> u64 {
        (self.timesteps_per_rollout * self.envs) as u64
    }

    /// Number of iterations needed to reach `total_timesteps` (zero when the
    /// budget is zero).
    pub fn total_iterations(&self) -> usize {
        let per = self.iteration_budget().max(1);
        self.total_timesteps.div_ceil(per) as usize
    }
}

/// Learning rate at `iteration`: linear warmup to `lr` followed by cosine
/// decay over the remaining iterations.
pub fn lr_at(iteration: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.lr_warmup_iters;
    if iteration < warmup {
        return cfg.lr * iteration as f64 / warmup as f64;
    }
    let total = cfg.total_iterations();
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((iteration - warmup) as f64 / span).clamp(0.0, 1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Top-level run configuration: everything a `train` invocation needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    /// Directory of morphology files (or a single file).
    pub robots: String,
    pub seed: u64,
    pub out_dir: String,
    /// Iterations between checkpoints (a final checkpoint is always written).
    pub checkpoint_interval: usize,
    /// Episode horizon override; task default when absent.
    pub episode_horizon: Option<usize>,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub sim: SimParams,
    pub space: SpaceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Flat,
            robots: String::new(),
            seed: 0,
            out_dir: String::new(),
            checkpoint_interval: 50,
            episode_horizon: None,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            sim: SimParams::default(),
            space: SpaceConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale profile used by tests and quickstarts.
    pub fn desk() -> RunConfig {
        RunConfig {
            train: TrainConfig::desk(),
            model: ModelConfig::desk(),
            episode_horizon: Some(200),
            checkpoint_interval: 20,
            space: SpaceConfig {
                n_max: 10,
                ..SpaceConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn task_config(&self) -> TaskConfig {
        let mut tc = TaskConfig::for_task(self.task);
        if let Some(h) = self.episode_horizon {
            tc.episode_horizon = h;
        }
        tc
    }
}
