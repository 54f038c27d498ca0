//! Parallel episodic experience collection.
//!
//! Each environment slot owns a persistent RNG stream and repeatedly samples
//! a robot from the balancer distribution, runs one full episode (cut short
//! only by the per-slot transition budget, in which case the tail is
//! bootstrapped with the critic), and records transitions. Slots are
//! independent, so they run in parallel and merge in slot order; results are
//! bit-identical for a fixed (seed, env count) regardless of thread count.

use super::{RolloutBuffer, StepRecord, Trajectory, TrainError};
use crate::balancer::sample_index;
use crate::config::{ModelConfig, SimParams, SpaceConfig, TaskConfig, TrainConfig};
use crate::morphology::{dfs_token_order, MorphologyGraph, TokenOrder};
use crate::obs::{build_observation, normalize_bundle, ObservationBundle, RunningNormalizer, LOCAL_WIDTH};
use crate::policy::{flatten_live, Agent, DiagGaussian, ObsBatch};
use crate::sim::Env;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Reward scaling by the running standard deviation of discounted returns,
/// then clipping. Scaling never changes the sign of a reward.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardNormalizer {
    pub stats: RunningNormalizer,
    pub gamma: f64,
    pub clip: f64,
}

impl RewardNormalizer {
    pub fn new(gamma: f64, clip: f64) -> RewardNormalizer {
        RewardNormalizer {
            stats: RunningNormalizer::new(1, clip),
            gamma,
            clip,
        }
    }

    pub fn normalize(&self, r: f64) -> f64 {
        if self.stats.count < 1.0 {
            return r.clamp(-self.clip, self.clip);
        }
        let var = self.stats.m2[0] / self.stats.count;
        (r / (var + 1e-8).sqrt()).clamp(-self.clip, self.clip)
    }

    /// Fold the discounted returns of a finished iteration into the running
    /// statistics (trajectories in buffer order).
    pub fn update_from(&mut self, buffer: &RolloutBuffer) {
        for t in &buffer.trajectories {
            let mut acc = 0.0;
            for s in &t.steps {
                acc = self.gamma * acc + s.reward_raw;
                self.stats.update_row(&[acc]);
            }
        }
    }
}

/// Everything a rollout worker needs, shared read-only across slots.
pub struct RolloutCtx<'a> {
    pub agent: &'a Agent,
    pub graphs: &'a [MorphologyGraph],
    pub task: &'a TaskConfig,
    pub sim: &'a SimParams,
    pub space: &'a SpaceConfig,
    pub model_cfg: &'a ModelConfig,
    pub train_cfg: &'a TrainConfig,
    pub local_norm: &'a RunningNormalizer,
    pub global_norm: &'a RunningNormalizer,
    pub reward_norm: &'a RewardNormalizer,
    /// Robot sampling distribution for this iteration.
    pub probs: &'a [f64],
}

/// Map live (token, slot) action entries to env joint indices for one token
/// order.
pub fn live_action_map(
    g: &MorphologyGraph,
    model: &crate::sim::RobotModel,
    order: &TokenOrder,
) -> Vec<usize> {
    let _ = g;
    let mut map = Vec::new();
    for &node in &order.0 {
        for &j in &model.node_joints[node] {
            map.push(j);
        }
    }
    map
}

fn bundle_to_batch(
    bundle: &ObservationBundle,
    ctx: &RolloutCtx,
) -> ObsBatch {
    let (local, global) = normalize_bundle(bundle, ctx.local_norm, ctx.global_norm);
    ObsBatch::from_single(
        local,
        global,
        bundle.mask.clone(),
        bundle.joint_mask.clone(),
        bundle.n_max,
        LOCAL_WIDTH,
    )
}

fn collect_slot(
    ctx: &RolloutCtx,
    slot: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Trajectory>, TrainError> {
    let budget = ctx.train_cfg.timesteps_per_rollout;
    let n_max = ctx.model_cfg.n_max;
    let mut used = 0usize;
    let mut out = Vec::new();

    while used < budget {
        let robot = sample_index(ctx.probs, rng);
        let episode_seed = rng.next_u64();
        let graph = &ctx.graphs[robot];
        let mut env = Env::new(graph, ctx.task.clone(), ctx.sim.clone());
        env.reset(episode_seed);
        let order = if ctx.train_cfg.dfs_shuffle {
            dfs_token_order(graph, Some(rng), ctx.space)?
        } else {
            dfs_token_order(graph, None::<&mut ChaCha8Rng>, ctx.space)?
        };
        let action_map = live_action_map(graph, &env.model, &order);
        let mut traj = Trajectory {
            robot,
            steps: Vec::new(),
            bootstrap_value: 0.0,
            completed: false,
            episode_seed,
            env_slot: slot,
        };

        loop {
            let bundle = build_observation(
                graph,
                &env.model,
                &env.state,
                &env.terrain,
                &order,
                n_max,
                &ctx.model_cfg.global_grid,
            )?;
            let batch = bundle_to_batch(&bundle, ctx);
            let (mu_full, _) = ctx.agent.policy_means(&batch)?;
            let value = ctx.agent.value(&batch)?;
            let live_mu = flatten_live(&mu_full, &bundle.joint_mask);
            let dist = DiagGaussian {
                mu: live_mu,
                std: ctx.agent.action_std,
            };
            let live_action = dist.sample(rng);
            let log_prob = dist.log_prob(&live_action);

            let mut env_action = vec![0.0; env.joint_count()];
            for (k, &j) in action_map.iter().enumerate() {
                env_action[j] = live_action[k];
            }
            let outcome = env.step(&env_action).map_err(|source| TrainError::Sim {
                robot,
                seed: episode_seed,
                source,
            })?;

            let mut action_full = vec![0.0; n_max * 2];
            let mut k = 0;
            for (slot_idx, live) in bundle.joint_mask.iter().enumerate() {
                if *live {
                    action_full[slot_idx] = live_action[k];
                    k += 1;
                }
            }

            traj.steps.push(StepRecord {
                obs: bundle,
                action: action_full,
                log_prob,
                reward_raw: outcome.reward,
                reward: ctx.reward_norm.normalize(outcome.reward),
                value,
                done: outcome.done,
            });
            used += 1;

            if outcome.done {
                traj.completed = true;
                break;
            }
            if used >= budget {
                let bundle = build_observation(
                    graph,
                    &env.model,
                    &env.state,
                    &env.terrain,
                    &order,
                    n_max,
                    &ctx.model_cfg.global_grid,
                )?;
                let batch = bundle_to_batch(&bundle, ctx);
                traj.bootstrap_value = ctx.agent.value(&batch)?;
                break;
            }
        }
        out.push(traj);
    }
    Ok(out)
}

/// Collect one iteration of experience across all env slots.
pub fn collect_rollouts(
    ctx: &RolloutCtx,
    slot_rngs: &mut [ChaCha8Rng],
    pool: &rayon::ThreadPool,
) -> Result<RolloutBuffer, TrainError> {
    let results: Vec<Result<Vec<Trajectory>, TrainError>> = pool.install(|| {
        slot_rngs
            .par_iter_mut()
            .enumerate()
            .map(|(slot, rng)| collect_slot(ctx, slot, rng))
            .collect()
    });
    let mut buffer = RolloutBuffer::default();
    for r in results {
        buffer.trajectories.extend(r?);
    }
    Ok(buffer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, RunConfig, Task};
    use crate::morphology::sample_morphology;
    use crate::rng::stream;

    fn small_setup() -> (RunConfig, Vec<MorphologyGraph>, Agent) {
        let mut run = RunConfig::desk();
        run.model = ModelConfig {
            d_model: 16,
            layers: 1,
            ff_dim: 32,
            n_max: 10,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        run.train.timesteps_per_rollout = 25;
        run.train.envs = 2;
        run.episode_horizon = Some(40);
        run.task = Task::Flat;
        let graphs: Vec<MorphologyGraph> = (0..3)
            .map(|i| sample_morphology(&run.space, &mut stream(50 + i, "corpus", 0)))
            .collect();
        let agent = Agent::init(&run.model, LOCAL_WIDTH, run.model.global_dim(), &mut stream(1, "agent", 0));
        (run, graphs, agent)
    }

    fn collect(run: &RunConfig, graphs: &[MorphologyGraph], agent: &Agent, probs: &[f64]) -> RolloutBuffer {
        let task = run.task_config();
        let local_norm = RunningNormalizer::new(LOCAL_WIDTH, run.train.obs_clip);
        let global_norm = RunningNormalizer::new(run.model.global_dim(), run.train.obs_clip);
        let reward_norm = RewardNormalizer::new(run.train.gamma, run.train.reward_clip);
        let ctx = RolloutCtx {
            agent,
            graphs,
            task: &task,
            sim: &run.sim,
            space: &run.space,
            model_cfg: &run.model,
            train_cfg: &run.train,
            local_norm: &local_norm,
            global_norm: &global_norm,
            reward_norm: &reward_norm,
            probs,
        };
        let mut rngs: Vec<ChaCha8Rng> = (0..run.train.envs)
            .map(|i| stream(run.seed, "env", i as u64))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(run.train.workers)
            .build()
            .unwrap();
        collect_rollouts(&ctx, &mut rngs, &pool).unwrap()
    }

    #[test]
    fn budget_fills_exactly() {
        let (run, graphs, agent) = small_setup();
        let probs = vec![1.0 / 3.0; 3];
        let buffer = collect(&run, &graphs, &agent, &probs);
        assert_eq!(buffer.len(), 25 * 2, "envs x per-env budget transitions");
    }

    #[test]
    fn single_robot_pool_tags_every_transition() {
        let (run, graphs, agent) = small_setup();
        let buffer = collect(&run, &graphs[..1], &agent, &[1.0]);
        assert!(buffer.trajectories.iter().all(|t| t.robot == 0));
    }

    #[test]
    fn collection_is_deterministic() {
        let (run, graphs, agent) = small_setup();
        let probs = vec![1.0 / 3.0; 3];
        let a = collect(&run, &graphs, &agent, &probs);
        let b = collect(&run, &graphs, &agent, &probs);
        assert_eq!(a.trajectories.len(), b.trajectories.len());
        for (x, y) in a.trajectories.iter().zip(&b.trajectories) {
            assert_eq!(x.robot, y.robot);
            assert_eq!(x.episode_seed, y.episode_seed);
            assert_eq!(x.steps.len(), y.steps.len());
            for (sx, sy) in x.steps.iter().zip(&y.steps) {
                assert_eq!(sx.action, sy.action);
                assert_eq!(sx.reward_raw.to_bits(), sy.reward_raw.to_bits());
                assert_eq!(sx.log_prob.to_bits(), sy.log_prob.to_bits());
                assert_eq!(sx.value.to_bits(), sy.value.to_bits());
            }
        }
    }

    #[test]
    fn reward_normalizer_preserves_sign_and_clips() {
        let mut rn = RewardNormalizer::new(0.99, 10.0);
        // tiny variance makes the scale huge: clipping must kick in
        for _ in 0..50 {
            rn.stats.update_row(&[0.01]);
        }
        assert_eq!(rn.normalize(5.0), 10.0);
        assert_eq!(rn.normalize(-5.0), -10.0);
        let x = rn.normalize(1e-9);
        assert!(x > 0.0);
        // before any data: identity plus clip
        let fresh = RewardNormalizer::new(0.99, 10.0);
        assert_eq!(fresh.normalize(3.5), 3.5);
        assert_eq!(fresh.normalize(-30.0), -10.0);
    }
}
