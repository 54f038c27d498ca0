//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic `MMCKPT01`, little-endian u64 header length, a JSON
//! header (layout version, config echo, training counters, rng stream
//! positions, tensor directory), then raw little-endian f64 tensor data.
//! Tensor bytes round-trip bit-exactly, so a loaded model reproduces the
//! saved model's forward passes to the last bit.

use crate::balancer::PerformanceTracker;
use crate::config::RunConfig;
use crate::nn::{Adam, Tensor};
use crate::obs::{RunningNormalizer, OBS_LAYOUT_VERSION};
use crate::policy::Agent;
use crate::ppo::{RewardNormalizer, Trainer};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"MMCKPT01";
pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("checkpoint layout version {got} does not match {want}")]
    LayoutVersion { got: u32, want: u32 },
    #[error("observation layout {got} does not match {want}")]
    ObsLayout { got: u32, want: u32 },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("truncated tensor data for {0}")]
    Truncated(String),
    #[error("checkpoint has no training state (parameters only)")]
    NoTrainState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    /// ChaCha word positions as decimal strings, one per env slot.
    pub env: Vec<String>,
    pub learner: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalancerState {
    pub tau: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: usize,
    pub timesteps: u64,
    pub rng: RngState,
    pub balancer: BalancerState,
    pub adam_policy_t: u64,
    pub adam_critic_t: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layout_version: u32,
    pub obs_layout: u32,
    pub config: RunConfig,
    pub train_state: Option<TrainState>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }
}

fn normalizer_tensors(prefix: &str, n: &RunningNormalizer, out: &mut Vec<(String, Tensor)>) {
    out.push((format!("{prefix}.mean"), Tensor::from_vec(n.mean.clone())));
    out.push((format!("{prefix}.m2"), Tensor::from_vec(n.m2.clone())));
    out.push((format!("{prefix}.count"), Tensor::from_vec(vec![n.count])));
}

fn normalizer_from(
    prefix: &str,
    clip: f64,
    ckpt: &Checkpoint,
) -> Result<RunningNormalizer, CheckpointError> {
    let mean = ckpt.tensor(&format!("{prefix}.mean"))?.data.clone();
    let m2 = ckpt.tensor(&format!("{prefix}.m2"))?.data.clone();
    let count = ckpt.tensor(&format!("{prefix}.count"))?.data[0];
    Ok(RunningNormalizer {
        mean,
        m2,
        count,
        clip,
    })
}

/// Serialize the full training state of a trainer.
pub fn save_trainer(path: &Path, trainer: &Trainer) -> Result<(), CheckpointError> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    let agent = &trainer.agent;
    for (name, t) in agent.policy.params.names.iter().zip(&agent.policy.params.tensors) {
        tensors.push((name.clone(), t.clone()));
    }
    for (name, t) in agent.critic.params.names.iter().zip(&agent.critic.params.tensors) {
        tensors.push((name.clone(), t.clone()));
    }
    normalizer_tensors("norm.obs.local", &trainer.local_norm, &mut tensors);
    normalizer_tensors("norm.obs.global", &trainer.global_norm, &mut tensors);
    normalizer_tensors("norm.reward", &trainer.reward_norm.stats, &mut tensors);
    tensors.push((
        "balancer.e".to_string(),
        Tensor::from_vec(trainer.balancer.e.clone()),
    ));
    for (name, m) in agent.policy.params.names.iter().zip(&trainer.policy_opt.m) {
        tensors.push((format!("opt.{name}.m"), m.clone()));
    }
    for (name, v) in agent.policy.params.names.iter().zip(&trainer.policy_opt.v) {
        tensors.push((format!("opt.{name}.v"), v.clone()));
    }
    for (name, m) in agent.critic.params.names.iter().zip(&trainer.critic_opt.m) {
        tensors.push((format!("opt.{name}.m"), m.clone()));
    }
    for (name, v) in agent.critic.params.names.iter().zip(&trainer.critic_opt.v) {
        tensors.push((format!("opt.{name}.v"), v.clone()));
    }

    let train_state = TrainState {
        iteration: trainer.iteration,
        timesteps: trainer.timesteps,
        rng: RngState {
            env: trainer
                .slot_rngs
                .iter()
                .map(|r| r.get_word_pos().to_string())
                .collect(),
            learner: trainer.learner_rng.get_word_pos().to_string(),
        },
        balancer: BalancerState {
            tau: trainer.balancer.tau,
        },
        adam_policy_t: trainer.policy_opt.t,
        adam_critic_t: trainer.critic_opt.t,
    };
    write_container(path, &trainer.run, Some(train_state), &tensors)
}

fn write_container(
    path: &Path,
    config: &RunConfig,
    train_state: Option<TrainState>,
    tensors: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    let mut directory = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        directory.push(TensorEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset,
            len: t.data.len() as u64,
        });
        offset += t.data.len() as u64 * 8;
    }
    let header = CheckpointHeader {
        layout_version: LAYOUT_VERSION,
        obs_layout: OBS_LAYOUT_VERSION,
        config: config.clone(),
        train_state,
        tensors: directory,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, t) in tensors {
        for x in &t.data {
            file.write_all(&x.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    if header.layout_version != LAYOUT_VERSION {
        return Err(CheckpointError::LayoutVersion {
            got: header.layout_version,
            want: LAYOUT_VERSION,
        });
    }
    if header.obs_layout != OBS_LAYOUT_VERSION {
        return Err(CheckpointError::ObsLayout {
            got: header.obs_layout,
            want: OBS_LAYOUT_VERSION,
        });
    }
    let mut data = Vec::new();
    file.read_to_end(&mut data)?;
    let mut tensors = HashMap::new();
    for entry in &header.tensors {
        let start = entry.offset as usize;
        let end = start + entry.len as usize * 8;
        if end > data.len() {
            return Err(CheckpointError::Truncated(entry.name.clone()));
        }
        let values: Vec<f64> = data[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), values));
    }
    Ok(Checkpoint { header, tensors })
}

/// Rebuild the policy/critic pair and observation normalizers from a loaded
/// checkpoint (enough for evaluation).
pub fn agent_from(
    ckpt: &Checkpoint,
) -> Result<(Agent, RunningNormalizer, RunningNormalizer), CheckpointError> {
    let cfg = &ckpt.header.config;
    let mut seed_rng = crate::rng::stream(0, "ckpt-shape", 0);
    let mut agent = Agent::init(
        &cfg.model,
        crate::obs::LOCAL_WIDTH,
        cfg.model.global_dim(),
        &mut seed_rng,
    );
    for (name, t) in agent
        .policy
        .params
        .names
        .clone()
        .iter()
        .zip(agent.policy.params.tensors.iter_mut())
    {
        *t = ckpt.tensor(name)?.clone();
    }
    for (name, t) in agent
        .critic
        .params
        .names
        .clone()
        .iter()
        .zip(agent.critic.params.tensors.iter_mut())
    {
        *t = ckpt.tensor(name)?.clone();
    }
    let local = normalizer_from("norm.obs.local", cfg.train.obs_clip, ckpt)?;
    let global = normalizer_from("norm.obs.global", cfg.train.obs_clip, ckpt)?;
    Ok((agent, local, global))
}

/// Rebuild a full trainer for bit-exact resume. The robot corpus must match
/// the one the checkpoint was trained on.
pub fn trainer_from(
    ckpt: &Checkpoint,
    names: Vec<String>,
    graphs: Vec<crate::morphology::MorphologyGraph>,
) -> Result<Trainer, CheckpointError> {
    let state = ckpt
        .header
        .train_state
        .clone()
        .ok_or(CheckpointError::NoTrainState)?;
    let cfg = ckpt.header.config.clone();
    let (agent, local, global) = agent_from(ckpt)?;
    let reward_stats = normalizer_from("norm.reward", cfg.train.reward_clip, ckpt)?;
    let reward = RewardNormalizer {
        stats: reward_stats,
        gamma: cfg.train.gamma,
        clip: cfg.train.reward_clip,
    };
    let mut trainer = Trainer::from_parts(
        cfg.clone(),
        names,
        graphs,
        agent,
        Some((local, global, reward)),
    )
    .map_err(|e| CheckpointError::Io(std::io::Error::other(e.to_string())))?;

    trainer.iteration = state.iteration;
    trainer.timesteps = state.timesteps;
    let env_pos: Vec<u128> = state
        .rng
        .env
        .iter()
        .map(|s| s.parse().expect("rng position"))
        .collect();
    trainer.restore_rngs(&env_pos, state.rng.learner.parse().expect("rng position"));

    let e = ckpt.tensor("balancer.e")?.data.clone();
    trainer.balancer = PerformanceTracker::new(
        e.len(),
        cfg.train.balance_alpha,
        cfg.train.balance_beta,
        cfg.task_config().episode_horizon,
        cfg.train.balance_warmup_iters,
    );
    trainer.balancer.e = e;
    trainer.balancer.tau = state.balancer.tau;

    let mut policy_opt = Adam::new(&trainer.agent.policy.params.shapes(), cfg.train.grad_clip);
    policy_opt.t = state.adam_policy_t;
    for (i, name) in trainer.agent.policy.params.names.iter().enumerate() {
        policy_opt.m[i] = ckpt.tensor(&format!("opt.{name}.m"))?.clone();
        policy_opt.v[i] = ckpt.tensor(&format!("opt.{name}.v"))?.clone();
    }
    let mut critic_opt = Adam::new(&trainer.agent.critic.params.shapes(), cfg.train.grad_clip);
    critic_opt.t = state.adam_critic_t;
    for (i, name) in trainer.agent.critic.params.names.iter().enumerate() {
        critic_opt.m[i] = ckpt.tensor(&format!("opt.{name}.m"))?.clone();
        critic_opt.v[i] = ckpt.tensor(&format!("opt.{name}.v"))?.clone();
    }
    trainer.policy_opt = policy_opt;
    trainer.critic_opt = critic_opt;
    Ok(trainer)
}
