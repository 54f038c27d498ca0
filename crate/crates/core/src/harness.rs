//! Command implementations behind the CLI: training runs, deterministic
//! evaluation, the zero-shot variation protocol, transfer runs, analysis
//! outputs, and corpus/variant generation.

use crate::analysis::{crop_attention, pos_embed_cosine, stable_rank, AttentionRecord};
use crate::checkpoint::{self, CheckpointError};
use crate::config::{RunConfig, SpaceConfig, Task, TaskConfig};
use crate::morphology::{
    dfs_token_order, load_morphology, sample_morphology, serialize_morphology, MorphologyGraph,
    MorphologyError,
};
use crate::obs::{build_observation, normalize_bundle, RunningNormalizer, LOCAL_WIDTH};
use crate::policy::{flatten_live, Agent, ObsBatch};
use crate::ppo::{TrainError, Trainer};
use crate::rng::stream;
use crate::sim::Env;
use crate::variation::{build_variant_suite, SuiteManifest, VariationError, VariationKind};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Morphology(#[from] MorphologyError),
    #[error("{0}")]
    Variation(#[from] VariationError),
    #[error("{0}")]
    Analysis(#[from] crate::analysis::AnalysisError),
    #[error("{0}")]
    Nn(#[from] crate::nn::NnError),
    #[error("{0}")]
    Obs(#[from] crate::obs::ObsError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    BadInput(String),
}

/// Load a corpus: every `*.json` in a directory (sorted by file name) or a
/// single morphology file.
pub fn load_corpus(
    path: &Path,
    space: &SpaceConfig,
) -> Result<Vec<(String, MorphologyGraph)>, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::BadInput(format!(
            "robot corpus path does not exist: {}",
            path.display()
        )));
    }
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "json") {
                files.push(p);
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(HarnessError::BadInput(format!(
                "no .json morphology files in {}",
                path.display()
            )));
        }
    } else {
        files.push(path.to_path_buf());
    }
    files
        .iter()
        .map(|f| {
            let name = f
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, load_morphology(f, space)?))
        })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), HarnessError> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Run metadata echoed alongside the metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub robots: Vec<String>,
    pub scratch: bool,
    pub source_checkpoint: Option<String>,
}

pub fn checkpoint_path(run_dir: &Path, tag: &str) -> PathBuf {
    run_dir.join(format!("checkpoint_{tag}.bin"))
}

fn train_into_dir(trainer: &mut Trainer, run_dir: &Path, meta: &RunMeta) -> Result<(), HarnessError> {
    std::fs::create_dir_all(run_dir)?;
    write_json(&run_dir.join("config.json"), &trainer.run)?;
    write_json(&run_dir.join("run.json"), meta)?;
    checkpoint::save_trainer(&checkpoint_path(run_dir, "init"), trainer)?;

    let metrics_path = run_dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let interval = trainer.run.checkpoint_interval.max(1);
    let dir = run_dir.to_path_buf();
    trainer.train_loop(move |t, m| {
        use std::io::Write;
        serde_json::to_writer(&mut metrics, m).map_err(TrainError::Json)?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        if t.iteration % interval == 0 {
            checkpoint::save_trainer(
                &dir.join(format!("checkpoint_iter{:06}.bin", t.iteration)),
                t,
            )
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        }
        Ok(())
    })?;
    checkpoint::save_trainer(&checkpoint_path(run_dir, "final"), trainer)?;
    Ok(())
}

/// Train a fresh model on a corpus; returns the run directory.
pub fn cmd_train(run: RunConfig) -> Result<PathBuf, HarnessError> {
    if run.out_dir.is_empty() {
        return Err(HarnessError::BadInput("out_dir is required".into()));
    }
    let corpus = load_corpus(Path::new(&run.robots), &run.space)?;
    let (names, graphs): (Vec<_>, Vec<_>) = corpus.into_iter().unzip();
    let run_dir = PathBuf::from(&run.out_dir);
    let meta = RunMeta {
        robots: names.clone(),
        scratch: true,
        source_checkpoint: None,
    };
    let mut trainer = Trainer::new(run, names, graphs)?;
    train_into_dir(&mut trainer, &run_dir, &meta)?;
    Ok(run_dir)
}

/// Continue training from an interrupted run's checkpoint, appending to the
/// same run directory.
pub fn cmd_resume(run_dir: &Path, checkpoint_file: &Path) -> Result<(), HarnessError> {
    let ckpt = checkpoint::load(checkpoint_file)?;
    let cfg = ckpt.header.config.clone();
    let corpus = load_corpus(Path::new(&cfg.robots), &cfg.space)?;
    let (names, graphs): (Vec<_>, Vec<_>) = corpus.into_iter().unzip();
    let mut trainer = checkpoint::trainer_from(&ckpt, names, graphs)?;
    let interval = trainer.run.checkpoint_interval.max(1);
    let metrics_path = run_dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)?,
    );
    let dir = run_dir.to_path_buf();
    trainer.train_loop(move |t, m| {
        use std::io::Write;
        serde_json::to_writer(&mut metrics, m).map_err(TrainError::Json)?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        if t.iteration % interval == 0 {
            checkpoint::save_trainer(
                &dir.join(format!("checkpoint_iter{:06}.bin", t.iteration)),
                t,
            )
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        }
        Ok(())
    })?;
    checkpoint::save_trainer(&checkpoint_path(run_dir, "final"), &trainer)?;
    Ok(())
}

/// How evaluation episodes choose actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalPolicy {
    /// Deterministic: actions are the policy means.
    Mean,
    /// Uniform random torques in [-1, 1] (the random-policy baseline).
    Random,
}

/// Run one evaluation episode; returns (total raw reward, episode length).
#[allow(clippy::too_many_arguments)]
fn eval_episode(
    agent: &Agent,
    graph: &MorphologyGraph,
    run: &RunConfig,
    task: &TaskConfig,
    local_norm: &RunningNormalizer,
    global_norm: &RunningNormalizer,
    terrain_seed: u64,
    policy: EvalPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize), HarnessError> {
    let mut env = Env::new(graph, task.clone(), run.sim.clone());
    env.reset(terrain_seed);
    let order = dfs_token_order(graph, None::<&mut ChaCha8Rng>, &run.space)?;
    let action_map = crate::ppo::rollout::live_action_map(graph, &env.model, &order);
    let mut total = 0.0;
    let mut steps = 0usize;
    loop {
        let bundle = build_observation(
            graph,
            &env.model,
            &env.state,
            &env.terrain,
            &order,
            run.model.n_max,
            &run.model.global_grid,
        )?;
        let live_action = match policy {
            EvalPolicy::Mean => {
                let (local, global) = normalize_bundle(&bundle, local_norm, global_norm);
                let batch = ObsBatch::from_single(
                    local,
                    global,
                    bundle.mask.clone(),
                    bundle.joint_mask.clone(),
                    bundle.n_max,
                    LOCAL_WIDTH,
                );
                let (mu_full, _) = agent.policy_means(&batch)?;
                flatten_live(&mu_full, &bundle.joint_mask)
            }
            EvalPolicy::Random => (0..bundle.live_joints())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        };
        let mut env_action = vec![0.0; env.joint_count()];
        for (k, &j) in action_map.iter().enumerate() {
            env_action[j] = live_action[k];
        }
        let out = env.step(&env_action).map_err(|source| TrainError::Sim {
            robot: 0,
            seed: terrain_seed,
            source,
        })?;
        total += out.reward;
        steps += 1;
        if out.done {
            break;
        }
    }
    Ok((total, steps))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub robot: String,
    pub trials: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub mean_episode_len: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub trials: usize,
    pub seed: u64,
    pub random_actions: bool,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mean_over_robots(&self) -> f64 {
        self.rows.iter().map(|r| r.mean_reward).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn min_over_robots(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.mean_reward)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Deterministic zero-shot evaluation of a checkpoint on a corpus: `trials`
/// episodes per robot with distinct terrain seeds, actions at the policy
/// mean (or uniform random with `EvalPolicy::Random`).
pub fn cmd_evaluate(
    checkpoint_file: &Path,
    robots: &Path,
    task: Task,
    trials: usize,
    seed: u64,
    policy: EvalPolicy,
    horizon_override: Option<usize>,
) -> Result<EvalReport, HarnessError> {
    let ckpt = checkpoint::load(checkpoint_file)?;
    let (agent, local_norm, global_norm) = checkpoint::agent_from(&ckpt)?;
    let mut run = ckpt.header.config.clone();
    run.task = task;
    if let Some(h) = horizon_override {
        run.episode_horizon = Some(h);
    }
    let task_cfg = run.task_config();
    let corpus = load_corpus(robots, &run.space)?;
    let mut rows = Vec::with_capacity(corpus.len());
    for (ri, (name, graph)) in corpus.iter().enumerate() {
        let mut rewards = Vec::with_capacity(trials);
        let mut lens = Vec::with_capacity(trials);
        for trial in 0..trials {
            let mut rng = stream(seed, "eval", (ri as u64) << 20 | trial as u64);
            let terrain_seed = rng.next_u64();
            let (reward, len) = eval_episode(
                &agent,
                graph,
                &run,
                &task_cfg,
                &local_norm,
                &global_norm,
                terrain_seed,
                policy,
                &mut rng,
            )?;
            rewards.push(reward);
            lens.push(len);
        }
        let mean = rewards.iter().sum::<f64>() / trials as f64;
        let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / trials as f64;
        rows.push(EvalRow {
            robot: name.clone(),
            trials,
            mean_reward: mean,
            std_reward: var.sqrt(),
            mean_episode_len: lens.iter().sum::<usize>() as f64 / trials as f64,
        });
    }
    Ok(EvalReport {
        task,
        trials,
        seed,
        random_actions: policy == EvalPolicy::Random,
        rows,
    })
}

/// Percentile bootstrap confidence interval for the mean.
pub fn bootstrap_ci(
    values: &[f64],
    resamples: usize,
    confidence: f64,
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    assert!(!values.is_empty());
    let n = values.len();
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut acc = 0.0;
        for _ in 0..n {
            acc += values[rng.gen_range(0..n)];
        }
        means.push(acc / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = (1.0 - confidence) / 2.0;
    let pick = |p: f64| means[((means.len() - 1) as f64 * p).round() as usize];
    (pick(q), pick(1.0 - q))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KindAggregate {
    pub kind: VariationKind,
    pub variants: usize,
    pub mean_reward: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZeroshotReport {
    pub task: Task,
    pub trials: usize,
    pub seed: u64,
    pub bootstrap_resamples: usize,
    pub per_variant: Vec<EvalRow>,
    pub aggregates: Vec<KindAggregate>,
}

/// Evaluate every variant of a suite and aggregate per variation kind with a
/// bootstrap 95% confidence interval over variant means.
pub fn cmd_zeroshot(
    checkpoint_file: &Path,
    manifest_file: &Path,
    task: Task,
    trials: usize,
    seed: u64,
) -> Result<ZeroshotReport, HarnessError> {
    let manifest: SuiteManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_file)?)?;
    let suite_dir = manifest_file
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let ckpt = checkpoint::load(checkpoint_file)?;
    let (agent, local_norm, global_norm) = checkpoint::agent_from(&ckpt)?;
    let mut run = ckpt.header.config.clone();
    run.task = task;
    let task_cfg = run.task_config();

    let mut per_variant = Vec::new();
    let mut by_kind: std::collections::BTreeMap<&'static str, Vec<f64>> =
        std::collections::BTreeMap::new();
    for (vi, entry) in manifest.entries.iter().enumerate() {
        let path = suite_dir.join(&entry.path);
        if !path.exists() {
            return Err(HarnessError::BadInput(format!(
                "variant file missing: {}",
                path.display()
            )));
        }
        let graph = load_morphology(&path, &run.space)?;
        let mut rewards = Vec::with_capacity(trials);
        let mut lens = Vec::with_capacity(trials);
        for trial in 0..trials {
            let mut rng = stream(seed, "zeroshot", (vi as u64) << 20 | trial as u64);
            let terrain_seed = rng.next_u64();
            let (reward, len) = eval_episode(
                &agent,
                &graph,
                &run,
                &task_cfg,
                &local_norm,
                &global_norm,
                terrain_seed,
                EvalPolicy::Mean,
                &mut rng,
            )?;
            rewards.push(reward);
            lens.push(len);
        }
        let mean = rewards.iter().sum::<f64>() / trials as f64;
        let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / trials as f64;
        per_variant.push(EvalRow {
            robot: graph.name.clone(),
            trials,
            mean_reward: mean,
            std_reward: var.sqrt(),
            mean_episode_len: lens.iter().sum::<usize>() as f64 / trials as f64,
        });
        by_kind.entry(entry.kind.as_str()).or_default().push(mean);
    }

    let resamples = 10_000;
    let aggregates = by_kind
        .iter()
        .enumerate()
        .map(|(ki, (kind, means))| {
            let mut rng = stream(seed, "bootstrap", ki as u64);
            let (lo, hi) = bootstrap_ci(means, resamples, 0.95, &mut rng);
            KindAggregate {
                kind: VariationKind::parse(kind).expect("kind name"),
                variants: means.len(),
                mean_reward: means.iter().sum::<f64>() / means.len() as f64,
                ci_lo: lo,
                ci_hi: hi,
            }
        })
        .collect();

    Ok(ZeroshotReport {
        task,
        trials,
        seed,
        bootstrap_resamples: resamples,
        per_variant,
        aggregates,
    })
}

/// Fine-tune a checkpoint on a new corpus/task (or train the paired
/// from-scratch control with identical seeds when `scratch` is set).
pub fn cmd_transfer(
    checkpoint_file: &Path,
    run_overrides: RunConfig,
    scratch: bool,
) -> Result<PathBuf, HarnessError> {
    let ckpt = checkpoint::load(checkpoint_file)?;
    let mut run = run_overrides;
    // Architecture and observation layout always come from the checkpoint.
    run.model = ckpt.header.config.model.clone();
    if run.out_dir.is_empty() {
        return Err(HarnessError::BadInput("out_dir is required".into()));
    }
    let corpus = load_corpus(Path::new(&run.robots), &run.space)?;
    let (names, graphs): (Vec<_>, Vec<_>) = corpus.into_iter().unzip();
    let run_dir = PathBuf::from(&run.out_dir);
    let meta = RunMeta {
        robots: names.clone(),
        scratch,
        source_checkpoint: Some(checkpoint_file.display().to_string()),
    };
    let mut trainer = if scratch {
        Trainer::new(run, names, graphs)?
    } else {
        let (agent, local_norm, global_norm) = checkpoint::agent_from(&ckpt)?;
        let reward_norm = crate::ppo::RewardNormalizer::new(run.train.gamma, run.train.reward_clip);
        Trainer::from_parts(
            run,
            names,
            graphs,
            agent,
            Some((local_norm, global_norm, reward_norm)),
        )?
    };
    train_into_dir(&mut trainer, &run_dir, &meta)?;
    Ok(run_dir)
}

/// Attention stable-rank trace of a deterministic episode.
pub fn cmd_analyze_stablerank(
    checkpoint_file: &Path,
    robot_file: &Path,
    task: Task,
    steps: usize,
    seed: u64,
) -> Result<Vec<AttentionRecord>, HarnessError> {
    let ckpt = checkpoint::load(checkpoint_file)?;
    let (agent, local_norm, global_norm) = checkpoint::agent_from(&ckpt)?;
    let mut run = ckpt.header.config.clone();
    run.task = task;
    let task_cfg = run.task_config();
    let graph = load_morphology(robot_file, &run.space)?;
    let order = dfs_token_order(&graph, None::<&mut ChaCha8Rng>, &run.space)?;
    let mut env = Env::new(&graph, task_cfg, run.sim.clone());
    env.reset(stream(seed, "trace", 0).next_u64());
    let action_map = crate::ppo::rollout::live_action_map(&graph, &env.model, &order);

    let mut records = Vec::new();
    for step in 0..steps {
        let bundle = build_observation(
            &graph,
            &env.model,
            &env.state,
            &env.terrain,
            &order,
            run.model.n_max,
            &run.model.global_grid,
        )?;
        let (local, global) = normalize_bundle(&bundle, &local_norm, &global_norm);
        let batch = ObsBatch::from_single(
            local,
            global,
            bundle.mask.clone(),
            bundle.joint_mask.clone(),
            bundle.n_max,
            LOCAL_WIDTH,
        );
        let (mu_full, attentions) = agent.policy_means(&batch)?;
        for (layer, heads) in attentions.iter().enumerate() {
            for (head, a) in heads.iter().enumerate() {
                let (sub, m) = crop_attention(a, &bundle.mask);
                let sr = stable_rank(&sub, m, m)?;
                records.push(AttentionRecord {
                    step,
                    layer,
                    head,
                    attention: sub,
                    tokens: m,
                    stable_rank: sr,
                });
            }
        }
        let live = flatten_live(&mu_full, &bundle.joint_mask);
        let mut env_action = vec![0.0; env.joint_count()];
        for (k, &j) in action_map.iter().enumerate() {
            env_action[j] = live[k];
        }
        let out = env.step(&env_action).map_err(|source| TrainError::Sim {
            robot: 0,
            seed,
            source,
        })?;
        if out.done {
            env.reset(stream(seed, "trace", 1 + step as u64).next_u64());
        }
    }
    Ok(records)
}

/// Cosine-similarity matrix of the policy position embeddings.
pub fn cmd_analyze_posembed(checkpoint_file: &Path) -> Result<(usize, Vec<f64>), HarnessError> {
    let ckpt = checkpoint::load(checkpoint_file)?;
    let wpos = ckpt.tensor("policy.Wpos")?;
    let n = wpos.shape[0];
    Ok((n, pos_embed_cosine(wpos)))
}

/// Mean/std learning curves of one metric across runs (same iteration grid).
pub fn cmd_analyze_curves(
    run_dirs: &[PathBuf],
    key: &str,
) -> Result<Vec<(u64, f64, f64)>, HarnessError> {
    let mut runs = Vec::new();
    for dir in run_dirs {
        let text = std::fs::read_to_string(dir.join("metrics.jsonl"))?;
        let mut series = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(line)?;
            let it = v
                .get("iteration")
                .and_then(|x| x.as_u64())
                .ok_or_else(|| HarnessError::BadInput("metrics line lacks iteration".into()))?;
            let value = v
                .get(key)
                .and_then(|x| x.as_f64())
                .ok_or_else(|| crate::analysis::AnalysisError::MissingKey(key.to_string()))?;
            series.push((it, value));
        }
        runs.push(series);
    }
    Ok(crate::analysis::summarize_metrics(&runs)?)
}

/// Sample a corpus of robots into a directory; returns the file list.
pub fn cmd_make_corpus(
    out_dir: &Path,
    count: usize,
    seed: u64,
    space: &SpaceConfig,
) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = stream(seed, "corpus", i as u64);
        let mut graph = sample_morphology(space, &mut rng);
        graph.name = format!("robot_{i:03}");
        let path = out_dir.join(format!("robot_{i:03}.json"));
        std::fs::write(&path, serialize_morphology(&graph, space)?)?;
        files.push(path);
    }
    Ok(files)
}

/// Build a variant suite for a corpus; returns the manifest path.
pub fn cmd_make_variants(
    robots: &Path,
    out_dir: &Path,
    kinds: &[VariationKind],
    variants_per_robot: usize,
    seed: u64,
    space: &SpaceConfig,
) -> Result<PathBuf, HarnessError> {
    let corpus = load_corpus(robots, space)?;
    let manifest = build_variant_suite(&corpus, kinds, variants_per_robot, space, seed, out_dir)?;
    let path = out_dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Write attention records as JSON lines plus a flat CSV of stable ranks.
pub fn write_attention_outputs(
    records: &[AttentionRecord],
    out_dir: &Path,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let mut jsonl = String::new();
    let mut csv = String::from("step,layer,head,tokens,stable_rank\n");
    for r in records {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
        csv.push_str(&format!(
            "{},{},{},{},{:.12}\n",
            r.step, r.layer, r.head, r.tokens, r.stable_rank
        ));
    }
    std::fs::write(out_dir.join("stable_rank.jsonl"), jsonl)?;
    std::fs::write(out_dir.join("stable_rank.csv"), csv)?;
    Ok(())
}

/// Write an n x n matrix as CSV.
pub fn write_matrix_csv(path: &Path, n: usize, data: &[f64]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| format!("{:.12}", data[i * n + j])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write (iteration, mean, std) curves as CSV.
pub fn write_curves_csv(path: &Path, rows: &[(u64, f64, f64)]) -> Result<(), HarnessError> {
    let mut out = String::from("iteration,mean,std\n");
    for (it, mean, std) in rows {
        out.push_str(&format!("{it},{mean:.12},{std:.12}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    pub(crate) fn tiny_run_config(out: &Path, robots: &Path, seed: u64) -> RunConfig {
        let mut run = RunConfig::desk();
        run.model = ModelConfig {
            d_model: 16,
            layers: 1,
            ff_dim: 32,
            n_max: 10,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        run.train.timesteps_per_rollout = 30;
        run.train.envs = 2;
        run.train.workers = 2;
        run.train.minibatch_size = 30;
        run.train.epochs = 2;
        run.train.total_timesteps = 240;
        run.episode_horizon = Some(25);
        run.checkpoint_interval = 2;
        run.seed = seed;
        run.robots = robots.display().to_string();
        run.out_dir = out.display().to_string();
        run
    }

    #[test]
    fn end_to_end_train_evaluate_zeroshot() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        let space = SpaceConfig {
            n_max: 10,
            ..SpaceConfig::default()
        };
        let files = cmd_make_corpus(&corpus_dir, 2, 7, &space).unwrap();
        assert_eq!(files.len(), 2);

        let out = dir.path().join("run");
        let mut run = tiny_run_config(&out, &corpus_dir, 3);
        run.space = space.clone();
        let run_dir = cmd_train(run).unwrap();
        assert!(checkpoint_path(&run_dir, "final").exists());
        assert!(run_dir.join("metrics.jsonl").exists());
        assert!(run_dir.join("config.json").exists());

        // effective-config echo reparses to the exact config used
        let echoed: RunConfig = serde_json::from_str(
            &std::fs::read_to_string(run_dir.join("config.json")).unwrap(),
        )
        .unwrap();
        let ckpt = checkpoint::load(&checkpoint_path(&run_dir, "final")).unwrap();
        assert_eq!(
            serde_json::to_string(&echoed).unwrap(),
            serde_json::to_string(&ckpt.header.config).unwrap()
        );

        let report = cmd_evaluate(
            &checkpoint_path(&run_dir, "final"),
            &corpus_dir,
            Task::Flat,
            3,
            5,
            EvalPolicy::Mean,
            Some(25),
        )
        .unwrap();
        assert_eq!(report.rows.len(), 2);
        let report2 = cmd_evaluate(
            &checkpoint_path(&run_dir, "final"),
            &corpus_dir,
            Task::Flat,
            3,
            5,
            EvalPolicy::Mean,
            Some(25),
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&report2).unwrap(),
            "evaluation is deterministic"
        );

        // zero-shot over a 2-kind suite
        let suite_dir = dir.path().join("suite");
        let manifest = cmd_make_variants(
            &corpus_dir,
            &suite_dir,
            &[VariationKind::Gear, VariationKind::Damping],
            2,
            9,
            &space,
        )
        .unwrap();
        let zs = cmd_zeroshot(
            &checkpoint_path(&run_dir, "final"),
            &manifest,
            Task::Flat,
            2,
            11,
        )
        .unwrap();
        assert_eq!(zs.per_variant.len(), 8, "2 robots x 2 kinds x 2 variants");
        assert_eq!(zs.aggregates.len(), 2);
        for agg in &zs.aggregates {
            assert_eq!(agg.variants, 4);
            assert!(agg.ci_lo <= agg.mean_reward + 1e-12);
            assert!(agg.ci_hi >= agg.mean_reward - 1e-12);
        }
    }

    #[test]
    fn missing_corpus_is_a_clear_error() {
        let err = load_corpus(Path::new("/nonexistent/robots"), &SpaceConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("/nonexistent/robots"));
    }

    #[test]
    fn bootstrap_matches_binomial_analytics() {
        // 25 zeros and 25 ones alternating: mean 0.5, std of the mean
        // 0.5/sqrt(50) = 0.0707; the 95% interval is about [0.36, 0.64].
        let values: Vec<f64> = (0..50).map(|i| (i % 2) as f64).collect();
        let mut rng = stream(3, "boot", 0);
        let (lo, hi) = bootstrap_ci(&values, 10_000, 0.95, &mut rng);
        assert!((lo - 0.361).abs() < 0.02, "lo {lo}");
        assert!((hi - 0.639).abs() < 0.02, "hi {hi}");

        // constant input has a zero-width interval
        let (lo, hi) = bootstrap_ci(&[2.0; 20], 1000, 0.95, &mut rng);
        assert_eq!(lo, 2.0);
        assert_eq!(hi, 2.0);
    }

    #[test]
    fn transfer_with_zero_iterations_preserves_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        let space = SpaceConfig {
            n_max: 10,
            ..SpaceConfig::default()
        };
        cmd_make_corpus(&corpus_dir, 2, 17, &space).unwrap();
        let mut run = tiny_run_config(&dir.path().join("src"), &corpus_dir, 5);
        run.space = space.clone();
        let src_dir = cmd_train(run.clone()).unwrap();
        let src_ckpt = checkpoint_path(&src_dir, "final");

        let mut transfer_run = run.clone();
        transfer_run.out_dir = dir.path().join("xfer").display().to_string();
        transfer_run.train.total_timesteps = 0;
        let xfer_dir = cmd_transfer(&src_ckpt, transfer_run, false).unwrap();

        let a = cmd_evaluate(&src_ckpt, &corpus_dir, Task::Flat, 2, 9, EvalPolicy::Mean, Some(25))
            .unwrap();
        let b = cmd_evaluate(
            &checkpoint_path(&xfer_dir, "final"),
            &corpus_dir,
            Task::Flat,
            2,
            9,
            EvalPolicy::Mean,
            Some(25),
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&a.rows).unwrap(),
            serde_json::to_string(&b.rows).unwrap()
        );

        // scratch control records its flag
        let mut scratch_run = run.clone();
        scratch_run.out_dir = dir.path().join("scratch").display().to_string();
        scratch_run.train.total_timesteps = 0;
        let scratch_dir = cmd_transfer(&src_ckpt, scratch_run, true).unwrap();
        let meta: RunMeta = serde_json::from_str(
            &std::fs::read_to_string(scratch_dir.join("run.json")).unwrap(),
        )
        .unwrap();
        assert!(meta.scratch);
    }

    #[test]
    fn analysis_outputs_have_expected_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        let space = SpaceConfig {
            n_max: 10,
            ..SpaceConfig::default()
        };
        let files = cmd_make_corpus(&corpus_dir, 1, 23, &space).unwrap();
        let mut run = tiny_run_config(&dir.path().join("run"), &corpus_dir, 2);
        run.space = space.clone();
        run.train.total_timesteps = 60;
        let run_dir = cmd_train(run).unwrap();
        let ckpt = checkpoint_path(&run_dir, "final");

        let records = cmd_analyze_stablerank(&ckpt, &files[0], Task::Flat, 20, 3).unwrap();
        // one layer, one head, 20 steps
        assert_eq!(records.len(), 20);
        for r in &records {
            assert!(r.stable_rank >= 1.0 - 1e-9);
            assert!(r.stable_rank <= r.tokens as f64 + 1e-9);
        }
        write_attention_outputs(&records, &run_dir.join("analysis")).unwrap();
        assert!(run_dir.join("analysis/stable_rank.csv").exists());

        let (n, cos) = cmd_analyze_posembed(&ckpt).unwrap();
        assert_eq!(n, 10);
        assert_eq!(cos.len(), 100);
        for i in 0..n {
            assert!((cos[i * n + i] - 1.0).abs() < 1e-12);
        }

        let curves = cmd_analyze_curves(&[run_dir.clone()], "loss_value").unwrap();
        assert_eq!(curves.len(), 1, "60 timesteps in one iteration");
        assert_eq!(curves[0].2, 0.0, "single run has zero std");
    }
}
