//! Command-line interface: train, evaluate, zeroshot, transfer, analyze,
//! make-corpus, make-variants.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use manymorph::config::{ModelConfig, RunConfig, Task, TrainConfig};
use manymorph::harness::{self, EvalPolicy};
use manymorph::variation::VariationKind;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "manymorph",
    about = "Train and evaluate a single transformer controller across modular robot morphologies",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overridable run configuration. Flags beat the config file, which beats the
/// profile defaults. MM_SEED in the environment beats everything for `seed`.
#[derive(Args, Clone)]
struct ConfigOverrides {
    /// JSON run-config file (unknown keys rejected)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base profile when no config file is given: "desk" or "paper"
    #[arg(long, default_value = "desk")]
    profile: String,
    #[arg(long)]
    task: Option<String>,
    /// Morphology corpus: a directory of .json files or a single file
    #[arg(long)]
    robots: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    #[arg(long)]
    episode_horizon: Option<usize>,

    // Training hyperparameters.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    gae_lambda: Option<f64>,
    #[arg(long)]
    clip_eps: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    minibatch_size: Option<usize>,
    #[arg(long)]
    entropy_coef: Option<f64>,
    #[arg(long)]
    value_coef: Option<f64>,
    #[arg(long)]
    reward_clip: Option<f64>,
    #[arg(long)]
    obs_clip: Option<f64>,
    #[arg(long)]
    timesteps_per_rollout: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    envs: Option<usize>,
    #[arg(long)]
    total_timesteps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_warmup_iters: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    balance_alpha: Option<f64>,
    #[arg(long)]
    balance_beta: Option<f64>,
    #[arg(long)]
    balance_warmup_iters: Option<usize>,
    /// Shuffle equal-depth siblings in the token order during training
    #[arg(long)]
    dfs_shuffle: Option<bool>,

    // Model dimensions.
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    action_std: Option<f64>,
}

fn parse_task(s: &str) -> Result<Task> {
    Task::parse(s).with_context(|| {
        format!("unknown task {s:?} (flat, variable, obstacles, escape, obstacles_cylinders)")
    })
}

impl ConfigOverrides {
    fn build(&self) -> Result<RunConfig> {
        let mut run = if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        } else {
            match self.profile.as_str() {
                "desk" => RunConfig::desk(),
                "paper" => RunConfig {
                    train: TrainConfig::default(),
                    model: ModelConfig::default(),
                    ..RunConfig::default()
                },
                other => bail!("unknown profile {other:?} (expected desk or paper)"),
            }
        };

        if let Some(t) = &self.task {
            run.task = parse_task(t)?;
        }
        if let Some(r) = &self.robots {
            run.robots = r.display().to_string();
        }
        if let Some(s) = self.seed {
            run.seed = s;
        }
        if let Some(o) = &self.out {
            run.out_dir = o.display().to_string();
        }
        if let Some(v) = self.checkpoint_interval {
            run.checkpoint_interval = v;
        }
        if let Some(v) = self.episode_horizon {
            run.episode_horizon = Some(v);
        }

        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(run.train.gamma, self.gamma);
        set!(run.train.gae_lambda, self.gae_lambda);
        set!(run.train.clip_eps, self.clip_eps);
        set!(run.train.epochs, self.epochs);
        set!(run.train.minibatch_size, self.minibatch_size);
        set!(run.train.entropy_coef, self.entropy_coef);
        set!(run.train.value_coef, self.value_coef);
        set!(run.train.reward_clip, self.reward_clip);
        set!(run.train.obs_clip, self.obs_clip);
        set!(run.train.timesteps_per_rollout, self.timesteps_per_rollout);
        set!(run.train.workers, self.workers);
        set!(run.train.envs, self.envs);
        set!(run.train.total_timesteps, self.total_timesteps);
        set!(run.train.lr, self.lr);
        set!(run.train.lr_warmup_iters, self.lr_warmup_iters);
        set!(run.train.grad_clip, self.grad_clip);
        set!(run.train.balance_alpha, self.balance_alpha);
        set!(run.train.balance_beta, self.balance_beta);
        set!(run.train.balance_warmup_iters, self.balance_warmup_iters);
        set!(run.train.dfs_shuffle, self.dfs_shuffle);
        set!(run.model.d_model, self.d_model);
        set!(run.model.layers, self.layers);
        set!(run.model.heads, self.heads);
        set!(run.model.ff_dim, self.ff_dim);
        set!(run.model.n_max, self.n_max);
        set!(run.model.dropout, self.dropout);
        set!(run.model.action_std, self.action_std);

        if let Ok(seed) = std::env::var("MM_SEED") {
            run.seed = seed
                .parse()
                .with_context(|| format!("MM_SEED={seed:?} is not an integer"))?;
        }
        Ok(run)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a controller on a robot corpus
    Train {
        #[command(flatten)]
        cfg: ConfigOverrides,
    },
    /// Deterministic per-robot evaluation of a checkpoint
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        robots: PathBuf,
        #[arg(long, default_value = "flat")]
        task: String,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use uniform random torques instead of the policy (baseline)
        #[arg(long)]
        random_actions: bool,
        #[arg(long)]
        episode_horizon: Option<usize>,
        /// Write the full report as JSON here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a variant suite and aggregate per variation kind
    Zeroshot {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Suite manifest produced by make-variants
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, default_value = "flat")]
        task: String,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on a new corpus or task
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Ignore checkpoint parameters and train from scratch with the same
        /// seeds (the paired control)
        #[arg(long)]
        scratch: bool,
        #[command(flatten)]
        cfg: ConfigOverrides,
    },
    /// Analysis outputs (plot-ready files)
    Analyze {
        #[command(subcommand)]
        target: AnalyzeTarget,
    },
    /// Sample a corpus of random morphologies
    MakeCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        min_modules: Option<usize>,
        #[arg(long)]
        max_modules: Option<usize>,
    },
    /// Build dynamics/kinematics variant suites for a corpus
    MakeVariants {
        #[arg(long)]
        robots: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated kinds: armature,density,damping,gear,limb_shape,joint_angle
        #[arg(long, default_value = "armature,density,damping,gear,limb_shape,joint_angle")]
        kinds: String,
        #[arg(long, default_value_t = 4)]
        variants: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum AnalyzeTarget {
    /// Attention stable-rank trace over a deterministic episode
    Stablerank {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        robot: PathBuf,
        #[arg(long, default_value = "flat")]
        task: String,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cosine similarity of the learned position embeddings
    Posembed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean/std curves of a metric across runs
    Curves {
        /// Run directories (each containing metrics.jsonl)
        #[arg(long, value_delimiter = ',')]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "loss_value")]
        key: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { cfg } => {
            let run = cfg.build()?;
            let dir = harness::cmd_train(run)?;
            println!("run directory: {}", dir.display());
        }
        Command::Evaluate {
            checkpoint,
            robots,
            task,
            trials,
            seed,
            random_actions,
            episode_horizon,
            out,
        } => {
            let policy = if random_actions {
                EvalPolicy::Random
            } else {
                EvalPolicy::Mean
            };
            let report = harness::cmd_evaluate(
                &checkpoint,
                &robots,
                parse_task(&task)?,
                trials,
                seed,
                policy,
                episode_horizon,
            )?;
            println!("robot                     mean_reward   std_reward   mean_len");
            for row in &report.rows {
                println!(
                    "{:<24} {:>12.4} {:>12.4} {:>10.1}",
                    row.robot, row.mean_reward, row.std_reward, row.mean_episode_len
                );
            }
            println!("mean over robots: {:.4}", report.mean_over_robots());
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::Zeroshot {
            checkpoint,
            suite,
            task,
            trials,
            seed,
            out,
        } => {
            let report =
                harness::cmd_zeroshot(&checkpoint, &suite, parse_task(&task)?, trials, seed)?;
            println!("kind          variants   mean_reward   95% CI");
            for agg in &report.aggregates {
                println!(
                    "{:<12} {:>9} {:>12.4}   [{:.4}, {:.4}]",
                    agg.kind.as_str(),
                    agg.variants,
                    agg.mean_reward,
                    agg.ci_lo,
                    agg.ci_hi
                );
            }
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::Transfer {
            checkpoint,
            scratch,
            cfg,
        } => {
            let run = cfg.build()?;
            let dir = harness::cmd_transfer(&checkpoint, run, scratch)?;
            println!("run directory: {}", dir.display());
        }
        Command::Analyze { target } => match target {
            AnalyzeTarget::Stablerank {
                checkpoint,
                robot,
                task,
                steps,
                seed,
                out,
            } => {
                let records = harness::cmd_analyze_stablerank(
                    &checkpoint,
                    &robot,
                    parse_task(&task)?,
                    steps,
                    seed,
                )?;
                harness::write_attention_outputs(&records, &out)?;
                println!(
                    "wrote {} attention records to {}",
                    records.len(),
                    out.display()
                );
            }
            AnalyzeTarget::Posembed { checkpoint, out } => {
                let (n, cos) = harness::cmd_analyze_posembed(&checkpoint)?;
                harness::write_matrix_csv(&out, n, &cos)?;
                println!("wrote {n}x{n} cosine matrix to {}", out.display());
            }
            AnalyzeTarget::Curves { runs, key, out } => {
                if runs.is_empty() {
                    bail!("at least one run directory is required");
                }
                let rows = harness::cmd_analyze_curves(&runs, &key)?;
                harness::write_curves_csv(&out, &rows)?;
                println!("wrote {} curve points to {}", rows.len(), out.display());
            }
        },
        Command::MakeCorpus {
            out,
            count,
            seed,
            min_modules,
            max_modules,
        } => {
            let mut space = manymorph::config::SpaceConfig::default();
            if let Some(v) = min_modules {
                space.min_modules = v;
            }
            if let Some(v) = max_modules {
                space.max_modules = v;
            }
            let files = harness::cmd_make_corpus(&out, count, seed, &space)?;
            println!("wrote {} robots to {}", files.len(), out.display());
        }
        Command::MakeVariants {
            robots,
            out,
            kinds,
            variants,
            seed,
        } => {
            let kinds: Vec<VariationKind> = kinds
                .split(',')
                .map(|k| {
                    VariationKind::parse(k.trim())
                        .with_context(|| format!("unknown variation kind {k:?}"))
                })
                .collect::<Result<_>>()?;
            let space = manymorph::config::SpaceConfig::default();
            let manifest =
                harness::cmd_make_variants(&robots, &out, &kinds, variants, seed, &space)?;
            println!("wrote manifest {}", manifest.display());
        }
    }
    Ok(())
}
