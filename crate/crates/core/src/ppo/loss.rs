//! The clipped PPO objective with a clipped value loss, recorded on one tape
//! so a single backward pass yields gradients for both networks.

use super::TrainError;
use crate::nn::{Graph, Tensor};
use crate::policy::{Agent, ObsBatch};
use rand_chacha::ChaCha8Rng;

/// One minibatch of flattened transitions, observations already normalized.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub batch: ObsBatch,
    /// [B, n, 2] padded actions (zeros at dead slots).
    pub actions: Vec<f64>,
    pub old_log_prob: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub old_values: Vec<f64>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.batch.batch
    }

    pub fn is_empty(&self) -> bool {
        self.batch.batch == 0
    }

    /// Per-sample live joint counts.
    pub fn live_counts(&self) -> Vec<f64> {
        let n2 = self.batch.n * 2;
        (0..self.batch.batch)
            .map(|b| {
                self.batch.joint_mask[b * n2..(b + 1) * n2]
                    .iter()
                    .filter(|m| **m)
                    .count() as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossStats {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

fn policy_branch(
    agent: &Agent,
    mb: &Minibatch,
    clip_eps: f64,
    train: bool,
    drop_rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor>, f64, f64, f64), TrainError> {
    let bsz = mb.batch.batch;
    let n = mb.batch.n;
    let std = agent.action_std;
    let mut g = Graph::new();
    let rec = agent.policy.forward(&mut g, &mb.batch, train, drop_rng)?;
    let mu = agent.policy.decode_policy(&mut g, &rec, &mb.batch);
    let actions = g.leaf(Tensor::new(vec![bsz, n, 2], mb.actions.clone()));
    let diff = g.sub(actions, mu);
    let sq = g.mul(diff, diff);
    let sq_sum = g.sum_tokens(sq);
    let scaled = g.scale(sq_sum, -0.5 / (std * std));
    let live = mb.live_counts();
    let logp_const = Tensor::new(
        vec![bsz],
        live.iter()
            .map(|k| -k * (std.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln()))
            .collect(),
    );
    let logp = g.add_const(scaled, &logp_const);
    let old_logp = g.leaf(Tensor::new(vec![bsz], mb.old_log_prob.clone()));
    let logp_delta = g.sub(logp, old_logp);
    let ratio = g.exp(logp_delta);
    let adv = g.leaf(Tensor::new(vec![bsz], mb.advantages.clone()));
    let surr1 = g.mul(ratio, adv);
    let clipped = g.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    let surr2 = g.mul(clipped, adv);
    let surr = g.emin(surr1, surr2);
    let surr_mean = g.mean(surr);
    let policy_loss = g.scale(surr_mean, -1.0);

    let loss_value = g.value(policy_loss).item();
    let ratios = &g.value(ratio).data;
    let clip_fraction =
        ratios.iter().filter(|r| (**r - 1.0).abs() > clip_eps).count() as f64 / bsz as f64;
    let approx_kl = g.value(logp_delta).data.iter().map(|d| -d).sum::<f64>() / bsz as f64;

    g.backward(policy_loss).map_err(TrainError::Nn)?;
    let grads = rec.param_ids.iter().map(|id| g.grad(*id)).collect();
    Ok((grads, loss_value, clip_fraction, approx_kl))
}

fn critic_branch(
    agent: &Agent,
    mb: &Minibatch,
    clip_eps: f64,
    value_coef: f64,
    train: bool,
    drop_rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor>, f64), TrainError> {
    let bsz = mb.batch.batch;
    let mut g = Graph::new();
    let vrec = agent.critic.forward(&mut g, &mb.batch, train, drop_rng)?;
    let value = agent.critic.decode_value(&mut g, &vrec, &mb.batch);
    let returns = g.leaf(Tensor::new(vec![bsz], mb.returns.clone()));
    let old_values = g.leaf(Tensor::new(vec![bsz], mb.old_values.clone()));
    let verr = g.sub(value, returns);
    let vsq = g.mul(verr, verr);
    let vdelta = g.sub(value, old_values);
    let vdelta_clip = g.clamp(vdelta, -clip_eps, clip_eps);
    let vclip = g.add(old_values, vdelta_clip);
    let vcerr = g.sub(vclip, returns);
    let vcsq = g.mul(vcerr, vcerr);
    let vmax = g.emax(vsq, vcsq);
    let vmean = g.mean(vmax);
    let value_loss = g.scale(vmean, 0.5 * value_coef);
    let loss_value = g.value(value_loss).item();
    g.backward(value_loss).map_err(TrainError::Nn)?;
    let grads = vrec.param_ids.iter().map(|id| g.grad(*id)).collect();
    Ok((grads, loss_value))
}

/// Forward + backward over one minibatch. The policy and critic branches are
/// independent networks, so they run on separate tapes in parallel. Returns
/// gradients for the policy and critic parameter lists (in parameter order)
/// plus scalar statistics.
pub fn ppo_minibatch_update(
    agent: &Agent,
    mb: &Minibatch,
    clip_eps: f64,
    value_coef: f64,
    entropy_coef: f64,
    train: bool,
    drop_rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor>, Vec<Tensor>, LossStats), TrainError> {
    use rand::{RngCore, SeedableRng};
    let bsz = mb.batch.batch;
    let std = agent.action_std;
    // Independent dropout streams for the two parallel branches.
    let mut rng_p = ChaCha8Rng::seed_from_u64(drop_rng.next_u64());
    let mut rng_c = ChaCha8Rng::seed_from_u64(drop_rng.next_u64());

    let (policy_res, critic_res) = rayon::join(
        || policy_branch(agent, mb, clip_eps, train, &mut rng_p),
        || critic_branch(agent, mb, clip_eps, value_coef, train, &mut rng_c),
    );
    let (policy_grads, policy_loss, clip_fraction, approx_kl) = policy_res?;
    let (critic_grads, value_loss) = critic_res?;

    // Entropy of the fixed-std Gaussian is constant in the parameters; it
    // enters the reported loss but contributes no gradient.
    let live = mb.live_counts();
    let entropy = live
        .iter()
        .map(|k| k * (0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + std.ln()))
        .sum::<f64>()
        / bsz as f64;

    let total = policy_loss + value_loss - entropy_coef * entropy;
    if !total.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            iteration: 0,
            details: format!(
                "policy {policy_loss:.6e} value {value_loss:.6e} over {bsz} samples"
            ),
        });
    }
    let stats = LossStats {
        total,
        policy: policy_loss,
        value: value_loss,
        entropy,
        clip_fraction,
        approx_kl,
    };
    Ok((policy_grads, critic_grads, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::policy::{flatten_live, log_prob_flat, DiagGaussian};
    use crate::rng::stream;
    use rand::Rng;

    fn tiny_agent(n_max: usize, seed: u64) -> Agent {
        let cfg = ModelConfig {
            d_model: 16,
            layers: 1,
            heads: 1,
            ff_dim: 32,
            n_max,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        Agent::init(&cfg, 8, 5, &mut stream(seed, "agent", 0))
    }

    fn random_minibatch(agent: &Agent, bsz: usize, seed: u64) -> Minibatch {
        let n = agent.policy.n_max;
        let lw = agent.policy.local_width;
        let gd = agent.policy.global_dim;
        let mut rng = stream(seed, "mb", 0);
        let mut local = Vec::new();
        let mut global = Vec::new();
        let mut mask = Vec::new();
        let mut joint_mask = Vec::new();
        let mut actions = Vec::new();
        for _ in 0..bsz {
            let real = rng.gen_range(1..=n);
            for t in 0..n {
                for _ in 0..lw {
                    local.push(if t < real { rng.gen_range(-1.0..1.0) } else { 0.0 });
                }
                mask.push(t < real);
                for _ in 0..2 {
                    joint_mask.push(t > 0 && t < real && rng.gen_range(0.0..1.0) < 0.7);
                }
            }
            for _ in 0..gd {
                global.push(rng.gen_range(-1.0..1.0));
            }
        }
        for b in 0..bsz {
            for t in 0..n {
                for s in 0..2 {
                    let live = joint_mask[b * n * 2 + t * 2 + s];
                    actions.push(if live { rng.gen_range(-1.0..1.0) } else { 0.0 });
                }
            }
        }
        let batch = ObsBatch {
            local,
            global,
            mask,
            joint_mask,
            batch: bsz,
            n,
            local_width: lw,
            global_dim: gd,
        };
        // old log-probs computed from the same policy so the first update has
        // ratio exactly one
        let mut old_log_prob = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let single = ObsBatch {
                local: batch.local[b * n * lw..(b + 1) * n * lw].to_vec(),
                global: batch.global[b * gd..(b + 1) * gd].to_vec(),
                mask: batch.mask[b * n..(b + 1) * n].to_vec(),
                joint_mask: batch.joint_mask[b * n * 2..(b + 1) * n * 2].to_vec(),
                batch: 1,
                n,
                local_width: lw,
                global_dim: gd,
            };
            let (mu, _) = agent.policy_means(&single).unwrap();
            old_log_prob.push(log_prob_flat(
                &actions[b * n * 2..(b + 1) * n * 2],
                &mu,
                &single.joint_mask,
                agent.action_std,
            ));
        }
        let advantages: Vec<f64> = (0..bsz).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // normalize like the trainer does
        let mean = advantages.iter().sum::<f64>() / bsz as f64;
        let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / bsz as f64;
        let advantages = advantages
            .iter()
            .map(|a| (a - mean) / var.sqrt().max(1e-8))
            .collect();
        let returns: Vec<f64> = (0..bsz).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let old_values: Vec<f64> = (0..bsz).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Minibatch {
            batch,
            actions,
            old_log_prob,
            advantages,
            returns,
            old_values,
        }
    }

    #[test]
    fn unchanged_policy_has_unit_ratio_and_zero_surrogate() {
        let agent = tiny_agent(4, 3);
        let mb = random_minibatch(&agent, 16, 5);
        let mut rng = stream(0, "drop", 0);
        let (_, _, stats) =
            ppo_minibatch_update(&agent, &mb, 0.2, 0.5, 0.01, false, &mut rng).unwrap();
        // ratio == 1 everywhere: surrogate = -mean(advantages) = 0 because the
        // advantages are normalized over the batch
        assert!(stats.policy.abs() < 1e-9, "policy loss {}", stats.policy);
        assert!(stats.clip_fraction.abs() < 1e-12);
        assert!(stats.approx_kl.abs() < 1e-9);
    }

    #[test]
    fn loss_value_matches_scalar_oracle() {
        let agent = tiny_agent(4, 7);
        let mut mb = random_minibatch(&agent, 8, 9);
        // make ratios differ from 1: perturb the stored old log-probs
        let mut rng = stream(4, "perturb", 0);
        for lp in mb.old_log_prob.iter_mut() {
            *lp += rng.gen_range(-0.5..0.5);
        }
        let clip_eps = 0.2;
        let (_, _, stats) =
            ppo_minibatch_update(&agent, &mb, clip_eps, 0.5, 0.01, false, &mut stream(0, "d", 0))
                .unwrap();

        // Scalar recomputation from per-sample forward passes.
        let n = mb.batch.n;
        let lw = mb.batch.local_width;
        let gd = mb.batch.global_dim;
        let mut policy_sum = 0.0;
        let mut value_sum = 0.0;
        let mut entropy_sum = 0.0;
        for b in 0..mb.len() {
            let single = ObsBatch {
                local: mb.batch.local[b * n * lw..(b + 1) * n * lw].to_vec(),
                global: mb.batch.global[b * gd..(b + 1) * gd].to_vec(),
                mask: mb.batch.mask[b * n..(b + 1) * n].to_vec(),
                joint_mask: mb.batch.joint_mask[b * n * 2..(b + 1) * n * 2].to_vec(),
                batch: 1,
                n,
                local_width: lw,
                global_dim: gd,
            };
            let (mu_full, _) = agent.policy_means(&single).unwrap();
            let mu = flatten_live(&mu_full, &single.joint_mask);
            let action = flatten_live(&mb.actions[b * n * 2..(b + 1) * n * 2], &single.joint_mask);
            let dist = DiagGaussian {
                mu,
                std: agent.action_std,
            };
            let logp = dist.log_prob(&action);
            let ratio = (logp - mb.old_log_prob[b]).exp();
            let a = mb.advantages[b];
            let s1 = ratio * a;
            let s2 = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a;
            policy_sum += s1.min(s2);
            entropy_sum += dist.entropy();

            let v = agent.value(&single).unwrap();
            let sq = (v - mb.returns[b]).powi(2);
            let vc = mb.old_values[b] + (v - mb.old_values[b]).clamp(-clip_eps, clip_eps);
            let sqc = (vc - mb.returns[b]).powi(2);
            value_sum += sq.max(sqc);
        }
        let bsz = mb.len() as f64;
        let expect_policy = -policy_sum / bsz;
        let expect_value = 0.5 * 0.5 * value_sum / bsz;
        let expect_entropy = entropy_sum / bsz;
        assert!((stats.policy - expect_policy).abs() < 1e-9, "{} vs {expect_policy}", stats.policy);
        assert!((stats.value - expect_value).abs() < 1e-9);
        assert!((stats.entropy - expect_entropy).abs() < 1e-12);
        let expect_total = expect_policy + expect_value - 0.01 * expect_entropy;
        assert!((stats.total - expect_total).abs() < 1e-9);
    }

    #[test]
    fn wide_clip_matches_vanilla_policy_gradient_on_first_epoch() {
        // With ratio == 1 (first epoch) and the clip range effectively
        // infinite, the surrogate gradient equals the vanilla policy-gradient
        // estimator -mean(logp * A).
        let agent = tiny_agent(3, 11);
        let mb = random_minibatch(&agent, 12, 13);
        let (pg, _, _) =
            ppo_minibatch_update(&agent, &mb, 1e9, 0.5, 0.0, false, &mut stream(0, "d", 0))
                .unwrap();

        // Vanilla estimator on a fresh tape.
        let mut g = Graph::new();
        let rec = agent
            .policy
            .forward(&mut g, &mb.batch, false, &mut stream(0, "d", 0))
            .unwrap();
        let mu = agent.policy.decode_policy(&mut g, &rec, &mb.batch);
        let actions = g.leaf(Tensor::new(vec![12, 3, 2], mb.actions.clone()));
        let diff = g.sub(actions, mu);
        let sq = g.mul(diff, diff);
        let sq_sum = g.sum_tokens(sq);
        let std = agent.action_std;
        let logp_var = g.scale(sq_sum, -0.5 / (std * std));
        let adv = g.leaf(Tensor::new(vec![12], mb.advantages.clone()));
        let weighted = g.mul(logp_var, adv);
        let m = g.mean(weighted);
        let loss = g.scale(m, -1.0);
        g.backward(loss).unwrap();
        let vanilla: Vec<Tensor> = rec.param_ids.iter().map(|id| g.grad(*id)).collect();

        for (a, b) in pg.iter().zip(&vanilla) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn clipped_ratio_limits_the_surrogate() {
        // Single live joint, constructed ratio 1.5 with positive advantage:
        // the clipped branch 1.2 * A must win inside min().
        let agent = tiny_agent(2, 17);
        let mut mb = random_minibatch(&agent, 1, 19);
        // Force exactly one sample with ratio 1.5: shift old logp by -ln(1.5).
        mb.advantages = vec![1.0];
        mb.old_log_prob[0] -= 1.5f64.ln();
        let (_, _, stats) =
            ppo_minibatch_update(&agent, &mb, 0.2, 0.0, 0.0, false, &mut stream(0, "d", 0))
                .unwrap();
        assert!((stats.policy + 1.2).abs() < 1e-9, "surrogate uses 1.2*A, got {}", stats.policy);
        assert!((stats.clip_fraction - 1.0).abs() < 1e-12);
    }
}
