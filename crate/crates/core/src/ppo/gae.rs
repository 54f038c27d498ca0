//! Generalized advantage estimation.

use super::{RolloutBuffer, Trajectory};

/// GAE over one trajectory: delta_t = r_t + gamma V_{t+1} (1 - done_t) - V_t,
/// A_t = delta_t + gamma lambda (1 - done_t) A_{t+1}. The value after the
/// final step is `bootstrap` when the trajectory was truncated mid-episode.
/// Returns (advantages, returns) with returns = A + V.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let t_max = rewards.len();
    assert_eq!(values.len(), t_max);
    assert_eq!(dones.len(), t_max);
    let mut advantages = vec![0.0; t_max];
    let mut next_adv = 0.0;
    for t in (0..t_max).rev() {
        let (next_value, carried) = if dones[t] {
            (0.0, 0.0)
        } else if t + 1 < t_max {
            (values[t + 1], next_adv)
        } else {
            (bootstrap, 0.0)
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        advantages[t] = delta + gamma * lambda * carried;
        next_adv = advantages[t];
    }
    let returns = advantages
        .iter()
        .zip(values)
        .map(|(a, v)| a + v)
        .collect();
    (advantages, returns)
}

pub fn trajectory_gae(t: &Trajectory, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let rewards: Vec<f64> = t.steps.iter().map(|s| s.reward).collect();
    let values: Vec<f64> = t.steps.iter().map(|s| s.value).collect();
    let dones: Vec<bool> = t.steps.iter().map(|s| s.done).collect();
    compute_gae(&rewards, &values, &dones, t.bootstrap_value, gamma, lambda)
}

/// GAE for every step of the buffer in flat-index order, with advantages
/// normalized to zero mean and unit standard deviation over the whole batch.
pub fn buffer_gae(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let mut advantages = Vec::with_capacity(buffer.len());
    let mut returns = Vec::with_capacity(buffer.len());
    for t in &buffer.trajectories {
        let (a, r) = trajectory_gae(t, gamma, lambda);
        advantages.extend(a);
        returns.extend(r);
    }
    let n = advantages.len().max(1) as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in advantages.iter_mut() {
        *a = (*a - mean) / std;
    }
    (advantages, returns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    /// Brute-force oracle: A_t = sum_l (gamma lambda)^l delta_{t+l}, cutting
    /// the sum at the first done flag.
    fn brute_force(
        rewards: &[f64],
        values: &[f64],
        dones: &[bool],
        bootstrap: f64,
        gamma: f64,
        lambda: f64,
    ) -> Vec<f64> {
        let t_max = rewards.len();
        let delta = |t: usize| {
            let next = if dones[t] {
                0.0
            } else if t + 1 < t_max {
                values[t + 1]
            } else {
                bootstrap
            };
            rewards[t] + gamma * next - values[t]
        };
        (0..t_max)
            .map(|t| {
                let mut acc = 0.0;
                let mut w = 1.0;
                for l in t..t_max {
                    acc += w * delta(l);
                    if dones[l] {
                        break;
                    }
                    w *= gamma * lambda;
                }
                acc
            })
            .collect()
    }

    #[test]
    fn monte_carlo_limit() {
        // lambda = gamma = 1 on a terminated episode: A_t = sum_{s>=t} r_s - V_t
        let rewards = [1.0, 2.0, 3.0];
        let values = [0.5, 0.25, 0.125];
        let dones = [false, false, true];
        let (adv, ret) = compute_gae(&rewards, &values, &dones, 0.0, 1.0, 1.0);
        assert!((adv[0] - (6.0 - 0.5)).abs() < 1e-12);
        assert!((adv[1] - (5.0 - 0.25)).abs() < 1e-12);
        assert!((adv[2] - (3.0 - 0.125)).abs() < 1e-12);
        assert!((ret[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn td_zero_limit() {
        // lambda = 0: A_t = delta_t exactly
        let rewards = [1.0, -1.0, 0.5];
        let values = [0.2, 0.4, 0.6];
        let dones = [false, false, false];
        let bootstrap = 0.7;
        let (adv, _) = compute_gae(&rewards, &values, &dones, bootstrap, 0.9, 0.0);
        assert!((adv[0] - (1.0 + 0.9 * 0.4 - 0.2)).abs() < 1e-12);
        assert!((adv[1] - (-1.0 + 0.9 * 0.6 - 0.4)).abs() < 1e-12);
        assert!((adv[2] - (0.5 + 0.9 * 0.7 - 0.6)).abs() < 1e-12);
    }

    #[test]
    fn recursion_matches_brute_force_including_done_boundaries() {
        let mut rng = stream(17, "gae", 0);
        for case in 0..100 {
            let len = rng.gen_range(1..=30);
            let rewards: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let values: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut dones: Vec<bool> = (0..len).map(|_| rng.gen_range(0.0..1.0) < 0.15).collect();
            if rng.gen_range(0.0..1.0) < 0.5 {
                *dones.last_mut().unwrap() = true;
            }
            let bootstrap = rng.gen_range(-2.0..2.0);
            let (adv, ret) = compute_gae(&rewards, &values, &dones, bootstrap, 0.99, 0.95);
            let oracle = brute_force(&rewards, &values, &dones, bootstrap, 0.99, 0.95);
            for t in 0..len {
                assert!(
                    (adv[t] - oracle[t]).abs() < 1e-10,
                    "case {case} t {t}: {} vs {}",
                    adv[t],
                    oracle[t]
                );
                assert!((ret[t] - (adv[t] + values[t])).abs() < 1e-12);
            }
        }
    }
}
