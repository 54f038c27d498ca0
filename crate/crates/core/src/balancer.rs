//! Dynamic robot sampling for experience collection.
//!
//! Each robot keeps a smoothed episode-length estimate E_k. After a warmup
//! of uniform sampling, robots are drawn with probability proportional to
//! (max_episode_len / E_k)^beta, so robots with short episodes (struggling
//! to stay up) collect more experience.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BalancerError {
    #[error("episode length {len} outside [1, {max}]")]
    LengthOutOfRange { len: usize, max: usize },
    #[error("robot index {0} out of range")]
    BadRobot(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerformanceTracker {
    /// Smoothed episode length per robot, initialized optimistically to the
    /// maximum so new robots look healthy until measured.
    pub e: Vec<f64>,
    /// EMA weight on the fresh iteration measurement.
    pub alpha: f64,
    /// Prioritization exponent; 0 keeps sampling uniform.
    pub beta: f64,
    pub max_episode_len: usize,
    /// Iterations of forced-uniform sampling before prioritization starts.
    pub warmup_iters: usize,
    /// Completed iterations.
    pub tau: usize,
    sum: Vec<f64>,
    count: Vec<usize>,
}

impl PerformanceTracker {
    pub fn new(
        robots: usize,
        alpha: f64,
        beta: f64,
        max_episode_len: usize,
        warmup_iters: usize,
    ) -> PerformanceTracker {
        PerformanceTracker {
            e: vec![max_episode_len as f64; robots],
            alpha,
            beta,
            max_episode_len,
            warmup_iters,
            tau: 0,
            sum: vec![0.0; robots],
            count: vec![0; robots],
        }
    }

    pub fn robots(&self) -> usize {
        self.e.len()
    }

    /// Record one completed episode for robot `k` in the current iteration.
    pub fn record_episode(&mut self, k: usize, episode_length: usize) -> Result<(), BalancerError> {
        if k >= self.e.len() {
            return Err(BalancerError::BadRobot(k));
        }
        if episode_length < 1 || episode_length > self.max_episode_len {
            return Err(BalancerError::LengthOutOfRange {
                len: episode_length,
                max: self.max_episode_len,
            });
        }
        self.sum[k] += episode_length as f64;
        self.count[k] += 1;
        Ok(())
    }

    /// Fold this iteration's means into the smoothed estimates; robots with
    /// no completed episodes carry their estimate forward unchanged.
    pub fn end_iteration(&mut self) {
        for k in 0..self.e.len() {
            if self.count[k] > 0 {
                let mean = self.sum[k] / self.count[k] as f64;
                self.e[k] = self.alpha * mean + (1.0 - self.alpha) * self.e[k];
            }
            self.sum[k] = 0.0;
            self.count[k] = 0;
        }
        self.tau += 1;
    }

    /// Sampling distribution over robots: uniform during warmup, afterwards
    /// proportional to (max_episode_len / E_k)^beta.
    pub fn sampling_probs(&self) -> Vec<f64> {
        let n = self.e.len();
        if self.tau < self.warmup_iters || self.beta == 0.0 {
            return vec![1.0 / n as f64; n];
        }
        let weights: Vec<f64> = self
            .e
            .iter()
            .map(|e| (self.max_episode_len as f64 / e).powf(self.beta))
            .collect();
        let total: f64 = weights.iter().sum();
        weights.into_iter().map(|w| w / total).collect()
    }
}

/// Categorical draw from an explicit probability vector.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    debug_assert!(!probs.is_empty());
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
