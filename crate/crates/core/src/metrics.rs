use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rewards at or above this count as a correct rollout for pass@n.
pub const DEFAULT_PASS_THRESHOLD: f64 = 0.5;

/// How `kl_to_ref` was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// Full enumeration of the response space.
    Exact,
    /// Sum of exact per-context KLs along sampled rollouts, averaged.
    SampledContextSum,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean outcome reward of the training batch that produced this step.
    pub mean_reward: f64,
    pub avg_at_n: f64,
    pub pass_at_n: f64,
    /// Mean per-token entropy of π_ω.
    pub policy_entropy: f64,
    /// Sequence-level KL(π_ω ‖ π_0), averaged over evaluation prompts.
    pub kl_to_ref: f64,
    pub kl_estimator: KlEstimator,
    /// Sequence-level KL(π_ω ‖ π*) when an oracle is computable.
    pub kl_to_opt: Option<f64>,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str =
        "step,mean_reward,avg_at_n,pass_at_n,entropy,kl_to_ref,kl_to_opt";

    /// CSV projection; excludes wall time so identical runs give identical rows.
    pub fn csv_row(&self) -> String {
        let opt = self.kl_to_opt.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.mean_reward,
            self.avg_at_n,
            self.pass_at_n,
            self.policy_entropy,
            self.kl_to_ref,
            opt
        )
    }
}

/// avg@n and pass@n of one group of `n` rollouts for the same prompt.
pub fn metrics_from_group(rewards: &[f64], threshold: f64) -> Result<(f64, f64)> {
    if rewards.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let avg = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let pass = if rewards.iter().any(|&r| r >= threshold) {
        1.0
    } else {
        0.0
    };
    Ok((avg, pass))
}
