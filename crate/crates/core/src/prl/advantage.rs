use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::{segment, Segmentation, SegmentationMode};
use crate::trajectory::Trajectory;

pub const DEFAULT_ETA: f64 = 100.0;
pub const DEFAULT_STD_EPS: f64 = 1e-6;

/// Where the outcome signal is group-normalized relative to the KL correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    /// ρ_t = A - S_t with A the group-normalized outcome reward.
    AdvantageFirst,
    /// r̃ = r - S_1, Ã = normalize(r̃), ρ_t = Ã - (S_t - S_1).
    ProcessRewardFirst,
    /// ρ_t = r - S_t, no group statistics.
    RawReward,
}

impl OrderMode {
    pub fn formula(self) -> &'static str {
        match self {
            OrderMode::AdvantageFirst => "rho_t = (r - mean(r)) / (std(r) + std_eps) - S_t",
            OrderMode::ProcessRewardFirst => {
                "rt = r - S_1; rho_t = (rt - mean(rt)) / (std(rt) + std_eps) - (S_t - S_1)"
            }
            OrderMode::RawReward => "rho_t = r - S_t",
        }
    }
}

impl FromStr for OrderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "advantage_first" => Ok(OrderMode::AdvantageFirst),
            "process_reward_first" => Ok(OrderMode::ProcessRewardFirst),
            "raw_reward" => Ok(OrderMode::RawReward),
            _ => Err(Error::Config(format!("unknown order mode {s:?}"))),
        }
    }
}

/// Which tokens the future KL sum at position t covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexConvention {
    /// S_t = (1/η) Σ_{j=t}^{L} k_j, the current token included.
    #[default]
    Inclusive,
    /// S_t = (1/η) Σ_{j=t+1}^{L} k_j, matching the prefix process reward r*_t.
    Exclusive,
}

impl IndexConvention {
    pub fn formula(self) -> &'static str {
        match self {
            IndexConvention::Inclusive => "S_t = (1/eta) * sum_{j=t..L} ln(pi/pi_0)(a_j)",
            IndexConvention::Exclusive => "S_t = (1/eta) * sum_{j=t+1..L} ln(pi/pi_0)(a_j)",
        }
    }
}

impl fmt::Display for OrderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OrderMode::AdvantageFirst => "advantage_first",
            OrderMode::ProcessRewardFirst => "process_reward_first",
            OrderMode::RawReward => "raw_reward",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvantageConfig {
    /// KL temperature; `f64::INFINITY` removes the log-ratio term entirely.
    pub eta: f64,
    pub segmentation: SegmentationMode,
    pub order_mode: OrderMode,
    pub convention: IndexConvention,
    pub std_eps: f64,
    /// Carried along for provenance; the KL loss term lives in the surrogate.
    pub beta: f64,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        AdvantageConfig {
            eta: DEFAULT_ETA,
            segmentation: SegmentationMode::TokenLevel,
            order_mode: OrderMode::AdvantageFirst,
            convention: IndexConvention::Inclusive,
            std_eps: DEFAULT_STD_EPS,
            beta: 0.0,
        }
    }
}

/// Per-token weights ρ for one trajectory, with how they were built.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector {
    pub rho: Vec<f64>,
    pub eta: f64,
    pub segmentation: Segmentation,
    pub order_mode: OrderMode,
    pub convention: IndexConvention,
    pub beta: f64,
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("eta must be positive, got {eta}")))
    }
}

/// Suffix sums `out[i] = (1/η) Σ_{j≥i} k_j` (0-based, `out[L] = 0`), one reverse pass.
fn suffix_sums(traj: &Trajectory, eta: f64) -> Vec<f64> {
    let len = traj.len();
    let mut out = vec![0.0; len + 1];
    if eta.is_infinite() {
        return out;
    }
    for j in (0..len).rev() {
        out[j] = out[j + 1] + (traj.logp_cur[j] - traj.logp_ref[j]) / eta;
    }
    out
}

/// S_1..S_L of the inclusive convention, as a 0-based vector.
pub fn future_kl_sums(traj: &Trajectory, eta: f64) -> Result<Vec<f64>> {
    check_eta(eta)?;
    let mut s = suffix_sums(traj, eta);
    s.pop();
    Ok(s)
}

/// S_t = (1/η) Σ_{j=t}^{L} ln(π_ω(a_j|·)/π_0(a_j|·)) for 1-based `t`.
pub fn future_klsum(traj: &Trajectory, eta: f64, t: usize) -> Result<f64> {
    check_eta(eta)?;
    let len = traj.len();
    if t == 0 || t > len {
        return Err(Error::IndexOutOfRange {
            index: t,
            lo: 1,
            hi: len,
        });
    }
    Ok(suffix_sums(traj, eta)[t - 1])
}

/// (r - μ) / (σ + ε) with the population standard deviation.
pub fn group_advantages(rewards: &[f64], std_eps: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + std_eps;
    if denom == 0.0 {
        return Err(Error::ZeroStd);
    }
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Per-token S values after segmentation: every token of a step shares the
/// value at the step's start (inclusive) or end (exclusive).
fn stepwise_sums(traj: &Trajectory, cfg: &AdvantageConfig) -> Result<(Segmentation, Vec<f64>)> {
    let seg = segment(traj.len(), cfg.segmentation, &traj.response)?;
    let suffix = suffix_sums(traj, cfg.eta);
    let mut s = Vec::with_capacity(traj.len());
    for span in seg.spans() {
        let v = match cfg.convention {
            IndexConvention::Inclusive => suffix[span.start],
            IndexConvention::Exclusive => suffix[span.end],
        };
        s.extend(std::iter::repeat_n(v, span.len()));
    }
    Ok((seg, s))
}

/// ρ weights for a group of rollouts of the same prompt. The result is plain
/// data: nothing here is differentiated through.
pub fn process_advantages(
    group: &[Trajectory],
    cfg: &AdvantageConfig,
) -> Result<Vec<AdvantageVector>> {
    if group.is_empty() {
        return Err(Error::EmptyGroup);
    }
    check_eta(cfg.eta)?;
    if cfg.order_mode != OrderMode::RawReward && group.len() < 2 {
        return Err(Error::Config(
            "group normalization needs at least 2 trajectories".into(),
        ));
    }
    let mut parts = Vec::with_capacity(group.len());
    for t in group {
        t.validate()?;
        parts.push(stepwise_sums(t, cfg)?);
    }

    let signal: Vec<f64> = match cfg.order_mode {
        OrderMode::RawReward => group.iter().map(|t| t.reward).collect(),
        OrderMode::AdvantageFirst => {
            let r: Vec<f64> = group.iter().map(|t| t.reward).collect();
            group_advantages(&r, cfg.std_eps)?
        }
        OrderMode::ProcessRewardFirst => {
            let r: Vec<f64> = group
                .iter()
                .zip(&parts)
                .map(|(t, (_, s))| t.reward - s[0])
                .collect();
            group_advantages(&r, cfg.std_eps)?
        }
    };

    Ok(parts
        .into_iter()
        .zip(signal)
        .map(|((seg, s), a)| {
            let rho = if cfg.eta.is_infinite() {
                vec![a; s.len()]
            } else if cfg.order_mode == OrderMode::ProcessRewardFirst {
                s.iter().map(|&st| a - (st - s[0])).collect()
            } else {
                s.iter().map(|&st| a - st).collect()
            };
            AdvantageVector {
                rho,
                eta: cfg.eta,
                segmentation: seg,
                order_mode: cfg.order_mode,
                convention: cfg.convention,
                beta: cfg.beta,
            }
        })
        .collect())
}
