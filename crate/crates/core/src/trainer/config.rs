use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::env::{Task, TaskSpec};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_PASS_THRESHOLD;
use crate::oracle::DEFAULT_ENUMERATION_CAP;
use crate::policy::MAX_TABLE_ENTRIES;
use crate::prl::{IndexConvention, OrderMode, DEFAULT_ETA, DEFAULT_STD_EPS};
use crate::segment::SegmentationMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// ρ_t from outcome reward and future log-ratio sums.
    Prl,
    /// ρ_t = group-normalized outcome reward.
    Grpo,
    /// ρ_t = raw outcome reward.
    Reinforce,
    /// Maximum likelihood on accepted (correct) rollouts only.
    Raft,
}

impl Algorithm {
    pub fn needs_group(self) -> bool {
        matches!(self, Algorithm::Prl | Algorithm::Grpo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Exact when the response space can be enumerated, sampled otherwise.
    #[default]
    Auto,
    /// Closed-form expectations of avg@n and pass@n by enumeration.
    Exact,
    /// `eval_samples_per_prompt` rollouts per prompt.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Momentum,
    Adam,
}

/// Stop early once the moving average of training reward stops improving.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauConfig {
    pub window: usize,
    pub patience: usize,
    #[serde(default)]
    pub min_delta: f64,
}

fn d_group() -> usize {
    8
}
fn d_batch() -> usize {
    4
}
fn d_prompts() -> usize {
    16
}
fn d_lr() -> f64 {
    0.5
}
fn d_eta() -> f64 {
    DEFAULT_ETA
}
fn d_clip() -> f64 {
    0.2
}
fn d_std_eps() -> f64 {
    DEFAULT_STD_EPS
}
fn d_steps() -> usize {
    300
}
fn d_one() -> usize {
    1
}
fn d_eval_every() -> usize {
    10
}
fn d_eval_n() -> usize {
    8
}
fn d_threshold() -> f64 {
    DEFAULT_PASS_THRESHOLD
}
fn d_cap() -> u64 {
    DEFAULT_ENUMERATION_CAP
}
fn d_momentum() -> f64 {
    0.9
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_adam_eps() -> f64 {
    1e-8
}

/// Every knob of a training run. Field names are the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    /// Rollouts per prompt (n).
    #[serde(default = "d_group")]
    pub group_size: usize,
    /// Prompts per step.
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Trajectories per optimizer update; `None` uses the whole batch.
    #[serde(default)]
    pub mini_batch_size: Option<usize>,
    /// Size of the fixed prompt pool that steps draw from and evaluation uses.
    #[serde(default = "d_prompts")]
    pub num_prompts: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_eta")]
    pub eta: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "d_clip")]
    pub clip_low: f64,
    #[serde(default = "d_clip")]
    pub clip_high: f64,
    #[serde(default = "default_segmentation")]
    pub segmentation: SegmentationMode,
    #[serde(default = "default_order_mode")]
    pub order_mode: OrderMode,
    #[serde(default)]
    pub index_convention: IndexConvention,
    #[serde(default = "d_std_eps")]
    pub std_eps: f64,
    #[serde(default = "d_steps")]
    pub steps: usize,
    /// Gradient passes over each rollout batch.
    #[serde(default = "d_one")]
    pub inner_epochs: usize,
    /// 0 evaluates only after the last step.
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    #[serde(default = "d_eval_n")]
    pub eval_samples_per_prompt: usize,
    #[serde(default)]
    pub eval_mode: EvalMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Context order of the tabular policy; defaults to the full history.
    #[serde(default)]
    pub policy_order: Option<usize>,
    /// Standard deviation of the random initial logits; 0 is uniform.
    #[serde(default)]
    pub init_scale: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "d_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "d_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub entropy_coef: f64,
    /// 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "d_threshold")]
    pub pass_threshold: f64,
    #[serde(default)]
    pub plateau: Option<PlateauConfig>,
    #[serde(default = "d_cap")]
    pub oracle_cap: u64,
    /// Rollout worker threads; `None` uses the global pool.
    #[serde(default)]
    pub threads: Option<usize>,
}

fn default_algorithm() -> Algorithm {
    Algorithm::Prl
}
fn default_segmentation() -> SegmentationMode {
    SegmentationMode::TokenLevel
}
fn default_order_mode() -> OrderMode {
    OrderMode::AdvantageFirst
}

impl RunConfig {
    /// A config with every default filled in around `task`.
    pub fn for_task(task: TaskSpec) -> Self {
        let mut table = toml::Table::new();
        table.insert(
            "task".into(),
            toml::Value::try_from(&task).expect("task spec serializes"),
        );
        table.try_into().expect("defaults deserialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, then applies `key=value` overrides. Keys may be dotted
    /// (`task.alphabet_size`); values are TOML literals, and anything that
    /// does not parse as one is taken as a bare string.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let task = Task::new(self.task.clone())?;
        if self.algorithm.needs_group()
            && self.order_mode != OrderMode::RawReward
            && self.group_size < 2
        {
            return bad(format!(
                "{:?} normalizes over groups and needs group_size >= 2",
                self.algorithm
            ));
        }
        if self.group_size == 0 || self.batch_size == 0 || self.num_prompts == 0 {
            return bad("group_size, batch_size and num_prompts must be >= 1".into());
        }
        if self.batch_size > self.num_prompts {
            return bad(format!(
                "batch_size {} exceeds the prompt pool of {}",
                self.batch_size, self.num_prompts
            ));
        }
        if self.mini_batch_size == Some(0) {
            return bad("mini_batch_size must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.eta.is_nan() || self.eta <= 0.0 {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if !(self.clip_low >= 0.0 && self.clip_high >= 0.0) {
            return bad("clip ranges must be >= 0".into());
        }
        if self.std_eps.is_nan() || self.std_eps < 0.0 {
            return bad("std_eps must be >= 0".into());
        }
        if self.inner_epochs == 0 || self.eval_samples_per_prompt == 0 {
            return bad("inner_epochs and eval_samples_per_prompt must be >= 1".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be finite and >= 0".into());
        }
        if !self.entropy_coef.is_finite() {
            return bad("entropy_coef must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.pass_threshold) {
            return bad("pass_threshold must lie in [0, 1]".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be >= 1".into());
        }
        if let Some(p) = self.plateau {
            if p.window == 0 {
                return bad("plateau.window must be >= 1".into());
            }
        }
        if self.eval_mode == EvalMode::Exact && !task.is_fixed_length() {
            return bad("exact evaluation needs a fixed-length task".into());
        }
        let order = self.resolved_policy_order();
        if table_entries(self.task.alphabet_size, order).is_none() {
            return bad(format!(
                "policy order {order} needs more than {MAX_TABLE_ENTRIES} logits"
            ));
        }
        Ok(())
    }

    /// Explicit order, or the longest history a response ever sees, shrunk
    /// until the logits table fits.
    pub fn resolved_policy_order(&self) -> usize {
        if let Some(o) = self.policy_order {
            return o;
        }
        let prompt_len = match &self.task.kind {
            crate::env::TaskKind::TargetMatch { prompt_len, .. }
            | crate::env::TaskKind::ParityGoal { prompt_len } => *prompt_len,
            crate::env::TaskKind::ModArith { digits, .. } => 3 * digits,
        };
        let mut order = (prompt_len + self.task.response_len.saturating_sub(1)).max(1);
        while order > 1 && table_entries(self.task.alphabet_size, order).is_none() {
            order -= 1;
        }
        order
    }
}

fn table_entries(size: usize, order: usize) -> Option<usize> {
    (size + 1)
        .checked_pow(order as u32)
        .and_then(|c| c.checked_mul(size))
        .filter(|&n| n <= MAX_TABLE_ENTRIES)
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
    let value = parse_value(raw.trim());
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| {
        Error::Config(format!("override {item:?} has an empty key"))
    })?;
    let mut cur = table;
    for part in parts {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{part} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
