//! Process advantages built from outcome rewards and policy/reference log-ratios.

mod advantage;
mod reward_model;

pub use advantage::{
    future_kl_sums, future_klsum, group_advantages, process_advantages, AdvantageConfig,
    AdvantageVector, IndexConvention, OrderMode, DEFAULT_ETA, DEFAULT_STD_EPS,
};
pub use reward_model::{default_pairs, RewardModelTable};
