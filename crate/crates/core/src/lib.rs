//! Exactly enumerable laboratory for process reward learning.
//!
//! Small tabular policies over tiny alphabets make every quantity of the
//! entropy-regularized objective computable by enumeration: the optimal
//! policy, its partition function, per-prefix process rewards and exact
//! gradients. The [`trainer`] runs clipped policy-gradient updates driven
//! by process advantages and compares against outcome-only baselines.

pub mod alphabet;
pub mod env;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod oracle;
pub mod policy;
pub mod prl;
pub mod segment;
pub mod trainer;
pub mod trajectory;

pub use alphabet::{Alphabet, Token};
pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/process_reward.md")]
    mod process_reward {}
    #[doc = include_str!("../../../book/src/weights.md")]
    mod weights {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
