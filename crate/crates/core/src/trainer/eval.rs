use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alphabet::Token;
use crate::env::{OutcomeReward, Task};
use crate::error::{Error, Result};
use crate::metrics::{metrics_from_group, KlEstimator};
use crate::oracle::{exact_sequence_kl, exact_success, solve, OracleSolution, PrefixTree};
use crate::policy::{categorical_kl, TabularPolicy};

use super::config::EvalMode;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub samples_per_prompt: usize,
    pub mode: EvalMode,
    pub seed: u64,
    pub pass_threshold: f64,
    pub cap: u64,
}

/// Prompt-averaged evaluation of one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub avg_at_n: f64,
    pub pass_at_n: f64,
    pub policy_entropy: f64,
    pub kl_to_ref: f64,
    pub kl_estimator: KlEstimator,
    pub kl_to_opt: Option<f64>,
    /// Whether avg@n and pass@n are closed-form expectations.
    pub exact: bool,
}

/// Whether every response of `task` can be enumerated within `cap`.
pub fn is_enumerable(task: &Task, cap: u64) -> bool {
    task.fixed_response_len().is_some_and(|len| {
        (task.vocab_size() as u128)
            .checked_pow(len as u32)
            .is_some_and(|n| n <= cap as u128)
    })
}

/// Oracle solutions for each prompt, or `None` when the task cannot be
/// enumerated or η is infinite.
pub fn oracle_solutions(
    task: &Task,
    reference: &TabularPolicy,
    prompts: &[Vec<Token>],
    eta: f64,
    cap: u64,
) -> Result<Option<Vec<OracleSolution>>> {
    if !eta.is_finite() || !is_enumerable(task, cap) {
        return Ok(None);
    }
    let sols = prompts
        .par_iter()
        .map(|p| solve(p, reference, task, eta, cap))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(sols))
}

struct PromptEval {
    avg: f64,
    pass: f64,
    entropy: f64,
    kl_ref: f64,
    kl_opt: Option<f64>,
}

/// avg@n, pass@n, entropy and KLs, computed per prompt then averaged.
/// `oracles`, when given, must line up with `prompts`.
pub fn evaluate(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    task: &Task,
    prompts: &[Vec<Token>],
    opts: &EvalOptions,
    oracles: Option<&[OracleSolution]>,
) -> Result<EvalSummary> {
    if prompts.is_empty() {
        return Err(Error::Config("evaluation needs at least one prompt".into()));
    }
    if opts.samples_per_prompt == 0 {
        return Err(Error::Config("samples_per_prompt must be >= 1".into()));
    }
    if let Some(o) = oracles {
        if o.len() != prompts.len() {
            return Err(Error::LengthMismatch {
                what: "oracle solutions",
                expected: prompts.len(),
                got: o.len(),
            });
        }
    }
    policy.check_same_shape(reference)?;
    let enumerable = is_enumerable(task, opts.cap);
    let exact = match opts.mode {
        EvalMode::Auto => enumerable,
        EvalMode::Exact if !enumerable => {
            return Err(Error::Config(
                "exact evaluation needs an enumerable response space".into(),
            ))
        }
        EvalMode::Exact => true,
        EvalMode::Sampled => false,
    };

    let per_prompt = prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            eval_prompt(policy, reference, task, prompt, i, opts, exact, enumerable, oracles.map(|o| &o[i]))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per_prompt.len() as f64;
    let mean = |f: &dyn Fn(&PromptEval) -> f64| per_prompt.iter().map(f).sum::<f64>() / n;
    let kl_to_opt = per_prompt
        .iter()
        .map(|p| p.kl_opt)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / n);
    Ok(EvalSummary {
        avg_at_n: mean(&|p| p.avg),
        pass_at_n: mean(&|p| p.pass),
        policy_entropy: mean(&|p| p.entropy),
        kl_to_ref: mean(&|p| p.kl_ref),
        kl_estimator: if enumerable {
            KlEstimator::Exact
        } else {
            KlEstimator::SampledContextSum
        },
        kl_to_opt,
        exact,
    })
}

#[allow(clippy::too_many_arguments)]
fn eval_prompt(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    task: &Task,
    prompt: &[Token],
    index: usize,
    opts: &EvalOptions,
    exact: bool,
    enumerable: bool,
    oracle: Option<&OracleSolution>,
) -> Result<PromptEval> {
    let n = opts.samples_per_prompt;
    let mut out = PromptEval {
        avg: 0.0,
        pass: 0.0,
        entropy: 0.0,
        kl_ref: 0.0,
        kl_opt: oracle.map(|o| o.kl_from(policy, opts.cap)).transpose()?,
    };

    if exact {
        let (mean, success) = exact_success(policy, prompt, task, opts.pass_threshold, opts.cap)?;
        out.avg = mean;
        out.pass = 1.0 - (1.0 - success).powi(n as i32);
    }
    if enumerable {
        let len = task.response_len();
        let tree = PrefixTree::build(policy, prompt, len, opts.cap)?;
        out.entropy = tree.expected_token_entropy(policy);
        out.kl_ref = exact_sequence_kl(policy, reference, prompt, len, opts.cap)?;
    }
    if exact && enumerable {
        return Ok(out);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(index as u64);
    let mut rewards = Vec::with_capacity(n);
    let mut entropy = 0.0;
    let mut kl = 0.0;
    for _ in 0..n {
        let roll = policy.sample_with(prompt, &mut rng)?;
        rewards.push(task.reward(prompt, &roll.response)?);
        let ctxs = policy.contexts_along(prompt, &roll.response)?;
        let len = ctxs.len() as f64;
        entropy += ctxs.iter().map(|&c| policy.entropy_at(c)).sum::<f64>() / len;
        kl += ctxs
            .iter()
            .map(|&c| categorical_kl(&policy.log_probs_at(c), &reference.log_probs_at(c)))
            .sum::<f64>();
    }
    if !exact {
        let (avg, pass) = metrics_from_group(&rewards, opts.pass_threshold)?;
        out.avg = avg;
        out.pass = pass;
    }
    if !enumerable {
        out.entropy = entropy / n as f64;
        out.kl_ref = kl / n as f64;
    }
    Ok(out)
}
