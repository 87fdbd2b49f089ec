//! Gradient checks for the surrogate loss: central finite differences on
//! sampled batches, and the exact-expectation identity against ∇Q.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alphabet::Token;
use crate::env::OutcomeReward;
use crate::error::{Error, Result};
use crate::oracle::{decode_index, objective_gradient_exact};
use crate::policy::{surrogate_grad, surrogate_grad_weighted, LossSpec, PolicyGradient, TabularPolicy};
use crate::prl::{process_advantages, AdvantageConfig, IndexConvention, OrderMode};
use crate::segment::SegmentationMode;
use crate::trajectory::Trajectory;

/// Denominator floor of the relative error, so coordinates whose gradient
/// is essentially zero are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Logit index with the largest relative error.
    pub worst_index: usize,
    pub coordinates: usize,
}

impl GradCheckReport {
    fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let (max_rel_err, worst_index) = if other.max_rel_err > self.max_rel_err {
            (other.max_rel_err, other.worst_index)
        } else {
            (self.max_rel_err, self.worst_index)
        };
        GradCheckReport {
            max_rel_err,
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            worst_index,
            coordinates: self.coordinates + other.coordinates,
        }
    }
}

fn compare(analytic: &[f64], reference: &[f64]) -> GradCheckReport {
    let mut rep = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        coordinates: analytic.len(),
    };
    for (i, (&a, &b)) in analytic.iter().zip(reference).enumerate() {
        let rel = relative_error(a, b);
        if rel > rep.max_rel_err {
            rep.max_rel_err = rel;
            rep.worst_index = i;
        }
        rep.max_abs_err = rep.max_abs_err.max((a - b).abs());
    }
    rep
}

/// Analytic surrogate gradient against central differences with step `h`,
/// over every logit. ρ and the old log-probabilities are held fixed.
pub fn finite_difference_check(
    policy: &TabularPolicy,
    batch: &[Trajectory],
    rho: &[Vec<f64>],
    spec: &LossSpec,
    reference: Option<&TabularPolicy>,
    h: f64,
) -> Result<GradCheckReport> {
    let old: Vec<Vec<f64>> = batch.iter().map(|t| t.logp_old.clone()).collect();
    let analytic = surrogate_grad(policy, batch, rho, &old, spec, reference)?.grad;
    let mut probe = policy.clone();
    let mut numeric = vec![0.0; policy.logits().len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let x = probe.logits()[i];
        probe.logits_mut()[i] = x + h;
        let up = surrogate_grad(&probe, batch, rho, &old, spec, reference)?.loss;
        probe.logits_mut()[i] = x - h;
        let down = surrogate_grad(&probe, batch, rho, &old, spec, reference)?.loss;
        probe.logits_mut()[i] = x;
        *slot = (up - down) / (2.0 * h);
    }
    Ok(compare(analytic.values(), &numeric))
}

/// Every response of length `len` as a trajectory sampled from `policy`,
/// with its sequence probability as weight.
pub fn enumerate_trajectories<R: OutcomeReward + ?Sized>(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    task: &R,
    prompt: &[Token],
    cap: u64,
) -> Result<(Vec<Trajectory>, Vec<f64>)> {
    let len = task
        .fixed_response_len()
        .ok_or_else(|| Error::Config("exact gradient needs a fixed-length task".into()))?;
    let vocab = policy.vocab();
    let count = (vocab as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
    if count > cap as u128 {
        return Err(Error::EnumerationCap { required: count, cap });
    }
    let mut batch = Vec::with_capacity(count as usize);
    let mut weights = Vec::with_capacity(count as usize);
    for i in 0..count as usize {
        let resp = decode_index(i, len, vocab);
        let lp = policy.logprob(prompt, &resp)?;
        let lr = reference.logprob(prompt, &resp)?;
        weights.push(lp.iter().sum::<f64>().exp());
        let r = task.outcome_reward(prompt, &resp)?;
        batch.push(Trajectory::new(prompt.to_vec(), resp, lp.clone(), lp, lr, r, 0)?);
    }
    Ok((batch, weights))
}

/// The exact-expectation surrogate gradient with raw-reward weights
/// ρ_t = r - S_t, no clipping and no regularizers. Scaled by `-L` it is ∇Q.
pub fn exact_surrogate_gradient<R: OutcomeReward + ?Sized>(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    task: &R,
    prompt: &[Token],
    eta: f64,
    cap: u64,
) -> Result<PolicyGradient> {
    let (batch, weights) = enumerate_trajectories(policy, reference, task, prompt, cap)?;
    let cfg = AdvantageConfig {
        eta,
        segmentation: SegmentationMode::TokenLevel,
        order_mode: OrderMode::RawReward,
        convention: IndexConvention::Inclusive,
        ..AdvantageConfig::default()
    };
    let rho: Vec<Vec<f64>> = process_advantages(&batch, &cfg)?
        .into_iter()
        .map(|a| a.rho)
        .collect();
    let old: Vec<Vec<f64>> = batch.iter().map(|t| t.logp_old.clone()).collect();
    let out = surrogate_grad_weighted(
        policy,
        &batch,
        &rho,
        &old,
        &weights,
        &LossSpec::unclipped(),
        None,
    )?;
    Ok(out.grad)
}

/// `-L` times [`exact_surrogate_gradient`] against the enumerated ∇Q.
pub fn exact_objective_check<R: OutcomeReward + ?Sized>(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    task: &R,
    prompt: &[Token],
    eta: f64,
    cap: u64,
) -> Result<GradCheckReport> {
    let len = task
        .fixed_response_len()
        .ok_or_else(|| Error::Config("exact gradient needs a fixed-length task".into()))?;
    let mut g = exact_surrogate_gradient(policy, reference, task, prompt, eta, cap)?;
    g.scale(-(len as f64));
    let truth = objective_gradient_exact(policy, prompt, reference, task, eta, cap)?;
    Ok(compare(g.values(), truth.values()))
}

/// A batch sampled from `old` and scored under `task`, with random ρ.
pub fn random_batch<R: OutcomeReward + ?Sized>(
    old: &TabularPolicy,
    reference: &TabularPolicy,
    task: &R,
    prompts: &[Vec<Token>],
    size: usize,
    seed: u64,
) -> Result<(Vec<Trajectory>, Vec<Vec<f64>>)> {
    if prompts.is_empty() {
        return Err(Error::Config("random_batch needs prompts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = Vec::with_capacity(size);
    let mut rho = Vec::with_capacity(size);
    for i in 0..size {
        let prompt = &prompts[rng.gen_range(0..prompts.len())];
        let roll = old.sample_with(prompt, &mut rng)?;
        let lr = reference.logprob(prompt, &roll.response)?;
        let r = task.outcome_reward(prompt, &roll.response)?;
        rho.push((0..roll.response.len()).map(|_| rng.gen_range(-2.0..2.0)).collect());
        batch.push(Trajectory::new(prompt.clone(), roll.response, roll.logp.clone(), roll.logp, lr, r, i as u64)?);
    }
    Ok((batch, rho))
}

/// Finite-difference checks on `batches` random batches, where the policy
/// under test is a perturbation of the sampling policy so ratios differ from 1.
#[allow(clippy::too_many_arguments)]
pub fn sampled_batches_check<R: OutcomeReward + ?Sized>(
    reference: &TabularPolicy,
    task: &R,
    prompts: &[Vec<Token>],
    spec: &LossSpec,
    batches: usize,
    batch_size: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut total: Option<GradCheckReport> = None;
    for b in 0..batches {
        let s = seed.wrapping_add(b as u64);
        let alphabet = reference.alphabet().clone();
        let old = TabularPolicy::random(alphabet.clone(), reference.order(), reference.max_len(), 1.0, s)?;
        let mut cur = old.clone();
        let noise = TabularPolicy::random(alphabet, reference.order(), reference.max_len(), 0.1, s ^ 0xabcd)?;
        for (w, n) in cur.logits_mut().iter_mut().zip(noise.logits()) {
            *w += n;
        }
        let (batch, rho) = random_batch(&old, reference, task, prompts, batch_size, s)?;
        let rep = finite_difference_check(&cur, &batch, &rho, spec, Some(reference), h)?;
        total = Some(match total {
            Some(t) => t.merge(rep),
            None => rep,
        });
    }
    total.ok_or_else(|| Error::Config("gradient check needs at least one batch".into()))
}
