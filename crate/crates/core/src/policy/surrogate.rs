//! Clipped importance-sampled policy loss and its exact gradient.
//!
//! For trajectory `i` of length `L` with weights ρ_t (held constant):
//!
//! ```text
//! L_i = -(1/L) Σ_t min(r_t ρ_t, clip(r_t, 1-ε_low, 1+ε_high) ρ_t)
//!       + β (1/L) Σ_t KL(π_ω(·|h_t) ‖ π_0(·|h_t))
//!       - c_H (1/L) Σ_t H(π_ω(·|h_t))
//! r_t = exp(ln π_ω(a_t|h_t) - ln π_old(a_t|h_t))
//! ```
//!
//! and the batch loss is `Σ_i w_i L_i`, with `w_i = 1/N` in the sampled case.

use super::{log_softmax, PolicyGradient, TabularPolicy};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub clip_low: f64,
    pub clip_high: f64,
    /// Weight of the exact per-context KL(π_ω ‖ π_0) penalty.
    pub beta: f64,
    /// Weight of the mean-entropy bonus.
    pub entropy_coef: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            clip_low: 0.2,
            clip_high: 0.2,
            beta: 0.0,
            entropy_coef: 0.0,
        }
    }
}

impl LossSpec {
    /// No clipping and no regularizers: a plain importance-weighted policy gradient.
    pub fn unclipped() -> Self {
        LossSpec {
            clip_low: f64::INFINITY,
            clip_high: f64::INFINITY,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateOutput {
    pub loss: f64,
    pub grad: PolicyGradient,
    /// Weighted fraction of tokens whose gradient was cut by the clip.
    pub clip_fraction: f64,
}

/// Mean-over-trajectories loss and gradient with respect to the logits.
pub fn surrogate_grad(
    policy: &TabularPolicy,
    batch: &[Trajectory],
    rho: &[Vec<f64>],
    old_logp: &[Vec<f64>],
    spec: &LossSpec,
    reference: Option<&TabularPolicy>,
) -> Result<SurrogateOutput> {
    let w = if batch.is_empty() {
        Vec::new()
    } else {
        vec![1.0 / batch.len() as f64; batch.len()]
    };
    surrogate_grad_weighted(policy, batch, rho, old_logp, &w, spec, reference)
}

/// Same as [`surrogate_grad`] with explicit per-trajectory weights. Passing
/// every response with weight π_ω(a|x) gives the exact expectation.
pub fn surrogate_grad_weighted(
    policy: &TabularPolicy,
    batch: &[Trajectory],
    rho: &[Vec<f64>],
    old_logp: &[Vec<f64>],
    weights: &[f64],
    spec: &LossSpec,
    reference: Option<&TabularPolicy>,
) -> Result<SurrogateOutput> {
    for (what, got) in [
        ("rho batch", rho.len()),
        ("old_logp batch", old_logp.len()),
        ("weights", weights.len()),
    ] {
        if got != batch.len() {
            return Err(Error::LengthMismatch {
                what,
                expected: batch.len(),
                got,
            });
        }
    }
    let needs_ref = spec.beta != 0.0;
    let reference = match (needs_ref, reference) {
        (true, None) => {
            return Err(Error::Config("beta > 0 requires a reference policy".into()))
        }
        (true, Some(r)) => {
            policy.check_same_shape(r)?;
            Some(r)
        }
        _ => None,
    };

    let lo = 1.0 - spec.clip_low;
    let hi = 1.0 + spec.clip_high;
    let mut grad = PolicyGradient::zeros_like(policy);
    let mut loss = 0.0;
    let mut clipped_mass = 0.0;
    let mut token_mass = 0.0;

    for (i, traj) in batch.iter().enumerate() {
        let len = traj.response.len();
        for (what, got) in [("rho", rho[i].len()), ("old_logp", old_logp[i].len())] {
            if got != len {
                return Err(Error::LengthMismatch {
                    what,
                    expected: len,
                    got,
                });
            }
        }
        if len == 0 {
            continue;
        }
        let scale = weights[i] / len as f64;
        let ctxs = policy.contexts_along(&traj.prompt, &traj.response)?;
        for (t, (&ctx, &tok)) in ctxs.iter().zip(&traj.response).enumerate() {
            let lp = log_softmax(policy.row(ctx));
            let a = tok as usize;
            let ratio = (lp[a] - old_logp[i][t]).exp();
            let weight = rho[i][t];
            let unclipped = ratio * weight;
            let clipped = ratio.clamp(lo, hi) * weight;
            let objective = unclipped.min(clipped);
            // d objective / d ln π(a_t): the clipped branch is flat in the ratio.
            let d_obj = if unclipped <= clipped { unclipped } else { 0.0 };
            if unclipped > clipped {
                clipped_mass += scale;
            }
            token_mass += scale;
            loss -= scale * objective;

            let row = grad.row_mut(ctx);
            let coeff = -scale * d_obj;
            if coeff != 0.0 {
                for (k, g) in row.iter_mut().enumerate() {
                    let p = lp[k].exp();
                    let onehot = if k == a { 1.0 } else { 0.0 };
                    *g += coeff * (onehot - p);
                }
            }

            if let Some(r) = reference {
                let lq = log_softmax(r.row(ctx));
                let kl: f64 = lp
                    .iter()
                    .zip(&lq)
                    .map(|(&p, &q)| p.exp() * (p - q))
                    .sum();
                loss += spec.beta * scale * kl;
                for (k, g) in row.iter_mut().enumerate() {
                    let p = lp[k].exp();
                    *g += spec.beta * scale * p * (lp[k] - lq[k] - kl);
                }
            }

            if spec.entropy_coef != 0.0 {
                let h: f64 = -lp.iter().map(|&l| l.exp() * l).sum::<f64>();
                loss -= spec.entropy_coef * scale * h;
                for (k, g) in row.iter_mut().enumerate() {
                    let p = lp[k].exp();
                    *g += spec.entropy_coef * scale * p * (lp[k] + h);
                }
            }
        }
    }

    Ok(SurrogateOutput {
        loss,
        grad,
        clip_fraction: if token_mass > 0.0 {
            clipped_mass / token_mass
        } else {
            0.0
        },
    })
}
