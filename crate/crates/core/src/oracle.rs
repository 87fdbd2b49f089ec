//! Exact ground truth for one prompt by enumerating every response in Σ^L.
//!
//! Everything is kept in log space: with η in the hundreds, e^{η r} is far
//! outside the comfortable range of `f64` once multiplied by small
//! reference probabilities.
//!
//! Prefixes of length ℓ are indexed by their base-|Σ| value, most
//! significant token first, so level ℓ holds |Σ|^ℓ entries.

use crate::alphabet::Token;
use crate::env::OutcomeReward;
use crate::error::{Error, Result};
use crate::policy::{log_softmax, log_sum_exp, PolicyGradient, TabularPolicy};

pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// Reference prefix probabilities below 1e-300 count as unreachable.
pub const REACHABILITY_FLOOR: f64 = 1e-300;

fn log_floor() -> f64 {
    REACHABILITY_FLOOR.ln()
}

fn check_cap(vocab: usize, len: usize, cap: u64) -> Result<usize> {
    let required = (vocab as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
    if required > cap as u128 {
        return Err(Error::EnumerationCap { required, cap });
    }
    Ok(required as usize)
}

/// Tokens of prefix `idx` at level `len`.
pub fn decode_index(mut idx: usize, len: usize, vocab: usize) -> Vec<Token> {
    let mut out = vec![0 as Token; len];
    for slot in out.iter_mut().rev() {
        *slot = (idx % vocab) as Token;
        idx /= vocab;
    }
    out
}

fn encode_index(tokens: &[Token], vocab: usize) -> usize {
    tokens.iter().fold(0, |acc, &t| acc * vocab + t as usize)
}

/// Log-probabilities of every prefix of a fixed-length response tree.
#[derive(Debug, Clone)]
pub struct PrefixTree {
    vocab: usize,
    len: usize,
    /// `logp[ℓ][i]`: ln π(prefix i | x) for prefixes of length ℓ.
    logp: Vec<Vec<f64>>,
    /// `ctx[ℓ][i]`: policy context after prefix i, for ℓ < len.
    ctx: Vec<Vec<usize>>,
}

impl PrefixTree {
    pub fn build(policy: &TabularPolicy, prompt: &[Token], len: usize, cap: u64) -> Result<Self> {
        let vocab = policy.vocab();
        check_cap(vocab, len, cap)?;
        let mut logp = vec![vec![0.0]];
        let mut ctx = Vec::with_capacity(len);
        let mut level_ctx = vec![policy.context_of(prompt)?];
        for _ in 0..len {
            let parents = logp.last().unwrap();
            let mut next_lp = Vec::with_capacity(parents.len() * vocab);
            let mut next_ctx = Vec::with_capacity(parents.len() * vocab);
            for (&plp, &c) in parents.iter().zip(&level_ctx) {
                let row = log_softmax(policy.row(c));
                for (a, lp) in row.iter().enumerate() {
                    next_lp.push(plp + lp);
                    next_ctx.push(policy.push_context(c, a as Token));
                }
            }
            logp.push(next_lp);
            ctx.push(std::mem::replace(&mut level_ctx, next_ctx));
        }
        Ok(PrefixTree {
            vocab,
            len,
            logp,
            ctx,
        })
    }

    pub fn sequence_logprobs(&self) -> &[f64] {
        &self.logp[self.len]
    }

    pub fn prefix_logprob(&self, level: usize, idx: usize) -> f64 {
        self.logp[level][idx]
    }

    pub fn context(&self, level: usize, idx: usize) -> usize {
        self.ctx[level][idx]
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// E_{a~π}[(1/L) Σ_t H(π(·|h_t))], exactly.
    pub fn expected_token_entropy(&self, policy: &TabularPolicy) -> f64 {
        if self.len == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for level in 0..self.len {
            for (lp, &c) in self.logp[level].iter().zip(&self.ctx[level]) {
                let w = lp.exp();
                if w > 0.0 {
                    total += w * policy.entropy_at(c);
                }
            }
        }
        total / self.len as f64
    }
}

fn check_task<R: OutcomeReward + ?Sized>(task: &R, policy: &TabularPolicy) -> Result<usize> {
    let len = task.fixed_response_len().ok_or_else(|| {
        Error::Config("oracle enumeration needs a fixed-length task (no eos)".into())
    })?;
    if task.vocab_size() != policy.vocab() {
        return Err(Error::ShapeMismatch(format!(
            "task has {} tokens, policy has {}",
            task.vocab_size(),
            policy.vocab()
        )));
    }
    Ok(len)
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!("eta must be positive and finite, got {eta}")));
    }
    Ok(())
}

fn rewards_for<R: OutcomeReward + ?Sized>(task: &R, prompt: &[Token], vocab: usize, len: usize, n: usize) -> Result<Vec<f64>> {
    (0..n)
        .map(|i| task.outcome_reward(prompt, &decode_index(i, len, vocab)))
        .collect()
}

/// Exact optimal policy and process rewards for one prompt.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    prompt: Vec<Token>,
    eta: f64,
    vocab: usize,
    len: usize,
    log_z: f64,
    c: f64,
    /// ln π*(prefix | x) per level.
    log_mass: Vec<Vec<f64>>,
    /// ln π_0(prefix | x) per level.
    ref_logp: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    process_reward: Vec<Vec<f64>>,
}

/// Solves max_π E_π[r*] - (1/η) KL(π ‖ π_0) for one prompt by enumeration.
pub fn solve<R: OutcomeReward + ?Sized>(
    prompt: &[Token],
    pi0: &TabularPolicy,
    task: &R,
    eta: f64,
    cap: u64,
) -> Result<OracleSolution> {
    check_eta(eta)?;
    let len = check_task(task, pi0)?;
    let tree = PrefixTree::build(pi0, prompt, len, cap)?;
    let vocab = tree.vocab;
    let n = tree.sequence_logprobs().len();
    let rewards = rewards_for(task, prompt, vocab, len, n)?;

    let log_w: Vec<f64> = tree
        .sequence_logprobs()
        .iter()
        .zip(&rewards)
        .map(|(lp, r)| lp + eta * r)
        .collect();
    let log_z = log_sum_exp(&log_w);

    let mut log_mass = vec![Vec::new(); len + 1];
    log_mass[len] = log_w.iter().map(|w| w - log_z).collect();
    for level in (0..len).rev() {
        let children = &log_mass[level + 1];
        log_mass[level] = children.chunks(vocab).map(log_sum_exp).collect();
    }

    // Soft Bellman backup of the process-reward expectation, from the leaves up.
    let mut process_reward = vec![Vec::new(); len + 1];
    process_reward[len] = rewards.clone();
    for level in (0..len).rev() {
        let mut vals = Vec::with_capacity(log_mass[level].len());
        for parent in 0..log_mass[level].len() {
            let lm_parent = log_mass[level][parent];
            let lr_parent = tree.logp[level][parent];
            let mut acc = 0.0;
            for a in 0..vocab {
                let child = parent * vocab + a;
                let log_opt = log_mass[level + 1][child] - lm_parent;
                let w = log_opt.exp();
                if w == 0.0 {
                    continue;
                }
                let log_ref = tree.logp[level + 1][child] - lr_parent;
                acc += w * (process_reward[level + 1][child] - (log_opt - log_ref) / eta);
            }
            vals.push(acc);
        }
        process_reward[level] = vals;
    }

    Ok(OracleSolution {
        prompt: prompt.to_vec(),
        eta,
        vocab,
        len,
        log_z,
        c: log_z / eta,
        log_mass,
        ref_logp: tree.logp,
        rewards,
        process_reward,
    })
}

impl OracleSolution {
    pub fn prompt(&self) -> &[Token] {
        &self.prompt
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn response_len(&self) -> usize {
        self.len
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn num_sequences(&self) -> usize {
        self.rewards.len()
    }

    /// Partition value Z = E_{a~π_0}[e^{η r*(x,a)}].
    pub fn z(&self) -> f64 {
        self.log_z.exp()
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    /// C = (1/η) ln Z.
    pub fn c(&self) -> f64 {
        self.c
    }

    fn index_of(&self, prefix: &[Token]) -> Result<(usize, usize)> {
        if prefix.len() > self.len {
            return Err(Error::IndexOutOfRange {
                index: prefix.len(),
                lo: 0,
                hi: self.len,
            });
        }
        if let Some(&token) = prefix.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(Error::OutOfVocab {
                token,
                vocab: self.vocab,
            });
        }
        Ok((prefix.len(), encode_index(prefix, self.vocab)))
    }

    pub fn is_reachable(&self, prefix: &[Token]) -> Result<bool> {
        let (l, i) = self.index_of(prefix)?;
        Ok(self.ref_logp[l][i] >= log_floor())
    }

    /// π*(a | x) for a full response.
    pub fn seq_prob(&self, response: &[Token]) -> Result<f64> {
        Ok(self.log_seq_prob(response)?.exp())
    }

    pub fn log_seq_prob(&self, response: &[Token]) -> Result<f64> {
        if response.len() != self.len {
            return Err(Error::LengthMismatch {
                what: "oracle response",
                expected: self.len,
                got: response.len(),
            });
        }
        let (l, i) = self.index_of(response)?;
        Ok(self.log_mass[l][i])
    }

    /// ln π_0(a | x) for a prefix or full response.
    pub fn ref_log_prob(&self, prefix: &[Token]) -> Result<f64> {
        let (l, i) = self.index_of(prefix)?;
        Ok(self.ref_logp[l][i])
    }

    /// ln π*(token | x, prefix).
    pub fn log_conditional(&self, prefix: &[Token], token: Token) -> Result<f64> {
        let (l, i) = self.index_of(prefix)?;
        if l == self.len {
            return Err(Error::IndexOutOfRange {
                index: l,
                lo: 0,
                hi: self.len - 1,
            });
        }
        if token as usize >= self.vocab {
            return Err(Error::OutOfVocab {
                token,
                vocab: self.vocab,
            });
        }
        Ok(self.log_mass[l + 1][i * self.vocab + token as usize] - self.log_mass[l][i])
    }

    /// ln π_0(token | x, prefix).
    pub fn ref_log_conditional(&self, prefix: &[Token], token: Token) -> Result<f64> {
        let (l, i) = self.index_of(prefix)?;
        if l == self.len || token as usize >= self.vocab {
            return Err(Error::IndexOutOfRange {
                index: l,
                lo: 0,
                hi: self.len.saturating_sub(1),
            });
        }
        Ok(self.ref_logp[l + 1][i * self.vocab + token as usize] - self.ref_logp[l][i])
    }

    /// Next-token distribution π*(· | x, prefix).
    pub fn conditional(&self, prefix: &[Token]) -> Result<Vec<f64>> {
        (0..self.vocab as Token)
            .map(|t| self.log_conditional(prefix, t).map(f64::exp))
            .collect()
    }

    pub fn reward_of(&self, response: &[Token]) -> Result<f64> {
        let (l, i) = self.index_of(response)?;
        if l != self.len {
            return Err(Error::LengthMismatch {
                what: "oracle response",
                expected: self.len,
                got: l,
            });
        }
        Ok(self.rewards[i])
    }

    /// Exact process reward r*_ℓ(x, a^(ℓ)) of a reachable prefix.
    pub fn process_reward(&self, prefix: &[Token]) -> Result<f64> {
        if !self.is_reachable(prefix)? {
            return Err(Error::UnreachablePrefix(prefix.to_vec()));
        }
        let (l, i) = self.index_of(prefix)?;
        Ok(self.process_reward[l][i])
    }

    /// r*(x,a) - (1/η) Σ_{j=ℓ+1}^{L} ln(π*(a_j|·)/π_0(a_j|·)) along one full response.
    pub fn closed_form_process_reward(&self, response: &[Token], prefix_len: usize) -> Result<f64> {
        let r = self.reward_of(response)?;
        let mut sum = 0.0;
        for j in prefix_len..self.len {
            let h = &response[..j];
            sum += self.log_conditional(h, response[j])? - self.ref_log_conditional(h, response[j])?;
        }
        Ok(r - sum / self.eta)
    }

    /// All full responses with their π* probabilities, in index order.
    pub fn sequences(&self) -> impl Iterator<Item = (Vec<Token>, f64)> + '_ {
        self.log_mass[self.len]
            .iter()
            .enumerate()
            .map(|(i, lm)| (decode_index(i, self.len, self.vocab), lm.exp()))
    }

    /// The `k` most probable responses under π*, ties broken by index.
    pub fn top_k(&self, k: usize) -> Vec<(Vec<Token>, f64)> {
        let leaves = &self.log_mass[self.len];
        let mut idx: Vec<usize> = (0..leaves.len()).collect();
        idx.sort_by(|&a, &b| leaves[b].total_cmp(&leaves[a]).then(a.cmp(&b)));
        idx.into_iter()
            .take(k)
            .map(|i| (decode_index(i, self.len, self.vocab), leaves[i].exp()))
            .collect()
    }

    /// Sequence-level KL(π ‖ π*) for this prompt.
    pub fn kl_from(&self, policy: &TabularPolicy, cap: u64) -> Result<f64> {
        let tree = PrefixTree::build(policy, &self.prompt, self.len, cap)?;
        let kl: f64 = tree
            .sequence_logprobs()
            .iter()
            .zip(&self.log_mass[self.len])
            .map(|(&lp, &lo)| {
                let p = lp.exp();
                if p == 0.0 {
                    0.0
                } else {
                    p * (lp - lo)
                }
            })
            .sum();
        Ok(kl.max(0.0))
    }

    /// Residuals of the optimality identities over every response and prefix.
    pub fn residual_report(&self) -> ResidualReport {
        let mut rep = ResidualReport::default();
        let mut constants = Vec::with_capacity(self.num_sequences());
        // per-prefix closed-form values across continuations
        let mut per_prefix: Vec<Vec<(f64, f64)>> = self
            .log_mass
            .iter()
            .map(|lvl| vec![(f64::INFINITY, f64::NEG_INFINITY); lvl.len()])
            .collect();
        for (i, (resp, _)) in self.sequences().enumerate() {
            if self.ref_logp[self.len][i] < log_floor() {
                continue;
            }
            let mut log_opt = 0.0;
            let mut suffix = vec![0.0; self.len + 1];
            let mut ratios = vec![0.0; self.len];
            for j in 0..self.len {
                let lo = self.log_conditional(&resp[..j], resp[j]).unwrap();
                let lr = self.ref_log_conditional(&resp[..j], resp[j]).unwrap();
                log_opt += lo;
                ratios[j] = lo - lr;
            }
            for j in (0..self.len).rev() {
                suffix[j] = suffix[j + 1] + ratios[j];
            }
            let lhs = log_opt + self.log_z;
            let rhs = self.ref_logp[self.len][i] + self.eta * self.rewards[i];
            rep.optimal_identity_max_rel_err = rep.optimal_identity_max_rel_err.max((lhs - rhs).exp_m1().abs());
            let r = self.rewards[i];
            constants.push(r - (log_opt - self.ref_logp[self.len][i]) / self.eta);
            for l in 0..=self.len {
                let v = r - suffix[l] / self.eta;
                let idx = encode_index(&resp[..l], self.vocab);
                let e = &mut per_prefix[l][idx];
                e.0 = e.0.min(v);
                e.1 = e.1.max(v);
                let stored = self.process_reward[l][idx];
                rep.expectation_max_residual = rep.expectation_max_residual.max((stored - v).abs());
                let identity = self.c + (suffix[0] - suffix[l]) / self.eta;
                rep.prefix_identity_max_residual =
                    rep.prefix_identity_max_residual.max((stored - identity).abs());
                for p in l + 1..=self.len {
                    let pidx = encode_index(&resp[..p], self.vocab);
                    let rel = self.process_reward[p][pidx] - (suffix[l] - suffix[p]) / self.eta;
                    rep.generalized_max_residual = rep.generalized_max_residual.max((stored - rel).abs());
                }
            }
        }
        let (lo, hi) = constants
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        rep.constant_sum_spread = if constants.is_empty() { 0.0 } else { hi - lo };
        rep.constant_sum_max_dev_from_c = constants
            .iter()
            .fold(0.0f64, |m, v| m.max((v - self.c).abs()));
        rep.path_independence_max_spread = per_prefix
            .iter()
            .flatten()
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .fold(0.0f64, |m, (a, b)| m.max(b - a));
        rep
    }
}

/// Worst-case residuals of the optimality identities for one solution.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct ResidualReport {
    /// max |π*(a)·Z / (π_0(a)·e^{η r}) - 1|, with π* rebuilt from its conditionals.
    pub optimal_identity_max_rel_err: f64,
    /// max - min of r - (1/η) ln(π*/π_0) over responses.
    pub constant_sum_spread: f64,
    pub constant_sum_max_dev_from_c: f64,
    /// max over prefixes of the spread of the closed form across continuations.
    pub path_independence_max_spread: f64,
    /// max |r*_ℓ - (r*_p - (1/η) Σ_{ℓ<j≤p} ln ratio)| over all ℓ < p.
    pub generalized_max_residual: f64,
    /// max |stored r*_ℓ - closed form|.
    pub expectation_max_residual: f64,
    /// max |r*_ℓ - (C + (1/η) Σ_{j≤ℓ} ln ratio)|.
    pub prefix_identity_max_residual: f64,
}

/// Q(π) = E_{a~π}[r*] - (1/η) KL(π ‖ π_0) for one prompt, by enumeration.
pub fn objective_exact<R: OutcomeReward + ?Sized>(
    pi: &TabularPolicy,
    prompt: &[Token],
    pi0: &TabularPolicy,
    task: &R,
    eta: f64,
    cap: u64,
) -> Result<f64> {
    check_eta(eta)?;
    pi.check_same_shape(pi0)?;
    let len = check_task(task, pi)?;
    let cur = PrefixTree::build(pi, prompt, len, cap)?;
    let reference = PrefixTree::build(pi0, prompt, len, cap)?;
    let vocab = cur.vocab;
    let mut q = 0.0;
    for (i, (&lp, &lr)) in cur
        .sequence_logprobs()
        .iter()
        .zip(reference.sequence_logprobs())
        .enumerate()
    {
        let p = lp.exp();
        if p == 0.0 {
            continue;
        }
        let r = task.outcome_reward(prompt, &decode_index(i, len, vocab))?;
        q += p * (r - (lp - lr) / eta);
    }
    Ok(q)
}

/// ∇Q(π_ω) with respect to the logits, summing every response:
/// Σ_a π(a) Σ_j ∇ln π(a_j|h_j) · (r*(a) - (1/η) Σ_k ln(π/π_0)(a_k|h_k)).
pub fn objective_gradient_exact<R: OutcomeReward + ?Sized>(
    pi: &TabularPolicy,
    prompt: &[Token],
    pi0: &TabularPolicy,
    task: &R,
    eta: f64,
    cap: u64,
) -> Result<PolicyGradient> {
    check_eta(eta)?;
    pi.check_same_shape(pi0)?;
    let len = check_task(task, pi)?;
    let cur = PrefixTree::build(pi, prompt, len, cap)?;
    let reference = PrefixTree::build(pi0, prompt, len, cap)?;
    let vocab = cur.vocab;
    let mut grad = PolicyGradient::zeros_like(pi);
    for (i, (&lp, &lr)) in cur
        .sequence_logprobs()
        .iter()
        .zip(reference.sequence_logprobs())
        .enumerate()
    {
        let p = lp.exp();
        if p == 0.0 {
            continue;
        }
        let resp = decode_index(i, len, vocab);
        let r = task.outcome_reward(prompt, &resp)?;
        let w = p * (r - (lp - lr) / eta);
        for (j, &tok) in resp.iter().enumerate() {
            let c = cur.context(j, encode_index(&resp[..j], vocab));
            let probs = pi.probs_at(c);
            for (k, g) in grad.row_mut(c).iter_mut().enumerate() {
                let onehot = if k == tok as usize { 1.0 } else { 0.0 };
                *g += w * (onehot - probs[k]);
            }
        }
    }
    Ok(grad)
}

/// Sequence-level KL(p ‖ q) for one prompt and fixed response length.
pub fn exact_sequence_kl(
    p: &TabularPolicy,
    q: &TabularPolicy,
    prompt: &[Token],
    len: usize,
    cap: u64,
) -> Result<f64> {
    p.check_same_shape(q)?;
    let tp = PrefixTree::build(p, prompt, len, cap)?;
    let tq = PrefixTree::build(q, prompt, len, cap)?;
    let kl: f64 = tp
        .sequence_logprobs()
        .iter()
        .zip(tq.sequence_logprobs())
        .map(|(&a, &b)| {
            let w = a.exp();
            if w == 0.0 {
                0.0
            } else {
                w * (a - b)
            }
        })
        .sum();
    Ok(kl.max(0.0))
}

/// Expected reward and probability of a reward at or above `threshold`.
pub fn exact_success<R: OutcomeReward + ?Sized>(
    policy: &TabularPolicy,
    prompt: &[Token],
    task: &R,
    threshold: f64,
    cap: u64,
) -> Result<(f64, f64)> {
    let len = check_task(task, policy)?;
    let tree = PrefixTree::build(policy, prompt, len, cap)?;
    let mut mean = 0.0;
    let mut success = 0.0;
    for (i, &lp) in tree.sequence_logprobs().iter().enumerate() {
        let p = lp.exp();
        if p == 0.0 {
            continue;
        }
        let r = task.outcome_reward(prompt, &decode_index(i, len, tree.vocab))?;
        mean += p * r;
        if r >= threshold {
            success += p;
        }
    }
    Ok((mean, success.min(1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alphabet::Alphabet;
    use crate::env::{Task, TaskKind, TaskSpec};

    fn instance() -> (Task, TabularPolicy) {
        let task = Task::new(TaskSpec {
            kind: TaskKind::TargetMatch {
                prompt_len: 1,
                target: Some(vec![1, 1]),
                salt: 0,
            },
            alphabet_size: 2,
            response_len: 2,
            eos_id: None,
            delimiter_id: None,
        })
        .unwrap();
        let pi0 = TabularPolicy::uniform(Alphabet::new(2).unwrap(), 2, 2).unwrap();
        (task, pi0)
    }

    #[test]
    fn two_token_instance_by_hand() {
        let (task, pi0) = instance();
        let sol = solve(&[0], &pi0, &task, 1.0, DEFAULT_ENUMERATION_CAP).unwrap();
        let e = std::f64::consts::E;
        // Z = (3 + e)/4, π*([1,1]) = e/(3+e), others 1/(3+e), C = ln Z
        assert!((sol.z() - (3.0 + e) / 4.0).abs() < 1e-14);
        assert!((sol.z() - 1.429570).abs() < 1e-6);
        assert!((sol.seq_prob(&[1, 1]).unwrap() - e / (3.0 + e)).abs() < 1e-14);
        assert!((sol.seq_prob(&[1, 1]).unwrap() - 0.475367).abs() < 1e-6);
        for other in [[0, 0], [0, 1], [1, 0]] {
            assert!((sol.seq_prob(&other).unwrap() - 0.174878).abs() < 1e-6);
        }
        assert!((sol.c() - ((3.0 + e) / 4.0).ln()).abs() < 1e-14);
        assert!((sol.c() - 0.357374).abs() < 1e-6);
        let total: f64 = sol.sequences().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // π*(1 | [1]) = e/(1+e)
        let cond = sol.conditional(&[1]).unwrap();
        assert!((cond[1] - e / (1.0 + e)).abs() < 1e-14);
    }

    #[test]
    fn process_rewards_by_hand() {
        let (task, pi0) = instance();
        let sol = solve(&[0], &pi0, &task, 1.0, DEFAULT_ENUMERATION_CAP).unwrap();
        let via_one = 1.0 - (0.731_058_578_630_004_9f64 / 0.5).ln();
        let via_zero = 0.0 - (0.268_941_421_369_995_1f64 / 0.5).ln();
        assert!((via_one - via_zero).abs() < 1e-12);
        assert!((via_one - 0.620115).abs() < 1e-6);
        assert!((sol.process_reward(&[1]).unwrap() - via_one).abs() < 1e-12);
        assert!((sol.closed_form_process_reward(&[1, 1], 1).unwrap() - via_one).abs() < 1e-12);
        assert!((sol.closed_form_process_reward(&[1, 0], 1).unwrap() - via_one).abs() < 1e-12);
        assert!((sol.process_reward(&[]).unwrap() - sol.c()).abs() < 1e-12);
        assert_eq!(sol.process_reward(&[1, 1]).unwrap(), 1.0);
        assert_eq!(sol.process_reward(&[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn objective_values() {
        let (task, pi0) = instance();
        let q0 = objective_exact(&pi0, &[0], &pi0, &task, 1.0, DEFAULT_ENUMERATION_CAP).unwrap();
        assert!((q0 - 0.25).abs() < 1e-15);
        // π* expressed as a full-history policy
        let sol = solve(&[0], &pi0, &task, 1.0, DEFAULT_ENUMERATION_CAP).unwrap();
        let mut opt = pi0.clone();
        for prefix in [vec![], vec![0], vec![1]] {
            let mut hist = vec![0];
            hist.extend(&prefix);
            let ctx = opt.context_of(&hist).unwrap();
            let cond = sol.conditional(&prefix).unwrap();
            let row: Vec<f64> = cond.iter().map(|p| p.ln()).collect();
            opt.row_mut(ctx).copy_from_slice(&row);
        }
        let q = objective_exact(&opt, &[0], &pi0, &task, 1.0, DEFAULT_ENUMERATION_CAP).unwrap();
        assert!((q - sol.c()).abs() < 1e-12);
        assert!(sol.kl_from(&opt, DEFAULT_ENUMERATION_CAP).unwrap() < 1e-12);
    }

    #[test]
    fn cap_and_reachability_errors() {
        let (task, pi0) = instance();
        let err = solve(&[0], &pi0, &task, 1.0, 3).unwrap_err();
        assert!(matches!(err, Error::EnumerationCap { required: 4, cap: 3 }));
        assert!(err.to_string().contains('4'));
        let mut skewed = pi0.clone();
        let ctx = skewed.context_of(&[0]).unwrap();
        skewed.row_mut(ctx).copy_from_slice(&[0.0, -800.0]);
        let sol = solve(&[0], &skewed, &task, 1.0, 100).unwrap();
        assert!(matches!(sol.process_reward(&[1]), Err(Error::UnreachablePrefix(_))));
        assert!(sol.process_reward(&[0]).is_ok());
        assert!(solve(&[0], &pi0, &task, 0.0, 100).is_err());
    }

    struct Constant(f64);

    impl OutcomeReward for Constant {
        fn outcome_reward(&self, _: &[Token], _: &[Token]) -> Result<f64> {
            Ok(self.0)
        }
        fn vocab_size(&self) -> usize {
            3
        }
        fn fixed_response_len(&self) -> Option<usize> {
            Some(3)
        }
    }

    #[test]
    fn constant_reward_leaves_reference_unchanged() {
        let pi0 = TabularPolicy::random(Alphabet::new(3).unwrap(), 2, 3, 1.0, 2).unwrap();
        let sol = solve(&[1], &pi0, &Constant(0.3), 5.0, 100).unwrap();
        assert!((sol.c() - 0.3).abs() < 1e-12);
        for (a, p) in sol.sequences() {
            let p0 = pi0.sequence_logprob(&[1], &a).unwrap().exp();
            assert!((p - p0).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_eta_recovers_reference() {
        let (task, _) = instance();
        let pi0 = TabularPolicy::random(Alphabet::new(2).unwrap(), 2, 2, 1.0, 2).unwrap();
        let sol = solve(&[0], &pi0, &task, 1e-8, 100).unwrap();
        let tv: f64 = sol
            .sequences()
            .map(|(a, p)| (p - pi0.sequence_logprob(&[0], &a).unwrap().exp()).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 1e-6);
    }
}
