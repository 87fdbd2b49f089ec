//! Synthetic prompt distributions with rule-based binary rewards.
//!
//! * `target_match`: every prompt has one target response (either a fixed
//!   `target` shared by all prompts, or a pseudo-random one derived from the
//!   prompt and `salt`); reward 1 iff the response equals it.
//! * `parity_goal`: the parity of the first prompt token names the goal;
//!   reward 1 iff the response token sum has that parity.
//! * `mod_arith`: the prompt is `digits(u) ++ digits(v) ++ digits(m)`, each
//!   `digits` wide in base `alphabet_size`, most significant digit first;
//!   reward 1 iff the response digits spell `(u + v) mod m`.
//!
//! With an end marker configured the response may stop early; a trailing
//! end marker is stripped before checking. Oracle computations require the
//! fixed-length form.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alphabet::{Alphabet, Token};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    TargetMatch {
        prompt_len: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<Vec<Token>>,
        #[serde(default)]
        salt: u64,
    },
    ParityGoal {
        prompt_len: usize,
    },
    ModArith {
        digits: usize,
        modulus_min: u64,
        modulus_max: u64,
    },
}

/// Serializable task description, as it appears under `[task]` in a run config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub kind: TaskKind,
    pub alphabet_size: usize,
    pub response_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eos_id: Option<Token>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delimiter_id: Option<Token>,
}

/// A deterministic outcome reward over a finite token alphabet.
pub trait OutcomeReward: Sync {
    fn outcome_reward(&self, prompt: &[Token], response: &[Token]) -> Result<f64>;
    fn vocab_size(&self) -> usize;
    /// `Some(L)` when every response has exactly `L` tokens.
    fn fixed_response_len(&self) -> Option<usize>;
}

impl OutcomeReward for Task {
    fn outcome_reward(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        self.reward(prompt, response)
    }

    fn vocab_size(&self) -> usize {
        self.alphabet.size()
    }

    fn fixed_response_len(&self) -> Option<usize> {
        self.is_fixed_length().then_some(self.spec.response_len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    spec: TaskSpec,
    alphabet: Alphabet,
}

/// Largest response space enumerated by the solvability check.
const SOLVABILITY_ENUM_CAP: u128 = 1 << 16;

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        let mut alphabet = Alphabet::new(spec.alphabet_size)?;
        if let Some(e) = spec.eos_id {
            alphabet = alphabet.with_eos(e)?;
        }
        if let Some(d) = spec.delimiter_id {
            alphabet = alphabet.with_delimiter(d)?;
        }
        let cfg = |m: String| Err(Error::Config(m));
        if spec.response_len == 0 {
            return cfg("response_len must be >= 1".into());
        }
        let base = spec.alphabet_size as u128;
        match &spec.kind {
            TaskKind::TargetMatch {
                prompt_len, target, ..
            } => {
                if *prompt_len == 0 {
                    return cfg("target_match needs prompt_len >= 1".into());
                }
                if let Some(t) = target {
                    alphabet.check_tokens(t)?;
                    if t.len() != Self::target_len_of(&spec) {
                        return cfg(format!(
                            "target has length {}, expected {}",
                            t.len(),
                            Self::target_len_of(&spec)
                        ));
                    }
                    if spec.eos_id.is_some_and(|e| t.contains(&e)) {
                        return cfg("target must not contain the end marker".into());
                    }
                }
                if spec.eos_id.is_some() && spec.response_len < 2 {
                    return cfg("eos-terminated target_match needs response_len >= 2".into());
                }
            }
            TaskKind::ParityGoal { prompt_len } => {
                if *prompt_len == 0 {
                    return cfg("parity_goal needs prompt_len >= 1".into());
                }
            }
            TaskKind::ModArith {
                digits,
                modulus_min,
                modulus_max,
            } => {
                if spec.eos_id.is_some() {
                    return cfg("mod_arith is fixed-length; remove eos_id".into());
                }
                if *digits == 0 || *modulus_min < 2 || modulus_min > modulus_max {
                    return cfg("mod_arith needs digits >= 1 and 2 <= modulus_min <= modulus_max".into());
                }
                let span = base.checked_pow(*digits as u32).unwrap_or(u128::MAX);
                if *modulus_max as u128 >= span {
                    return cfg(format!(
                        "modulus_max {modulus_max} does not fit in {digits} base-{base} digits"
                    ));
                }
                let answers = base
                    .checked_pow(spec.response_len as u32)
                    .unwrap_or(u128::MAX);
                if *modulus_max as u128 > answers {
                    return cfg(format!(
                        "answers up to {} do not fit in {} response digits",
                        modulus_max - 1,
                        spec.response_len
                    ));
                }
            }
        }
        Ok(Task { spec, alphabet })
    }

    fn target_len_of(spec: &TaskSpec) -> usize {
        if spec.eos_id.is_some() {
            spec.response_len - 1
        } else {
            spec.response_len
        }
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn response_len(&self) -> usize {
        self.spec.response_len
    }

    /// True when every response has exactly `response_len` tokens.
    pub fn is_fixed_length(&self) -> bool {
        self.spec.eos_id.is_none()
    }

    pub fn prompt_len(&self) -> usize {
        match &self.spec.kind {
            TaskKind::TargetMatch { prompt_len, .. } | TaskKind::ParityGoal { prompt_len } => {
                *prompt_len
            }
            TaskKind::ModArith { digits, .. } => 3 * digits,
        }
    }

    fn base(&self) -> u64 {
        self.spec.alphabet_size as u64
    }

    fn check_prompt(&self, prompt: &[Token]) -> Result<()> {
        if prompt.len() != self.prompt_len() {
            return Err(Error::MalformedPrompt(format!(
                "expected {} tokens, got {}",
                self.prompt_len(),
                prompt.len()
            )));
        }
        self.alphabet
            .check_tokens(prompt)
            .map_err(|e| Error::MalformedPrompt(e.to_string()))
    }

    /// Decodes a mod_arith prompt into `(u, v, m)`.
    pub fn decode_mod_arith(&self, prompt: &[Token]) -> Result<(u64, u64, u64)> {
        let TaskKind::ModArith { digits, .. } = self.spec.kind else {
            return Err(Error::MalformedPrompt("task is not mod_arith".into()));
        };
        self.check_prompt(prompt)?;
        let d = digits;
        let u = decode_digits(&prompt[..d], self.base());
        let v = decode_digits(&prompt[d..2 * d], self.base());
        let m = decode_digits(&prompt[2 * d..], self.base());
        if m < 2 || u >= m || v >= m {
            return Err(Error::MalformedPrompt(format!(
                "operands ({u}, {v}) mod {m} are not reduced"
            )));
        }
        Ok((u, v, m))
    }

    pub fn encode_mod_arith(&self, u: u64, v: u64, m: u64) -> Result<Vec<Token>> {
        let TaskKind::ModArith { digits, .. } = self.spec.kind else {
            return Err(Error::Config("task is not mod_arith".into()));
        };
        let mut out = encode_digits(u, digits, self.base());
        out.extend(encode_digits(v, digits, self.base()));
        out.extend(encode_digits(m, digits, self.base()));
        self.decode_mod_arith(&out)?;
        Ok(out)
    }

    fn target_for(&self, prompt: &[Token]) -> Vec<Token> {
        let TaskKind::TargetMatch { target, salt, .. } = &self.spec.kind else {
            unreachable!("target_for on a non target_match task");
        };
        if let Some(t) = target {
            return t.clone();
        }
        let len = Self::target_len_of(&self.spec);
        let choices: Vec<Token> = (0..self.spec.alphabet_size as Token)
            .filter(|&t| Some(t) != self.spec.eos_id)
            .collect();
        let mut h = *salt ^ 0x9e37_79b9_7f4a_7c15;
        for &t in prompt {
            h = splitmix64(h ^ t as u64);
        }
        (0..len)
            .map(|_| {
                h = splitmix64(h);
                choices[(h % choices.len() as u64) as usize]
            })
            .collect()
    }

    /// A response with reward 1 for `prompt`.
    pub fn solution(&self, prompt: &[Token]) -> Result<Vec<Token>> {
        self.check_prompt(prompt)?;
        let mut out = match &self.spec.kind {
            TaskKind::TargetMatch { .. } => self.target_for(prompt),
            TaskKind::ParityGoal { .. } => {
                let goal = prompt[0] % 2;
                let mut r = vec![0; self.spec.response_len - self.spec.eos_id.is_some() as usize];
                if goal == 1 {
                    // any odd token works
                    let odd = (0..self.spec.alphabet_size as Token)
                        .find(|&t| t % 2 == 1 && Some(t) != self.spec.eos_id)
                        .ok_or_else(|| Error::Config("no odd token available".into()))?;
                    r[0] = odd;
                }
                if let Some(e) = self.spec.eos_id {
                    if r.contains(&e) {
                        return Err(Error::Config("parity solution collides with eos".into()));
                    }
                }
                r
            }
            TaskKind::ModArith { .. } => {
                let (u, v, m) = self.decode_mod_arith(prompt)?;
                encode_digits((u + v) % m, self.spec.response_len, self.base())
            }
        };
        if let Some(e) = self.spec.eos_id {
            out.push(e);
        }
        Ok(out)
    }

    /// Outcome reward r*(x, a) ∈ {0, 1}.
    pub fn reward(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        self.check_prompt(prompt)?;
        self.alphabet.check_tokens(response)?;
        let body = match self.spec.eos_id {
            Some(e) => match response.split_last() {
                Some((&last, rest)) if last == e => rest,
                _ => response,
            },
            None => {
                if response.len() != self.spec.response_len {
                    return Ok(0.0);
                }
                response
            }
        };
        let ok = match &self.spec.kind {
            TaskKind::TargetMatch { .. } => body == self.target_for(prompt).as_slice(),
            TaskKind::ParityGoal { .. } => {
                let sum: u64 = body.iter().map(|&t| t as u64).sum();
                sum % 2 == (prompt[0] % 2) as u64
            }
            TaskKind::ModArith { .. } => {
                let (u, v, m) = self.decode_mod_arith(prompt)?;
                decode_digits(body, self.base()) == (u + v) % m
            }
        };
        Ok(if ok { 1.0 } else { 0.0 })
    }

    /// `n` prompts, deterministic in `seed`. Prompts are distinct as long as
    /// the prompt space allows it.
    pub fn sample_prompts(&self, n: usize, seed: u64, allow_empty: bool) -> Result<Vec<Vec<Token>>> {
        if n == 0 && !allow_empty {
            return Err(Error::Config("requested 0 prompts".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            let p = self.draw_prompt(&mut rng);
            attempts += 1;
            if seen.insert(p.clone()) || attempts > 64 * n {
                if !self.is_solvable(&p)? {
                    return Err(Error::Config(format!("prompt {p:?} has no correct response")));
                }
                out.push(p);
            }
        }
        Ok(out)
    }

    fn draw_prompt(&self, rng: &mut ChaCha8Rng) -> Vec<Token> {
        let size = self.spec.alphabet_size as Token;
        match &self.spec.kind {
            TaskKind::TargetMatch { prompt_len, .. } | TaskKind::ParityGoal { prompt_len } => {
                (0..*prompt_len).map(|_| rng.gen_range(0..size)).collect()
            }
            TaskKind::ModArith {
                digits,
                modulus_min,
                modulus_max,
            } => {
                let m = rng.gen_range(*modulus_min..=*modulus_max);
                let u = rng.gen_range(0..m);
                let v = rng.gen_range(0..m);
                let mut out = encode_digits(u, *digits, self.base());
                out.extend(encode_digits(v, *digits, self.base()));
                out.extend(encode_digits(m, *digits, self.base()));
                out
            }
        }
    }

    /// Whether some response earns reward 1; enumerates small response spaces.
    pub fn is_solvable(&self, prompt: &[Token]) -> Result<bool> {
        let size = self.spec.alphabet_size as u128;
        let space = size.checked_pow(self.spec.response_len as u32);
        if self.is_fixed_length() && space.is_some_and(|s| s <= SOLVABILITY_ENUM_CAP) {
            let len = self.spec.response_len;
            let mut resp = vec![0 as Token; len];
            for idx in 0..space.unwrap() {
                let mut rem = idx;
                for slot in resp.iter_mut().rev() {
                    *slot = (rem % size) as Token;
                    rem /= size;
                }
                if self.reward(prompt, &resp)? == 1.0 {
                    return Ok(true);
                }
            }
            return Ok(false);
        }
        let s = self.solution(prompt)?;
        Ok(self.reward(prompt, &s)? == 1.0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn encode_digits(mut value: u64, width: usize, base: u64) -> Vec<Token> {
    let mut out = vec![0 as Token; width];
    for slot in out.iter_mut().rev() {
        *slot = (value % base) as Token;
        value /= base;
    }
    out
}

pub fn decode_digits(digits: &[Token], base: u64) -> u64 {
    digits
        .iter()
        .fold(0u64, |acc, &d| acc.saturating_mul(base).saturating_add(d as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target_task(target: Option<Vec<Token>>) -> Task {
        Task::new(TaskSpec {
            kind: TaskKind::TargetMatch {
                prompt_len: 1,
                target,
                salt: 0,
            },
            alphabet_size: 2,
            response_len: 2,
            eos_id: None,
            delimiter_id: None,
        })
        .unwrap()
    }

    fn mod_task() -> Task {
        Task::new(TaskSpec {
            kind: TaskKind::ModArith {
                digits: 2,
                modulus_min: 2,
                modulus_max: 15,
            },
            alphabet_size: 4,
            response_len: 2,
            eos_id: None,
            delimiter_id: None,
        })
        .unwrap()
    }

    #[test]
    fn target_match_rewards() {
        let t = target_task(Some(vec![1, 1]));
        assert_eq!(t.reward(&[0], &[1, 1]).unwrap(), 1.0);
        assert_eq!(t.reward(&[0], &[1, 0]).unwrap(), 0.0);
        assert_eq!(t.reward(&[0], &[1]).unwrap(), 0.0);
        assert!(t.reward(&[0, 0], &[1, 1]).is_err());
        assert!(t.reward(&[0], &[1, 2]).is_err());
    }

    #[test]
    fn parity_rewards() {
        let t = Task::new(TaskSpec {
            kind: TaskKind::ParityGoal { prompt_len: 1 },
            alphabet_size: 2,
            response_len: 3,
            eos_id: None,
            delimiter_id: None,
        })
        .unwrap();
        assert_eq!(t.reward(&[0], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(t.reward(&[1], &[1, 0, 1]).unwrap(), 0.0);
        assert_eq!(t.reward(&[1], &[1, 0, 0]).unwrap(), 1.0);
        assert!(t.reward(&[], &[1, 0, 0]).is_err());
    }

    #[test]
    fn mod_arith_matches_integer_arithmetic() {
        let t = mod_task();
        // 2 + 3 mod 4 = 1
        let prompt = t.encode_mod_arith(2, 3, 4).unwrap();
        assert_eq!(prompt, vec![0, 2, 0, 3, 1, 0]);
        assert_eq!(t.reward(&prompt, &[0, 1]).unwrap(), 1.0);
        for a in 0..4u32 {
            for b in 0..4u32 {
                let expected = if (a, b) == (0, 1) { 1.0 } else { 0.0 };
                assert_eq!(t.reward(&prompt, &[a, b]).unwrap(), expected);
            }
        }
        // exhaustive integer oracle over every valid triple
        for m in 2..=15u64 {
            for u in 0..m {
                for v in 0..m {
                    let p = t.encode_mod_arith(u, v, m).unwrap();
                    let ans = encode_digits((u + v) % m, 2, 4);
                    assert_eq!(t.reward(&p, &ans).unwrap(), 1.0);
                }
            }
        }
        // m = 1 and unreduced operands are malformed
        assert!(t.reward(&[0, 0, 0, 0, 0, 1], &[0, 0]).is_err());
        assert!(t.reward(&[1, 0, 0, 0, 0, 3], &[0, 0]).is_err());
    }

    #[test]
    fn generated_mod_arith_prompts_decode() {
        let t = mod_task();
        let prompts = t.sample_prompts(200, 3, false).unwrap();
        for p in &prompts {
            let (u, v, m) = t.decode_mod_arith(p).unwrap();
            assert!(u < m && v < m && (2..=15).contains(&m));
            assert_eq!(t.encode_mod_arith(u, v, m).unwrap(), *p);
        }
    }

    #[test]
    fn prompt_sampling_contract() {
        let t = target_task(None);
        assert!(t.sample_prompts(0, 1, false).is_err());
        assert!(t.sample_prompts(0, 1, true).unwrap().is_empty());
        assert_eq!(t.sample_prompts(5, 9, false).unwrap(), t.sample_prompts(5, 9, false).unwrap());
        // only two distinct prompts exist; asking for two gives both
        let mut two = t.sample_prompts(2, 4, false).unwrap();
        two.sort();
        assert_eq!(two, vec![vec![0], vec![1]]);
    }

    #[test]
    fn every_task_is_solvable() {
        let specs = [
            target_task(None).spec().clone(),
            mod_task().spec().clone(),
            TaskSpec {
                kind: TaskKind::ParityGoal { prompt_len: 2 },
                alphabet_size: 3,
                response_len: 4,
                eos_id: Some(2),
                delimiter_id: None,
            },
            TaskSpec {
                kind: TaskKind::TargetMatch {
                    prompt_len: 3,
                    target: None,
                    salt: 7,
                },
                alphabet_size: 5,
                response_len: 4,
                eos_id: Some(4),
                delimiter_id: Some(0),
            },
        ];
        for spec in specs {
            let t = Task::new(spec).unwrap();
            for p in t.sample_prompts(20, 1, false).unwrap() {
                assert!(t.is_solvable(&p).unwrap());
                assert_eq!(t.reward(&p, &t.solution(&p).unwrap()).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn reward_is_deterministic() {
        let t = mod_task();
        let p = t.encode_mod_arith(7, 9, 11).unwrap();
        let first = t.reward(&p, &[0, 1]).unwrap();
        for _ in 0..1000 {
            assert_eq!(t.reward(&p, &[0, 1]).unwrap().to_bits(), first.to_bits());
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = mod_task().spec().clone();
        s.response_len = 1; // answers up to 14 need two base-4 digits
        assert!(Task::new(s).is_err());
        let mut s = target_task(None).spec().clone();
        s.kind = TaskKind::TargetMatch {
            prompt_len: 1,
            target: Some(vec![1]),
            salt: 0,
        };
        assert!(Task::new(s).is_err());
    }

    #[test]
    fn spec_parses_from_toml() {
        let s: TaskSpec = toml::from_str(
            "kind = \"mod_arith\"\ndigits = 2\nmodulus_min = 2\nmodulus_max = 15\nalphabet_size = 4\nresponse_len = 2\n",
        )
        .unwrap();
        assert_eq!(&s, mod_task().spec());
    }
}
