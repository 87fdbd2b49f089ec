//! Trajectories and their line-delimited on-disk record format.
//!
//! Each line of a trajectory file is one JSON object with the fields
//! `prompt`, `response`, `logp_cur`, `logp_old`, `logp_ref`, `reward` and
//! `group_id`. Prompt-only datasets leave `response` and the log-probability
//! arrays empty and `reward` null. Advantage dumps add `rho` (one weight per
//! response token) and `segment_boundaries` (1-based step ends).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alphabet::{Alphabet, Token};
use crate::error::{Error, Result};

/// One rollout of a prompt. Response positions are 0-based: `response[i]`
/// is the token generated at step `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
    /// ln π_ω(a_t | x, a_<t) under the current policy.
    pub logp_cur: Vec<f64>,
    /// Same under the rollout snapshot π_old.
    pub logp_old: Vec<f64>,
    /// Same under the reference policy π_0.
    pub logp_ref: Vec<f64>,
    pub reward: f64,
    pub group_id: u64,
}

impl Trajectory {
    pub fn new(
        prompt: Vec<Token>,
        response: Vec<Token>,
        logp_cur: Vec<f64>,
        logp_old: Vec<f64>,
        logp_ref: Vec<f64>,
        reward: f64,
        group_id: u64,
    ) -> Result<Self> {
        let t = Trajectory {
            prompt,
            response,
            logp_cur,
            logp_old,
            logp_ref,
            reward,
            group_id,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.response.len();
        for (what, arr) in [
            ("logp_cur", &self.logp_cur),
            ("logp_old", &self.logp_old),
            ("logp_ref", &self.logp_ref),
        ] {
            if arr.len() != len {
                return Err(Error::LengthMismatch {
                    what,
                    expected: len,
                    got: arr.len(),
                });
            }
            if let Some(v) = arr.iter().find(|v| v.is_nan() || **v > 0.0) {
                return Err(Error::InvalidTrajectory(format!(
                    "{what} entry {v} is not a log-probability"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.reward) {
            return Err(Error::InvalidTrajectory(format!(
                "reward {} outside [0, 1]",
                self.reward
            )));
        }
        Ok(())
    }

    /// Checks token validity and, when the alphabet has an end marker, that
    /// it only appears as the final response token.
    pub fn validate_tokens(&self, alphabet: &Alphabet) -> Result<()> {
        alphabet.check_tokens(&self.prompt)?;
        alphabet.check_tokens(&self.response)?;
        if let Some(eos) = alphabet.eos_id() {
            let hits = self.response.iter().filter(|&&t| t == eos).count();
            if hits > 1 || (hits == 1 && self.response.last() != Some(&eos)) {
                return Err(Error::InvalidTrajectory(
                    "eos must appear at most once and only at the end".into(),
                ));
            }
        }
        Ok(())
    }

    /// Per-token ln(π_ω / π_0).
    pub fn log_ratios_to_ref(&self) -> Vec<f64> {
        self.logp_cur
            .iter()
            .zip(&self.logp_ref)
            .map(|(c, r)| c - r)
            .collect()
    }
}

/// Serialized form of a trajectory, an advantage dump, or a bare prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub prompt: Vec<Token>,
    #[serde(default)]
    pub response: Vec<Token>,
    #[serde(default)]
    pub logp_cur: Vec<f64>,
    #[serde(default)]
    pub logp_old: Vec<f64>,
    #[serde(default)]
    pub logp_ref: Vec<f64>,
    pub reward: Option<f64>,
    pub group_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_boundaries: Option<Vec<usize>>,
}

impl TrajectoryRecord {
    pub fn prompt_only(prompt: Vec<Token>, group_id: u64) -> Self {
        TrajectoryRecord {
            prompt,
            response: Vec::new(),
            logp_cur: Vec::new(),
            logp_old: Vec::new(),
            logp_ref: Vec::new(),
            reward: None,
            group_id,
            rho: None,
            segment_boundaries: None,
        }
    }

    /// Converts back into a full trajectory; prompt-only records have no reward.
    pub fn into_trajectory(self) -> Result<Trajectory> {
        let reward = self
            .reward
            .ok_or_else(|| Error::InvalidTrajectory("record has no reward".into()))?;
        Trajectory::new(
            self.prompt,
            self.response,
            self.logp_cur,
            self.logp_old,
            self.logp_ref,
            reward,
            self.group_id,
        )
    }
}

impl From<&Trajectory> for TrajectoryRecord {
    fn from(t: &Trajectory) -> Self {
        TrajectoryRecord {
            prompt: t.prompt.clone(),
            response: t.response.clone(),
            logp_cur: t.logp_cur.clone(),
            logp_old: t.logp_old.clone(),
            logp_ref: t.logp_ref.clone(),
            reward: Some(t.reward),
            group_id: t.group_id,
            rho: None,
            segment_boundaries: None,
        }
    }
}

pub fn write_records(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
