use std::collections::HashMap;

use crate::alphabet::Token;
use crate::error::{Error, Result};
use crate::segment::Segmentation;
use crate::trajectory::Trajectory;

type Key = (Vec<Token>, Vec<Token>);

/// Tabular prefix-value model r_u([x, a^(ℓ)]) trained by squared-error SGD
/// on bootstrapped targets. Complete responses are pinned to their outcome
/// reward and never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModelTable {
    values: HashMap<Key, f64>,
    pinned: HashMap<Key, f64>,
    learning_rate: f64,
    init: f64,
}

impl RewardModelTable {
    pub fn new(learning_rate: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "reward model learning rate must be finite and >= 0, got {learning_rate}"
            )));
        }
        Ok(RewardModelTable {
            values: HashMap::new(),
            pinned: HashMap::new(),
            learning_rate,
            init: 0.0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn pin(&mut self, prompt: &[Token], response: &[Token], reward: f64) {
        self.pinned.insert((prompt.to_vec(), response.to_vec()), reward);
    }

    /// Prediction for a prefix; pinned values win.
    pub fn predict(&self, prompt: &[Token], prefix: &[Token]) -> f64 {
        let key = (prompt.to_vec(), prefix.to_vec());
        self.pinned
            .get(&key)
            .or_else(|| self.values.get(&key))
            .copied()
            .unwrap_or(self.init)
    }

    pub fn squared_error(&self, prompt: &[Token], prefix: &[Token], target: f64) -> f64 {
        (self.predict(prompt, prefix) - target).powi(2)
    }

    /// y_ℓ = r_u([x, a^(p)]) - (1/η) Σ_{j=ℓ+1}^{p} ln(π_w(a_j|·)/π_0(a_j|·)).
    pub fn target(&self, traj: &Trajectory, l: usize, p: usize, eta: f64) -> Result<f64> {
        let len = traj.len();
        if l >= p || p > len {
            return Err(Error::InvalidPair { l, p, len });
        }
        let anchor = if p == len {
            traj.reward
        } else {
            self.predict(&traj.prompt, &traj.response[..p])
        };
        let ratio: f64 = (l..p).map(|j| traj.logp_cur[j] - traj.logp_ref[j]).sum();
        Ok(anchor - ratio / eta)
    }

    /// One SGD step on (r_u(a^(ℓ)) - y_ℓ)² per pair, in order. Returns the
    /// loss of each pair measured before its step.
    pub fn update(&mut self, traj: &Trajectory, pairs: &[(usize, usize)], eta: f64) -> Result<Vec<f64>> {
        traj.validate()?;
        if let Some(&(l, p)) = pairs.iter().find(|(l, p)| l >= p || *p > traj.len()) {
            return Err(Error::InvalidPair { l, p, len: traj.len() });
        }
        self.pin(&traj.prompt, &traj.response, traj.reward);
        let mut losses = Vec::with_capacity(pairs.len());
        for &(l, p) in pairs {
            let y = self.target(traj, l, p, eta)?;
            let prefix = &traj.response[..l];
            let current = self.predict(&traj.prompt, prefix);
            let diff = current - y;
            losses.push(diff * diff);
            if self.learning_rate != 0.0 {
                let updated = current - self.learning_rate * 2.0 * diff;
                self.values
                    .insert((traj.prompt.clone(), prefix.to_vec()), updated);
            }
        }
        Ok(losses)
    }
}

/// Adjacent step boundaries plus an anchor from every boundary to the end.
pub fn default_pairs(seg: &Segmentation) -> Vec<(usize, usize)> {
    let len = seg.len();
    let starts = std::iter::once(0).chain(seg.boundaries.iter().copied());
    let mut pairs: Vec<(usize, usize)> = starts.zip(seg.boundaries.iter().copied()).collect();
    for (l, _) in pairs.clone() {
        if !pairs.contains(&(l, len)) {
            pairs.push((l, len));
        }
    }
    // deeper prefixes first so their fresh values feed shallower targets
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)));
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::{segment, SegmentationMode};

    fn traj() -> Trajectory {
        Trajectory::new(
            vec![0],
            vec![1, 1],
            vec![-0.3, -0.2],
            vec![-0.3, -0.2],
            vec![-0.69, -0.69],
            1.0,
            0,
        )
        .unwrap()
    }

    #[test]
    fn pairs_cover_steps_and_anchors() {
        let seg = segment(5, SegmentationMode::FixedLength(2), &[]).unwrap();
        let mut pairs = default_pairs(&seg);
        pairs.sort();
        assert_eq!(pairs, vec![(0, 2), (0, 5), (2, 4), (2, 5), (4, 5)]);
    }

    #[test]
    fn null_learning_rate_keeps_parameters() {
        let mut rm = RewardModelTable::new(0.0).unwrap();
        let before = rm.predict(&[0], &[1]);
        let losses = rm.update(&traj(), &[(1, 2), (0, 1)], 1.0).unwrap();
        assert_eq!(losses.len(), 2);
        assert!(losses[0] > 0.0);
        assert_eq!(rm.predict(&[0], &[1]), before);
        assert_eq!(rm.predict(&[0], &[]), before);
    }

    #[test]
    fn full_response_is_pinned() {
        let mut rm = RewardModelTable::new(0.5).unwrap();
        let t = traj();
        rm.update(&t, &[(1, 2)], 1.0).unwrap();
        assert_eq!(rm.predict(&t.prompt, &t.response), 1.0);
        assert_eq!(rm.squared_error(&t.prompt, &t.response, t.reward), 0.0);
        for _ in 0..50 {
            rm.update(&t, &[(0, 2), (1, 2)], 1.0).unwrap();
        }
        assert_eq!(rm.predict(&t.prompt, &t.response), 1.0);
    }

    #[test]
    fn invalid_pairs() {
        let mut rm = RewardModelTable::new(0.1).unwrap();
        assert!(matches!(rm.update(&traj(), &[(1, 1)], 1.0), Err(Error::InvalidPair { .. })));
        assert!(rm.update(&traj(), &[(0, 3)], 1.0).is_err());
        assert!(RewardModelTable::new(-1.0).is_err());
    }

    #[test]
    fn target_uses_log_ratio_between_l_and_p() {
        let rm = RewardModelTable::new(0.1).unwrap();
        let t = traj();
        let y = rm.target(&t, 0, 2, 2.0).unwrap();
        let ratio = (-0.3 + 0.69) + (-0.2 + 0.69);
        assert!((y - (1.0 - ratio / 2.0)).abs() < 1e-15);
    }
}
