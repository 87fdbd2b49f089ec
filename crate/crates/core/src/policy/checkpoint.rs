use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TabularPolicy;
use crate::alphabet::Alphabet;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// JSON checkpoint layout. Floats are written with shortest round-trip
/// formatting and parsed exactly, so `load(save(p)) == p` bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub alphabet: Alphabet,
    pub order: usize,
    pub max_len: usize,
    pub logits: Vec<f64>,
}

impl From<&TabularPolicy> for Checkpoint {
    fn from(p: &TabularPolicy) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            alphabet: p.alphabet.clone(),
            order: p.order,
            max_len: p.max_len,
            logits: p.logits.clone(),
        }
    }
}

impl TryFrom<Checkpoint> for TabularPolicy {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        if c.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::FormatVersion(c.format_version));
        }
        TabularPolicy::from_logits(c.alphabet, c.order, c.max_len, c.logits)
    }
}

pub fn save_checkpoint(policy: &TabularPolicy, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&Checkpoint::from(policy))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TabularPolicy> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    ckpt.try_into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn save_load_is_bit_exact(seed in any::<u64>(), scale in 1e-3f64..1e3) {
            let a = Alphabet::new(3).unwrap().with_eos(2).unwrap();
            let p = TabularPolicy::random(a, 2, 5, scale, seed).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.json");
            save_checkpoint(&p, &path).unwrap();
            let q = load_checkpoint(&path).unwrap();
            prop_assert_eq!(&p, &q);
            let bits_equal = p.logits().iter().zip(q.logits()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(bits_equal);
        }
    }

    #[test]
    fn rejects_unknown_version() {
        let p = TabularPolicy::uniform(Alphabet::new(2).unwrap(), 1, 1).unwrap();
        let mut c = Checkpoint::from(&p);
        c.format_version = 99;
        assert!(matches!(TabularPolicy::try_from(c), Err(Error::FormatVersion(99))));
    }
}
