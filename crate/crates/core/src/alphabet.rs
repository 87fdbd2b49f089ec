use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Abstract token index. Ordinary tokens are `0..size`; the begin marker
/// sits at index `size` and only ever appears as context padding.
pub type Token = u32;

/// Token inventory shared by policies, tasks and trajectories.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "AlphabetRepr", into = "AlphabetRepr")]
pub struct Alphabet {
    size: usize,
    eos_id: Option<Token>,
    delimiter_id: Option<Token>,
}

#[derive(Serialize, Deserialize)]
struct AlphabetRepr {
    size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eos_id: Option<Token>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delimiter_id: Option<Token>,
}

impl TryFrom<AlphabetRepr> for Alphabet {
    type Error = Error;

    fn try_from(r: AlphabetRepr) -> Result<Self> {
        let mut a = Alphabet::new(r.size)?;
        if let Some(e) = r.eos_id {
            a = a.with_eos(e)?;
        }
        if let Some(d) = r.delimiter_id {
            a = a.with_delimiter(d)?;
        }
        Ok(a)
    }
}

impl From<Alphabet> for AlphabetRepr {
    fn from(a: Alphabet) -> Self {
        AlphabetRepr {
            size: a.size,
            eos_id: a.eos_id,
            delimiter_id: a.delimiter_id,
        }
    }
}

impl Alphabet {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Alphabet(format!("size must be at least 2, got {size}")));
        }
        if size >= Token::MAX as usize {
            return Err(Error::Alphabet(format!("size {size} is too large")));
        }
        Ok(Alphabet {
            size,
            eos_id: None,
            delimiter_id: None,
        })
    }

    pub fn with_eos(mut self, eos: Token) -> Result<Self> {
        self.check_special(eos, "eos")?;
        if self.delimiter_id == Some(eos) {
            return Err(Error::Alphabet("eos and delimiter must differ".into()));
        }
        self.eos_id = Some(eos);
        Ok(self)
    }

    pub fn with_delimiter(mut self, delimiter: Token) -> Result<Self> {
        self.check_special(delimiter, "delimiter")?;
        if self.eos_id == Some(delimiter) {
            return Err(Error::Alphabet("eos and delimiter must differ".into()));
        }
        self.delimiter_id = Some(delimiter);
        Ok(self)
    }

    fn check_special(&self, id: Token, what: &str) -> Result<()> {
        if id as usize >= self.size {
            return Err(Error::Alphabet(format!(
                "{what} id {id} is not an ordinary token (size {})",
                self.size
            )));
        }
        Ok(())
    }

    /// Number of ordinary (generatable) tokens.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bos_id(&self) -> Token {
        self.size as Token
    }

    pub fn eos_id(&self) -> Option<Token> {
        self.eos_id
    }

    pub fn delimiter_id(&self) -> Option<Token> {
        self.delimiter_id
    }

    pub fn contains(&self, token: Token) -> bool {
        (token as usize) < self.size
    }

    pub fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| !self.contains(t)) {
            Some(&token) => Err(Error::OutOfVocab {
                token,
                vocab: self.size,
            }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_and_colliding_ids() {
        assert!(Alphabet::new(1).is_err());
        let a = Alphabet::new(4).unwrap();
        assert_eq!(a.bos_id(), 4);
        assert!(a.clone().with_eos(4).is_err());
        let a = a.with_eos(3).unwrap();
        assert!(a.clone().with_delimiter(3).is_err());
        let a = a.with_delimiter(2).unwrap();
        assert_eq!(a.delimiter_id(), Some(2));
        assert!(!a.contains(a.bos_id()));
    }

    #[test]
    fn serde_validates() {
        let bad: std::result::Result<Alphabet, _> =
            serde_json::from_str(r#"{"size":3,"eos_id":1,"delimiter_id":1}"#);
        assert!(bad.is_err());
        let a = Alphabet::new(3).unwrap().with_eos(2).unwrap();
        let back: Alphabet = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(a, back);
    }
}
