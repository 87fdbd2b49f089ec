//! Splitting a response into intermediate steps.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alphabet::Token;
use crate::error::{Error, Result};

/// How a response is cut into steps.
///
/// Textual form (used in config files and on the command line):
/// `token`, `fixed:<k>`, `delimiter:<token>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SegmentationMode {
    /// Steps of `k` tokens; the last one may be shorter.
    FixedLength(usize),
    /// A step ends right after every occurrence of the token.
    Delimiter(Token),
    /// Every token is its own step.
    TokenLevel,
}

impl fmt::Display for SegmentationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmentationMode::FixedLength(k) => write!(f, "fixed:{k}"),
            SegmentationMode::Delimiter(t) => write!(f, "delimiter:{t}"),
            SegmentationMode::TokenLevel => f.write_str("token"),
        }
    }
}

impl FromStr for SegmentationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad segmentation mode {s:?}"));
        let s = s.trim();
        if s == "token" {
            return Ok(SegmentationMode::TokenLevel);
        }
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "fixed" => {
                let k: usize = arg.parse().map_err(|_| bad())?;
                if k == 0 {
                    return Err(Error::Config("fixed segment length must be >= 1".into()));
                }
                Ok(SegmentationMode::FixedLength(k))
            }
            "delimiter" => Ok(SegmentationMode::Delimiter(arg.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for SegmentationMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SegmentationMode> for String {
    fn from(m: SegmentationMode) -> String {
        m.to_string()
    }
}

/// Step boundaries of one response. `boundaries` holds 1-based step ends,
/// strictly ascending, with the last entry equal to the response length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    pub mode: SegmentationMode,
    pub boundaries: Vec<usize>,
}

/// Segments a response of length `len`. `response` is only inspected in
/// delimiter mode, where it must have length `len`.
pub fn segment(len: usize, mode: SegmentationMode, response: &[Token]) -> Result<Segmentation> {
    if len == 0 {
        return Err(Error::EmptyResponse);
    }
    let boundaries = match mode {
        SegmentationMode::TokenLevel => (1..=len).collect(),
        SegmentationMode::FixedLength(0) => {
            return Err(Error::Config("fixed segment length must be >= 1".into()))
        }
        SegmentationMode::FixedLength(k) => {
            let mut b: Vec<usize> = (1..=len / k).map(|i| i * k).collect();
            if !len.is_multiple_of(k) {
                b.push(len);
            }
            b
        }
        SegmentationMode::Delimiter(delim) => {
            if response.len() != len {
                return Err(Error::LengthMismatch {
                    what: "delimiter segmentation response",
                    expected: len,
                    got: response.len(),
                });
            }
            let mut b: Vec<usize> = response
                .iter()
                .enumerate()
                .filter(|(_, &t)| t == delim)
                .map(|(i, _)| i + 1)
                .collect();
            if b.last() != Some(&len) {
                b.push(len);
            }
            b
        }
    };
    Ok(Segmentation { mode, boundaries })
}

impl Segmentation {
    pub fn len(&self) -> usize {
        *self.boundaries.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.boundaries.is_empty()
    }

    pub fn num_steps(&self) -> usize {
        self.boundaries.len()
    }

    /// 0-based half-open token ranges of each step.
    pub fn spans(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        let starts = std::iter::once(0).chain(self.boundaries.iter().copied());
        starts.zip(self.boundaries.iter().copied()).map(|(s, e)| s..e)
    }

    /// Step index of every token position.
    pub fn step_of_token(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        for (i, span) in self.spans().enumerate() {
            out.extend(std::iter::repeat_n(i, span.len()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixed_length_partition() {
        let s = segment(5, SegmentationMode::FixedLength(2), &[]).unwrap();
        assert_eq!(s.boundaries, vec![2, 4, 5]);
        let s = segment(4, SegmentationMode::FixedLength(2), &[]).unwrap();
        assert_eq!(s.boundaries, vec![2, 4]);
        let s = segment(3, SegmentationMode::FixedLength(8), &[]).unwrap();
        assert_eq!(s.boundaries, vec![3]);
    }

    #[test]
    fn token_level() {
        let s = segment(4, SegmentationMode::TokenLevel, &[]).unwrap();
        assert_eq!(s.boundaries, vec![1, 2, 3, 4]);
    }

    #[test]
    fn delimiter_forces_final_close() {
        let s = segment(5, SegmentationMode::Delimiter(3), &[7, 3, 9, 3, 5]).unwrap();
        assert_eq!(s.boundaries, vec![2, 4, 5]);
        let s = segment(4, SegmentationMode::Delimiter(3), &[7, 3, 9, 3]).unwrap();
        assert_eq!(s.boundaries, vec![2, 4]);
        assert!(segment(3, SegmentationMode::Delimiter(3), &[1, 2]).is_err());
    }

    #[test]
    fn empty_response_is_an_error() {
        let err = segment(0, SegmentationMode::TokenLevel, &[]).unwrap_err();
        assert_eq!(err.to_string(), "empty response");
    }

    #[test]
    fn mode_text_form() {
        for m in [
            SegmentationMode::TokenLevel,
            SegmentationMode::FixedLength(256),
            SegmentationMode::Delimiter(3),
        ] {
            assert_eq!(m.to_string().parse::<SegmentationMode>().unwrap(), m);
        }
        assert!("fixed:0".parse::<SegmentationMode>().is_err());
        assert!("lines".parse::<SegmentationMode>().is_err());
    }

    fn any_mode() -> impl Strategy<Value = SegmentationMode> {
        prop_oneof![
            Just(SegmentationMode::TokenLevel),
            (1usize..6).prop_map(SegmentationMode::FixedLength),
            (0u32..3).prop_map(SegmentationMode::Delimiter),
        ]
    }

    proptest! {
        #[test]
        fn spans_cover_every_index_once(
            response in prop::collection::vec(0u32..3, 1..30),
            mode in any_mode(),
        ) {
            let s = segment(response.len(), mode, &response).unwrap();
            let covered: Vec<usize> = s.spans().flatten().collect();
            prop_assert_eq!(covered, (0..response.len()).collect::<Vec<_>>());
            prop_assert!(s.boundaries.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(s.len(), response.len());
            prop_assert_eq!(s.step_of_token().len(), response.len());
        }
    }
}
