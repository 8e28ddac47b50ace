//! Fixed character-level vocabulary shared by every task and model.
//!
//! The alphabet covers lowercase letters, digits, and the handful of
//! punctuation marks the synthetic tasks use. Uppercase input is folded to
//! lowercase rather than rejected, so generator text like "Max" tokenizes.

use thiserror::Error;

/// Padding token, id 0.
pub const PAD: usize = 0;
/// Beginning-of-sequence token, id 1; decoder input always starts with it.
pub const BOS: usize = 1;
/// End-of-sequence token, id 2; decoding stops on it.
pub const EOS: usize = 2;

const CHARS: &str = "abcdefghijklmnopqrstuvwxyz0123456789 :|-?";

/// Total vocabulary size: three specials plus the character set.
pub const VOCAB_SIZE: usize = 3 + 41;

#[derive(Debug, Error, PartialEq)]
pub enum TokenizerError {
    #[error("character {0:?} is not in the vocabulary")]
    UnknownChar(char),
    #[error("token id {0} is out of range")]
    UnknownToken(usize),
}

/// Maps text to token ids, folding uppercase ASCII to lowercase.
pub fn encode(text: &str) -> Result<Vec<usize>, TokenizerError> {
    text.chars()
        .map(|c| {
            let c = c.to_ascii_lowercase();
            CHARS
                .find(c)
                .map(|i| i + 3)
                .ok_or(TokenizerError::UnknownChar(c))
        })
        .collect()
}

/// Maps token ids back to text. Special tokens render as empty.
pub fn decode(tokens: &[usize]) -> Result<String, TokenizerError> {
    tokens
        .iter()
        .map(|&t| match t {
            PAD | BOS | EOS => Ok(String::new()),
            _ => CHARS
                .chars()
                .nth(t.checked_sub(3).ok_or(TokenizerError::UnknownToken(t))?)
                .map(String::from)
                .ok_or(TokenizerError::UnknownToken(t)),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_size_matches_charset() {
        assert_eq!(VOCAB_SIZE, 3 + CHARS.chars().count());
    }

    #[test]
    fn roundtrip_and_case_folding() {
        let ids = encode("Max Mikey 42?").unwrap();
        assert_eq!(decode(&ids).unwrap(), "max mikey 42?");
        assert_eq!(encode("a").unwrap(), vec![3]);
        assert_eq!(encode("abc"), encode("ABC"));
    }

    #[test]
    fn task_punctuation_is_covered() {
        for c in ["a:0 b:1 | a-b | ? a", "xyay", "0123456789"] {
            assert!(encode(c).is_ok(), "failed on {c:?}");
        }
    }

    #[test]
    fn unknown_char_rejected() {
        assert_eq!(encode("α"), Err(TokenizerError::UnknownChar('α')));
        assert_eq!(encode("a.b"), Err(TokenizerError::UnknownChar('.')));
    }

    #[test]
    fn specials_decode_empty() {
        assert_eq!(decode(&[BOS, 3, EOS]).unwrap(), "a");
        assert!(decode(&[999]).is_err());
    }
}
