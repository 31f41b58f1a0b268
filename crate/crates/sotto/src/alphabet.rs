//! The transcription alphabet and token sequences over it.
//!
//! The model emits 28 labels: `a`–`z`, space, and a final blank token the
//! CTC machinery uses for "no character this frame". The blank always sits
//! at the last index; decoders and the loss rely on that convention.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlphabetError {
    #[error("character {0:?} is not in the alphabet (a-z and space)")]
    UnknownChar(char),
    #[error("token id {id} out of range for alphabet of size {size}")]
    BadToken { id: usize, size: usize },
}

/// The 28-token output alphabet: a–z, space, blank (last).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    chars: String,
}

impl Default for Alphabet {
    fn default() -> Self {
        Alphabet {
            chars: "abcdefghijklmnopqrstuvwxyz ".to_string(),
        }
    }
}

impl Alphabet {
    /// Total number of labels including the blank.
    pub fn size(&self) -> usize {
        self.chars.chars().count() + 1
    }

    /// Index of the blank label (always the last).
    pub fn blank(&self) -> usize {
        self.size() - 1
    }

    /// Index of the space character.
    pub fn space(&self) -> usize {
        self.chars
            .chars()
            .position(|c| c == ' ')
            .expect("alphabet contains a space")
    }

    pub fn char_to_id(&self, c: char) -> Result<usize, AlphabetError> {
        self.chars
            .chars()
            .position(|x| x == c)
            .ok_or(AlphabetError::UnknownChar(c))
    }

    /// Character for a non-blank id.
    pub fn id_to_char(&self, id: usize) -> Result<char, AlphabetError> {
        self.chars.chars().nth(id).ok_or(AlphabetError::BadToken {
            id,
            size: self.size(),
        })
    }

    /// Parse a string of a–z and spaces into a phrase.
    pub fn phrase(&self, text: &str) -> Result<Phrase, AlphabetError> {
        let tokens = text
            .chars()
            .map(|c| self.char_to_id(c))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Phrase { tokens })
    }

    pub fn phrase_to_string(&self, p: &Phrase) -> String {
        p.tokens
            .iter()
            .map(|&id| self.id_to_char(id).expect("phrase tokens are in range"))
            .collect()
    }

    /// Render an alignment, using `·` for the blank.
    pub fn alignment_to_string(&self, a: &Alignment) -> String {
        a.tokens
            .iter()
            .map(|&id| {
                if id == self.blank() {
                    '·'
                } else {
                    self.id_to_char(id).expect("alignment tokens are in range")
                }
            })
            .collect()
    }
}

/// A blank-free token sequence — what a transcription *says*.
/// Adjacent repeats are allowed ("abb" is a valid phrase).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Phrase {
    tokens: Vec<usize>,
}

impl Phrase {
    pub fn new(tokens: Vec<usize>) -> Self {
        Phrase { tokens }
    }

    pub fn empty() -> Self {
        Phrase { tokens: Vec::new() }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Count of adjacent equal pairs; these each force a separating blank.
    pub fn adjacent_duplicates(&self) -> usize {
        self.tokens.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Shortest alignment length able to produce this phrase.
    pub fn min_alignment_len(&self) -> usize {
        self.len() + self.adjacent_duplicates()
    }

    pub fn has_adjacent_duplicates(&self) -> bool {
        self.adjacent_duplicates() > 0
    }
}

impl fmt::Display for Phrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", Alphabet::default().phrase_to_string(self))
    }
}

/// A per-frame token sequence, blanks included: one label per frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    tokens: Vec<usize>,
}

impl Alignment {
    pub fn new(tokens: Vec<usize>) -> Self {
        Alignment { tokens }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alphabet_has_28_tokens_with_blank_last() {
        let a = Alphabet::default();
        assert_eq!(a.size(), 28);
        assert_eq!(a.blank(), 27);
        assert_eq!(a.space(), 26);
        assert_eq!(a.char_to_id('a').unwrap(), 0);
        assert_eq!(a.char_to_id('z').unwrap(), 25);
    }

    #[test]
    fn phrase_round_trips_through_text() {
        let a = Alphabet::default();
        let p = a.phrase("hello world").unwrap();
        assert_eq!(a.phrase_to_string(&p), "hello world");
    }

    #[test]
    fn unknown_characters_are_rejected() {
        let a = Alphabet::default();
        assert!(matches!(
            a.phrase("Hey!"),
            Err(AlphabetError::UnknownChar('H'))
        ));
    }

    #[test]
    fn min_alignment_len_counts_duplicates() {
        let a = Alphabet::default();
        assert_eq!(a.phrase("abb").unwrap().min_alignment_len(), 4);
        assert_eq!(a.phrase("aaa").unwrap().min_alignment_len(), 5);
        assert_eq!(a.phrase("ab").unwrap().min_alignment_len(), 2);
        assert_eq!(Phrase::empty().min_alignment_len(), 0);
    }
}
