//! Token vocabulary with the tagged response grammar.

use std::collections::HashMap;

use thiserror::Error;

use crate::rng::fnv1a64;

pub type TokenId = usize;

pub const EOS: &str = "<eos>";

/// Tagged regions of a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Think,
    Answer,
    Analysis,
    Options,
    Comparison,
    Prediction,
}

impl Tag {
    pub const ALL: [Tag; 6] = [
        Tag::Think,
        Tag::Answer,
        Tag::Analysis,
        Tag::Options,
        Tag::Comparison,
        Tag::Prediction,
    ];

    fn name(self) -> &'static str {
        match self {
            Tag::Think => "think",
            Tag::Answer => "answer",
            Tag::Analysis => "analysis",
            Tag::Options => "options",
            Tag::Comparison => "comparison",
            Tag::Prediction => "prediction",
        }
    }

    pub fn open(self) -> String {
        format!("<{}>", self.name())
    }

    pub fn close(self) -> String {
        format!("</{}>", self.name())
    }

    /// Token id of the opening tag; structural tokens occupy ids `0..13`.
    pub fn open_id(self) -> TokenId {
        2 * self as usize
    }

    pub fn close_id(self) -> TokenId {
        2 * self as usize + 1
    }
}

/// Number of structural tokens at the front of every vocabulary.
pub const STRUCTURAL_COUNT: usize = 13;
pub const EOS_ID: TokenId = 12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VocabError {
    #[error("duplicate token {0:?}")]
    Duplicate(String),
    #[error("empty token")]
    Empty,
    #[error("token {0:?} contains whitespace")]
    Whitespace(String),
    #[error("unknown token {0:?}")]
    Unknown(String),
    #[error("token id {0} outside vocabulary of {1}")]
    OutOfRange(TokenId, usize),
}

/// Ordered, bijective token table.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Structural tokens first (fixed ids), then `words` in the given order.
    pub fn with_words<I, S>(words: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = Vec::new();
        for tag in Tag::ALL {
            tokens.push(tag.open());
            tokens.push(tag.close());
        }
        tokens.push(EOS.to_string());
        tokens.extend(words.into_iter().map(Into::into));

        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(VocabError::Empty);
            }
            if t.chars().any(char::is_whitespace) {
                return Err(VocabError::Whitespace(t.clone()));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(VocabError::Duplicate(t.clone()));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_structural(&self, id: TokenId) -> bool {
        id < STRUCTURAL_COUNT
    }

    /// Whitespace-separated text to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, VocabError> {
        text.split_whitespace()
            .map(|t| self.id(t).ok_or_else(|| VocabError::Unknown(t.to_string())))
            .collect()
    }

    /// Ids to space-joined text.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, VocabError> {
        let parts = ids
            .iter()
            .map(|&i| self.token(i).ok_or(VocabError::OutOfRange(i, self.len())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(parts.join(" "))
    }

    pub fn check(&self, ids: &[TokenId]) -> Result<(), VocabError> {
        match ids.iter().find(|&&i| i >= self.len()) {
            Some(&bad) => Err(VocabError::OutOfRange(bad, self.len())),
            None => Ok(()),
        }
    }

    /// FNV-1a over the NUL-joined token list; stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let mut buf = Vec::new();
        for t in &self.tokens {
            buf.extend_from_slice(t.as_bytes());
            buf.push(0);
        }
        fnv1a64(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structural_ids_are_fixed() {
        let v = Vocab::with_words(["alpha", "beta"]).unwrap();
        for tag in Tag::ALL {
            assert_eq!(v.id(&tag.open()), Some(tag.open_id()));
            assert_eq!(v.id(&tag.close()), Some(tag.close_id()));
        }
        assert_eq!(v.id(EOS), Some(EOS_ID));
        assert_eq!(v.len(), STRUCTURAL_COUNT + 2);
        assert_eq!(v.tokens().iter().filter(|t| *t == EOS).count(), 1);
    }

    #[test]
    fn rejects_duplicates_and_eos_repeats() {
        assert!(matches!(
            Vocab::with_words(["a", "a"]),
            Err(VocabError::Duplicate(_))
        ));
        assert!(Vocab::with_words([EOS]).is_err());
        assert!(Vocab::with_words(["two words"]).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::with_words(["kadol", "amir"]).unwrap();
        let ids = v.encode("<answer> kadol amir </answer>").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "<answer> kadol amir </answer>");
        assert!(v.encode("nope").is_err());
        assert_ne!(v.hash(), Vocab::with_words(["amir", "kadol"]).unwrap().hash());
    }
}
