//! Character-level vocabulary.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Padding id; never produced by [`Vocab::encode`].
pub const PAD: TokenId = 0;

const DESK_ALPHABET: &str = "\n abcdefghijklmnopqrstuvwxyz0123456789.,:;|>=?#";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, TokenId>,
}

impl Vocab {
    /// The fixed alphabet used by the desk task suite.
    pub fn desk() -> Self {
        Vocab::from_chars(DESK_ALPHABET.chars())
    }

    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut all = vec!['\u{0}'];
        for c in chars {
            if !all.contains(&c) {
                all.push(c);
            }
        }
        let index = all.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        Vocab { chars: all, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.len() <= 1
    }

    pub fn id(&self, c: char) -> Option<TokenId> {
        self.index.get(&c).copied().filter(|&i| i != PAD)
    }

    pub fn newline(&self) -> TokenId {
        self.id('\n').expect("every vocabulary has a newline")
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::contract(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Decodes ids; padding and unknown ids become `'\u{0}'`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.chars.get(i).copied().unwrap_or('\u{0}')).collect()
    }
}
