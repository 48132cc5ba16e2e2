use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Id of the first alphabet character.
pub const FIRST_CHAR: u32 = 3;

/// Ordered character set with reserved PAD/BOS/EOS token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Alphabet {
    chars: Vec<char>,
    #[serde(skip)]
    index: HashMap<char, u32>,
}

impl Alphabet {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: Vec<char> = chars.into_iter().collect();
        if chars.is_empty() {
            return Err(Error::Config("alphabet must not be empty".into()));
        }
        let mut index = HashMap::with_capacity(chars.len());
        for (i, c) in chars.iter().enumerate() {
            if c.is_control() {
                return Err(Error::Config(format!("control character {c:?} in alphabet")));
            }
            if index.insert(*c, FIRST_CHAR + i as u32).is_some() {
                return Err(Error::Config(format!("duplicate character {c:?} in alphabet")));
            }
        }
        Ok(Alphabet { chars, index })
    }

    /// Number of characters, excluding the reserved tokens.
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// Output vocabulary size: characters plus PAD/BOS/EOS.
    pub fn vocab_size(&self) -> usize {
        self.chars.len() + FIRST_CHAR as usize
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::Label(format!("character {c:?} is not in the alphabet")))
            })
            .collect()
    }

    /// Maps ids back to text, skipping reserved and out-of-range ids.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id >= FIRST_CHAR)
            .filter_map(|&id| self.chars.get((id - FIRST_CHAR) as usize))
            .collect()
    }
}

impl TryFrom<String> for Alphabet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Alphabet::new(s.chars())
    }
}

impl From<Alphabet> for String {
    fn from(a: Alphabet) -> String {
        a.chars.into_iter().collect()
    }
}
