//! Character vocabulary shared by both models.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Reserved token ids, in vocabulary order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Pad,
    Bos,
    Eos,
    Sep,
    Inst,
    Frame,
    Box,
    Vis,
    Unk,
}

impl Special {
    pub const ALL: [Special; 9] = [
        Special::Pad,
        Special::Bos,
        Special::Eos,
        Special::Sep,
        Special::Inst,
        Special::Frame,
        Special::Box,
        Special::Vis,
        Special::Unk,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }
}

/// Printable ASCII.
pub fn default_charset() -> String {
    (32u8..=126).map(char::from).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl Vocab {
    pub fn new(charset: &str) -> Result<Self> {
        let chars: Vec<char> = charset.chars().collect();
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, (Special::ALL.len() + i) as u32).is_some() {
                return Err(Error::Config(format!("duplicate character {c:?} in charset")));
            }
        }
        Ok(Self { chars, index })
    }

    pub fn len(&self) -> usize {
        Special::ALL.len() + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn char_id(&self, c: char) -> u32 {
        self.index.get(&c).copied().unwrap_or(Special::Unk.id())
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.chars().map(|c| self.char_id(c)).collect()
    }

    /// Character for `id`, or `None` for special tokens.
    pub fn char_of(&self, id: u32) -> Option<char> {
        (id as usize)
            .checked_sub(Special::ALL.len())
            .and_then(|i| self.chars.get(i).copied())
    }

    /// Decodes ids up to the first end token, skipping other specials.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&id| id != Special::Eos.id())
            .filter_map(|&id| self.char_of(id))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_specials() {
        let v = Vocab::new(&default_charset()).unwrap();
        assert_eq!(v.len(), 9 + 95);
        let ids = v.encode("CAR5 ok");
        assert_eq!(v.decode(&ids), "CAR5 ok");
        assert_eq!(v.char_id('\u{e9}'), Special::Unk.id());
        let mut with_end = v.encode("AB");
        with_end.push(Special::Eos.id());
        with_end.extend(v.encode("CD"));
        assert_eq!(v.decode(&with_end), "AB");
    }

    #[test]
    fn duplicate_chars_rejected() {
        assert!(Vocab::new("abca").is_err());
    }
}
