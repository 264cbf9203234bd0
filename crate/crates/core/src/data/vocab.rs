use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<mask>"];

/// Bijective token/id mapping with reserved ids 0..=4.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.insert(s);
        }
        v
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Specials followed by `tokens` in order; duplicates and specials are
    /// rejected.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self::new();
        for t in tokens {
            let t = t.as_ref();
            if v.index.contains_key(t) {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
            v.insert(t);
        }
        Ok(v)
    }

    /// Inserts `token` if new; returns its id.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK])
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn is_special(id: usize) -> bool {
        id <= MASK
    }

    /// Non-special tokens in id order.
    pub fn content_tokens(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::from_tokens(["a", "b"]).unwrap();
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<s>"), BOS);
        assert_eq!(v.id("</s>"), EOS);
        assert_eq!(v.id("<mask>"), MASK);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.decode(&v.encode(&["b".into(), "a".into()])), vec!["b", "a"]);
        assert!(Vocabulary::from_tokens(["a", "a"]).is_err());
        assert!(Vocabulary::from_tokens(["<s>"]).is_err());
    }
}
