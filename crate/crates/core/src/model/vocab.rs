use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{LvrError, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const LVR_START: u32 = 3;
pub const LVR_END: u32 = 4;

pub const LVR_START_TOKEN: &str = "<|lvr_start|>";
pub const LVR_END_TOKEN: &str = "<|lvr_end|>";

/// Color names in palette order; the first `n_colors` are used by a dataset.
pub const COLOR_NAMES: [&str; 12] =
    ["red", "green", "blue", "yellow", "cyan", "magenta", "white", "black", "orange", "purple", "gray", "brown"];

pub const QUESTION_WORDS: [&str; 8] = ["what", "color", "count", "row", "col", "rows", "cols", "?"];

/// Token strings ↔ ids. The five specials always occupy ids 0..5.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, ids }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Specials, digits 0–9, the first `n_colors` colors and the question
    /// words, padded with `<unused_k>` up to `size`.
    pub fn new(n_colors: usize, size: usize) -> Result<Self> {
        if n_colors == 0 || n_colors > COLOR_NAMES.len() {
            return Err(LvrError::Config(format!("n_colors must be in 1..={}", COLOR_NAMES.len())));
        }
        let mut tokens: Vec<String> =
            ["<pad>", "<bos>", "<eos>", LVR_START_TOKEN, LVR_END_TOKEN].iter().map(|s| s.to_string()).collect();
        tokens.extend((0..10).map(|d| d.to_string()));
        tokens.extend(COLOR_NAMES[..n_colors].iter().map(|s| s.to_string()));
        tokens.extend(QUESTION_WORDS.iter().map(|s| s.to_string()));
        if tokens.len() > size {
            return Err(LvrError::Config(format!("vocabulary needs {} tokens but vocab_size is {size}", tokens.len())));
        }
        let mut k = 0;
        while tokens.len() < size {
            tokens.push(format!("<unused_{k}>"));
            k += 1;
        }
        Ok(Vocab::from(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn require(&self, token: &str) -> Result<u32> {
        self.id(token).ok_or_else(|| LvrError::Generation(format!("token {token:?} not in vocabulary")))
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("<oov>", String::as_str)
    }

    pub fn digit(&self, d: usize) -> Result<u32> {
        if d > 9 {
            return Err(LvrError::Generation(format!("{d} is not expressible as a single digit token")));
        }
        self.require(&d.to_string())
    }

    pub fn color(&self, index: usize) -> Result<u32> {
        let name = COLOR_NAMES
            .get(index)
            .ok_or_else(|| LvrError::Generation(format!("color index {index} outside the palette")))?;
        self.require(name)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocab::new(8, 64).unwrap();
        assert_eq!(v.id(LVR_START_TOKEN), Some(LVR_START));
        assert_eq!(v.id(LVR_END_TOKEN), Some(LVR_END));
        assert_ne!(LVR_START, LVR_END);
        assert_eq!(v.len(), 64);
        assert_eq!(v.token(v.color(0).unwrap()), "red");
    }

    #[test]
    fn tiny_vocab_fits_in_32() {
        assert_eq!(Vocab::new(8, 32).unwrap().len(), 32);
        assert!(Vocab::new(12, 32).is_err());
    }

    #[test]
    fn serde_keeps_order() {
        let v = Vocab::new(4, 40).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
        assert!(v.digit(10).is_err());
    }
}
