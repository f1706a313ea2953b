use std::collections::HashMap;

use super::PALETTE;
use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;

pub const DESCRIBE: &str = "describe";
pub const COLOR: &str = "color";

/// Closed toy lexicon: control tokens, two instruction words, one digit per
/// grid coordinate and one word per palette color.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
    first_digit: TokenId,
    first_color: TokenId,
    grid_k: usize,
    palette_size: usize,
}

impl Vocab {
    pub fn new(grid_k: usize, palette_size: usize) -> Result<Self> {
        if grid_k == 0 || grid_k > 10 {
            return Err(Error::Config(format!(
                "grid size {grid_k} must be in 1..=10"
            )));
        }
        if palette_size > PALETTE.len() {
            return Err(Error::Config(format!(
                "palette size {palette_size} exceeds the {} available colors",
                PALETTE.len()
            )));
        }
        let mut words: Vec<String> = ["<pad>", "<bos>", "<eos>", DESCRIBE, COLOR]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let first_digit = words.len();
        words.extend((0..grid_k).map(|d| d.to_string()));
        let first_color = words.len();
        words.extend(PALETTE[..palette_size].iter().map(|c| c.name.to_string()));
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Vocab {
            words,
            index,
            first_digit,
            first_color,
            grid_k,
            palette_size,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn digit(&self, d: usize) -> TokenId {
        assert!(d < self.grid_k, "digit {d} outside grid");
        self.first_digit + d
    }

    pub fn digit_value(&self, id: TokenId) -> Option<usize> {
        (self.first_digit..self.first_digit + self.grid_k)
            .contains(&id)
            .then(|| id - self.first_digit)
    }

    pub fn color(&self, c: u8) -> TokenId {
        assert!(
            (c as usize) < self.palette_size,
            "color {c} outside palette"
        );
        self.first_color + c as usize
    }

    pub fn color_value(&self, id: TokenId) -> Option<u8> {
        (self.first_color..self.first_color + self.palette_size)
            .contains(&id)
            .then(|| (id - self.first_color) as u8)
    }

    /// Token ids of the palette words, in palette order.
    pub fn color_ids(&self) -> Vec<TokenId> {
        (self.first_color..self.first_color + self.palette_size).collect()
    }

    /// Splits on whitespace; every word must be in the lexicon.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Tokenize(w.to_string())))
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| {
                self.word(i)
                    .ok_or_else(|| Error::Tokenize(format!("<id {i}>")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_ids_are_fixed() {
        let v = Vocab::new(3, 6).unwrap();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.len(), 5 + 3 + 6);
    }

    #[test]
    fn empty_text_is_empty() {
        let v = Vocab::new(3, 6).unwrap();
        assert!(v.tokenize("").unwrap().is_empty());
        assert_eq!(v.detokenize(&[]).unwrap(), "");
    }

    #[test]
    fn out_of_lexicon_word_fails() {
        let v = Vocab::new(3, 6).unwrap();
        assert!(matches!(v.tokenize("color 9 9"), Err(Error::Tokenize(w)) if w == "9"));
        assert!(v.detokenize(&[999]).is_err());
    }

    #[test]
    fn palette_words_are_distinct() {
        let v = Vocab::new(3, PALETTE.len()).unwrap();
        let mut ids = v.color_ids();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), PALETTE.len());
        for c in 0..PALETTE.len() as u8 {
            assert_eq!(v.color_value(v.color(c)), Some(c));
        }
    }

    #[test]
    fn too_many_colors_is_a_config_error() {
        assert!(matches!(
            Vocab::new(3, PALETTE.len() + 1),
            Err(Error::Config(_))
        ));
    }
}
