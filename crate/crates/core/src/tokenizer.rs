//! Word-level tokenizer for the built-in text encoder.
//!
//! Ids are laid out as: specials (`<pad>`, `<bos>`, `<eos>`), one compass
//! placeholder per object slot, the shipped word list, then a block of
//! hashed buckets that absorb out-of-vocabulary words (personalization
//! literals such as `sks` land there).

use std::collections::HashMap;

use crate::error::{CompassError, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Compass placeholder slots; one per controllable object.
pub const COMPASS_SLOTS: usize = 6;
pub const OOV_BUCKETS: usize = 64;
pub const DEFAULT_CONTEXT_LEN: usize = 40;

const WORDS: &str = include_str!("../data/vocab.txt");

#[derive(Clone, Debug)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
    context_len: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new(DEFAULT_CONTEXT_LEN)
    }
}

impl Tokenizer {
    pub fn new(context_len: usize) -> Self {
        let words: Vec<String> = WORDS
            .lines()
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect();
        let base = Self::first_word_id();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), base + i as u32))
            .collect();
        Self {
            words,
            index,
            context_len,
        }
    }

    fn first_word_id() -> u32 {
        3 + COMPASS_SLOTS as u32
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn vocab_size(&self) -> usize {
        Self::first_word_id() as usize + self.words.len() + OOV_BUCKETS
    }

    pub fn compass_id(slot: usize) -> u32 {
        assert!(slot < COMPASS_SLOTS, "compass slot {slot} out of range");
        3 + slot as u32
    }

    pub fn is_compass_id(id: u32) -> bool {
        (3..3 + COMPASS_SLOTS as u32).contains(&id)
    }

    /// True when `word` has its own vocabulary entry.
    pub fn is_known_word(&self, word: &str) -> bool {
        self.index.contains_key(&word.to_lowercase())
    }

    fn oov_id(&self, word: &str) -> u32 {
        // FNV-1a keeps bucket assignment stable across platforms and releases.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Self::first_word_id() + self.words.len() as u32 + (h % OOV_BUCKETS as u64) as u32
    }

    /// Splits text into lowercase alphanumeric words; everything else separates.
    pub fn words(text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    pub fn word_id(&self, word: &str) -> u32 {
        let w = word.to_lowercase();
        match self.index.get(&w) {
            Some(&id) => id,
            None => self.oov_id(&w),
        }
    }

    /// Token ids of `text` without specials.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        Self::words(text).iter().map(|w| self.word_id(w)).collect()
    }

    /// `<bos> body <eos>` padded to the context length.
    pub fn frame(&self, body: &[u32]) -> Result<Vec<u32>> {
        if body.len() + 2 > self.context_len {
            return Err(CompassError::Prompt(format!(
                "prompt needs {} tokens but the context holds {}",
                body.len() + 2,
                self.context_len
            )));
        }
        let mut ids = Vec::with_capacity(self.context_len);
        ids.push(BOS);
        ids.extend_from_slice(body);
        ids.push(EOS);
        ids.resize(self.context_len, PAD);
        Ok(ids)
    }

    /// Framed ids of plain text.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        self.frame(&self.tokenize(text))
    }

    /// Human-readable form of an id, for dumps and debugging.
    pub fn token_str(&self, id: u32) -> String {
        match id {
            PAD => "<pad>".into(),
            BOS => "<bos>".into(),
            EOS => "<eos>".into(),
            _ if Self::is_compass_id(id) => format!("<compass_{}>", id - 3),
            _ => {
                let i = (id - Self::first_word_id()) as usize;
                match self.words.get(i) {
                    Some(w) => w.clone(),
                    None => format!("<oov_{}>", i - self.words.len()),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_and_unknown_words() {
        let t = Tokenizer::default();
        assert!(t.is_known_word("Sedan"));
        assert!(!t.is_known_word("sks"));
        let ids = t.tokenize("A photo of a SEDAN, sks!");
        assert_eq!(ids.len(), 6);
        assert_eq!(ids[1], t.word_id("photo"));
        assert_eq!(t.token_str(ids[4]), "sedan");
        assert!(t.token_str(ids[5]).starts_with("<oov_"));
        assert!((ids[5] as usize) < t.vocab_size());
    }

    #[test]
    fn framing_and_overflow() {
        let t = Tokenizer::new(6);
        assert_eq!(t.encode("a sedan").unwrap(), vec![BOS, t.word_id("a"), t.word_id("sedan"), EOS, PAD, PAD]);
        assert!(matches!(t.encode("a b c d e"), Err(CompassError::Prompt(_))));
    }

    #[test]
    fn compass_ids_are_reserved() {
        let t = Tokenizer::default();
        for s in 0..COMPASS_SLOTS {
            let id = Tokenizer::compass_id(s);
            assert!(Tokenizer::is_compass_id(id));
            assert_eq!(t.token_str(id), format!("<compass_{s}>"));
        }
        assert!(!Tokenizer::is_compass_id(t.word_id("a")));
    }
}
