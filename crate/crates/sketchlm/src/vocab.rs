//! Closed-vocabulary whitespace tokenizer.
//!
//! The synthetic generators fully control surface text, so there is no
//! subword machinery: eight control tokens get fixed low ids and every other
//! word comes from the corpus, lexicographically sorted.

use crate::error::{Error, Result};
use std::collections::HashMap;

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const THINK_START: u32 = 2;
pub const THINK_END: u32 = 3;
pub const ANSWER_START: u32 = 4;
pub const ANSWER_END: u32 = 5;
pub const SKETCH_START: u32 = 6;
pub const SKETCH_END: u32 = 7;
pub const NUM_SPECIALS: u32 = 8;

pub const SPECIAL_SURFACES: [&str; 8] = [
    "<pad>",
    "<eos>",
    "<think>",
    "</think>",
    "<answer>",
    "</answer>",
    "<|sketch_start|>",
    "<|sketch_end|>",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Vocabulary {
    /// Deterministic vocabulary: specials at ids 0..8 in fixed order, then
    /// the corpus's unique whitespace-delimited words sorted, from id 8.
    pub fn build(corpus: &[impl AsRef<str>]) -> Self {
        let mut words: Vec<String> = corpus
            .iter()
            .flat_map(|line| line.as_ref().split_whitespace())
            .filter(|w| !SPECIAL_SURFACES.contains(w))
            .map(str::to_string)
            .collect();
        words.sort();
        words.dedup();
        Self::from_words(words)
    }

    /// Rebuild from a serialized word list (dataset header).
    pub fn from_words(words: Vec<String>) -> Self {
        let mut lookup = HashMap::with_capacity(words.len() + 8);
        for (i, s) in SPECIAL_SURFACES.iter().enumerate() {
            lookup.insert(s.to_string(), i as u32);
        }
        for (i, w) in words.iter().enumerate() {
            lookup.insert(w.clone(), NUM_SPECIALS + i as u32);
        }
        Vocabulary { words, lookup }
    }

    pub fn size(&self) -> usize {
        self.words.len() + NUM_SPECIALS as usize
    }

    /// Non-special words in id order (serialized into dataset headers).
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIALS
    }

    pub fn id_of(&self, token: &str) -> Result<u32> {
        self.lookup
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn surface(&self, id: u32) -> Result<&str> {
        if (id as usize) < NUM_SPECIALS as usize {
            Ok(SPECIAL_SURFACES[id as usize])
        } else {
            self.words
                .get(id as usize - NUM_SPECIALS as usize)
                .map(String::as_str)
                .ok_or(Error::Index {
                    context: "vocab surface".into(),
                    index: id as usize,
                    bound: self.size(),
                })
        }
    }

    /// One id per whitespace token; special literals map to special ids.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id_of(w)).collect()
    }

    /// Space-joined surface forms; inverse of encode on its image.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let parts: Result<Vec<&str>> = ids.iter().map(|&id| self.surface(id)).collect();
        Ok(parts?.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn build_sorts_and_dedups() {
        let v = Vocabulary::build(&["b a"]);
        assert_eq!(v.id_of("a").unwrap(), 8);
        assert_eq!(v.id_of("b").unwrap(), 9);
        let v = Vocabulary::build(&["a a a"]);
        assert_eq!(v.size(), 9);
        assert_eq!(v.id_of("a").unwrap(), 8);
    }

    #[test]
    fn empty_corpus_keeps_specials() {
        let v = Vocabulary::build(&["", ""]);
        assert_eq!(v.size(), 8);
        assert_eq!(v.id_of("<answer>").unwrap(), ANSWER_START);
    }

    #[test]
    fn rebuild_is_identical() {
        let corpus = ["move R to 1 0", "navigate from 0 0 to 3 3"];
        assert_eq!(Vocabulary::build(&corpus), Vocabulary::build(&corpus));
    }

    #[test]
    fn encode_specials_and_words() {
        let v = Vocabulary::build(&["a"]);
        assert_eq!(v.encode("<answer> a </answer>").unwrap(), vec![4, 8, 5]);
        assert_eq!(v.encode("").unwrap(), Vec::<u32>::new());
    }

    #[test]
    fn unknown_word_is_named() {
        let v = Vocabulary::build(&["a"]);
        let err = v.encode("a zzz").unwrap_err();
        assert!(err.to_string().contains("zzz"));
    }

    #[test]
    fn decode_specials() {
        let v = Vocabulary::build(&["a"]);
        assert_eq!(v.decode(&[6, 7]).unwrap(), "<|sketch_start|> <|sketch_end|>");
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert!(v.decode(&[99]).is_err());
    }

    #[test]
    fn round_trip_random_ids() {
        let v = Vocabulary::build(&["alpha beta gamma delta"]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let ids: Vec<u32> = (0..rng.gen_range(0..12))
                .map(|_| rng.gen_range(1..v.size() as u32)) // skip PAD
                .collect();
            let text = v.decode(&ids).unwrap();
            assert_eq!(v.encode(&text).unwrap(), ids);
        }
    }

    #[test]
    fn round_trip_normalizes_whitespace() {
        let v = Vocabulary::build(&["alpha beta"]);
        let ids = v.encode("  alpha   beta\talpha ").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "alpha beta alpha");
    }

    #[test]
    fn special_ids_are_low() {
        for id in 0..NUM_SPECIALS {
            assert!(Vocabulary::is_special(id));
        }
        assert!(!Vocabulary::is_special(NUM_SPECIALS));
    }
}
