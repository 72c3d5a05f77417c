//! Deterministic word-level tokenizer.
//!
//! Words map to ids by FNV-1a hashing into the backbone vocabulary, so
//! tokenization needs no external vocabulary file and is stable across runs
//! and platforms. Ids 0..=2 are reserved for padding, start, and end markers.

pub const PAD_TOKEN: u32 = 0;
pub const START_TOKEN: u32 = 1;
pub const END_TOKEN: u32 = 2;
const RESERVED: u32 = 3;

#[derive(Debug, Clone, Copy)]
pub struct Tokenizer {
    vocab_size: u32,
}

impl Tokenizer {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > RESERVED as usize);
        Tokenizer {
            vocab_size: vocab_size as u32,
        }
    }

    pub fn word_id(&self, word: &str) -> u32 {
        let lower = word.to_lowercase();
        RESERVED + (fnv1a64(lower.as_bytes()) % (self.vocab_size - RESERVED) as u64) as u32
    }

    /// Tokenize free text: lowercase, whitespace split, start/end markers.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![START_TOKEN];
        ids.extend(text.split_whitespace().map(|w| self.word_id(w)));
        ids.push(END_TOKEN);
        ids
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let tok = Tokenizer::new(512);
        let a = tok.encode("A photo of a Normal bottle");
        let b = tok.encode("a photo of a normal bottle");
        assert_eq!(a, b);
        assert_eq!(a[0], START_TOKEN);
        assert_eq!(*a.last().unwrap(), END_TOKEN);
        assert!(a.iter().all(|&id| id < 512));
    }
}
