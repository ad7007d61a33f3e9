//! Whitespace tokenizer hashed into a fixed vocabulary.

use crate::model::{ModelError, TokenSequence};

/// End-of-sequence id; also opens every encoded sequence.
pub const EOS_ID: u32 = 0;
/// Reserved unknown id.
pub const UNK_ID: u32 = 1;
const RESERVED: u32 = 2;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a, continuing from `state`.
pub(crate) fn fnv1a64_from(state: u64, bytes: &[u8]) -> u64 {
    bytes.iter().fold(state, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_from(FNV_OFFSET, bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    vocab_size: usize,
}

impl Tokenizer {
    /// `vocab_size` must leave room for at least one word id.
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > RESERVED as usize, "vocabulary too small");
        Self { vocab_size }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Id of a single word. Empty input maps to [`UNK_ID`].
    pub fn word_id(&self, word: &str) -> u32 {
        let lower = word.to_lowercase();
        if lower.is_empty() {
            return UNK_ID;
        }
        let buckets = (self.vocab_size as u64) - RESERVED as u64;
        RESERVED + (fnv1a64(lower.as_bytes()) % buckets) as u32
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.word_id(w)).collect()
    }

    /// `[EOS] input target [EOS]`, split after the input.
    pub fn encode_pair(&self, input: &str, target: &str, max_tokens: usize) -> Result<TokenSequence, ModelError> {
        let mut ids = vec![EOS_ID];
        ids.extend(self.tokenize(input));
        let boundary = ids.len();
        ids.extend(self.tokenize(target));
        ids.push(EOS_ID);
        if ids.len() > max_tokens {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                max: max_tokens,
            });
        }
        TokenSequence::new(ids, boundary)
    }

    /// `[EOS] input`, the prompt handed to the decoder.
    pub fn encode_prompt(&self, input: &str) -> Vec<u32> {
        let mut ids = vec![EOS_ID];
        ids.extend(self.tokenize(input));
        ids
    }
}
