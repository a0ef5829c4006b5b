//! Word-level hashing tokenizer.
//!
//! Text is lowercased and split on every non-alphanumeric character. Each
//! word maps to `fnv1a64(word) % vocab_size`. The mapping is stable across
//! platforms and releases.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Token ids for `text`, truncated to `max_tokens`.
pub fn tokenize(text: &str, vocab_size: usize, max_tokens: usize) -> Vec<usize> {
    words(text)
        .map(|w| (fnv1a64(w.as_bytes()) % vocab_size as u64) as usize)
        .take(max_tokens)
        .collect()
}
