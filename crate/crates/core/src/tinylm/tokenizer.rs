use std::collections::BTreeMap;

pub type TokenId = u32;

/// Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    special_ids: BTreeMap<&'static str, TokenId>,
}

impl Tokenizer {
    pub const BOS: TokenId = 256;
    pub const EOS: TokenId = 257;
    pub const PAD: TokenId = 258;
    pub const VOCAB_SIZE: usize = 259;

    pub fn new() -> Self {
        let special_ids = [("bos", Self::BOS), ("eos", Self::EOS), ("pad", Self::PAD)]
            .into_iter()
            .collect();
        Self { special_ids }
    }

    pub fn vocab_size(&self) -> usize {
        Self::VOCAB_SIZE
    }

    pub fn special_ids(&self) -> &BTreeMap<&'static str, TokenId> {
        &self.special_ids
    }

    pub fn is_special(id: TokenId) -> bool {
        id >= 256
    }

    /// One id per byte, optionally wrapped in BOS/EOS.
    pub fn tokenize(&self, text: &[u8], bos: bool, eos: bool) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len() + 2);
        if bos {
            out.push(Self::BOS);
        }
        out.extend(text.iter().map(|&b| b as TokenId));
        if eos {
            out.push(Self::EOS);
        }
        out
    }

    /// Inverse of [`Tokenizer::tokenize`]; special ids are dropped.
    pub fn detokenize(&self, ids: &[TokenId]) -> Vec<u8> {
        ids.iter()
            .filter(|&&id| !Self::is_special(id))
            .map(|&id| id as u8)
            .collect()
    }
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

/// Shorthand for `Tokenizer::new().tokenize(text, false, false)`.
pub fn tokenize(text: &[u8]) -> Vec<TokenId> {
    text.iter().map(|&b| b as TokenId).collect()
}

pub fn detokenize(ids: &[TokenId]) -> Vec<u8> {
    Tokenizer::new().detokenize(ids)
}

/// The longest suffix of `text` that is at most `max_tokens` tokens and starts
/// on a character boundary.
pub fn tail_within(text: &str, max_tokens: usize) -> &str {
    let mut start = text.len().saturating_sub(max_tokens);
    while !text.is_char_boundary(start) {
        start += 1;
    }
    &text[start..]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tails() {
        assert_eq!(tail_within("abcdef", 3), "def");
        assert_eq!(tail_within("ab", 3), "ab");
        assert_eq!(tail_within("aé", 1), "");
        assert_eq!(tail_within("aé", 2), "é");
    }

    #[test]
    fn examples() {
        assert!(tokenize(b"").is_empty());
        assert_eq!(tokenize(b"A"), vec![65]);
        assert_eq!(tokenize(b"Ab"), vec![65, 98]);
    }

    #[test]
    fn specials_are_wrapped_and_stripped() {
        let t = Tokenizer::new();
        let ids = t.tokenize(b"hi", true, true);
        assert_eq!(ids, vec![Tokenizer::BOS, 104, 105, Tokenizer::EOS]);
        assert_eq!(t.detokenize(&ids), b"hi");
        assert_eq!(t.special_ids()["pad"], Tokenizer::PAD);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn roundtrip_exact(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let t = Tokenizer::new();
            let ids = t.tokenize(&bytes, true, true);
            prop_assert!(ids.iter().all(|&i| (i as usize) < t.vocab_size()));
            prop_assert_eq!(ids.len(), bytes.len() + 2);
            prop_assert_eq!(t.detokenize(&ids), bytes);
        }
    }
}
