use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::vocab::{TokenKind, Vocab, SPECIAL_TOKENS};

/// Specials, then one char per character of `chars`, then `words`.
pub(crate) fn toy_vocab(chars: &str, words: &[&str]) -> Vocab {
    let mut e: Vec<(TokenKind, String)> = SPECIAL_TOKENS
        .iter()
        .map(|s| (TokenKind::Special, s.to_string()))
        .collect();
    e.extend(chars.chars().map(|c| (TokenKind::Char, c.to_string())));
    e.extend(words.iter().map(|w| (TokenKind::Word, w.to_string())));
    Vocab::from_entries(e).unwrap()
}
