#![allow(dead_code)]

use clower_core::vocab::{TokenKind, Vocab, SPECIAL_TOKENS};
use clower_core::{Rng, Tensor};
use rand::Rng as _;

/// Specials, one char per character of `chars`, then `words`.
pub fn toy_vocab(chars: &str, words: &[&str]) -> Vocab {
    let mut e: Vec<(TokenKind, String)> = SPECIAL_TOKENS
        .iter()
        .map(|s| (TokenKind::Special, s.to_string()))
        .collect();
    e.extend(chars.chars().map(|c| (TokenKind::Char, c.to_string())));
    e.extend(words.iter().map(|w| (TokenKind::Word, w.to_string())));
    Vocab::from_entries(e).unwrap()
}

/// Uniform entries in [-1, 1].
pub fn uniform(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn rows(r: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(r).unwrap()
}
