//! Shared character/word vocabulary.
//!
//! Fine (character) and coarse (word) tokenizations both read ids from one
//! [`Vocab`]. Ids are dense, `[PAD]` is always 0, and every word entry is at
//! least two characters long.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::segment::char_ngram_counts;
use crate::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Special tokens in the order [`build_vocab`] assigns them.
pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TokenKind {
    Special,
    Char,
    Word,
}

impl TokenKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenKind::Special => "special",
            TokenKind::Char => "char",
            TokenKind::Word => "word",
        }
    }
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for TokenKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "special" => Ok(TokenKind::Special),
            "char" => Ok(TokenKind::Char),
            "word" => Ok(TokenKind::Word),
            other => Err(Error::Vocab(format!("unknown token kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub unk: TokenId,
    pub cls: TokenId,
    pub sep: TokenId,
    pub mask: TokenId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    kinds: Vec<TokenKind>,
    id_of: BTreeMap<String, TokenId>,
    specials: SpecialIds,
    char_ids: Vec<TokenId>,
    word_ids: Vec<TokenId>,
    max_word_chars: usize,
}

impl Vocab {
    /// Builds a vocabulary from `(kind, token)` pairs whose position is the
    /// id, validating every table invariant.
    pub fn from_entries(entries: Vec<(TokenKind, String)>) -> Result<Self> {
        let mut tokens = Vec::with_capacity(entries.len());
        let mut kinds = Vec::with_capacity(entries.len());
        let mut id_of = BTreeMap::new();
        let mut char_ids = Vec::new();
        let mut word_ids = Vec::new();
        let mut max_word_chars = 0;
        for (id, (kind, token)) in entries.into_iter().enumerate() {
            let id = TokenId::try_from(id).map_err(|_| Error::Vocab("too many tokens".into()))?;
            let chars = token.chars().count();
            match kind {
                TokenKind::Special => {
                    if !SPECIAL_TOKENS.contains(&token.as_str()) {
                        return Err(Error::Vocab(format!("{token:?} is not a special token")));
                    }
                }
                TokenKind::Char => {
                    if chars != 1 {
                        return Err(Error::Vocab(format!(
                            "char token {token:?} has {chars} characters"
                        )));
                    }
                    char_ids.push(id);
                }
                TokenKind::Word => {
                    if chars < 2 {
                        return Err(Error::Vocab(format!(
                            "word token {token:?} has fewer than 2 characters"
                        )));
                    }
                    max_word_chars = max_word_chars.max(chars);
                    word_ids.push(id);
                }
            }
            if id_of.insert(token.clone(), id).is_some() {
                return Err(Error::Vocab(format!("duplicate token {token:?}")));
            }
            tokens.push(token);
            kinds.push(kind);
        }
        let special = |name: &str| -> Result<TokenId> {
            match id_of.get(name) {
                Some(&id) if kinds[id as usize] == TokenKind::Special => Ok(id),
                _ => Err(Error::Vocab(format!("missing special token {name}"))),
            }
        };
        let specials = SpecialIds {
            pad: special(PAD)?,
            unk: special(UNK)?,
            cls: special(CLS)?,
            sep: special(SEP)?,
            mask: special(MASK)?,
        };
        if specials.pad != 0 {
            return Err(Error::Vocab(format!("[PAD] must have id 0, found {}", specials.pad)));
        }
        Ok(Vocab {
            tokens,
            kinds,
            id_of,
            specials,
            char_ids,
            word_ids,
            max_word_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn kind(&self, id: TokenId) -> TokenKind {
        self.kinds[id as usize]
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.kinds[id as usize] == TokenKind::Special
    }

    pub fn char_id(&self, c: char) -> Option<TokenId> {
        let mut buf = [0u8; 4];
        self.id(c.encode_utf8(&mut buf))
            .filter(|&id| self.kind(id) == TokenKind::Char)
    }

    /// Id of a word entry, `None` for chars, specials and unknown strings.
    pub fn word_id(&self, word: &str) -> Option<TokenId> {
        self.id(word).filter(|&id| self.kind(id) == TokenKind::Word)
    }

    pub fn char_ids(&self) -> &[TokenId] {
        &self.char_ids
    }

    pub fn word_ids(&self) -> &[TokenId] {
        &self.word_ids
    }

    /// Character length of the longest word entry (0 without words).
    pub fn max_word_chars(&self) -> usize {
        self.max_word_chars
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, TokenKind, &str)> + '_ {
        self.tokens
            .iter()
            .zip(&self.kinds)
            .enumerate()
            .map(|(i, (t, &k))| (i as TokenId, k, t.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabOptions {
    pub max_word_len: usize,
    pub min_word_freq: usize,
    pub max_words: usize,
}

impl Default for VocabOptions {
    fn default() -> Self {
        VocabOptions {
            max_word_len: 4,
            min_word_freq: 3,
            max_words: 64,
        }
    }
}

/// Collects the vocabulary from corpus lines: specials, every character seen
/// (tabs and line breaks excluded), then the `max_words` most frequent
/// alphanumeric character n-grams of length `2..=max_word_len` occurring at
/// least `min_word_freq` times. Characters and words are each ordered by
/// frequency, descending, then lexicographically.
pub fn build_vocab<'a, I>(corpus: I, options: &VocabOptions) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    if options.max_word_len < 2 {
        return Err(Error::Param(format!(
            "max_word_len must be at least 2, got {}",
            options.max_word_len
        )));
    }
    let mut char_counts: BTreeMap<char, usize> = BTreeMap::new();
    let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut saw_text = false;
    for line in corpus {
        let chars: Vec<char> = line
            .chars()
            .filter(|c| !matches!(c, '\t' | '\n' | '\r'))
            .collect();
        if chars.is_empty() {
            continue;
        }
        saw_text = true;
        for &c in &chars {
            *char_counts.entry(c).or_default() += 1;
        }
        for (gram, n) in char_ngram_counts(&chars, 2, options.max_word_len) {
            *word_counts.entry(gram).or_default() += n;
        }
    }
    if !saw_text {
        return Err(Error::Input("empty corpus".into()));
    }

    let mut chars: Vec<(char, usize)> = char_counts.into_iter().collect();
    chars.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut words: Vec<(String, usize)> = word_counts
        .into_iter()
        .filter(|(_, n)| *n >= options.min_word_freq.max(1))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    words.truncate(options.max_words);

    let mut entries: Vec<(TokenKind, String)> = SPECIAL_TOKENS
        .iter()
        .map(|s| (TokenKind::Special, s.to_string()))
        .collect();
    entries.extend(chars.into_iter().map(|(c, _)| (TokenKind::Char, c.to_string())));
    entries.extend(words.into_iter().map(|(w, _)| (TokenKind::Word, w)));
    Vocab::from_entries(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn single_most_frequent_ngram_wins() {
        let v = build_vocab(
            ["abab", "abab"],
            &VocabOptions {
                max_word_len: 4,
                min_word_freq: 1,
                max_words: 1,
            },
        )
        .unwrap();
        // "ab" occurs 4 times; "ba", "aba", "bab", "abab" only twice
        assert_eq!(v.word_ids().len(), 1);
        assert_eq!(v.token(v.word_ids()[0]), "ab");
        assert!(v.char_id('a').is_some() && v.char_id('b').is_some());
        assert_eq!(v.len(), 5 + 2 + 1);
    }

    #[test]
    fn zero_max_words_gives_characters_only() {
        let v = build_vocab(
            ["hello world"],
            &VocabOptions {
                max_words: 0,
                ..VocabOptions::default()
            },
        )
        .unwrap();
        assert!(v.word_ids().is_empty());
        assert!(v.iter().all(|(_, k, _)| k != TokenKind::Word));
        assert_eq!(v.max_word_chars(), 0);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(build_vocab(core::iter::empty(), &VocabOptions::default()).is_err());
        assert!(build_vocab(["", "\r"], &VocabOptions::default()).is_err());
    }

    #[test]
    fn specials_lead_with_pad_zero() {
        let v = build_vocab(["xyz"], &VocabOptions::default()).unwrap();
        let s = v.specials();
        assert_eq!((s.pad, s.unk, s.cls, s.sep, s.mask), (0, 1, 2, 3, 4));
    }

    #[test]
    fn characters_sorted_by_frequency_then_lexically() {
        let v = build_vocab(
            ["cbbaa a"],
            &VocabOptions {
                max_words: 0,
                ..VocabOptions::default()
            },
        )
        .unwrap();
        let chars: Vec<&str> = v.char_ids().iter().map(|&id| v.token(id)).collect();
        assert_eq!(chars, vec!["a", "b", " ", "c"]);
    }

    #[test]
    fn validation_catches_broken_tables() {
        let specials = || -> Vec<(TokenKind, String)> {
            SPECIAL_TOKENS
                .iter()
                .map(|s| (TokenKind::Special, s.to_string()))
                .collect()
        };
        let mut e = specials();
        e.push((TokenKind::Char, "ab".into()));
        assert!(Vocab::from_entries(e).is_err());

        let mut e = specials();
        e.push((TokenKind::Word, "a".into()));
        assert!(Vocab::from_entries(e).is_err());

        let mut e = specials();
        e.swap(0, 1);
        assert!(Vocab::from_entries(e).is_err());

        let mut e = specials();
        e.pop();
        assert!(Vocab::from_entries(e).is_err());

        let mut e = specials();
        e.push((TokenKind::Char, "a".into()));
        e.push((TokenKind::Char, "a".into()));
        assert!(Vocab::from_entries(e).is_err());
    }
}
