//! Word segmentation over a character sequence.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::vocab::Vocab;

/// Half-open interval `[start, end)` of character (fine) positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.start <= pos && pos < self.end
    }

    pub fn shifted(self, by: usize) -> Span {
        Span::new(self.start + by, self.end + by)
    }
}

/// Splits characters into word spans that partition `0..chars.len()`.
pub trait Segmenter {
    fn segment(&self, chars: &[char], vocab: &Vocab) -> Vec<Span>;
}

/// Greedy left-to-right longest match against the vocabulary's words.
/// Positions that start no word become single-character spans.
#[derive(Debug, Clone, Copy, Default)]
pub struct LongestMatch;

impl Segmenter for LongestMatch {
    fn segment(&self, chars: &[char], vocab: &Vocab) -> Vec<Span> {
        let mut spans = Vec::new();
        let mut buf = String::new();
        let mut i = 0;
        while i < chars.len() {
            let longest = vocab.max_word_chars().min(chars.len() - i);
            let mut taken = 1;
            for len in (2..=longest).rev() {
                buf.clear();
                buf.extend(&chars[i..i + len]);
                if vocab.word_id(&buf).is_some() {
                    taken = len;
                    break;
                }
            }
            spans.push(Span::new(i, i + taken));
            i += taken;
        }
        spans
    }
}

/// Segments `text` with [`LongestMatch`].
pub fn segment(text: &str, vocab: &Vocab) -> Vec<Span> {
    let chars: Vec<char> = text.chars().collect();
    LongestMatch.segment(&chars, vocab)
}

/// Counts every n-gram of `min..=max` characters lying inside a maximal run
/// of alphanumeric characters.
pub(crate) fn char_ngram_counts(chars: &[char], min: usize, max: usize) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    let mut run_start = 0;
    for i in 0..=chars.len() {
        let boundary = i == chars.len() || !chars[i].is_alphanumeric();
        if !boundary {
            continue;
        }
        let run = &chars[run_start..i];
        for n in min..=max.min(run.len()) {
            for w in run.windows(n) {
                *counts.entry(w.iter().collect::<String>()).or_default() += 1;
            }
        }
        run_start = i + 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::toy_vocab;
    use alloc::vec;

    #[test]
    fn longest_match_prefers_longer_word() {
        let v = toy_vocab("abc", &["ab", "abc"]);
        assert_eq!(segment("abca", &v), vec![Span::new(0, 3), Span::new(3, 4)]);
    }

    #[test]
    fn empty_and_wordless_inputs() {
        let v = toy_vocab("abc", &["ab"]);
        assert!(segment("", &v).is_empty());
        assert_eq!(
            segment("cca", &v),
            vec![Span::new(0, 1), Span::new(1, 2), Span::new(2, 3)]
        );
    }

    #[test]
    fn ngrams_stop_at_punctuation() {
        let chars: Vec<char> = "ab。ab".chars().collect();
        let counts = char_ngram_counts(&chars, 2, 3);
        assert_eq!(counts.get("ab"), Some(&2));
        assert!(!counts.keys().any(|k| k.contains('。')));
    }
}
