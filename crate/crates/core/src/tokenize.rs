//! Aligned character (fine) and word (coarse) tokenization.

use alloc::string::String;
use alloc::vec::Vec;

use crate::segment::{LongestMatch, Segmenter, Span};
use crate::vocab::{TokenId, TokenKind, Vocab};

/// Fine and coarse id sequences of one text, with the fine span covered by
/// every coarse token.
///
/// `spans[j]` is the half-open range of fine positions spelled by coarse
/// token `j`; the spans are sorted, disjoint and partition `0..fine_ids.len()`.
/// After [`frame`], special tokens occupy single-position spans of their own.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiGrainedTokenization {
    pub text: String,
    pub fine_ids: Vec<TokenId>,
    pub coarse_ids: Vec<TokenId>,
    pub spans: Vec<Span>,
}

impl MultiGrainedTokenization {
    pub fn fine_len(&self) -> usize {
        self.fine_ids.len()
    }

    pub fn coarse_len(&self) -> usize {
        self.coarse_ids.len()
    }
}

/// Tokenizes with the default longest-match segmenter.
pub fn tokenize_multigrained(text: &str, vocab: &Vocab) -> MultiGrainedTokenization {
    tokenize_with(text, vocab, &LongestMatch)
}

/// Tokenizes with any segmenter. Multi-character segments that are not word
/// entries of `vocab` are split back into characters.
pub fn tokenize_with<S: Segmenter + ?Sized>(
    text: &str,
    vocab: &Vocab,
    segmenter: &S,
) -> MultiGrainedTokenization {
    let chars: Vec<char> = text.chars().collect();
    let unk = vocab.specials().unk;
    let fine_ids: Vec<TokenId> = chars
        .iter()
        .map(|&c| vocab.char_id(c).unwrap_or(unk))
        .collect();
    let mut coarse_ids = Vec::new();
    let mut spans = Vec::new();
    let mut word = String::new();
    for span in segmenter.segment(&chars, vocab) {
        if span.len() >= 2 {
            word.clear();
            word.extend(&chars[span.start..span.end]);
            if let Some(id) = vocab.word_id(&word) {
                coarse_ids.push(id);
                spans.push(span);
                continue;
            }
        }
        for p in span.start..span.end {
            coarse_ids.push(fine_ids[p]);
            spans.push(Span::new(p, p + 1));
        }
    }
    MultiGrainedTokenization {
        text: text.into(),
        fine_ids,
        coarse_ids,
        spans,
    }
}

/// Fine-only tokenization: one id per character, `[UNK]` for unknown ones.
pub fn fine_ids(text: &str, vocab: &Vocab) -> Vec<TokenId> {
    let unk = vocab.specials().unk;
    text.chars().map(|c| vocab.char_id(c).unwrap_or(unk)).collect()
}

/// Joins segments as `[CLS] s₁ [SEP] s₂ [SEP] …` in both granularities,
/// keeping spans aligned.
pub fn frame(parts: &[&MultiGrainedTokenization], vocab: &Vocab) -> MultiGrainedTokenization {
    let sp = vocab.specials();
    let mut out = MultiGrainedTokenization {
        text: String::new(),
        fine_ids: alloc::vec![sp.cls],
        coarse_ids: alloc::vec![sp.cls],
        spans: alloc::vec![Span::new(0, 1)],
    };
    for part in parts {
        let offset = out.fine_ids.len();
        out.text.push_str(&part.text);
        out.fine_ids.extend_from_slice(&part.fine_ids);
        out.coarse_ids.extend_from_slice(&part.coarse_ids);
        out.spans.extend(part.spans.iter().map(|s| s.shifted(offset)));
        let sep_at = out.fine_ids.len();
        out.fine_ids.push(sp.sep);
        out.coarse_ids.push(sp.sep);
        out.spans.push(Span::new(sep_at, sep_at + 1));
    }
    out
}

/// Segment id per position: 0 through the first `[SEP]`, 1 afterwards.
pub fn segment_ids(ids: &[TokenId], sep: TokenId) -> Vec<u8> {
    let mut seg = 0u8;
    ids.iter()
        .map(|&id| {
            let s = seg;
            if id == sep {
                seg = 1;
            }
            s
        })
        .collect()
}

/// Surface form of coarse token `j`: the vocabulary string, or the original
/// characters when the token is `[UNK]` or framing.
pub fn coarse_surface(tok: &MultiGrainedTokenization, j: usize, vocab: &Vocab) -> String {
    let id = tok.coarse_ids[j];
    match vocab.kind(id) {
        TokenKind::Special => {
            let span = tok.spans[j];
            tok.text.chars().skip(span.start).take(span.len()).collect()
        }
        _ => vocab.token(id).into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::toy_vocab;
    use alloc::vec;

    #[test]
    fn word_and_trailing_char() {
        let v = toy_vocab("abc", &["ab"]);
        let t = tokenize_multigrained("abc", &v);
        let id = |s: &str| v.id(s).unwrap();
        assert_eq!(t.fine_ids, vec![id("a"), id("b"), id("c")]);
        assert_eq!(t.coarse_ids, vec![id("ab"), id("c")]);
        assert_eq!(t.spans, vec![Span::new(0, 2), Span::new(2, 3)]);
    }

    #[test]
    fn single_character_text() {
        let v = toy_vocab("abc", &["ab"]);
        let t = tokenize_multigrained("b", &v);
        assert_eq!(t.fine_ids, t.coarse_ids);
        assert_eq!(t.spans, vec![Span::new(0, 1)]);
    }

    #[test]
    fn unknown_character_maps_to_unk() {
        let v = toy_vocab("abc", &["ab"]);
        let t = tokenize_multigrained("azb", &v);
        assert_eq!(t.fine_ids[1], v.specials().unk);
        assert_eq!(t.coarse_ids[1], v.specials().unk);
        assert_eq!(coarse_surface(&t, 1, &v), "z");
    }

    struct Whole;
    impl Segmenter for Whole {
        fn segment(&self, chars: &[char], _: &Vocab) -> Vec<Span> {
            vec![Span::new(0, chars.len())]
        }
    }

    #[test]
    fn out_of_vocabulary_segment_is_split_to_characters() {
        let v = toy_vocab("abc", &["ab"]);
        let t = tokenize_with("abc", &v, &Whole);
        assert_eq!(t.coarse_ids, t.fine_ids);
        assert_eq!(t.spans.len(), 3);
        let t = tokenize_with("ab", &v, &Whole);
        assert_eq!(t.coarse_ids, vec![v.id("ab").unwrap()]);
    }

    #[test]
    fn framing_offsets_spans_and_assigns_segments() {
        let v = toy_vocab("abc", &["ab"]);
        let a = tokenize_multigrained("abc", &v);
        let b = tokenize_multigrained("ca", &v);
        let f = frame(&[&a, &b], &v);
        let sp = v.specials();
        assert_eq!(f.fine_ids.len(), 3 + 2 + 3);
        assert_eq!(f.coarse_ids.len(), 2 + 2 + 3);
        assert_eq!(f.spans[1], Span::new(1, 3));
        assert_eq!(f.spans[3], Span::new(4, 5));
        assert_eq!(f.coarse_ids[3], sp.sep);
        assert_eq!(segment_ids(&f.fine_ids, sp.sep), vec![0, 0, 0, 0, 0, 1, 1, 1]);
        assert_eq!(segment_ids(&f.coarse_ids, sp.sep), vec![0, 0, 0, 0, 1, 1, 1]);
    }
}
