mod common;

use clower_core::masking::{plan_standard_mask, plan_wwm_mask, select_anchors, AnchorConfig, MaskConfig};
use clower_core::seeded_rng;
use clower_core::tokenize::{coarse_surface, frame, tokenize_multigrained};
use clower_core::vocab::{TokenKind, Vocab};
use common::toy_vocab;
use proptest::prelude::*;

const ALPHABET: [char; 4] = ['a', 'b', 'c', 'd'];

fn vocab_from(words: &[String]) -> Vocab {
    let mut ws: Vec<&str> = words.iter().map(String::as_str).collect();
    ws.sort_unstable();
    ws.dedup();
    toy_vocab("abcd", &ws)
}

fn text_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(0usize..5, 0..24)
        .prop_map(|v| v.into_iter().map(|i| if i < 4 { ALPHABET[i] } else { 'z' }).collect())
}

fn words_strategy() -> impl Strategy<Value = Vec<String>> {
    let word = prop::collection::vec(0usize..4, 2..=4).prop_map(|v| v.into_iter().map(|i| ALPHABET[i]).collect());
    prop::collection::vec(word, 0..8)
}

/// Greedy span lengths found by trying every candidate length at each
/// position, longest first.
fn brute_force_spans(chars: &[char], vocab: &Vocab) -> Vec<(usize, usize)> {
    let words: Vec<Vec<char>> = vocab
        .iter()
        .filter(|(_, k, _)| *k == TokenKind::Word)
        .map(|(_, _, t)| t.chars().collect())
        .collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let mut best = 1;
        for w in &words {
            if w.len() > best && chars[i..].starts_with(w) {
                best = w.len();
            }
        }
        out.push((i, i + best));
        i += best;
    }
    out
}

proptest! {
    #[test]
    fn spans_partition_and_match_greedily(text in text_strategy(), words in words_strategy()) {
        let v = vocab_from(&words);
        let tok = tokenize_multigrained(&text, &v);
        let chars: Vec<char> = text.chars().collect();
        prop_assert_eq!(tok.fine_ids.len(), chars.len());
        let mut next = 0;
        for s in &tok.spans {
            prop_assert_eq!(s.start, next);
            prop_assert!(s.end > s.start);
            next = s.end;
        }
        prop_assert_eq!(next, chars.len());
        let got: Vec<(usize, usize)> = tok.spans.iter().map(|s| (s.start, s.end)).collect();
        prop_assert_eq!(got, brute_force_spans(&chars, &v));
    }

    #[test]
    fn surfaces_rebuild_the_text(text in text_strategy(), words in words_strategy()) {
        let v = vocab_from(&words);
        let tok = tokenize_multigrained(&text, &v);
        let rebuilt: String = (0..tok.coarse_len()).map(|j| coarse_surface(&tok, j, &v)).collect();
        prop_assert_eq!(rebuilt, text.clone());
        prop_assert_eq!(tok, tokenize_multigrained(&text, &v));
    }

    #[test]
    fn plans_respect_words_and_anchors(
        a in text_strategy(),
        b in text_strategy(),
        words in words_strategy(),
        seed in any::<u64>(),
        rate in 0.0f64..0.5,
    ) {
        let v = vocab_from(&words);
        let tok = frame(&[&tokenize_multigrained(&a, &v), &tokenize_multigrained(&b, &v)], &v);
        let cfg = MaskConfig::with_rate(rate);
        let mut rng = seeded_rng(seed);
        let fine = plan_wwm_mask(&tok, &v, &cfg, &mut rng).unwrap();
        let coarse = plan_standard_mask(&tok.coarse_ids, &v, &cfg, &mut rng).unwrap();
        let anchors = select_anchors(&tok, &fine, &coarse, &v, &AnchorConfig::default(), &mut rng);
        for s in &tok.spans {
            let hit = (s.start..s.end).filter(|&p| fine.contains(p)).count();
            prop_assert!(hit == 0 || hit == s.len(), "partial word {:?}", s);
        }
        prop_assert!(anchors.len() <= 20);
        for an in &anchors.anchors {
            prop_assert!((2..=4).contains(&an.char_len()));
            prop_assert!(!coarse.contains(an.coarse_index));
            prop_assert!((an.span.start..an.span.end).all(|p| !fine.contains(p)));
            prop_assert_eq!(v.kind(tok.coarse_ids[an.coarse_index]), TokenKind::Word);
        }

        let mut again = seeded_rng(seed);
        prop_assert_eq!(&fine, &plan_wwm_mask(&tok, &v, &cfg, &mut again).unwrap());
        prop_assert_eq!(&coarse, &plan_standard_mask(&tok.coarse_ids, &v, &cfg, &mut again).unwrap());
        prop_assert_eq!(anchors, select_anchors(&tok, &fine, &coarse, &v, &AnchorConfig::default(), &mut again));
    }
}

#[test]
fn masking_rate_converges_over_many_tokens() {
    let v = toy_vocab("abcd", &["ab", "bcd", "dd", "abca"]);
    let mut rng = seeded_rng(11);
    let cfg = MaskConfig::default();
    let (mut fine_hit, mut fine_total, mut coarse_hit, mut coarse_total) = (0, 0, 0, 0);
    let mut text_rng = seeded_rng(12);
    for _ in 0..100 {
        let text: String = (0..160)
            .map(|_| ALPHABET[rand::Rng::gen_range(&mut text_rng, 0..4)])
            .collect();
        let tok = frame(&[&tokenize_multigrained(&text, &v)], &v);
        fine_hit += plan_wwm_mask(&tok, &v, &cfg, &mut rng).unwrap().len();
        fine_total += 160;
        coarse_hit += plan_standard_mask(&tok.coarse_ids, &v, &cfg, &mut rng).unwrap().len();
        coarse_total += tok.coarse_len() - 2;
    }
    let f = fine_hit as f64 / fine_total as f64;
    let c = coarse_hit as f64 / coarse_total as f64;
    assert!((f - 0.15).abs() <= 0.01, "fine {f}");
    assert!((c - 0.15).abs() <= 0.01, "coarse {c}");
}
