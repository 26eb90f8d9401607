//! Word versus character embedding similarity, and contextual alignment of
//! anchor words between the two encoders.

use alloc::string::String;
use alloc::vec::Vec;

use crate::masking::{select_anchors, AnchorConfig, MaskPlan};
use crate::math;
use crate::model::{encode, pool_anchor, Granularity, Mode, ModelParams, ParamSource};
use crate::tokenize::{frame, segment_ids, tokenize_multigrained};
use crate::vocab::{TokenId, Vocab};
use crate::{Error, Result, Rng};

/// Summary of one word-length group.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GroupStats {
    pub count: usize,
    pub mean_cosine: f64,
    pub median_cosine: f64,
    pub mean_distance: f64,
    pub median_distance: f64,
}

/// Static-embedding comparison of one word with its characters.
#[derive(Debug, Clone, PartialEq)]
pub struct WordSimilarity {
    pub id: TokenId,
    pub word: String,
    pub char_len: usize,
    pub cosine: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    /// Words of exactly two characters.
    pub two_char: GroupStats,
    /// Words of three or more characters.
    pub longer: GroupStats,
    /// Words with a character missing from the vocabulary.
    pub skipped: usize,
    /// Share of two-character words among all word entries.
    pub two_char_share: f64,
    pub words: Vec<WordSimilarity>,
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn group(words: &[&WordSimilarity]) -> GroupStats {
    let cos: Vec<f64> = words.iter().map(|w| w.cosine).collect();
    let dist: Vec<f64> = words.iter().map(|w| w.distance).collect();
    GroupStats {
        count: words.len(),
        mean_cosine: mean(&cos),
        median_cosine: median(&cos),
        mean_distance: mean(&dist),
        median_distance: median(&dist),
    }
}

/// Cosine similarity and Euclidean distance between each word's embedding
/// row and the mean of its characters' rows, grouped by word length.
pub fn embedding_similarity_report(params: &ModelParams, vocab: &Vocab) -> Result<SimilarityReport> {
    let word_ids = vocab.word_ids();
    if word_ids.is_empty() {
        return Err(Error::Vocab("no word tokens to analyze".into()));
    }
    let d = params.config().d_model;
    let mut words = Vec::with_capacity(word_ids.len());
    let mut skipped = 0;
    for &id in word_ids {
        let Some(chars) = crate::model::word_char_ids(vocab, id) else {
            skipped += 1;
            continue;
        };
        let centroid = math::mean_of_rows(chars.iter().map(|&c| params.embedding(c)), d);
        let row = params.embedding(id);
        words.push(WordSimilarity {
            id,
            word: vocab.token(id).into(),
            char_len: chars.len(),
            cosine: math::cosine(row, &centroid),
            distance: math::euclidean(row, &centroid),
        });
    }
    let two: Vec<&WordSimilarity> = words.iter().filter(|w| w.char_len == 2).collect();
    let longer: Vec<&WordSimilarity> = words.iter().filter(|w| w.char_len > 2).collect();
    let n_two = word_ids.iter().filter(|&&id| vocab.token(id).chars().count() == 2).count();
    Ok(SimilarityReport {
        two_char: group(&two),
        longer: group(&longer),
        skipped,
        two_char_share: n_two as f64 / word_ids.len() as f64,
        words,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentReport {
    pub mean_cosine: f64,
    pub n_anchors: usize,
    pub n_sequences: usize,
}

/// Mean cosine between each anchor's coarse contextual row and the mean of
/// its fine rows, over unmasked eval-mode forwards of every line. Lines are
/// truncated to the model's maximum length.
pub fn anchor_alignment_eval<'a, P, I>(params: &P, corpus: I, vocab: &Vocab, k: usize, rng: &mut Rng) -> Result<AlignmentReport>
where
    P: ParamSource + ?Sized,
    I: IntoIterator<Item = &'a str>,
{
    let max_chars = params.config().max_seq_len.saturating_sub(2);
    let sep = vocab.specials().sep;
    let none = MaskPlan::default();
    let cfg = AnchorConfig::with_k(k);
    let mut total = 0.0;
    let mut n_anchors = 0;
    let mut n_sequences = 0;
    for line in corpus {
        let text: String = line.trim().chars().take(max_chars).collect();
        if text.is_empty() {
            continue;
        }
        n_sequences += 1;
        let tok = frame(&[&tokenize_multigrained(&text, vocab)], vocab);
        let anchors = select_anchors(&tok, &none, &none, vocab, &cfg, rng);
        if anchors.is_empty() {
            continue;
        }
        let fine = encode(params, &tok.fine_ids, &segment_ids(&tok.fine_ids, sep), Granularity::Fine, Mode::Eval)?;
        let coarse = encode(
            params,
            &tok.coarse_ids,
            &segment_ids(&tok.coarse_ids, sep),
            Granularity::Coarse,
            Mode::Eval,
        )?;
        for a in &anchors.anchors {
            let pooled = pool_anchor(&fine, a.span)?;
            total += math::cosine(coarse.hidden.row(a.coarse_index), &pooled);
            n_anchors += 1;
        }
    }
    if n_sequences == 0 {
        return Err(Error::Input("empty evaluation corpus".into()));
    }
    if n_anchors == 0 {
        return Err(Error::Input("no eligible anchors in evaluation corpus".into()));
    }
    Ok(AlignmentReport {
        mean_cosine: total / n_anchors as f64,
        n_anchors,
        n_sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::testutil::toy_vocab;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn identity_right_after_init() {
        let v = toy_vocab("abcdefg", &["ab", "cd", "efg"]);
        let p = init_params(ModelConfig::tiny(v.len()), &v, &mut crate::seeded_rng(9)).unwrap();
        let r = embedding_similarity_report(&p, &v).unwrap();
        assert_eq!(r.two_char.count, 2);
        assert_eq!(r.longer.count, 1);
        assert_eq!(r.skipped, 0);
        for w in &r.words {
            assert_eq!(w.cosine, 1.0, "{}", w.word);
            assert_eq!(w.distance, 0.0, "{}", w.word);
        }
        assert!((r.two_char_share - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r, embedding_similarity_report(&p, &v).unwrap());
    }

    #[test]
    fn no_words_is_an_error() {
        let v = toy_vocab("ab", &[]);
        let p = init_params(ModelConfig::tiny(v.len()), &v, &mut crate::seeded_rng(9)).unwrap();
        assert!(embedding_similarity_report(&p, &v).is_err());
    }

    #[test]
    fn alignment_is_a_bounded_seeded_value() {
        let v = toy_vocab("abcdefg", &["ab", "cd", "efg"]);
        let p = init_params(ModelConfig::tiny(v.len()), &v, &mut crate::seeded_rng(9)).unwrap();
        let lines = ["abcdefg", "cdab"];
        let a = anchor_alignment_eval(&p, lines, &v, 20, &mut crate::seeded_rng(1)).unwrap();
        let b = anchor_alignment_eval(&p, lines, &v, 20, &mut crate::seeded_rng(1)).unwrap();
        assert_eq!(a, b);
        assert!((-1.0..=1.0).contains(&a.mean_cosine));
        assert_eq!(a.n_anchors, 5);
        assert!(anchor_alignment_eval(&p, ["gg"], &v, 20, &mut crate::seeded_rng(1)).is_err());
        assert!(anchor_alignment_eval(&p, [""], &v, 20, &mut crate::seeded_rng(1)).is_err());
    }
}
