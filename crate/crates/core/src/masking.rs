//! Mask plans for both granularities and contrastive anchor selection.
//!
//! The fine sequence is masked by whole words (a selected coarse span masks
//! all of its characters with one shared action); the coarse sequence is
//! masked per token. The two plans are drawn independently. Anchors are then
//! chosen among word tokens that neither plan touched.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::segment::Span;
use crate::tokenize::MultiGrainedTokenization;
use crate::vocab::{TokenId, TokenKind, Vocab};
use crate::{Error, Result, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MaskAction {
    Mask,
    RandomReplace,
    Keep,
}

impl MaskAction {
    /// Integer code used in prepared-example files.
    pub fn code(self) -> u8 {
        match self {
            MaskAction::Mask => 0,
            MaskAction::RandomReplace => 1,
            MaskAction::Keep => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(MaskAction::Mask),
            1 => Ok(MaskAction::RandomReplace),
            2 => Ok(MaskAction::Keep),
            c => Err(Error::Input(format!("unknown mask action code {c}"))),
        }
    }
}

/// Positions planned for prediction, in increasing order, with the action
/// applied to each and the id it held before masking.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskPlan {
    pub positions: Vec<usize>,
    pub actions: Vec<MaskAction>,
    pub original_ids: Vec<TokenId>,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.positions.binary_search(&pos).is_ok()
    }

    /// Checks ordering, bounds and special-token exclusion against `ids`.
    pub fn validate(&self, ids: &[TokenId], vocab: &Vocab) -> Result<()> {
        if self.actions.len() != self.positions.len() || self.original_ids.len() != self.positions.len()
        {
            return Err(Error::Input("mask plan fields differ in length".into()));
        }
        for (i, &p) in self.positions.iter().enumerate() {
            if i > 0 && self.positions[i - 1] >= p {
                return Err(Error::Input("mask positions not strictly increasing".into()));
            }
            if p >= ids.len() {
                return Err(Error::Index {
                    what: "mask position",
                    index: p,
                    bound: ids.len(),
                });
            }
            if ids[p] != self.original_ids[i] {
                return Err(Error::Input(format!(
                    "mask plan expects id {} at position {p}, sequence has {}",
                    self.original_ids[i], ids[p]
                )));
            }
            if vocab.is_special(ids[p]) {
                return Err(Error::Input(format!("mask position {p} is a special token")));
            }
        }
        Ok(())
    }
}

/// Masking rate and the split of planned positions between actions; the
/// remainder after `mask_prob + replace_prob` is kept unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    pub rate: f64,
    pub mask_prob: f64,
    pub replace_prob: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            rate: 0.15,
            mask_prob: 0.8,
            replace_prob: 0.1,
        }
    }
}

impl MaskConfig {
    pub fn with_rate(rate: f64) -> Self {
        MaskConfig {
            rate,
            ..MaskConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.rate)
            && self.mask_prob >= 0.0
            && self.replace_prob >= 0.0
            && self.mask_prob + self.replace_prob <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Param(format!("invalid mask config {self:?}")))
        }
    }

    fn draw_action(&self, rng: &mut Rng) -> MaskAction {
        let u: f64 = rng.gen();
        if u < self.mask_prob {
            MaskAction::Mask
        } else if u < self.mask_prob + self.replace_prob {
            MaskAction::RandomReplace
        } else {
            MaskAction::Keep
        }
    }
}

fn reached(covered: usize, total: usize, rate: f64) -> bool {
    // Exact integer ratio, so e.g. 15/100 compares equal to a rate of 0.15.
    total == 0 || covered as f64 / total as f64 >= rate
}

/// Smallest count whose share of `total` reaches `rate`.
fn target_count(total: usize, rate: f64) -> usize {
    let mut count = 0;
    while !reached(count, total, rate) {
        count += 1;
    }
    count
}

/// Whole-word masking of the fine sequence. Non-special coarse spans are
/// visited in random order; a span is selected when it fits within the
/// target count of masked positions, until the target is met. If no
/// remaining span fits, the shortest one left overshoots the target.
pub fn plan_wwm_mask(
    tok: &MultiGrainedTokenization,
    vocab: &Vocab,
    config: &MaskConfig,
    rng: &mut Rng,
) -> Result<MaskPlan> {
    config.validate()?;
    let mut units: Vec<Span> = tok
        .spans
        .iter()
        .zip(&tok.coarse_ids)
        .filter(|(_, &id)| !vocab.is_special(id))
        .map(|(s, _)| *s)
        .collect();
    let total: usize = units.iter().map(Span::len).sum();
    if config.rate == 0.0 || total == 0 {
        return Ok(MaskPlan::default());
    }
    units.shuffle(rng);
    let target = target_count(total, config.rate);
    let mut chosen: Vec<(usize, MaskAction)> = Vec::new();
    let mut skipped: Vec<Span> = Vec::new();
    let mut covered = 0;
    for unit in units {
        if covered >= target {
            break;
        }
        if covered + unit.len() > target {
            skipped.push(unit);
            continue;
        }
        let action = config.draw_action(rng);
        chosen.extend((unit.start..unit.end).map(|p| (p, action)));
        covered += unit.len();
    }
    if covered < target {
        if let Some(unit) = skipped.iter().min_by_key(|u| u.len()) {
            let action = config.draw_action(rng);
            chosen.extend((unit.start..unit.end).map(|p| (p, action)));
        }
    }
    chosen.sort_unstable();
    Ok(build_plan(chosen, &tok.fine_ids))
}

/// Per-token masking: the smallest number of non-special positions whose
/// share reaches `rate` is drawn uniformly without replacement.
pub fn plan_standard_mask(
    ids: &[TokenId],
    vocab: &Vocab,
    config: &MaskConfig,
    rng: &mut Rng,
) -> Result<MaskPlan> {
    config.validate()?;
    let mut candidates: Vec<usize> = (0..ids.len()).filter(|&p| !vocab.is_special(ids[p])).collect();
    let total = candidates.len();
    if config.rate == 0.0 || total == 0 {
        return Ok(MaskPlan::default());
    }
    let count = target_count(total, config.rate);
    let (picked, _) = candidates.partial_shuffle(rng, count);
    let mut chosen: Vec<(usize, MaskAction)> = picked.iter().map(|&p| (p, MaskAction::Keep)).collect();
    chosen.sort_unstable();
    for c in &mut chosen {
        c.1 = config.draw_action(rng);
    }
    Ok(build_plan(chosen, ids))
}

fn build_plan(chosen: Vec<(usize, MaskAction)>, ids: &[TokenId]) -> MaskPlan {
    let mut plan = MaskPlan::default();
    for (p, a) in chosen {
        plan.positions.push(p);
        plan.actions.push(a);
        plan.original_ids.push(ids[p]);
    }
    plan
}

/// Applies a plan: `[MASK]` for masked positions, a uniformly drawn token of
/// the same kind for replaced ones (characters for characters, words for
/// words), everything else untouched.
pub fn apply_mask(ids: &[TokenId], plan: &MaskPlan, vocab: &Vocab, rng: &mut Rng) -> Result<Vec<TokenId>> {
    plan.validate(ids, vocab)?;
    let mut out = ids.to_vec();
    for (&p, &action) in plan.positions.iter().zip(&plan.actions) {
        match action {
            MaskAction::Mask => out[p] = vocab.specials().mask,
            MaskAction::RandomReplace => {
                let pool = match vocab.kind(ids[p]) {
                    TokenKind::Word if !vocab.word_ids().is_empty() => vocab.word_ids(),
                    _ => vocab.char_ids(),
                };
                if let Some(&id) = pool.choose(rng) {
                    out[p] = id;
                }
            }
            MaskAction::Keep => {}
        }
    }
    Ok(out)
}

/// Limits on anchor selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorConfig {
    /// Maximum anchors per sequence.
    pub k: usize,
    pub min_chars: usize,
    pub max_chars: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            k: 20,
            min_chars: 2,
            max_chars: 4,
        }
    }
}

impl AnchorConfig {
    pub fn with_k(k: usize) -> Self {
        AnchorConfig {
            k,
            ..AnchorConfig::default()
        }
    }
}

/// A coarse word token and the fine span it covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Anchor {
    pub coarse_index: usize,
    pub span: Span,
}

impl Anchor {
    pub fn char_len(&self) -> usize {
        self.span.len()
    }
}

/// Anchors sorted by coarse index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Draws up to `k` anchors uniformly without replacement from the word
/// tokens whose character length is within bounds and which neither plan
/// touches (no planned coarse position, no planned fine position inside the
/// span).
pub fn select_anchors(
    tok: &MultiGrainedTokenization,
    fine_plan: &MaskPlan,
    coarse_plan: &MaskPlan,
    vocab: &Vocab,
    config: &AnchorConfig,
    rng: &mut Rng,
) -> AnchorSet {
    let mut eligible: Vec<Anchor> = tok
        .spans
        .iter()
        .enumerate()
        .filter(|&(j, span)| {
            vocab.kind(tok.coarse_ids[j]) == TokenKind::Word
                && (config.min_chars..=config.max_chars).contains(&span.len())
                && !coarse_plan.contains(j)
                && !(span.start..span.end).any(|p| fine_plan.contains(p))
        })
        .map(|(j, &span)| Anchor {
            coarse_index: j,
            span,
        })
        .collect();
    let take = config.k.min(eligible.len());
    let (picked, _) = eligible.partial_shuffle(rng, take);
    let mut anchors = picked.to_vec();
    anchors.sort_unstable();
    AnchorSet { anchors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::toy_vocab;
    use crate::tokenize::{frame, tokenize_multigrained};
    use alloc::vec;

    fn sample() -> (Vocab, MultiGrainedTokenization) {
        let v = toy_vocab("abcdefg", &["ab", "cd", "efg"]);
        let t = tokenize_multigrained("abcdefgab", &v);
        (v, t)
    }

    #[test]
    fn zero_rate_plans_nothing() {
        let (v, t) = sample();
        let mut rng = crate::seeded_rng(1);
        let cfg = MaskConfig::with_rate(0.0);
        assert!(plan_wwm_mask(&t, &v, &cfg, &mut rng).unwrap().is_empty());
        assert!(plan_standard_mask(&t.coarse_ids, &v, &cfg, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn full_rate_plans_every_non_special_position() {
        let (v, t) = sample();
        let framed = frame(&[&t], &v);
        let mut rng = crate::seeded_rng(2);
        let cfg = MaskConfig::with_rate(1.0);
        let plan = plan_wwm_mask(&framed, &v, &cfg, &mut rng).unwrap();
        assert_eq!(plan.positions, (1..framed.fine_len() - 1).collect::<Vec<_>>());
        let plan = plan_standard_mask(&framed.coarse_ids, &v, &cfg, &mut rng).unwrap();
        assert_eq!(plan.len(), framed.coarse_len() - 2);
        plan.validate(&framed.coarse_ids, &v).unwrap();
    }

    #[test]
    fn whole_words_share_one_action() {
        let (v, t) = sample();
        for seed in 0..50 {
            let mut rng = crate::seeded_rng(seed);
            let plan = plan_wwm_mask(&t, &v, &MaskConfig::with_rate(0.3), &mut rng).unwrap();
            for span in &t.spans {
                let inside: Vec<usize> = (0..plan.len())
                    .filter(|&i| span.contains(plan.positions[i]))
                    .collect();
                assert!(inside.is_empty() || inside.len() == span.len());
                assert!(inside.windows(2).all(|w| plan.actions[w[0]] == plan.actions[w[1]]));
            }
        }
    }

    #[test]
    fn apply_mask_direct_cases() {
        let v = toy_vocab("abc", &[]);
        let ids: Vec<TokenId> = "abc".chars().map(|c| v.char_id(c).unwrap()).collect();
        let mut rng = crate::seeded_rng(0);
        assert_eq!(apply_mask(&ids, &MaskPlan::default(), &v, &mut rng).unwrap(), ids);
        let plan = MaskPlan {
            positions: vec![2],
            actions: vec![MaskAction::Mask],
            original_ids: vec![ids[2]],
        };
        let out = apply_mask(&ids, &plan, &v, &mut rng).unwrap();
        assert_eq!(out, vec![ids[0], ids[1], v.specials().mask]);
    }

    #[test]
    fn apply_mask_rejects_inconsistent_plan() {
        let v = toy_vocab("abc", &[]);
        let ids = vec![v.char_id('a').unwrap()];
        let mut rng = crate::seeded_rng(0);
        let plan = MaskPlan {
            positions: vec![3],
            actions: vec![MaskAction::Mask],
            original_ids: vec![ids[0]],
        };
        assert!(apply_mask(&ids, &plan, &v, &mut rng).is_err());
        let plan = MaskPlan {
            positions: vec![0],
            actions: vec![MaskAction::Mask],
            original_ids: vec![v.char_id('b').unwrap()],
        };
        assert!(apply_mask(&ids, &plan, &v, &mut rng).is_err());
    }

    #[test]
    fn random_replacement_keeps_token_kind() {
        let (v, t) = sample();
        let plan = MaskPlan {
            positions: (0..t.coarse_len()).collect(),
            actions: vec![MaskAction::RandomReplace; t.coarse_len()],
            original_ids: t.coarse_ids.clone(),
        };
        for seed in 0..20 {
            let out = apply_mask(&t.coarse_ids, &plan, &v, &mut crate::seeded_rng(seed)).unwrap();
            for (a, b) in out.iter().zip(&t.coarse_ids) {
                assert_eq!(v.kind(*a), v.kind(*b));
            }
        }
    }

    #[test]
    fn anchors_exclude_masked_words() {
        let v = toy_vocab("abcd", &["ab", "cd"]);
        let t = tokenize_multigrained("abcd", &v);
        // coarse: [ab, cd]; mask "cd" in the coarse sequence
        let coarse_plan = MaskPlan {
            positions: vec![1],
            actions: vec![MaskAction::Mask],
            original_ids: vec![t.coarse_ids[1]],
        };
        let mut rng = crate::seeded_rng(4);
        let set = select_anchors(&t, &MaskPlan::default(), &coarse_plan, &v, &AnchorConfig::with_k(5), &mut rng);
        assert_eq!(set.anchors, vec![Anchor { coarse_index: 0, span: Span::new(0, 2) }]);

        // masking one character of "ab" on the fine side excludes it too
        let fine_plan = MaskPlan {
            positions: vec![1],
            actions: vec![MaskAction::Keep],
            original_ids: vec![t.fine_ids[1]],
        };
        let set = select_anchors(&t, &fine_plan, &coarse_plan, &v, &AnchorConfig::with_k(5), &mut rng);
        assert!(set.is_empty());
    }

    #[test]
    fn anchor_length_bounds_and_cap() {
        let v = toy_vocab("abcde", &["ab", "abcde"]);
        let t = tokenize_multigrained("abcdeabab", &v);
        let mut rng = crate::seeded_rng(5);
        let set = select_anchors(&t, &MaskPlan::default(), &MaskPlan::default(), &v, &AnchorConfig::default(), &mut rng);
        // "abcde" has five characters and never qualifies
        assert_eq!(set.len(), 2);
        let set = select_anchors(&t, &MaskPlan::default(), &MaskPlan::default(), &v, &AnchorConfig::with_k(1), &mut rng);
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn standard_plan_is_reproducible() {
        let v = toy_vocab("abcdefghij", &[]);
        let ids: Vec<TokenId> = (0..100).map(|i| v.char_ids()[i % 10]).collect();
        let cfg = MaskConfig::default();
        let a = plan_standard_mask(&ids, &v, &cfg, &mut crate::seeded_rng(77)).unwrap();
        let b = plan_standard_mask(&ids, &v, &cfg, &mut crate::seeded_rng(77)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
    }
}
