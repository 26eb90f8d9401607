//! Pre-training examples, the optimization loop, fine-only inference and
//! classifier fine-tuning.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::graph::{Graph, Var};
use crate::losses::{self, LossBreakdown, LossCounts, MlmTerm, Similarity, SopSource};
use crate::masking::{
    apply_mask, plan_standard_mask, plan_wwm_mask, select_anchors, AnchorConfig, AnchorSet, MaskConfig,
    MaskPlan,
};
use crate::model::{
    encode, encode_graph, mlm_logits_graph, sop_logits_graph, Bound, EncodedSequence, Granularity, Mode,
    ModelParams, ParamId, ParamSource,
};
use crate::optim::{warmup_lr, AdamW, AdamWConfig};
use crate::tensor::Tensor;
use crate::tokenize::{self, frame, segment_ids, tokenize_multigrained, MultiGrainedTokenization};
use crate::vocab::{TokenId, TokenKind, Vocab};
use crate::{seeded_rng, Error, Result, Rng};

/// Characters that end a sentence when pairing segments.
pub const SENTENCE_END: &[char] = &['。', '！', '？', '!', '?', '.'];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SopLabel {
    InOrder,
    Swapped,
}

impl SopLabel {
    pub fn code(self) -> u8 {
        match self {
            SopLabel::InOrder => 0,
            SopLabel::Swapped => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(SopLabel::InOrder),
            1 => Ok(SopLabel::Swapped),
            c => Err(Error::Input(format!("SOP label {c} is not 0 or 1"))),
        }
    }
}

/// One sentence pair ready for both encoders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiGrainedExample {
    /// Framed `[CLS] a [SEP] b [SEP]` tokenization before masking.
    pub tokens: MultiGrainedTokenization,
    pub fine_segments: Vec<u8>,
    pub coarse_segments: Vec<u8>,
    pub fine_mask: MaskPlan,
    pub coarse_mask: MaskPlan,
    pub fine_input: Vec<TokenId>,
    pub coarse_input: Vec<TokenId>,
    pub anchors: AnchorSet,
    pub sop_label: SopLabel,
}

impl MultiGrainedExample {
    /// Checks every structural invariant against `vocab`.
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let t = &self.tokens;
        let bad = |m: String| Err(Error::Input(m));
        let (nf, nc) = (t.fine_ids.len(), t.coarse_ids.len());
        if t.spans.len() != nc || self.coarse_input.len() != nc || self.coarse_segments.len() != nc {
            return bad("coarse fields differ in length".into());
        }
        if self.fine_input.len() != nf || self.fine_segments.len() != nf {
            return bad("fine fields differ in length".into());
        }
        if let Some(&id) = t.fine_ids.iter().chain(&t.coarse_ids).find(|&&id| id as usize >= vocab.len()) {
            return bad(format!("token id {id} outside vocabulary"));
        }
        let mut next = 0;
        for (j, s) in t.spans.iter().enumerate() {
            if s.start != next || s.is_empty() {
                return bad(format!("span {j} does not continue the partition"));
            }
            next = s.end;
            let cid = t.coarse_ids[j];
            match vocab.kind(cid) {
                TokenKind::Word => {
                    let chars: Option<Vec<TokenId>> = vocab.token(cid).chars().map(|c| vocab.char_id(c)).collect();
                    if chars.as_deref() != Some(&t.fine_ids[s.start..s.end]) {
                        return bad(format!("word at coarse {j} does not spell its span"));
                    }
                }
                _ => {
                    if s.len() != 1 || t.fine_ids[s.start] != cid {
                        return bad(format!("coarse token {j} does not match its character"));
                    }
                }
            }
        }
        if next != nf {
            return bad("spans do not cover the fine sequence".into());
        }
        let sep = vocab.specials().sep;
        if segment_ids(&t.fine_ids, sep) != self.fine_segments || segment_ids(&t.coarse_ids, sep) != self.coarse_segments
        {
            return bad("segment ids disagree with [SEP] positions".into());
        }
        let fine_seps: Vec<usize> = (0..nf).filter(|&p| t.fine_ids[p] == sep).collect();
        let coarse_seps: Vec<usize> = (0..nc).filter(|&j| t.coarse_ids[j] == sep).map(|j| t.spans[j].start).collect();
        if fine_seps != coarse_seps {
            return bad("[SEP] positions disagree across granularities".into());
        }
        self.fine_mask.validate(&t.fine_ids, vocab)?;
        self.coarse_mask.validate(&t.coarse_ids, vocab)?;
        for (j, s) in t.spans.iter().enumerate() {
            let hits: Vec<usize> = (s.start..s.end)
                .filter_map(|p| self.fine_mask.positions.binary_search(&p).ok())
                .collect();
            if !hits.is_empty() {
                let a = self.fine_mask.actions[hits[0]];
                if hits.len() != s.len() || hits.iter().any(|&h| self.fine_mask.actions[h] != a) {
                    return bad(format!("fine mask splits word {j}"));
                }
            }
        }
        check_masked_input(&t.fine_ids, &self.fine_input, &self.fine_mask, vocab)?;
        check_masked_input(&t.coarse_ids, &self.coarse_input, &self.coarse_mask, vocab)?;
        for (i, a) in self.anchors.anchors.iter().enumerate() {
            if i > 0 && self.anchors.anchors[i - 1].coarse_index >= a.coarse_index {
                return bad("anchors not sorted".into());
            }
            let j = a.coarse_index;
            if j >= nc || t.spans[j] != a.span || vocab.kind(t.coarse_ids[j]) != TokenKind::Word {
                return bad(format!("anchor {i} does not name a word token"));
            }
            if self.coarse_mask.contains(j) || (a.span.start..a.span.end).any(|p| self.fine_mask.contains(p)) {
                return bad(format!("anchor {i} overlaps a masked position"));
            }
        }
        Ok(())
    }
}

fn check_masked_input(original: &[TokenId], input: &[TokenId], plan: &MaskPlan, vocab: &Vocab) -> Result<()> {
    for (p, (&o, &i)) in original.iter().zip(input).enumerate() {
        let planned = plan.positions.binary_search(&p).ok().map(|k| plan.actions[k]);
        let ok = match planned {
            None => o == i,
            Some(crate::masking::MaskAction::Mask) => i == vocab.specials().mask,
            Some(crate::masking::MaskAction::Keep) => o == i,
            Some(crate::masking::MaskAction::RandomReplace) => (i as usize) < vocab.len() && !vocab.is_special(i),
        };
        if !ok {
            return Err(Error::Input(format!("masked input disagrees with plan at position {p}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepareConfig {
    pub mask: MaskConfig,
    pub anchors: AnchorConfig,
    /// Probability that a pair is presented swapped.
    pub swap_prob: f64,
    pub max_seq_len: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            mask: MaskConfig::default(),
            anchors: AnchorConfig::default(),
            swap_prob: 0.5,
            max_seq_len: 128,
        }
    }
}

/// Splits after each sentence-final character; a trailing remainder counts
/// as a sentence. Whitespace-only pieces are dropped.
pub fn split_sentences(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in line.chars() {
        cur.push(c);
        if SENTENCE_END.contains(&c) {
            if !cur.trim().is_empty() {
                out.push(core::mem::take(&mut cur));
            }
            cur.clear();
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur);
    }
    out
}

/// Groups corpus lines into units of at least two sentences; a line with
/// fewer is joined with the lines after it.
pub fn pairable_units<'a, I>(corpus: I) -> Vec<Vec<String>>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut units = Vec::new();
    let mut pending: Vec<String> = Vec::new();
    for line in corpus {
        pending.extend(split_sentences(line.trim()));
        if pending.len() >= 2 {
            units.push(core::mem::take(&mut pending));
        }
    }
    units
}

fn pop_tail(tok: &mut MultiGrainedTokenization) {
    if let Some(span) = tok.spans.pop() {
        tok.coarse_ids.pop();
        tok.fine_ids.truncate(span.start);
        tok.text = tok.text.chars().take(span.start).collect();
    }
}

/// Builds one example from two segments already in presentation order.
/// Returns `None` when truncation to `max_seq_len` would empty a segment.
pub fn build_example(
    first: &str,
    second: &str,
    label: SopLabel,
    vocab: &Vocab,
    config: &PrepareConfig,
    rng: &mut Rng,
) -> Result<Option<MultiGrainedExample>> {
    let mut a = tokenize_multigrained(first, vocab);
    let mut b = tokenize_multigrained(second, vocab);
    while a.fine_len() + b.fine_len() + 3 > config.max_seq_len {
        if a.fine_len() >= b.fine_len() {
            pop_tail(&mut a);
        } else {
            pop_tail(&mut b);
        }
    }
    if a.fine_len() == 0 || b.fine_len() == 0 {
        return Ok(None);
    }
    let tokens = frame(&[&a, &b], vocab);
    let fine_mask = plan_wwm_mask(&tokens, vocab, &config.mask, rng)?;
    let coarse_mask = plan_standard_mask(&tokens.coarse_ids, vocab, &config.mask, rng)?;
    let anchors = select_anchors(&tokens, &fine_mask, &coarse_mask, vocab, &config.anchors, rng);
    let fine_input = apply_mask(&tokens.fine_ids, &fine_mask, vocab, rng)?;
    let coarse_input = apply_mask(&tokens.coarse_ids, &coarse_mask, vocab, rng)?;
    let sep = vocab.specials().sep;
    Ok(Some(MultiGrainedExample {
        fine_segments: segment_ids(&tokens.fine_ids, sep),
        coarse_segments: segment_ids(&tokens.coarse_ids, sep),
        tokens,
        fine_mask,
        coarse_mask,
        fine_input,
        coarse_input,
        anchors,
        sop_label: label,
    }))
}

/// Turns corpus lines into sentence-pair examples. Each unit of sentences is
/// split at a uniformly drawn boundary; the halves are swapped with
/// probability `swap_prob`.
pub fn prepare_examples<'a, I>(
    corpus: I,
    vocab: &Vocab,
    config: &PrepareConfig,
    rng: &mut Rng,
) -> Result<Vec<MultiGrainedExample>>
where
    I: IntoIterator<Item = &'a str>,
{
    config.mask.validate()?;
    if !(0.0..=1.0).contains(&config.swap_prob) {
        return Err(Error::Param(format!("swap_prob {} not in [0, 1]", config.swap_prob)));
    }
    let units = pairable_units(corpus);
    let mut out = Vec::with_capacity(units.len());
    for unit in units {
        let k = rng.gen_range(1..unit.len());
        let a: String = unit[..k].concat();
        let b: String = unit[k..].concat();
        let swap = rng.gen::<f64>() < config.swap_prob;
        let (first, second, label) = if swap {
            (b, a, SopLabel::Swapped)
        } else {
            (a, b, SopLabel::InOrder)
        };
        if let Some(ex) = build_example(&first, &second, label, vocab, config, rng)? {
            out.push(ex);
        }
    }
    if out.is_empty() {
        return Err(Error::Input("corpus has no pairable content".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lambda: f64,
    pub mu: f64,
    pub tau: f64,
    pub k: usize,
    pub mask_rate: f64,
    pub swap_prob: f64,
    pub seed: u64,
    pub no_tcl: bool,
    pub no_scl: bool,
    pub no_sop: bool,
    pub sop_source: SopSource,
    pub similarity: Similarity,
    /// Steps between checkpoint callbacks; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 0.01,
            warmup_steps: 100,
            batch_size: 16,
            steps: 2000,
            lambda: 1.0,
            mu: 1.0,
            tau: losses::DEFAULT_TAU,
            k: 20,
            mask_rate: 0.15,
            swap_prob: 0.5,
            seed: 42,
            no_tcl: false,
            no_scl: false,
            no_sop: false,
            sop_source: SopSource::Both,
            similarity: Similarity::Cosine,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn contrastive(&self) -> bool {
        !(self.no_tcl && self.no_scl)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Param(m));
        if self.batch_size == 0 || (self.contrastive() && self.batch_size < 2) {
            return err(format!(
                "batch_size {} too small (contrastive terms need at least 2)",
                self.batch_size
            ));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return err("lr and weight_decay must be >= 0".into());
        }
        if !(self.lambda >= 0.0) || !(self.mu >= 0.0) {
            return err("lambda and mu must be >= 0".into());
        }
        if !(self.tau > 0.0) {
            return err(format!("tau must be positive, got {}", self.tau));
        }
        MaskConfig::with_rate(self.mask_rate).validate()?;
        if !(0.0..=1.0).contains(&self.swap_prob) {
            return err(format!("swap_prob {} not in [0, 1]", self.swap_prob));
        }
        Ok(())
    }

    pub fn prepare_config(&self, max_seq_len: usize) -> PrepareConfig {
        PrepareConfig {
            mask: MaskConfig::with_rate(self.mask_rate),
            anchors: AnchorConfig::with_k(self.k),
            swap_prob: self.swap_prob,
            max_seq_len,
        }
    }
}

/// Graph nodes of one objective evaluation.
pub struct Objective {
    pub total: Var,
    pub mlm: Var,
    pub tcl: Option<Var>,
    pub scl: Option<Var>,
    pub sop: Option<Var>,
    pub counts: LossCounts,
}

impl Objective {
    /// Reads the component values; a non-finite component is an error
    /// naming it.
    pub fn breakdown(&self, g: &Graph, config: &TrainConfig) -> Result<LossBreakdown> {
        let val = |v: Option<Var>, name: &str| -> Result<f64> {
            let x = v.map_or(0.0, |v| g.value(v).item());
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::NonFinite(format!("{name} = {x}")))
            }
        };
        let l_mlm = val(Some(self.mlm), "l_mlm")?;
        let l_tcl = val(self.tcl, "l_tcl")?;
        let l_scl = val(self.scl, "l_scl")?;
        let l_sop = val(self.sop, "l_sop")?;
        let b = losses::total_loss(l_mlm, l_sop, l_tcl, l_scl, config.lambda, config.mu, self.counts)?;
        val(Some(self.total), "total")?;
        Ok(b)
    }
}

/// Builds the weighted objective for a batch. Every example is encoded by
/// both encoders at its own length; MLM means and contrastive negatives are
/// pooled across the batch.
pub fn batch_objective<P: ParamSource + ?Sized>(
    g: &mut Graph,
    p: &mut Bound<'_, P>,
    batch: &[&MultiGrainedExample],
    config: &TrainConfig,
    mode: &mut Mode<'_>,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut fine_rows = Vec::new();
    let mut fine_targets = Vec::new();
    let mut coarse_rows = Vec::new();
    let mut coarse_targets = Vec::new();
    let mut cls_fine = Vec::new();
    let mut cls_coarse = Vec::new();
    let mut anchor_coarse = Vec::new();
    let mut anchor_fine = Vec::new();
    let mut counts = LossCounts {
        batch_size: batch.len(),
        ..LossCounts::default()
    };
    for ex in batch {
        let hf = encode_graph(g, p, &ex.fine_input, &ex.fine_segments, Granularity::Fine, mode)?;
        let hc = encode_graph(g, p, &ex.coarse_input, &ex.coarse_segments, Granularity::Coarse, mode)?;
        if !ex.fine_mask.is_empty() {
            fine_rows.push(g.select_rows(hf, &ex.fine_mask.positions)?);
            fine_targets.extend(ex.fine_mask.original_ids.iter().map(|&i| i as usize));
        }
        if !ex.coarse_mask.is_empty() {
            coarse_rows.push(g.select_rows(hc, &ex.coarse_mask.positions)?);
            coarse_targets.extend(ex.coarse_mask.original_ids.iter().map(|&i| i as usize));
        }
        cls_fine.push(g.select_rows(hf, &[0])?);
        cls_coarse.push(g.select_rows(hc, &[0])?);
        counts.n_anchors += ex.anchors.len();
        if !config.no_tcl {
            for a in &ex.anchors.anchors {
                anchor_coarse.push(g.select_rows(hc, &[a.coarse_index])?);
                anchor_fine.push(g.mean_rows(hf, a.span.start, a.span.end)?);
            }
        }
    }
    counts.n_fine_masks = fine_targets.len();
    counts.n_coarse_masks = coarse_targets.len();

    let fine_term = if fine_rows.is_empty() {
        None
    } else {
        let rows = g.concat_rows(&fine_rows)?;
        Some(mlm_logits_graph(g, p, rows)?)
    };
    let coarse_term = if coarse_rows.is_empty() {
        None
    } else {
        let rows = g.concat_rows(&coarse_rows)?;
        Some(mlm_logits_graph(g, p, rows)?)
    };
    let mlm = losses::mlm_loss(
        g,
        fine_term.map(|logits| MlmTerm {
            logits,
            targets: &fine_targets,
        }),
        coarse_term.map(|logits| MlmTerm {
            logits,
            targets: &coarse_targets,
        }),
    )?;

    let tcl = if config.no_tcl {
        None
    } else if anchor_coarse.is_empty() {
        Some(g.scalar(0.0))
    } else {
        let c = g.concat_rows(&anchor_coarse)?;
        let f = g.concat_rows(&anchor_fine)?;
        Some(losses::token_contrastive_loss(g, c, f, config.tau, config.similarity)?)
    };
    let needs_cls = !config.no_scl || !config.no_sop;
    let (cf, cc) = if needs_cls {
        (Some(g.concat_rows(&cls_fine)?), Some(g.concat_rows(&cls_coarse)?))
    } else {
        (None, None)
    };
    let scl = match (config.no_scl, cf, cc) {
        (false, Some(f), Some(c)) => Some(losses::sentence_contrastive_loss(g, c, f, config.tau, config.similarity)?),
        _ => None,
    };
    let sop = match (config.no_sop, cf, cc) {
        (false, Some(f), Some(c)) => {
            let labels: Vec<usize> = batch.iter().map(|e| e.sop_label.code() as usize).collect();
            let fl = if config.sop_source.uses_fine() {
                Some(sop_logits_graph(g, p, f, Granularity::Fine)?)
            } else {
                None
            };
            let cl = if config.sop_source.uses_coarse() {
                Some(sop_logits_graph(g, p, c, Granularity::Coarse)?)
            } else {
                None
            };
            Some(losses::sop_loss(g, fl, cl, &labels)?)
        }
        _ => None,
    };
    let mut terms = vec![(mlm, 1.0)];
    if let Some(s) = sop {
        terms.push((s, config.lambda));
    }
    for t in [tcl, scl].into_iter().flatten() {
        terms.push((t, config.mu));
    }
    let total = g.lin_comb(&terms)?;
    Ok(Objective {
        total,
        mlm,
        tcl,
        scl,
        sop,
        counts,
    })
}

/// Parameters, optimizer state and random streams of a training run.
pub struct Trainer {
    params: ModelParams,
    optimizer: AdamW,
    config: TrainConfig,
    dropout_rng: Rng,
    step: usize,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if !params.all_finite() {
            return Err(Error::NonFinite("initial parameters".into()));
        }
        let decay = params.ids().map(|id| params.spec(id).decay).collect();
        let optimizer = AdamW::new(
            AdamWConfig {
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            params.tensors(),
            decay,
        )?;
        Ok(Trainer {
            params,
            optimizer,
            config,
            dropout_rng: seeded_rng(config.seed ^ 0x5eed_d80f),
            step: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Number of completed steps.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Forward, backward and one AdamW update.
    pub fn step(&mut self, batch: &[&MultiGrainedExample]) -> Result<LossBreakdown> {
        let lr = warmup_lr(self.step, self.config.lr, self.config.warmup_steps);
        let mut g = Graph::new();
        let mut bound = Bound::all(&self.params, true);
        let obj = batch_objective(
            &mut g,
            &mut bound,
            batch,
            &self.config,
            &mut Mode::Train(&mut self.dropout_rng),
        )?;
        let breakdown = obj.breakdown(&g, &self.config)?;
        let leaves: Vec<(ParamId, Var)> = bound.bound().collect();
        drop(bound);
        let grads = g.backward(obj.total)?;
        let mut pairs: Vec<(usize, &[f64])> = Vec::with_capacity(leaves.len());
        for (id, v) in leaves {
            if let Some(gr) = grads.get(v) {
                if gr.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {}", self.params.name(id))));
                }
                pairs.push((id.0, gr));
            }
        }
        self.optimizer.step(self.params.tensors_mut(), pairs, lr)?;
        self.step += 1;
        Ok(breakdown)
    }
}

/// Where training examples come from.
pub enum ExampleSource<'a> {
    /// A prepared set, reshuffled every epoch.
    Fixed(Vec<MultiGrainedExample>),
    /// Corpus lines, re-prepared (fresh masks and pairs) every epoch.
    Corpus { lines: Vec<String>, vocab: &'a Vocab },
}

/// Callbacks from [`train`].
pub trait TrainObserver {
    fn on_step(&mut self, _step: usize, _breakdown: &LossBreakdown) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _step: usize, _params: &ModelParams) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    /// 1-based step number.
    pub step: usize,
    pub breakdown: LossBreakdown,
}

/// Runs `config.steps` updates and returns the final parameters and one
/// metrics row per step.
pub fn train(
    params: ModelParams,
    source: ExampleSource<'_>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(ModelParams, Vec<MetricsRow>)> {
    let max_len = params.config().max_seq_len;
    let mut trainer = Trainer::new(params, *config)?;
    let mut data_rng = seeded_rng(config.seed);
    let prep = config.prepare_config(max_len);
    let mut log = Vec::with_capacity(config.steps);
    let mut pool: Vec<MultiGrainedExample> = match &source {
        ExampleSource::Fixed(v) => {
            if v.is_empty() {
                return Err(Error::Input("no training examples".into()));
            }
            v.clone()
        }
        ExampleSource::Corpus { .. } => Vec::new(),
    };
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    while trainer.steps_done() < config.steps {
        let exhausted = cursor >= order.len();
        let short_tail = order.len() >= config.batch_size && cursor + config.batch_size > order.len();
        if exhausted || short_tail {
            if let ExampleSource::Corpus { lines, vocab } = &source {
                pool = prepare_examples(lines.iter().map(String::as_str), vocab, &prep, &mut data_rng)?;
            }
            order = (0..pool.len()).collect();
            order.shuffle(&mut data_rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let batch: Vec<&MultiGrainedExample> = order[cursor..end].iter().map(|&i| &pool[i]).collect();
        cursor = end;
        if config.contrastive() && batch.len() < 2 {
            return Err(Error::Input("contrastive training needs at least 2 examples".into()));
        }
        let breakdown = trainer.step(&batch)?;
        let step = trainer.steps_done();
        observer.on_step(step, &breakdown)?;
        log.push(MetricsRow { step, breakdown });
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            observer.on_checkpoint(step, trainer.params())?;
        }
    }
    Ok((trainer.into_params(), log))
}

fn padded(ex: &MultiGrainedExample, fine_len: usize, coarse_len: usize, pad: TokenId) -> MultiGrainedExample {
    let mut e = ex.clone();
    e.fine_input.resize(fine_len, pad);
    e.fine_segments.resize(fine_len, 1);
    e.coarse_input.resize(coarse_len, pad);
    e.coarse_segments.resize(coarse_len, 1);
    e
}

/// Eval-mode objective of each example on its own. With `pad`, every
/// example is first right-padded with `[PAD]` to the longest fine and
/// coarse length in `examples`.
pub fn per_example_losses<P: ParamSource + ?Sized>(
    params: &P,
    examples: &[MultiGrainedExample],
    config: &TrainConfig,
    pad_id: Option<TokenId>,
) -> Result<Vec<LossBreakdown>> {
    let fine_len = examples.iter().map(|e| e.fine_input.len()).max().unwrap_or(0);
    let coarse_len = examples.iter().map(|e| e.coarse_input.len()).max().unwrap_or(0);
    let n = crate::model::count_params(params);
    examples
        .iter()
        .map(|ex| {
            let e = match pad_id {
                Some(pad) => padded(ex, fine_len, coarse_len, pad),
                None => ex.clone(),
            };
            let mut g = Graph::new();
            let mut bound = Bound::new(params, n, false);
            let obj = batch_objective(&mut g, &mut bound, &[&e], config, &mut Mode::Eval)?;
            obj.breakdown(&g, config)
        })
        .collect()
}

/// Character-encoder output for a text.
#[derive(Debug, Clone, PartialEq)]
pub struct FineEncoding {
    /// The `[CLS]` vector.
    pub cls: Vec<f64>,
    /// One row per framed position (`[CLS]`, characters, `[SEP]`).
    pub tokens: Tensor,
}

fn framed_fine(text: &str, vocab: &Vocab) -> Vec<TokenId> {
    let sp = vocab.specials();
    let mut ids = vec![sp.cls];
    ids.extend(tokenize::fine_ids(text, vocab));
    ids.push(sp.sep);
    ids
}

/// Character tokenizer and fine encoder only; no word segmentation and no
/// coarse parameter is involved.
pub fn encode_fine_only<P: ParamSource + ?Sized>(params: &P, text: &str, vocab: &Vocab) -> Result<FineEncoding> {
    let ids = framed_fine(text, vocab);
    let segs = vec![0u8; ids.len()];
    let enc = encode(params, &ids, &segs, Granularity::Fine, Mode::Eval)?;
    Ok(FineEncoding {
        cls: enc.hidden.row(0).to_vec(),
        tokens: enc.hidden,
    })
}

/// Unmasked eval-mode forward of both encoders on a single framed text.
pub fn joint_forward<P: ParamSource + ?Sized>(
    params: &P,
    text: &str,
    vocab: &Vocab,
) -> Result<(EncodedSequence, EncodedSequence)> {
    let tok = frame(&[&tokenize_multigrained(text, vocab)], vocab);
    let sep = vocab.specials().sep;
    let fine = encode(params, &tok.fine_ids, &segment_ids(&tok.fine_ids, sep), Granularity::Fine, Mode::Eval)?;
    let coarse = encode(
        params,
        &tok.coarse_ids,
        &segment_ids(&tok.coarse_ids, sep),
        Granularity::Coarse,
        Mode::Eval,
    )?;
    Ok((fine, coarse))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Classifier head learning rate.
    pub lr: f64,
    /// Encoder learning rate when it is not frozen.
    pub encoder_lr: f64,
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-2,
            encoder_lr: 1e-4,
            freeze_encoder: true,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub accuracy: f64,
    pub n_classes: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub final_train_loss: f64,
}

/// Fraction of equal entries.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct Head {
    tensors: Vec<Tensor>,
    opt: AdamW,
}

impl Head {
    fn new(d: usize, classes: usize) -> Result<Self> {
        let tensors = vec![Tensor::zeros(&[d, classes]), Tensor::zeros(&[classes])];
        let opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &tensors,
            vec![false, false],
        )?;
        Ok(Head { tensors, opt })
    }

    fn logits(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<(Var, [Var; 2])> {
        let mk = |g: &mut Graph, t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let w = mk(g, &self.tensors[0]);
        let b = mk(g, &self.tensors[1]);
        let y = g.matmul(x, w)?;
        Ok((g.add_row(y, b)?, [w, b]))
    }
}

/// Trains a linear classifier on the fine `[CLS]` vector and returns
/// accuracy on `dev`. With `freeze_encoder` the encoder is a fixed feature
/// extractor; otherwise the fine encoder and the embedding table are
/// updated too (on a copy of `params`).
pub fn finetune_classify(
    params: &ModelParams,
    vocab: &Vocab,
    train_set: &[(String, usize)],
    dev_set: &[(String, usize)],
    config: &FinetuneConfig,
) -> Result<FinetuneReport> {
    let mut classes: Vec<usize> = train_set.iter().map(|e| e.1).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Input("fine-tuning needs at least two classes".into()));
    }
    if dev_set.is_empty() || config.batch_size == 0 {
        return Err(Error::Input("empty dev set or zero batch size".into()));
    }
    let n_classes = train_set.iter().chain(dev_set).map(|e| e.1).max().unwrap_or(0) + 1;
    let d = params.config().d_model;
    let mut head = Head::new(d, n_classes)?;
    let mut rng = seeded_rng(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut last_loss = 0.0;

    let mut model = params.clone();
    let frozen_features: Vec<Vec<f64>> = if config.freeze_encoder {
        train_set
            .iter()
            .map(|(t, _)| encode_fine_only(params, t, vocab).map(|e| e.cls))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut model_opt = if config.freeze_encoder {
        None
    } else {
        let decay = model.ids().map(|id| model.spec(id).decay).collect();
        Some(AdamW::new(AdamWConfig::default(), model.tensors(), decay)?)
    };
    let mut dropout_rng = seeded_rng(config.seed ^ 0xf1e7);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set[i].1).collect();
            let mut g = Graph::new();
            let mut leaves: Vec<(ParamId, Var)> = Vec::new();
            let x = if model_opt.is_some() {
                let mut bound = Bound::all(&model, true);
                let mut rows = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let ids = framed_fine(&train_set[i].0, vocab);
                    let segs = vec![0u8; ids.len()];
                    let h = encode_graph(
                        &mut g,
                        &mut bound,
                        &ids,
                        &segs,
                        Granularity::Fine,
                        &mut Mode::Train(&mut dropout_rng),
                    )?;
                    rows.push(g.select_rows(h, &[0])?);
                }
                leaves = bound.bound().collect();
                g.concat_rows(&rows)?
            } else {
                let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| frozen_features[i].clone()).collect();
                g.constant(Tensor::from_rows(&rows)?)
            };
            let (logits, head_vars) = head.logits(&mut g, x, true)?;
            let loss = g.cross_entropy(logits, &labels)?;
            last_loss = g.value(loss).item();
            if !last_loss.is_finite() {
                return Err(Error::NonFinite("fine-tuning loss".into()));
            }
            let grads = g.backward(loss)?;
            let head_grads: Vec<(usize, &[f64])> = head_vars
                .iter()
                .enumerate()
                .filter_map(|(i, &v)| grads.get(v).map(|gr| (i, gr)))
                .collect();
            head.opt.step(&mut head.tensors, head_grads, config.lr)?;
            if let Some(opt) = model_opt.as_mut() {
                let pairs: Vec<(usize, &[f64])> =
                    leaves.iter().filter_map(|&(id, v)| grads.get(v).map(|gr| (id.0, gr))).collect();
                opt.step(model.tensors_mut(), pairs, config.encoder_lr)?;
            }
        }
    }

    let encoder: &ModelParams = if config.freeze_encoder { params } else { &model };
    let mut predicted = Vec::with_capacity(dev_set.len());
    for (text, _) in dev_set {
        let cls = encode_fine_only(encoder, text, vocab)?.cls;
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, d, cls)?);
        let (logits, _) = head.logits(&mut g, x, false)?;
        predicted.push(argmax(g.value(logits).data()));
    }
    let labels: Vec<usize> = dev_set.iter().map(|e| e.1).collect();
    Ok(FinetuneReport {
        accuracy: accuracy(&predicted, &labels),
        n_classes,
        train_size: train_set.len(),
        dev_size: dev_set.len(),
        final_train_loss: last_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::testutil::toy_vocab;

    fn vocab() -> Vocab {
        toy_vocab("abcdefgh。", &["ab", "cd", "efg", "gh"])
    }

    fn tiny() -> (Vocab, ModelParams) {
        let v = vocab();
        let p = init_params(ModelConfig::tiny(v.len()), &v, &mut seeded_rng(3)).unwrap();
        (v, p)
    }

    fn corpus() -> Vec<&'static str> {
        vec!["abcd。efgh。", "cdab。gh。abef。", "ab。", "cdgh。", "efgab。cd。"]
    }

    #[test]
    fn sentence_splitting_and_pairing() {
        assert_eq!(split_sentences("ab。cd！e"), vec!["ab。", "cd！", "e"]);
        assert!(split_sentences("  ").is_empty());
        let units = pairable_units(corpus());
        // "ab。" joins the next line
        assert_eq!(units.len(), 4);
        assert_eq!(units[2], vec!["ab。", "cdgh。"]);
    }

    #[test]
    fn prepared_examples_are_valid_and_seeded() {
        let v = vocab();
        let cfg = PrepareConfig::default();
        let a = prepare_examples(corpus(), &v, &cfg, &mut seeded_rng(1)).unwrap();
        let b = prepare_examples(corpus(), &v, &cfg, &mut seeded_rng(1)).unwrap();
        assert_eq!(a, b);
        for e in &a {
            e.validate(&v).unwrap();
        }
    }

    #[test]
    fn zero_swap_probability_keeps_order() {
        let v = vocab();
        let cfg = PrepareConfig {
            swap_prob: 0.0,
            ..PrepareConfig::default()
        };
        let ex = prepare_examples(corpus(), &v, &cfg, &mut seeded_rng(2)).unwrap();
        assert!(ex.iter().all(|e| e.sop_label == SopLabel::InOrder));
    }

    #[test]
    fn unpairable_corpus_is_an_error() {
        let v = vocab();
        let r = prepare_examples(["abcd"], &v, &PrepareConfig::default(), &mut seeded_rng(0));
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn truncation_fits_max_len() {
        let v = vocab();
        let cfg = PrepareConfig {
            max_seq_len: 10,
            ..PrepareConfig::default()
        };
        let e = build_example("abcdefgh", "ab", SopLabel::InOrder, &v, &cfg, &mut seeded_rng(0))
            .unwrap()
            .unwrap();
        assert!(e.tokens.fine_len() <= 10);
        e.validate(&v).unwrap();
        assert_eq!(e.tokens.text, "abcdab");
    }

    #[test]
    fn validation_rejects_tampering() {
        let v = vocab();
        let mut e = build_example("abcd", "efgh", SopLabel::Swapped, &v, &PrepareConfig::default(), &mut seeded_rng(0))
            .unwrap()
            .unwrap();
        e.validate(&v).unwrap();
        e.fine_segments[1] = 1;
        assert!(e.validate(&v).is_err());
    }

    fn examples(v: &Vocab) -> Vec<MultiGrainedExample> {
        prepare_examples(corpus(), v, &PrepareConfig::default(), &mut seeded_rng(5)).unwrap()
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let (v, p) = tiny();
        let ex = examples(&v);
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(p.clone(), cfg).unwrap();
        let b = t.step(&[&ex[0], &ex[1]]).unwrap();
        assert!(b.total > 0.0);
        assert_eq!(t.params(), &p);
    }

    #[test]
    fn breakdown_total_matches_weights() {
        let (v, p) = tiny();
        let ex = examples(&v);
        let cfg = TrainConfig {
            lambda: 0.7,
            mu: 0.3,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(p, cfg).unwrap();
        let b = t.step(&[&ex[0], &ex[1], &ex[2]]).unwrap();
        let expect = b.l_mlm + 0.7 * b.l_sop + 0.3 * (b.l_tcl + b.l_scl);
        assert!((b.total - expect).abs() < 1e-12);
        assert!(b.l_mlm >= 0.0 && b.l_sop >= 0.0 && b.l_tcl >= 0.0 && b.l_scl >= 0.0);
        assert_eq!(b.batch_size, 3);
    }

    #[test]
    fn ablation_zeroes_contrastive_terms() {
        let (v, p) = tiny();
        let ex = examples(&v);
        let cfg = TrainConfig {
            no_tcl: true,
            no_scl: true,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(p, cfg).unwrap();
        let b = t.step(&[&ex[0], &ex[1]]).unwrap();
        assert_eq!((b.l_tcl, b.l_scl, b.l_con), (0.0, 0.0, 0.0));
    }

    #[test]
    fn training_zero_steps_and_determinism() {
        let (v, p) = tiny();
        let cfg = TrainConfig {
            steps: 0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let lines: Vec<String> = corpus().into_iter().map(String::from).collect();
        let (q, log) = train(p.clone(), ExampleSource::Corpus { lines: lines.clone(), vocab: &v }, &cfg, &mut ()).unwrap();
        assert_eq!(q, p);
        assert!(log.is_empty());
        let cfg = TrainConfig { steps: 3, ..cfg };
        let a = train(p.clone(), ExampleSource::Corpus { lines: lines.clone(), vocab: &v }, &cfg, &mut ()).unwrap();
        let b = train(p, ExampleSource::Corpus { lines, vocab: &v }, &cfg, &mut ()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.len(), 3);
    }

    #[test]
    fn small_batch_rejected_with_contrastive_terms() {
        let (_, p) = tiny();
        let cfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(Trainer::new(p.clone(), cfg).is_err());
        let cfg = TrainConfig {
            batch_size: 1,
            no_tcl: true,
            no_scl: true,
            ..TrainConfig::default()
        };
        assert!(Trainer::new(p, cfg).is_ok());
    }

    #[test]
    fn fine_only_matches_joint_fine_branch() {
        let (v, p) = tiny();
        let f = encode_fine_only(&p, "abcdz", &v).unwrap();
        let (jf, _) = joint_forward(&p, "abcdz", &v).unwrap();
        assert_eq!(f.tokens, jf.hidden);
        assert_eq!(f.cls.len(), 16);
        assert_eq!(f.tokens.rows(), 7);
    }

    #[test]
    fn accuracy_of_constant_predictor() {
        assert_eq!(accuracy(&[0, 0, 0, 0], &[0, 1, 0, 1]), 0.5);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
    }

    #[test]
    fn finetune_rejects_single_class() {
        let (v, p) = tiny();
        let train = vec![("ab".into(), 0), ("cd".into(), 0)];
        let dev = vec![("ab".into(), 0)];
        assert!(finetune_classify(&p, &v, &train, &dev, &FinetuneConfig::default()).is_err());
    }
}
