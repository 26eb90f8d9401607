//! Prepared examples as JSON lines, one example per line, integers only.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use anyhow::{ensure, Context, Result};
use clower_core::masking::{Anchor, AnchorSet, MaskAction, MaskPlan};
use clower_core::segment::Span;
use clower_core::tokenize::MultiGrainedTokenization;
use clower_core::trainer::{MultiGrainedExample, SopLabel};
use clower_core::vocab::{TokenId, TokenKind, Vocab};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub positions: Vec<usize>,
    pub actions: Vec<u8>,
    pub original_ids: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub schema_version: u32,
    pub fine_ids: Vec<TokenId>,
    pub fine_segments: Vec<u8>,
    pub coarse_ids: Vec<TokenId>,
    pub coarse_segments: Vec<u8>,
    pub spans: Vec<[usize; 2]>,
    pub fine_mask: MaskRecord,
    pub coarse_mask: MaskRecord,
    pub fine_input: Vec<TokenId>,
    pub coarse_input: Vec<TokenId>,
    pub anchors: Vec<[usize; 3]>,
    pub sop_label: u8,
}

fn mask_record(p: &MaskPlan) -> MaskRecord {
    MaskRecord {
        positions: p.positions.clone(),
        actions: p.actions.iter().map(|a| a.code()).collect(),
        original_ids: p.original_ids.clone(),
    }
}

fn mask_plan(r: &MaskRecord) -> Result<MaskPlan> {
    Ok(MaskPlan {
        positions: r.positions.clone(),
        actions: r.actions.iter().map(|&c| MaskAction::from_code(c)).collect::<Result<_, _>>()?,
        original_ids: r.original_ids.clone(),
    })
}

impl From<&MultiGrainedExample> for ExampleRecord {
    fn from(e: &MultiGrainedExample) -> Self {
        ExampleRecord {
            schema_version: SCHEMA_VERSION,
            fine_ids: e.tokens.fine_ids.clone(),
            fine_segments: e.fine_segments.clone(),
            coarse_ids: e.tokens.coarse_ids.clone(),
            coarse_segments: e.coarse_segments.clone(),
            spans: e.tokens.spans.iter().map(|s| [s.start, s.end]).collect(),
            fine_mask: mask_record(&e.fine_mask),
            coarse_mask: mask_record(&e.coarse_mask),
            fine_input: e.fine_input.clone(),
            coarse_input: e.coarse_input.clone(),
            anchors: e
                .anchors
                .anchors
                .iter()
                .map(|a| [a.coarse_index, a.span.start, a.span.end])
                .collect(),
            sop_label: e.sop_label.code(),
        }
    }
}

/// Text of the framed segments, rebuilt from character ids; unknown
/// characters become U+FFFD.
fn surface(fine_ids: &[TokenId], vocab: &Vocab) -> String {
    let unk = vocab.specials().unk;
    fine_ids
        .iter()
        .filter(|&&id| (id as usize) < vocab.len())
        .filter_map(|&id| match vocab.kind(id) {
            TokenKind::Char => Some(vocab.token(id).to_string()),
            TokenKind::Special if id == unk => Some('\u{fffd}'.to_string()),
            _ => None,
        })
        .collect()
}

impl ExampleRecord {
    /// Converts back and checks every example invariant against `vocab`.
    pub fn into_example(self, vocab: &Vocab) -> Result<MultiGrainedExample> {
        ensure!(
            self.schema_version == SCHEMA_VERSION,
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            self.schema_version
        );
        let e = MultiGrainedExample {
            tokens: MultiGrainedTokenization {
                text: surface(&self.fine_ids, vocab),
                fine_ids: self.fine_ids,
                coarse_ids: self.coarse_ids,
                spans: self.spans.iter().map(|s| Span::new(s[0], s[1])).collect(),
            },
            fine_segments: self.fine_segments,
            coarse_segments: self.coarse_segments,
            fine_mask: mask_plan(&self.fine_mask)?,
            coarse_mask: mask_plan(&self.coarse_mask)?,
            fine_input: self.fine_input,
            coarse_input: self.coarse_input,
            anchors: AnchorSet {
                anchors: self
                    .anchors
                    .iter()
                    .map(|a| Anchor {
                        coarse_index: a[0],
                        span: Span::new(a[1], a[2]),
                    })
                    .collect(),
            },
            sop_label: SopLabel::from_code(self.sop_label)?,
        };
        e.validate(vocab)?;
        Ok(e)
    }
}

pub fn write_examples<W: Write>(examples: &[MultiGrainedExample], mut out: W) -> Result<()> {
    for e in examples {
        serde_json::to_writer(&mut out, &ExampleRecord::from(e))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_examples<R: BufRead>(input: R, vocab: &Vocab) -> Result<Vec<MultiGrainedExample>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord = serde_json::from_str(&line).with_context(|| format!("example line {}", n + 1))?;
        out.push(rec.into_example(vocab).with_context(|| format!("example line {}", n + 1))?);
    }
    Ok(out)
}

pub fn save_examples(examples: &[MultiGrainedExample], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_examples(examples, &mut buf)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

pub fn load_examples(path: &Path, vocab: &Vocab) -> Result<Vec<MultiGrainedExample>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_examples(io::BufReader::new(f), vocab).with_context(|| format!("reading {}", path.display()))
}
