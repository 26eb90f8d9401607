//! Pre-training objectives: multi-grained MLM, symmetric NT-Xent for the
//! token and sentence levels, sentence order prediction, and their weighted
//! total.

use alloc::format;
use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::{Error, Result};

/// Temperature used when none is configured.
pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

/// `½(L(A→B) + L(B→A))` with `L(A→B) = −(1/N) Σᵢ log softmaxⱼ(sim(Aᵢ, Bⱼ)/τ)ᵢ`.
/// Row `i` of `a` is the positive of row `i` of `b`; every row of the other
/// view, including the positive, is in the denominator. `N = 0` gives 0.
pub fn nt_xent_symmetric(g: &mut Graph, a: Var, b: Var, tau: f64, sim: Similarity) -> Result<Var> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Param(format!("temperature must be positive, got {tau}")));
    }
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape("nt_xent", &sa, &sb));
    }
    let n = sa[0];
    if n == 0 {
        return Ok(g.scalar(0.0));
    }
    let (a, b) = match sim {
        Similarity::Cosine => (g.normalize_rows(a)?, g.normalize_rows(b)?),
        Similarity::Dot => (a, b),
    };
    let scores = g.matmul_nt(a, b)?;
    let scores = g.scale(scores, 1.0 / tau);
    let diag: Vec<usize> = (0..n).collect();
    let ab = g.cross_entropy(scores, &diag)?;
    let scores_t = g.transpose(scores)?;
    let ba = g.cross_entropy(scores_t, &diag)?;
    g.lin_comb(&[(ab, 0.5), (ba, 0.5)])
}

/// Token-level term: coarse anchor rows against pooled fine rows.
pub fn token_contrastive_loss(g: &mut Graph, coarse: Var, pooled_fine: Var, tau: f64, sim: Similarity) -> Result<Var> {
    nt_xent_symmetric(g, coarse, pooled_fine, tau, sim)
}

/// Sentence-level term over the `[CLS]` rows of both encoders.
pub fn sentence_contrastive_loss(g: &mut Graph, cls_coarse: Var, cls_fine: Var, tau: f64, sim: Similarity) -> Result<Var> {
    nt_xent_symmetric(g, cls_coarse, cls_fine, tau, sim)
}

/// Masked-token predictions of one granularity: logits and target ids.
pub struct MlmTerm<'a> {
    pub logits: Var,
    pub targets: &'a [usize],
}

/// Sum over granularities of the mean cross-entropy at masked positions.
/// An absent granularity (no masks) contributes 0.
pub fn mlm_loss(g: &mut Graph, fine: Option<MlmTerm<'_>>, coarse: Option<MlmTerm<'_>>) -> Result<Var> {
    let mut terms = Vec::new();
    for term in [fine, coarse].into_iter().flatten() {
        if term.targets.is_empty() {
            continue;
        }
        terms.push((g.cross_entropy(term.logits, term.targets)?, 1.0));
    }
    if terms.is_empty() {
        return Ok(g.scalar(0.0));
    }
    g.lin_comb(&terms)
}

/// Which `[CLS]` classifiers the SOP loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SopSource {
    #[default]
    Both,
    Fine,
    Coarse,
}

impl SopSource {
    pub fn as_str(self) -> &'static str {
        match self {
            SopSource::Both => "both",
            SopSource::Fine => "fine",
            SopSource::Coarse => "coarse",
        }
    }

    pub fn uses_fine(self) -> bool {
        matches!(self, SopSource::Both | SopSource::Fine)
    }

    pub fn uses_coarse(self) -> bool {
        matches!(self, SopSource::Both | SopSource::Coarse)
    }
}

impl core::str::FromStr for SopSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(SopSource::Both),
            "fine" => Ok(SopSource::Fine),
            "coarse" => Ok(SopSource::Coarse),
            other => Err(Error::Param(format!("unknown SOP source {other:?}"))),
        }
    }
}

/// Binary cross-entropy of the SOP classifiers (M×2 logits each), averaged
/// over the classifiers present. Labels: 0 in order, 1 swapped.
pub fn sop_loss(g: &mut Graph, fine_logits: Option<Var>, coarse_logits: Option<Var>, labels: &[usize]) -> Result<Var> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Input(format!("SOP label {bad} is not 0 or 1")));
    }
    let present: Vec<Var> = [fine_logits, coarse_logits].into_iter().flatten().collect();
    if present.is_empty() || labels.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let w = 1.0 / present.len() as f64;
    let mut terms = Vec::with_capacity(present.len());
    for logits in present {
        terms.push((g.cross_entropy(logits, labels)?, w));
    }
    g.lin_comb(&terms)
}

/// Component values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_mlm: f64,
    pub l_tcl: f64,
    pub l_scl: f64,
    pub l_sop: f64,
    pub l_con: f64,
    pub total: f64,
    pub n_fine_masks: usize,
    pub n_coarse_masks: usize,
    pub n_anchors: usize,
    pub batch_size: usize,
}

/// Counts reported alongside the loss values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossCounts {
    pub n_fine_masks: usize,
    pub n_coarse_masks: usize,
    pub n_anchors: usize,
    pub batch_size: usize,
}

/// `total = l_mlm + λ·l_sop + μ·(l_tcl + l_scl)`.
pub fn total_loss(l_mlm: f64, l_sop: f64, l_tcl: f64, l_scl: f64, lambda: f64, mu: f64, counts: LossCounts) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) || !(mu >= 0.0) {
        return Err(Error::Param(format!("loss weights must be >= 0, got λ={lambda} μ={mu}")));
    }
    let l_con = l_tcl + l_scl;
    Ok(LossBreakdown {
        l_mlm,
        l_tcl,
        l_scl,
        l_sop,
        l_con,
        total: l_mlm + lambda * l_sop + mu * l_con,
        n_fine_masks: counts.n_fine_masks,
        n_coarse_masks: counts.n_coarse_masks,
        n_anchors: counts.n_anchors,
        batch_size: counts.batch_size,
    })
}

/// Evaluates [`nt_xent_symmetric`] on plain tensors.
pub fn nt_xent_value(a: &crate::Tensor, b: &crate::Tensor, tau: f64, sim: Similarity) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(a.clone());
    let b = g.constant(b.clone());
    let l = nt_xent_symmetric(&mut g, a, b, tau, sim)?;
    Ok(g.value(l).item())
}
