//! Shared token embedding, two independent post-layernorm transformer
//! encoders, and the MLM/SOP heads.
//!
//! One token table is read by the fine encoder, the coarse encoder and the
//! tied MLM output projection. Each encoder owns its positional and segment
//! tables and its layer stack.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::Rng as _;

use crate::graph::{Graph, Var};
use crate::math;
use crate::segment::Span;
use crate::tensor::Tensor;
use crate::vocab::{TokenId, TokenKind, Vocab};
use crate::{Error, Result, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Default CPU-sized model: d=64, 4 layers, 4 heads, 128 positions.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 256,
            max_seq_len: 128,
            vocab_size,
            dropout: 0.1,
            init_std: 0.02,
            layer_norm_eps: 1e-12,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 32,
            max_seq_len: 32,
            vocab_size,
            dropout: 0.0,
            init_std: 0.02,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Param(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return err(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len < 4 {
            return err(format!("max_seq_len {} must be at least 4", self.max_seq_len));
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 {
            return err("vocab_size and ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(self.init_std >= 0.0) || !(self.layer_norm_eps > 0.0) {
            return err("init_std must be >= 0 and layer_norm_eps > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Granularity {
    Fine,
    Coarse,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Fine => "fine",
            Granularity::Coarse => "coarse",
        }
    }
}

impl core::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine" => Ok(Granularity::Fine),
            "coarse" => Ok(Granularity::Coarse),
            other => Err(Error::Param(format!("unknown granularity {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_norm: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: Norm,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderParams {
    pub position: ParamId,
    pub segment: ParamId,
    pub embed_norm: Norm,
    pub layers: Vec<LayerParams>,
}

/// Where every parameter lives in [`ModelParams`]; a pure function of the
/// config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub token_embedding: ParamId,
    pub mlm_bias: ParamId,
    pub fine: EncoderParams,
    pub coarse: EncoderParams,
    pub sop_fine: Linear,
    pub sop_coarse: Linear,
}

impl Layout {
    pub fn encoder(&self, g: Granularity) -> &EncoderParams {
        match g {
            Granularity::Fine => &self.fine,
            Granularity::Coarse => &self.coarse,
        }
    }

    pub fn sop(&self, g: Granularity) -> Linear {
        match g {
            Granularity::Fine => self.sop_fine,
            Granularity::Coarse => self.sop_coarse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Whether AdamW applies weight decay.
    pub decay: bool,
    init: Init,
}

struct Declarer {
    specs: Vec<ParamSpec>,
}

impl Declarer {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init, decay: bool) -> ParamId {
        self.specs.push(ParamSpec {
            name,
            shape,
            decay,
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: self.add(format!("{prefix}.weight"), vec![fan_in, fan_out], Init::Normal, true),
            bias: self.add(format!("{prefix}.bias"), vec![fan_out], Init::Zeros, false),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones, false),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros, false),
        }
    }

    fn encoder(&mut self, g: Granularity, c: &ModelConfig) -> EncoderParams {
        let p = g.as_str();
        let d = c.d_model;
        let position = self.add(format!("{p}.position"), vec![c.max_seq_len, d], Init::Normal, true);
        let segment = self.add(format!("{p}.segment"), vec![2, d], Init::Normal, true);
        let embed_norm = self.norm(&format!("{p}.embed_norm"), d);
        let layers = (0..c.n_layers)
            .map(|i| {
                let l = format!("{p}.layer{i}");
                LayerParams {
                    query: self.linear(&format!("{l}.attn.query"), d, d),
                    key: self.linear(&format!("{l}.attn.key"), d, d),
                    value: self.linear(&format!("{l}.attn.value"), d, d),
                    output: self.linear(&format!("{l}.attn.output"), d, d),
                    attn_norm: self.norm(&format!("{l}.attn_norm"), d),
                    ffn_in: self.linear(&format!("{l}.ffn.in"), d, c.ffn_dim),
                    ffn_out: self.linear(&format!("{l}.ffn.out"), c.ffn_dim, d),
                    ffn_norm: self.norm(&format!("{l}.ffn_norm"), d),
                }
            })
            .collect();
        EncoderParams {
            position,
            segment,
            embed_norm,
            layers,
        }
    }
}

fn declare(config: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
    let mut d = Declarer { specs: Vec::new() };
    let token_embedding = d.add(
        "embeddings.token".into(),
        vec![config.vocab_size, config.d_model],
        Init::Normal,
        true,
    );
    let mlm_bias = d.add("mlm.bias".into(), vec![config.vocab_size], Init::Zeros, false);
    let fine = d.encoder(Granularity::Fine, config);
    let coarse = d.encoder(Granularity::Coarse, config);
    let sop_fine = d.linear("sop.fine", config.d_model, 2);
    let sop_coarse = d.linear("sop.coarse", config.d_model, 2);
    let layout = Layout {
        token_embedding,
        mlm_bias,
        fine,
        coarse,
        sop_fine,
        sop_coarse,
    };
    (layout, d.specs)
}

/// Read access to model parameters. Forward passes fetch every tensor
/// through [`ParamSource::tensor`], so a wrapper can observe which
/// parameters a computation touches.
pub trait ParamSource {
    fn config(&self) -> &ModelConfig;
    fn layout(&self) -> &Layout;
    fn tensor(&self, id: ParamId) -> &Tensor;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Layout,
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor>,
}

impl ParamSource for ModelParams {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }
}

impl ModelParams {
    /// All-zero parameters with the layout of `config`.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = declare(&config);
        let tensors = specs.iter().map(|s| Tensor::zeros(&s.shape)).collect();
        Ok(ModelParams {
            config,
            layout,
            specs,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, e.g. a loaded checkpoint.
    /// Names and shapes must match the layout of `config` exactly.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = ModelParams::zeros(config)?;
        if named.len() != params.specs.len() {
            return Err(Error::Input(format!(
                "expected {} parameters, got {}",
                params.specs.len(),
                named.len()
            )));
        }
        for (i, (name, tensor)) in named.into_iter().enumerate() {
            let spec = &params.specs[i];
            if spec.name != name {
                return Err(Error::Input(format!("parameter {i}: expected {}, got {name}", spec.name)));
            }
            if spec.shape != tensor.shape() {
                return Err(Error::shape("parameter", &spec.shape, tensor.shape()));
            }
            params.tensors[i] = tensor;
        }
        Ok(params)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.specs[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.specs.iter().map(|s| s.name.as_str()).zip(&self.tensors)
    }

    /// Encoder (or SOP head) a parameter belongs to; `None` for the shared
    /// embedding table and MLM bias.
    pub fn owner(&self, id: ParamId) -> Option<Granularity> {
        let name = self.name(id);
        if name.starts_with("fine.") || name.starts_with("sop.fine.") {
            Some(Granularity::Fine)
        } else if name.starts_with("coarse.") || name.starts_with("sop.coarse.") {
            Some(Granularity::Coarse)
        } else {
            None
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// The token embedding row of `id`.
    pub fn embedding(&self, id: TokenId) -> &[f64] {
        self.tensors[self.layout.token_embedding.0].row(id as usize)
    }
}

/// Standard normal truncated to ±2σ, via Box–Muller with rejection.
fn truncated_normal(rng: &mut Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let z = math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

/// Random initialization: weights from a ±2σ truncated normal with
/// `config.init_std`, biases zero, norm gains one. Afterwards every word
/// embedding row is overwritten by the mean of its characters' rows (words
/// with a character missing from `vocab` keep their random row).
pub fn init_params(config: ModelConfig, vocab: &Vocab, rng: &mut Rng) -> Result<ModelParams> {
    if config.vocab_size != vocab.len() {
        return Err(Error::Param(format!(
            "config vocab_size {} differs from vocabulary size {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    let mut params = ModelParams::zeros(config)?;
    for (spec, tensor) in params.specs.iter().zip(params.tensors.iter_mut()) {
        match spec.init {
            Init::Normal => {
                for v in tensor.data_mut() {
                    *v = truncated_normal(rng) * config.init_std;
                }
            }
            Init::Zeros => {}
            Init::Ones => tensor.data_mut().fill(1.0),
        }
    }
    let d = config.d_model;
    let table = params.layout.token_embedding;
    for &wid in vocab.word_ids() {
        let char_ids: Option<Vec<TokenId>> = vocab.token(wid).chars().map(|c| vocab.char_id(c)).collect();
        let Some(char_ids) = char_ids else { continue };
        let e = &params.tensors[table.0];
        let mean = math::mean_of_rows(char_ids.iter().map(|&c| e.row(c as usize)), d);
        params.tensors[table.0].row_mut(wid as usize).copy_from_slice(&mean);
    }
    Ok(params)
}

/// Graph leaves for parameters, created on first use.
pub struct Bound<'p, P: ParamSource + ?Sized> {
    source: &'p P,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p, P: ParamSource + ?Sized> Bound<'p, P> {
    /// `trainable` leaves receive gradients; otherwise they are constants.
    pub fn new(source: &'p P, count: usize, trainable: bool) -> Self {
        Bound {
            source,
            vars: vec![None; count],
            trainable,
        }
    }

    /// Uses existing leaves, one per parameter in declaration order; the
    /// source then only supplies the config and layout.
    pub fn from_vars(source: &'p P, vars: &[Var]) -> Self {
        Bound {
            source,
            vars: vars.iter().copied().map(Some).collect(),
            trainable: true,
        }
    }

    pub fn source(&self) -> &'p P {
        self.source
    }

    pub fn config(&self) -> &'p ModelConfig {
        self.source.config()
    }

    pub fn layout(&self) -> &'p Layout {
        self.source.layout()
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.source.tensor(id).clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.vars[id.0] = Some(v);
        v
    }

    /// Parameters bound so far, with their leaves.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

impl<'p> Bound<'p, ModelParams> {
    pub fn all(source: &'p ModelParams, trainable: bool) -> Self {
        Bound::new(source, source.len(), trainable)
    }
}

/// Dropout switch for a forward pass.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    fn dropout(&mut self, g: &mut Graph, x: Var, rate: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => g.dropout(x, rate, rng),
        }
    }
}

pub fn linear<P: ParamSource + ?Sized>(
    g: &mut Graph,
    p: &mut Bound<'_, P>,
    x: Var,
    lin: Linear,
) -> Result<Var> {
    let w = p.var(g, lin.weight);
    let b = p.var(g, lin.bias);
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn norm<P: ParamSource + ?Sized>(g: &mut Graph, p: &mut Bound<'_, P>, x: Var, n: Norm) -> Result<Var> {
    let gain = p.var(g, n.gain);
    let bias = p.var(g, n.bias);
    g.layer_norm(x, gain, bias, p.config().layer_norm_eps)
}

/// Runs one encoder on `ids` (with per-position segment ids) and returns
/// the L×d hidden states. `[PAD]` (id 0) positions are hidden from
/// attention as keys.
pub fn encode_graph<P: ParamSource + ?Sized>(
    g: &mut Graph,
    p: &mut Bound<'_, P>,
    ids: &[TokenId],
    segments: &[u8],
    granularity: Granularity,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let config = *p.config();
    let len = ids.len();
    if len == 0 {
        return Err(Error::Input("cannot encode an empty sequence".into()));
    }
    if len > config.max_seq_len {
        return Err(Error::TooLong {
            len,
            max: config.max_seq_len,
        });
    }
    if segments.len() != len {
        return Err(Error::shape("encode segments", &[len], &[segments.len()]));
    }
    let enc = p.layout().encoder(granularity);
    let ids_us: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let segs: Vec<usize> = segments.iter().map(|&s| s as usize).collect();
    let positions: Vec<usize> = (0..len).collect();

    let table = p.var(g, p.layout().token_embedding);
    let tok = g.gather(table, &ids_us)?;
    let pos_table = p.var(g, enc.position);
    let pos = g.gather(pos_table, &positions)?;
    let seg_table = p.var(g, enc.segment);
    let seg = g.gather(seg_table, &segs)?;
    let x = g.add(tok, pos)?;
    let x = g.add(x, seg)?;
    let x = norm(g, p, x, enc.embed_norm)?;
    let mut x = mode.dropout(g, x, config.dropout)?;

    let key_mask: Vec<bool> = ids.iter().map(|&id| id != 0).collect();
    let key_mask = if key_mask.iter().all(|&k| k) { None } else { Some(key_mask) };
    let dh = config.head_dim();
    let scale = 1.0 / math::sqrt(dh as f64);

    for layer in &enc.layers {
        let q = linear(g, p, x, layer.query)?;
        let k = linear(g, p, x, layer.key)?;
        let v = linear(g, p, x, layer.value)?;
        let mut heads = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let probs = g.softmax_rows(scores, key_mask.as_deref())?;
            heads.push(g.matmul(probs, vh)?);
        }
        let attn = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let attn = linear(g, p, attn, layer.output)?;
        let attn = mode.dropout(g, attn, config.dropout)?;
        let res = g.add(x, attn)?;
        x = norm(g, p, res, layer.attn_norm)?;

        let h = linear(g, p, x, layer.ffn_in)?;
        let h = g.gelu(h);
        let h = linear(g, p, h, layer.ffn_out)?;
        let h = mode.dropout(g, h, config.dropout)?;
        let res = g.add(x, h)?;
        x = norm(g, p, res, layer.ffn_norm)?;
    }
    Ok(x)
}

/// Tied MLM projection: `rows · Eᵀ + bias`.
pub fn mlm_logits_graph<P: ParamSource + ?Sized>(g: &mut Graph, p: &mut Bound<'_, P>, rows: Var) -> Result<Var> {
    let table = p.var(g, p.layout().token_embedding);
    let bias = p.var(g, p.layout().mlm_bias);
    let logits = g.matmul_nt(rows, table)?;
    g.add_row(logits, bias)
}

/// SOP classifier logits (1×2 per input row).
pub fn sop_logits_graph<P: ParamSource + ?Sized>(
    g: &mut Graph,
    p: &mut Bound<'_, P>,
    cls_rows: Var,
    granularity: Granularity,
) -> Result<Var> {
    let head = p.layout().sop(granularity);
    linear(g, p, cls_rows, head)
}

/// Hidden states of one encoded sequence; row 0 is `[CLS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub hidden: Tensor,
    pub granularity: Granularity,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.rows() == 0
    }
}

/// Forward pass without gradient tracking.
pub fn encode<P: ParamSource + ?Sized>(
    params: &P,
    ids: &[TokenId],
    segments: &[u8],
    granularity: Granularity,
    mut mode: Mode<'_>,
) -> Result<EncodedSequence> {
    let mut g = Graph::new();
    let mut bound = Bound::new(params, count_params(params), false);
    let h = encode_graph(&mut g, &mut bound, ids, segments, granularity, &mut mode)?;
    Ok(EncodedSequence {
        hidden: g.value(h).clone(),
        granularity,
    })
}

pub(crate) fn count_params<P: ParamSource + ?Sized>(params: &P) -> usize {
    let l = params.layout();
    // The SOP coarse bias is declared last.
    l.sop_coarse.bias.0 + 1
}

/// Mean of hidden rows `span.start..span.end` (framed positions).
pub fn pool_anchor(enc: &EncodedSequence, span: Span) -> Result<Vec<f64>> {
    if span.is_empty() || span.end > enc.len() {
        return Err(Error::Index {
            what: "anchor span end",
            index: span.end,
            bound: enc.len(),
        });
    }
    let d = enc.hidden.cols();
    Ok(math::mean_of_rows((span.start..span.end).map(|r| enc.hidden.row(r)), d))
}

/// The `[CLS]` row.
pub fn cls(enc: &EncodedSequence) -> Vec<f64> {
    enc.hidden.row(0).to_vec()
}

/// MLM logits for selected rows of an encoded sequence.
pub fn mlm_logits<P: ParamSource + ?Sized>(params: &P, enc: &EncodedSequence, positions: &[usize]) -> Result<Tensor> {
    let v = params.config().vocab_size;
    if positions.is_empty() {
        return Ok(Tensor::zeros(&[0, v]));
    }
    let mut g = Graph::new();
    let mut bound = Bound::new(params, count_params(params), false);
    let h = g.constant(enc.hidden.clone());
    let rows = g.select_rows(h, positions)?;
    let logits = mlm_logits_graph(&mut g, &mut bound, rows)?;
    Ok(g.value(logits).clone())
}

/// Wraps a [`ParamSource`] and counts reads of each parameter.
pub struct ReadCounter<'p, P: ParamSource + ?Sized> {
    inner: &'p P,
    reads: RefCell<Vec<usize>>,
}

impl<'p, P: ParamSource + ?Sized> ReadCounter<'p, P> {
    pub fn new(inner: &'p P) -> Self {
        ReadCounter {
            inner,
            reads: RefCell::new(vec![0; count_params(inner)]),
        }
    }

    pub fn reads(&self, id: ParamId) -> usize {
        self.reads.borrow()[id.0]
    }

    pub fn read_ids(&self) -> Vec<ParamId> {
        self.reads
            .borrow()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}

impl<P: ParamSource + ?Sized> ParamSource for ReadCounter<'_, P> {
    fn config(&self) -> &ModelConfig {
        self.inner.config()
    }

    fn layout(&self) -> &Layout {
        self.inner.layout()
    }

    fn tensor(&self, id: ParamId) -> &Tensor {
        self.reads.borrow_mut()[id.0] += 1;
        self.inner.tensor(id)
    }
}

/// Character count check used by the word-init rule and analysis.
pub(crate) fn word_char_ids(vocab: &Vocab, id: TokenId) -> Option<Vec<TokenId>> {
    if vocab.kind(id) != TokenKind::Word {
        return None;
    }
    vocab.token(id).chars().map(|c| vocab.char_id(c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::toy_vocab;
    use crate::tokenize::{frame, segment_ids, tokenize_multigrained};

    fn setup() -> (Vocab, ModelParams) {
        let v = toy_vocab("abcdefgh", &["ab", "cd", "efg"]);
        let mut c = ModelConfig::tiny(v.len());
        c.dropout = 0.1;
        let p = init_params(c, &v, &mut crate::seeded_rng(11)).unwrap();
        (v, p)
    }

    fn framed_ids(v: &Vocab, text: &str) -> (Vec<TokenId>, Vec<u8>) {
        let t = frame(&[&tokenize_multigrained(text, v)], v);
        let s = segment_ids(&t.fine_ids, v.specials().sep);
        (t.fine_ids, s)
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::desk(100);
        c.validate().unwrap();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(100);
        c.max_seq_len = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn word_rows_are_mean_of_char_rows() {
        let (v, p) = setup();
        let ab = p.embedding(v.id("ab").unwrap());
        let a = p.embedding(v.id("a").unwrap());
        let b = p.embedding(v.id("b").unwrap());
        for i in 0..ab.len() {
            assert_eq!(ab[i], (a[i] + b[i]) / 2.0);
        }
    }

    #[test]
    fn init_is_deterministic_and_leaves_chars_random() {
        let (v, p) = setup();
        let q = init_params(*p.config(), &v, &mut crate::seeded_rng(11)).unwrap();
        assert_eq!(p, q);
        let a = p.embedding(v.id("a").unwrap());
        assert!(a.iter().all(|x| x.abs() <= 0.04));
        assert!(a.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn encode_shape_and_eval_determinism() {
        let (v, p) = setup();
        let (ids, segs) = framed_ids(&v, "abcde");
        let a = encode(&p, &ids, &segs, Granularity::Fine, Mode::Eval).unwrap();
        let b = encode(&p, &ids, &segs, Granularity::Fine, Mode::Eval).unwrap();
        assert_eq!(a.hidden.shape(), &[ids.len(), 16]);
        assert_eq!(a, b);
        assert_eq!(cls(&a), a.hidden.row(0));
        assert_eq!(cls(&a).len(), 16);
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let (v, p) = setup();
        let (ids, segs) = framed_ids(&v, "abcde");
        let e = encode(&p, &ids, &segs, Granularity::Fine, Mode::Eval).unwrap();
        let mut rng = crate::seeded_rng(1);
        let t = encode(&p, &ids, &segs, Granularity::Fine, Mode::Train(&mut rng)).unwrap();
        assert_ne!(e, t);
    }

    #[test]
    fn swapping_tokens_changes_output() {
        let (v, p) = setup();
        let (ids, segs) = framed_ids(&v, "abcde");
        let mut swapped = ids.clone();
        swapped.swap(1, 3);
        let a = encode(&p, &ids, &segs, Granularity::Fine, Mode::Eval).unwrap();
        let b = encode(&p, &swapped, &segs, Granularity::Fine, Mode::Eval).unwrap();
        assert_ne!(a.hidden.row(1), b.hidden.row(3));
        assert_ne!(a.hidden.row(0), b.hidden.row(0));
    }

    #[test]
    fn over_length_input_is_rejected() {
        let (_, p) = setup();
        let ids = vec![5; 33];
        let segs = vec![0; 33];
        assert!(matches!(
            encode(&p, &ids, &segs, Granularity::Coarse, Mode::Eval),
            Err(Error::TooLong { len: 33, max: 32 })
        ));
    }

    #[test]
    fn trailing_padding_leaves_real_rows_unchanged() {
        let (v, p) = setup();
        let (ids, segs) = framed_ids(&v, "abcdefg");
        let solo = encode(&p, &ids, &segs, Granularity::Fine, Mode::Eval).unwrap();
        let mut padded = ids.clone();
        let mut psegs = segs.clone();
        padded.extend([0; 5]);
        psegs.extend([1; 5]);
        let pad = encode(&p, &padded, &psegs, Granularity::Fine, Mode::Eval).unwrap();
        for r in 0..ids.len() {
            for (x, y) in solo.hidden.row(r).iter().zip(pad.hidden.row(r)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pool_anchor_means_rows() {
        let hidden = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 6.0, 5.0, 7.0]).unwrap();
        let enc = EncodedSequence {
            hidden,
            granularity: Granularity::Fine,
        };
        assert_eq!(pool_anchor(&enc, Span::new(1, 2)).unwrap(), vec![3.0, 6.0]);
        assert_eq!(pool_anchor(&enc, Span::new(0, 2)).unwrap(), vec![2.0, 4.0]);
        assert!(pool_anchor(&enc, Span::new(2, 2)).is_err());
        assert!(pool_anchor(&enc, Span::new(2, 4)).is_err());
    }

    #[test]
    fn mlm_logits_shapes() {
        let (v, p) = setup();
        let (ids, segs) = framed_ids(&v, "abc");
        let enc = encode(&p, &ids, &segs, Granularity::Fine, Mode::Eval).unwrap();
        assert_eq!(mlm_logits(&p, &enc, &[1, 2]).unwrap().shape(), &[2, v.len()]);
        assert_eq!(mlm_logits(&p, &enc, &[]).unwrap().shape(), &[0, v.len()]);
        assert!(mlm_logits(&p, &enc, &[9]).is_err());
    }

    #[test]
    fn encoders_have_disjoint_parameters() {
        let (_, p) = setup();
        let fine: Vec<ParamId> = p.ids().filter(|&i| p.owner(i) == Some(Granularity::Fine)).collect();
        let coarse: Vec<ParamId> = p.ids().filter(|&i| p.owner(i) == Some(Granularity::Coarse)).collect();
        assert_eq!(fine.len(), coarse.len());
        assert!(fine.iter().all(|f| !coarse.contains(f)));
        assert_eq!(p.owner(p.layout().token_embedding), None);
    }
}
