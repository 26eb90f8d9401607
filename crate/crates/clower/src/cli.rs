//! `clower` subcommands.
//!
//! Usage errors (bad flags, missing input files, unknown settings) exit
//! with status 2; any other failure exits with 1. Every subcommand prints
//! its resolved configuration to stderr, one `# key=value` line each,
//! before doing any work.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use clower_core::analysis::{anchor_alignment_eval, embedding_similarity_report, GroupStats};
use clower_core::losses::LossBreakdown;
use clower_core::model::{init_params, ModelParams, ParamSource};
use clower_core::trainer::{
    encode_fine_only, finetune_classify, prepare_examples, train, ExampleSource, FinetuneConfig, PrepareConfig,
    TrainObserver,
};
use clower_core::masking::{AnchorConfig, MaskConfig};
use clower_core::vocab::{build_vocab, Vocab, VocabOptions};
use clower_core::{seeded_rng, synthetic};
use serde_json::json;

use crate::metrics::MetricsWriter;
use crate::settings::{parse_config_text, Settings};
use crate::{checkpoint, examples_file, vocab_file};

#[derive(Debug, Parser)]
#[command(name = "clower", version, about = "Multi-grained contrastive pre-training pipelines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect the shared character/word vocabulary from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Turn corpus lines into masked sentence-pair examples (JSON lines).
    Prepare(PrepareArgs),
    /// Pre-train both encoders; writes metrics and checkpoints.
    Pretrain(PretrainArgs),
    /// Word/character embedding similarity and anchor alignment report.
    Analyze(AnalyzeArgs),
    /// Encode a text with the character encoder only.
    Encode(EncodeArgs),
    /// Train a classifier on the character encoder's [CLS] vector.
    Finetune(FinetuneArgs),
    /// Write the bundled toy-grammar corpus.
    GenerateCorpus(GenerateCorpusArgs),
    /// Write a labeled toy dataset (`label<TAB>text` lines).
    GenerateClassification(GenerateClassificationArgs),
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = VocabOptions::default().max_words)]
    pub max_words: usize,
    #[arg(long, default_value_t = VocabOptions::default().min_word_freq)]
    pub min_freq: usize,
    #[arg(long, default_value_t = VocabOptions::default().max_word_len)]
    pub max_word_len: usize,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = MaskConfig::default().rate)]
    pub mask_rate: f64,
    #[arg(long, default_value_t = AnchorConfig::default().k)]
    pub k: usize,
    #[arg(long, default_value_t = 128)]
    pub max_seq_len: usize,
    #[arg(long, default_value_t = 0.5)]
    pub swap_prob: f64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Prepared examples, reused (reshuffled) every epoch.
    #[arg(long, required_unless_present = "corpus", conflicts_with = "corpus")]
    pub examples: Option<PathBuf>,
    /// Corpus lines, re-prepared with fresh masks every epoch.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
    /// `key=value` settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub no_tcl: bool,
    #[arg(long)]
    pub no_scl: bool,
    #[arg(long)]
    pub no_sop: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any setting as `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the vocabulary stored in the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Lines for the anchor alignment measurement.
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long)]
    pub per_word_csv: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long, default_value_t = AnchorConfig::default().k)]
    pub k: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub text: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// `label<TAB>text` lines.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub freeze_encoder: bool,
    #[arg(long, default_value_t = FinetuneConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = FinetuneConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = FinetuneConfig::default().encoder_lr)]
    pub encoder_lr: f64,
    #[arg(long, default_value_t = FinetuneConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = FinetuneConfig::default().seed)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenerateCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub lines: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenerateClassificationArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// A failure that maps to exit status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require_file(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", path.display())))
    }
}

fn print_config(pairs: &[(&str, String)]) {
    for (k, v) in pairs {
        eprintln!("# {k}={v}");
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).filter(|l| !l.trim().is_empty()).collect())
}

fn read_labeled(path: &Path) -> Result<Vec<(String, usize)>> {
    read_lines(path)?
        .into_iter()
        .enumerate()
        .map(|(n, l)| {
            let (label, text) = l
                .split_once('\t')
                .with_context(|| format!("{} line {}: expected label<TAB>text", path.display(), n + 1))?;
            let label = label
                .trim()
                .parse()
                .with_context(|| format!("{} line {}: bad label {label:?}", path.display(), n + 1))?;
            Ok((text.to_string(), label))
        })
        .collect()
}

fn checkpoint_and_vocab(dir: &Path, vocab: Option<&Path>) -> Result<(ModelParams, Vocab)> {
    require_file(&dir.join(checkpoint::MANIFEST))?;
    let params = checkpoint::load(dir)?;
    let vocab = match vocab {
        Some(p) => {
            require_file(p)?;
            vocab_file::load_vocab(p)?
        }
        None => checkpoint::load_vocab(dir)?
            .ok_or_else(|| usage(format!("{} holds no vocab.tsv; pass --vocab", dir.display())))?,
    };
    if vocab.len() != params.config().vocab_size {
        anyhow::bail!(
            "vocabulary has {} tokens but the checkpoint expects {}",
            vocab.len(),
            params.config().vocab_size
        );
    }
    Ok((params, vocab))
}

fn build_vocab_cmd(a: &BuildVocabArgs) -> Result<()> {
    require_file(&a.corpus)?;
    print_config(&[
        ("corpus", a.corpus.display().to_string()),
        ("max_words", a.max_words.to_string()),
        ("min_freq", a.min_freq.to_string()),
        ("max_word_len", a.max_word_len.to_string()),
    ]);
    let lines = read_lines(&a.corpus)?;
    let opts = VocabOptions {
        max_word_len: a.max_word_len,
        min_word_freq: a.min_freq,
        max_words: a.max_words,
    };
    let v = build_vocab(lines.iter().map(String::as_str), &opts)?;
    vocab_file::save_vocab(&v, &a.out)?;
    println!(
        "vocab: {} tokens ({} chars, {} words) -> {}",
        v.len(),
        v.char_ids().len(),
        v.word_ids().len(),
        a.out.display()
    );
    Ok(())
}

fn prepare_cmd(a: &PrepareArgs) -> Result<()> {
    require_file(&a.corpus)?;
    require_file(&a.vocab)?;
    print_config(&[
        ("corpus", a.corpus.display().to_string()),
        ("vocab", a.vocab.display().to_string()),
        ("seed", a.seed.to_string()),
        ("mask_rate", format!("{:?}", a.mask_rate)),
        ("k", a.k.to_string()),
        ("max_seq_len", a.max_seq_len.to_string()),
        ("swap_prob", format!("{:?}", a.swap_prob)),
    ]);
    let vocab = vocab_file::load_vocab(&a.vocab)?;
    let lines = read_lines(&a.corpus)?;
    let cfg = PrepareConfig {
        mask: MaskConfig::with_rate(a.mask_rate),
        anchors: AnchorConfig::with_k(a.k),
        swap_prob: a.swap_prob,
        max_seq_len: a.max_seq_len,
    };
    let ex = prepare_examples(lines.iter().map(String::as_str), &vocab, &cfg, &mut seeded_rng(a.seed))?;
    examples_file::save_examples(&ex, &a.out)?;
    let anchors: usize = ex.iter().map(|e| e.anchors.len()).sum();
    println!("examples: {} ({} anchors) -> {}", ex.len(), anchors, a.out.display());
    Ok(())
}

struct FileObserver<'a> {
    metrics: MetricsWriter<BufWriter<fs::File>>,
    out_dir: &'a Path,
    vocab: &'a Vocab,
}

fn external(e: impl std::fmt::Display) -> clower_core::Error {
    clower_core::Error::External(e.to_string())
}

impl TrainObserver for FileObserver<'_> {
    fn on_step(&mut self, step: usize, b: &LossBreakdown) -> clower_core::Result<()> {
        self.metrics.write(step, b).map_err(external)
    }

    fn on_checkpoint(&mut self, step: usize, params: &ModelParams) -> clower_core::Result<()> {
        let dir = self.out_dir.join(format!("checkpoint-step{step}"));
        checkpoint::save(&dir, params, Some(self.vocab)).map_err(external)
    }
}

/// Settings for `pretrain`: defaults, `--config`, environment, flags.
pub fn pretrain_settings<I>(a: &PretrainArgs, env: I) -> Result<Settings>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut s = Settings::default();
    if let Some(path) = &a.config {
        require_file(path)?;
        let text = fs::read_to_string(path)?;
        let layer = parse_config_text(&text).map_err(|e| usage(e.to_string()))?;
        s.apply(layer, "config file").map_err(|e| usage(e.to_string()))?;
    }
    s.apply_env(env).map_err(|e| usage(e.to_string()))?;
    let mut flags: Vec<(String, String)> = Vec::new();
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        flags.push((k.trim().into(), v.trim().into()));
    }
    if let Some(n) = a.steps {
        flags.push(("steps".into(), n.to_string()));
    }
    if let Some(n) = a.seed {
        flags.push(("seed".into(), n.to_string()));
    }
    for (on, key) in [(a.no_tcl, "no_tcl"), (a.no_scl, "no_scl"), (a.no_sop, "no_sop")] {
        if on {
            flags.push((key.into(), "true".into()));
        }
    }
    s.apply(flags, "command line").map_err(|e| usage(e.to_string()))?;
    Ok(s)
}

fn pretrain_cmd(a: &PretrainArgs) -> Result<()> {
    require_file(&a.vocab)?;
    if let Some(p) = a.examples.as_ref().or(a.corpus.as_ref()) {
        require_file(p)?;
    }
    let settings = pretrain_settings(a, std::env::vars())?;
    let vocab = vocab_file::load_vocab(&a.vocab)?;
    let model_cfg = settings.model_config(vocab.len()).map_err(|e| usage(e.to_string()))?;
    let train_cfg = settings.train_config().map_err(|e| usage(e.to_string()))?;
    for line in settings.resolved().lines() {
        eprintln!("# {line}");
    }
    eprintln!("# vocab_size={}", vocab.len());

    let source = match (&a.examples, &a.corpus) {
        (Some(p), _) => ExampleSource::Fixed(examples_file::load_examples(p, &vocab)?),
        (None, Some(p)) => ExampleSource::Corpus {
            lines: read_lines(p)?,
            vocab: &vocab,
        },
        (None, None) => return Err(usage("pass --examples or --corpus")),
    };
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    fs::write(a.out_dir.join("config.txt"), settings.resolved())?;
    let params = init_params(model_cfg, &vocab, &mut seeded_rng(train_cfg.seed))?;
    let metrics_path = a.out_dir.join("metrics.csv");
    let file = fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut observer = FileObserver {
        metrics: MetricsWriter::new(BufWriter::new(file))?,
        out_dir: &a.out_dir,
        vocab: &vocab,
    };
    let (params, log) = train(params, source, &train_cfg, &mut observer)?;
    observer.metrics.flush()?;
    checkpoint::save(&a.out_dir.join("checkpoint"), &params, Some(&vocab))?;
    if let Some(last) = log.last() {
        println!(
            "step {}: total {:.4} (mlm {:.4}, sop {:.4}, tcl {:.4}, scl {:.4})",
            last.step, last.breakdown.total, last.breakdown.l_mlm, last.breakdown.l_sop, last.breakdown.l_tcl, last.breakdown.l_scl
        );
    }
    println!("checkpoint -> {}", a.out_dir.join("checkpoint").display());
    Ok(())
}

fn group_json(g: &GroupStats) -> serde_json::Value {
    json!({
        "count": g.count,
        "mean_cosine": g.mean_cosine,
        "median_cosine": g.median_cosine,
        "mean_distance": g.mean_distance,
        "median_distance": g.median_distance,
    })
}

fn group_line(name: &str, g: &GroupStats) -> String {
    format!(
        "{name}: {} words, cosine median {:.6} mean {:.6}, distance median {:.6} mean {:.6}",
        g.count, g.median_cosine, g.mean_cosine, g.median_distance, g.mean_distance
    )
}

fn analyze_cmd(a: &AnalyzeArgs) -> Result<()> {
    if let Some(p) = &a.eval_corpus {
        require_file(p)?;
    }
    print_config(&[
        ("checkpoint", a.checkpoint.display().to_string()),
        ("k", a.k.to_string()),
        ("seed", a.seed.to_string()),
    ]);
    let (params, vocab) = checkpoint_and_vocab(&a.checkpoint, a.vocab.as_deref())?;
    let report = embedding_similarity_report(&params, &vocab)?;
    println!(
        "words: {} analyzed, {} skipped, two-character share {:.4}",
        report.words.len(),
        report.skipped,
        report.two_char_share
    );
    println!("{}", group_line("two-character", &report.two_char));
    println!("{}", group_line("longer", &report.longer));
    let alignment = match &a.eval_corpus {
        Some(p) => {
            let lines = read_lines(p)?;
            let r = anchor_alignment_eval(&params, lines.iter().map(String::as_str), &vocab, a.k, &mut seeded_rng(a.seed))?;
            println!(
                "anchor alignment: mean cosine {:.6} over {} anchors in {} lines",
                r.mean_cosine, r.n_anchors, r.n_sequences
            );
            Some(r)
        }
        None => None,
    };
    if let Some(path) = &a.per_word_csv {
        let mut out = String::from("word,chars,cosine,distance\n");
        for w in &report.words {
            out.push_str(&format!("{},{},{:?},{:?}\n", w.word, w.char_len, w.cosine, w.distance));
        }
        fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &a.json {
        let value = json!({
            "two_char": group_json(&report.two_char),
            "longer": group_json(&report.longer),
            "skipped": report.skipped,
            "two_char_share": report.two_char_share,
            "anchor_alignment": alignment.map(|r| json!({
                "mean_cosine": r.mean_cosine,
                "n_anchors": r.n_anchors,
                "n_sequences": r.n_sequences,
            })),
        });
        fs::write(path, serde_json::to_string_pretty(&value)? + "\n")?;
    }
    Ok(())
}

fn encode_cmd(a: &EncodeArgs) -> Result<()> {
    print_config(&[
        ("checkpoint", a.checkpoint.display().to_string()),
        ("seed", a.seed.to_string()),
    ]);
    let (params, vocab) = checkpoint_and_vocab(&a.checkpoint, a.vocab.as_deref())?;
    let enc = encode_fine_only(&params, &a.text, &vocab)?;
    let rows: Vec<&[f64]> = (0..enc.tokens.rows()).map(|r| enc.tokens.row(r)).collect();
    println!("{}", json!({ "cls": enc.cls, "tokens": rows }));
    Ok(())
}

fn finetune_cmd(a: &FinetuneArgs) -> Result<()> {
    require_file(&a.train)?;
    require_file(&a.dev)?;
    let cfg = FinetuneConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        encoder_lr: a.encoder_lr,
        freeze_encoder: a.freeze_encoder,
        seed: a.seed,
    };
    print_config(&[
        ("checkpoint", a.checkpoint.display().to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("lr", format!("{:?}", cfg.lr)),
        ("encoder_lr", format!("{:?}", cfg.encoder_lr)),
        ("freeze_encoder", cfg.freeze_encoder.to_string()),
        ("seed", cfg.seed.to_string()),
    ]);
    let (params, vocab) = checkpoint_and_vocab(&a.checkpoint, a.vocab.as_deref())?;
    let train_set = read_labeled(&a.train)?;
    let dev_set = read_labeled(&a.dev)?;
    let r = finetune_classify(&params, &vocab, &train_set, &dev_set, &cfg)?;
    println!(
        "accuracy {:.4} on {} dev examples ({} classes, final train loss {:.4})",
        r.accuracy, r.dev_size, r.n_classes, r.final_train_loss
    );
    Ok(())
}

fn generate_corpus_cmd(a: &GenerateCorpusArgs) -> Result<()> {
    print_config(&[("lines", a.lines.to_string()), ("seed", a.seed.to_string())]);
    let mut out = BufWriter::new(fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    for line in synthetic::corpus(a.lines, a.seed) {
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn generate_classification_cmd(a: &GenerateClassificationArgs) -> Result<()> {
    print_config(&[
        ("n", a.n.to_string()),
        ("classes", a.classes.to_string()),
        ("seed", a.seed.to_string()),
    ]);
    let mut out = BufWriter::new(fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    for (text, label) in synthetic::labeled_sentences(a.n, a.classes, a.seed) {
        writeln!(out, "{label}\t{text}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::BuildVocab(a) => build_vocab_cmd(a),
        Command::Prepare(a) => prepare_cmd(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Encode(a) => encode_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::GenerateCorpus(a) => generate_corpus_cmd(a),
        Command::GenerateClassification(a) => generate_classification_cmd(a),
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}
