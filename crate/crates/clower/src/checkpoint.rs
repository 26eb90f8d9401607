//! Checkpoint directories: `manifest.txt` (config plus one line per
//! parameter with name, shape and byte offset), `weights.bin` (every
//! parameter as little-endian `f64`, in manifest order) and an optional
//! `vocab.tsv`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use clower_core::model::{ModelConfig, ModelParams, ParamSource};
use clower_core::vocab::Vocab;
use clower_core::Tensor;

use crate::vocab_file;

pub const MANIFEST: &str = "manifest.txt";
pub const WEIGHTS: &str = "weights.bin";
pub const VOCAB: &str = "vocab.tsv";
const FORMAT_LINE: &str = "clower-checkpoint 1";

fn config_lines(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("d_model", c.d_model.to_string()),
        ("n_layers", c.n_layers.to_string()),
        ("n_heads", c.n_heads.to_string()),
        ("ffn_dim", c.ffn_dim.to_string()),
        ("max_seq_len", c.max_seq_len.to_string()),
        ("vocab_size", c.vocab_size.to_string()),
        // {:?} on f64 round-trips exactly
        ("dropout", format!("{:?}", c.dropout)),
        ("init_std", format!("{:?}", c.init_std)),
        ("layer_norm_eps", format!("{:?}", c.layer_norm_eps)),
    ]
}

pub fn manifest_text(params: &ModelParams) -> String {
    let mut s = String::new();
    writeln!(s, "{FORMAT_LINE}").unwrap();
    for (k, v) in config_lines(params.config()) {
        writeln!(s, "config {k} {v}").unwrap();
    }
    let mut offset = 0usize;
    for (name, t) in params.named() {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(s, "param {name} {} {offset}", shape.join("x")).unwrap();
        offset += t.len() * 8;
    }
    s
}

pub fn weight_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.num_elements() * 8);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes a checkpoint into `dir`, creating it if needed.
pub fn save(dir: &Path, params: &ModelParams, vocab: Option<&Vocab>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(MANIFEST), manifest_text(params))?;
    fs::write(dir.join(WEIGHTS), weight_bytes(params))?;
    if let Some(v) = vocab {
        vocab_file::save_vocab(v, &dir.join(VOCAB))?;
    }
    Ok(())
}

fn parse_config(lines: &[(String, String)]) -> Result<ModelConfig> {
    let get = |k: &str| -> Result<&str> {
        lines
            .iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .with_context(|| format!("manifest lacks config {k}"))
    };
    let us = |k: &str| -> Result<usize> { get(k)?.parse().with_context(|| format!("config {k}")) };
    let fl = |k: &str| -> Result<f64> { get(k)?.parse().with_context(|| format!("config {k}")) };
    Ok(ModelConfig {
        d_model: us("d_model")?,
        n_layers: us("n_layers")?,
        n_heads: us("n_heads")?,
        ffn_dim: us("ffn_dim")?,
        max_seq_len: us("max_seq_len")?,
        vocab_size: us("vocab_size")?,
        dropout: fl("dropout")?,
        init_std: fl("init_std")?,
        layer_norm_eps: fl("layer_norm_eps")?,
    })
}

/// Rebuilds parameters from manifest text and weight bytes.
pub fn decode(manifest: &str, weights: &[u8]) -> Result<ModelParams> {
    let mut lines = manifest.lines();
    ensure!(lines.next() == Some(FORMAT_LINE), "not a checkpoint manifest");
    let mut config = Vec::new();
    let mut named = Vec::new();
    for (n, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(' ').collect();
        match cols.as_slice() {
            ["config", k, v] => config.push((k.to_string(), v.to_string())),
            ["param", name, shape, offset] => {
                let shape: Vec<usize> = if shape.is_empty() {
                    Vec::new()
                } else {
                    shape.split('x').map(str::parse).collect::<Result<_, _>>()?
                };
                let offset: usize = offset.parse()?;
                let len: usize = shape.iter().product();
                let end = offset + len * 8;
                ensure!(end <= weights.len(), "parameter {name} runs past the end of the weights");
                let data = weights[offset..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                named.push((name.to_string(), Tensor::new(shape, data)?));
            }
            [""] => {}
            _ => bail!("manifest line {}: unrecognized {line:?}", n + 2),
        }
    }
    let config = parse_config(&config)?;
    let params = ModelParams::from_named(config, named)?;
    ensure!(
        params.num_elements() * 8 == weights.len(),
        "weights hold {} bytes, manifest describes {}",
        weights.len(),
        params.num_elements() * 8
    );
    Ok(params)
}

pub fn load(dir: &Path) -> Result<ModelParams> {
    let manifest = fs::read_to_string(dir.join(MANIFEST)).with_context(|| format!("reading {}", dir.join(MANIFEST).display()))?;
    let weights = fs::read(dir.join(WEIGHTS)).with_context(|| format!("reading {}", dir.join(WEIGHTS).display()))?;
    decode(&manifest, &weights).with_context(|| format!("loading checkpoint {}", dir.display()))
}

/// The vocabulary stored next to a checkpoint, if any.
pub fn load_vocab(dir: &Path) -> Result<Option<Vocab>> {
    let p = dir.join(VOCAB);
    if p.exists() {
        Ok(Some(vocab_file::load_vocab(&p)?))
    } else {
        Ok(None)
    }
}
