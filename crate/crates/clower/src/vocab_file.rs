//! Vocabulary as tab-separated `id<TAB>kind<TAB>token` lines.
//!
//! Tokens never contain tabs or line breaks, so no quoting is needed; the
//! token column is taken verbatim (a space is a valid character token).

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use clower_core::vocab::{TokenKind, Vocab};

pub fn write_vocab<W: Write>(vocab: &Vocab, mut out: W) -> io::Result<()> {
    for (id, kind, token) in vocab.iter() {
        writeln!(out, "{id}\t{kind}\t{token}")?;
    }
    Ok(())
}

pub fn read_vocab<R: BufRead>(input: R) -> Result<Vocab> {
    let mut entries = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let mut cols = line.splitn(3, '\t');
        let (Some(id), Some(kind), Some(token)) = (cols.next(), cols.next(), cols.next()) else {
            bail!("vocab line {}: expected id, kind and token", n + 1);
        };
        let id: usize = id.parse().with_context(|| format!("vocab line {}: bad id {id:?}", n + 1))?;
        if id != entries.len() {
            bail!("vocab line {}: id {id} out of sequence", n + 1);
        }
        let kind: TokenKind = kind.parse()?;
        entries.push((kind, token.to_string()));
    }
    Ok(Vocab::from_entries(entries)?)
}

pub fn save_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_vocab(vocab, &mut buf)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_vocab(io::BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}
