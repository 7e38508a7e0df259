//! Corpus JSONL, the `CFS1` parameter format and checkpoint directories.
//!
//! `CFS1` layout (all integers little-endian `u32`):
//!
//! ```text
//! b"CFS1" | count | { name_len | name (UTF-8) | rank | dims[rank] | f64 LE values }*
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use cfsum_core::data::{RawSample, Vocabulary};
use cfsum_core::model::{Model, ModelConfig};
use cfsum_core::tensor::ParamStore;

const MAGIC: &[u8; 4] = b"CFS1";

/// Read a JSONL corpus; blank lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<RawSample>> {
    let file = File::open(path).with_context(|| format!("opening corpus {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("{}:{}: read error", path.display(), i + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: RawSample =
            serde_json::from_str(&line).with_context(|| format!("{}:{}: malformed sample", path.display(), i + 1))?;
        sample
            .validate()
            .with_context(|| format!("{}:{}: invalid sample", path.display(), i + 1))?;
        out.push(sample);
    }
    ensure!(!out.is_empty(), "corpus {} is empty", path.display());
    Ok(out)
}

pub fn write_corpus(path: &Path, corpus: &[RawSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for s in corpus {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).context("value does not fit in u32")?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialise every parameter in store order.
pub fn encode_params(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, store.len())?;
    for (_, p) in store.iter() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.shape.len())?;
        for &d in &p.shape {
            put_u32(&mut out, d)?;
        }
        for v in &p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(
            self.pos + n <= self.buf.len(),
            "truncated checkpoint: need {n} bytes at offset {}",
            self.pos
        );
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamStore> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        bail!("not a CFS1 checkpoint (bad magic)");
    }
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?).context("parameter name is not UTF-8")?.to_owned();
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = c
            .take(n * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        store.add(name, &shape, values)?;
    }
    ensure!(c.pos == bytes.len(), "{} trailing bytes after checkpoint", bytes.len() - c.pos);
    Ok(store)
}

pub fn save_params(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, encode_params(store)?).with_context(|| format!("writing {}", path.display()))
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read_to_end(&mut bytes)?;
    decode_params(&bytes).with_context(|| format!("reading {}", path.display()))
}

/// Files making up one checkpoint directory.
pub struct CheckpointPaths {
    pub params: PathBuf,
    pub config: PathBuf,
    pub vocab: PathBuf,
}

impl CheckpointPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            params: dir.join("model.cfs"),
            config: dir.join("config.json"),
            vocab: dir.join("vocab.json"),
        }
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Write parameters, model configuration and vocabulary into `dir`.
pub fn save_checkpoint(dir: &Path, params: &ParamStore, config: &ModelConfig, vocab: &Vocabulary) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let paths = CheckpointPaths::new(dir);
    save_params(&paths.params, params)?;
    write_json(&paths.config, config)?;
    write_json(&paths.vocab, vocab)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, Vocabulary)> {
    let paths = CheckpointPaths::new(dir);
    let config: ModelConfig = read_json(&paths.config)?;
    let vocab: Vocabulary = read_json(&paths.vocab)?;
    ensure!(
        vocab.len() == config.vocab_size,
        "vocabulary has {} tokens but the model expects {}",
        vocab.len(),
        config.vocab_size
    );
    let params = load_params(&paths.params)?;
    let model = Model::from_params(config, &params).with_context(|| format!("loading {}", dir.display()))?;
    Ok((model, vocab))
}
