//! `DLM1` checkpoint files.
//!
//! Layout: the line `DLM1`, then `key=value` metadata lines ending with an
//! empty line, then one record per parameter: name length, name bytes, rank,
//! dims (all u64 little-endian) and the f64 little-endian payload.

use std::fs;
use std::path::Path;

use crate::config::{model_entries, set_model_key};
use crate::error::{Error, Result};
use crate::model::{LmModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"DLM1\n";
const RECORDS_KEY: &str = "param_records";

pub fn encode_checkpoint(model: &LmModel) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (k, v) in model_entries(model.config()) {
        out.extend_from_slice(format!("{k}={v}\n").as_bytes());
    }
    let records = model.parameters().count();
    out.extend_from_slice(format!("{RECORDS_KEY}={records}\n\n").as_bytes());
    for (name, t) in model.parameters() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &LmModel, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated: need {n} bytes for {what}, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.err("truncated metadata block"))?;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| self.err("metadata is not UTF-8"))?;
        self.pos += end + 1;
        Ok(line)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<LmModel> {
    let mut r = Reader { bytes, pos: 0 };
    if !bytes.starts_with(MAGIC) {
        return Err(r.err("bad magic, expected DLM1"));
    }
    r.pos = MAGIC.len();
    let mut config = ModelConfig::default();
    let mut records: Option<usize> = None;
    loop {
        let start = r.pos;
        let line = r.line()?;
        if line.is_empty() {
            break;
        }
        let at = |msg: String| Error::Format {
            offset: start as u64,
            msg,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| at(format!("bad metadata line {line:?}")))?;
        if k == RECORDS_KEY {
            records = Some(v.parse().map_err(|_| at(format!("bad record count {v:?}")))?);
        } else if !set_model_key(&mut config, k, v).map_err(at)? {
            return Err(at(format!("unknown metadata key {k:?}")));
        }
    }
    let records = records.ok_or_else(|| r.err("metadata lacks param_records"))?;
    config.validate().map_err(|e| r.err(format!("invalid config: {e}")))?;
    let expected = config.parameter_shapes();
    if records != expected.len() {
        return Err(r.err(format!(
            "{records} records but the config has {} parameters",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(records);
    for (want_name, want_shape) in expected {
        let start = r.pos as u64;
        let name_len = r.u64("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| r.err("parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u64("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("dims")? as usize);
        }
        if name != want_name || shape != want_shape {
            return Err(Error::Format {
                offset: start,
                msg: format!("record {name} {shape:?} does not match expected {want_name} {want_shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 8, &format!("payload of {name}"))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    LmModel::from_parameters(config, tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<LmModel> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint and checks it predicts over `vocab_size` ids.
pub fn load_checkpoint_for_vocab(path: &Path, vocab_size: usize) -> Result<LmModel> {
    let model = load_checkpoint(path)?;
    if model.vocab_size() != vocab_size {
        return Err(Error::config(format!(
            "checkpoint {} has vocabulary size {}, expected {vocab_size}",
            path.display(),
            model.vocab_size()
        )));
    }
    Ok(model)
}
