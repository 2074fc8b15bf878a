//! Binary checkpoint format.
//!
//! Layout: the magic bytes `VMOE`, a 32-bit little-endian format version,
//! then a sequence of tensor records until end of file. Each record is
//! `name_len: u64 LE`, the UTF-8 name bytes, `rank: u64 LE`, `rank` dims as
//! u64 LE, and the row-major payload as f64 LE.
//!
//! Two reserved names carry non-parameter state: `__config__` holds the
//! model configuration as JSON (one byte per f64), and `__rng__` holds one
//! row per RNG stream: stream id and seed as two 32-bit halves each, then
//! the 128-bit word position as four 32-bit quarters, all stored exactly as
//! f64 values.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::model::vit::{ModelConfig, ModelParams};
use crate::numkit::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"VMOE";
const FORMAT_VERSION: u32 = 1;
const CONFIG_NAME: &str = "__config__";
const RNG_NAME: &str = "__rng__";

/// Exact position of one random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamState {
    pub stream: u64,
    pub seed: u64,
    pub word_pos: u128,
}

/// Positions of every stream the trainer used.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RngSnapshot {
    pub states: Vec<StreamState>,
}

/// Everything needed to resume or evaluate a trained model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub rng: RngSnapshot,
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn encode_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    push_u64(buf, name.len() as u64);
    buf.extend_from_slice(name.as_bytes());
    push_u64(buf, t.shape().len() as u64);
    for &d in t.shape() {
        push_u64(buf, d as u64);
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn config_tensor(config: &ModelConfig) -> Tensor {
    let json = serde_json::to_string(config).expect("config serializes");
    let data: Vec<f64> = json.bytes().map(f64::from).collect();
    Tensor::new(vec![1, data.len()], data)
}

fn rng_tensor(rng: &RngSnapshot) -> Tensor {
    let lo = |v: u64| (v & 0xffff_ffff) as f64;
    let hi = |v: u64| (v >> 32) as f64;
    let mut rows = Vec::with_capacity(rng.states.len());
    for s in &rng.states {
        let wp = s.word_pos;
        rows.push(vec![
            lo(s.stream),
            hi(s.stream),
            lo(s.seed),
            hi(s.seed),
            (wp & 0xffff_ffff) as f64,
            ((wp >> 32) & 0xffff_ffff) as f64,
            ((wp >> 64) & 0xffff_ffff) as f64,
            ((wp >> 96) & 0xffff_ffff) as f64,
        ]);
    }
    if rows.is_empty() {
        Tensor::zeros(vec![0, 8])
    } else {
        Tensor::from_rows(&rows)
    }
}

fn checked_u32(v: f64, what: &str) -> Result<u64> {
    if v.fract() != 0.0 || !(0.0..=u32::MAX as f64).contains(&v) {
        return Err(Error::Checkpoint(format!("corrupt {what} field {v}")));
    }
    Ok(v as u64)
}

fn decode_rng(t: &Tensor) -> Result<RngSnapshot> {
    if t.shape().len() != 2 || t.cols() != 8 {
        return Err(Error::Checkpoint(format!(
            "RNG tensor has shape {:?}, expected [n, 8]",
            t.shape()
        )));
    }
    let mut states = Vec::with_capacity(t.rows());
    for r in 0..t.rows() {
        let row = t.row(r);
        let stream = checked_u32(row[0], "rng stream")? | (checked_u32(row[1], "rng stream")? << 32);
        let seed = checked_u32(row[2], "rng seed")? | (checked_u32(row[3], "rng seed")? << 32);
        let mut word_pos = 0u128;
        for (i, &v) in row[4..8].iter().enumerate() {
            word_pos |= (checked_u32(v, "rng word position")? as u128) << (32 * i);
        }
        states.push(StreamState { stream, seed, word_pos });
    }
    Ok(RngSnapshot { states })
}

fn decode_config(t: &Tensor) -> Result<ModelConfig> {
    let mut bytes = Vec::with_capacity(t.numel());
    for &v in t.data() {
        let b = checked_u32(v, "config byte")?;
        if b > 255 {
            return Err(Error::Checkpoint(format!("config byte {b} out of range")));
        }
        bytes.push(b as u8);
    }
    let json = String::from_utf8(bytes)
        .map_err(|e| Error::Checkpoint(format!("config is not UTF-8: {e}")))?;
    serde_json::from_str(&json)
        .map_err(|e| Error::Checkpoint(format!("config does not parse: {e}")))
}

/// Serializes a checkpoint to bytes (reserved tensors first, then parameters
/// in name order, so identical checkpoints are byte-identical).
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    encode_tensor(&mut buf, CONFIG_NAME, &config_tensor(ckpt.params.config()));
    encode_tensor(&mut buf, RNG_NAME, &rng_tensor(&ckpt.rng));
    for (name, t) in ckpt.params.tensors() {
        encode_tensor(&mut buf, name, t);
    }
    buf
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

/// Parses checkpoint bytes, validating magic, version, and tensor inventory.
pub fn decode_checkpoint(data: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { data, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    while !cur.done() {
        let name_len = cur.u64("name length")? as usize;
        let name = String::from_utf8(cur.take(name_len, "name")?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
        let rank = cur.u64("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = cur.take(8 * numel, "payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if tensors.insert(name.clone(), Tensor::new(shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }

    let config_t = tensors
        .remove(CONFIG_NAME)
        .ok_or_else(|| Error::Checkpoint("missing __config__ record".into()))?;
    let rng_t = tensors
        .remove(RNG_NAME)
        .ok_or_else(|| Error::Checkpoint("missing __rng__ record".into()))?;
    if let Some(name) = tensors.keys().find(|n| n.starts_with("__")) {
        return Err(Error::Checkpoint(format!("unknown reserved record {name}")));
    }
    let config = decode_config(&config_t)?;
    let rng = decode_rng(&rng_t)?;
    let params = ModelParams::from_tensors(&config, tensors)?;
    Ok(Checkpoint { params, rng })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}
