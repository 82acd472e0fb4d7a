//! Versioned binary checkpoints of a model (and optionally its classifier).
//!
//! Layout, little-endian: magic `FSCK`, `u32` version, `u32`-prefixed JSON
//! header, `f64` temperature, `u32` record count, then records of
//! (`u32` name length, name, `u32` rank, `u64` extents, `f64` values), then a
//! classifier flag byte with optional base ids and weights, then `END.`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::Classifier;
use crate::error::{bail, Error, Result};
use crate::model::{DualEncoder, LoraState, ModelConfig, LOGIT_SCALE};
use crate::peft::Strategy;
use crate::tensor::{Registry, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FSCK";
const TRAILER: &[u8; 4] = b"END.";

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: ModelConfig,
    strategy: Option<Strategy>,
    lora: Option<LoraState>,
    prompt_len: usize,
    config_hash: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DualEncoder,
    pub classifier: Option<Classifier>,
    pub config_hash: String,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape.len() as u32);
    for &s in &t.shape {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
    for v in &t.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(model: &DualEncoder, classifier: Option<&Classifier>, config_hash: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let header = Header {
        architecture: model.config.clone(),
        strategy: model.strategy,
        lora: model.lora,
        prompt_len: model.prompt_len,
        config_hash: config_hash.to_string(),
    };
    let h = serde_json::to_vec(&header).expect("header serializes");
    put_u32(&mut out, h.len() as u32);
    out.extend_from_slice(&h);
    out.extend_from_slice(&model.tau().to_le_bytes());
    put_u32(&mut out, model.params.len() as u32);
    for (name, t) in &model.params {
        put_tensor(&mut out, name, t);
    }
    match classifier {
        None => out.push(0),
        Some(c) => {
            out.push(if c.trainable { 2 } else { 1 });
            put_u32(&mut out, c.base.len() as u32);
            for &b in &c.base {
                out.extend_from_slice(&(b as u64).to_le_bytes());
            }
            put_tensor(&mut out, crate::adapt::PHI, &c.phi);
        }
    }
    out.extend_from_slice(TRAILER);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            bail!(Format, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            bail!(Format, "tensor {name} has implausible rank {rank}");
        }
        let shape = (0..rank).map(|_| self.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        if len > (self.buf.len() - self.pos) / 8 {
            bail!(Format, "checkpoint truncated inside tensor {name}");
        }
        let values = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok((name, Tensor::new(shape, values)?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        bail!(Format, "not a checkpoint file");
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let tau = r.f64()?;
    let count = r.u32()? as usize;
    let mut params = Registry::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if params.insert(name.clone(), t).is_some() {
            bail!(Format, "duplicate tensor {name}");
        }
    }
    let classifier = match r.take(1)?[0] {
        0 => None,
        flag @ (1 | 2) => {
            let n = r.u32()? as usize;
            let base = (0..n).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let (_, phi) = r.tensor()?;
            if phi.shape.first() != Some(&n) {
                bail!(Format, "classifier has {} rows for {n} base classes", phi.shape.first().unwrap_or(&0));
            }
            Some(Classifier { base, phi, trainable: flag == 2 })
        }
        other => bail!(Format, "bad classifier flag {other}"),
    };
    if r.take(4)? != TRAILER || r.pos != bytes.len() {
        bail!(Format, "checkpoint has a corrupt trailer");
    }
    header.architecture.validate().map_err(|e| Error::Format(e.to_string()))?;
    match params.get(LOGIT_SCALE) {
        Some(t) if t.values.len() == 1 && t.values[0].exp().to_bits() == tau.to_bits() => {}
        _ => bail!(Format, "temperature record does not match the header"),
    }
    let model = DualEncoder::from_parts(header.architecture, params, header.strategy, header.lora, header.prompt_len);
    if model.params.values().map(Tensor::len).sum::<usize>() == 0 {
        bail!(Format, "checkpoint holds no parameters");
    }
    Ok(Checkpoint { model, classifier, config_hash: header.config_hash })
}

pub fn save_checkpoint(path: &Path, model: &DualEncoder, classifier: Option<&Classifier>, config_hash: &str) -> Result<()> {
    let bytes = encode(model, classifier, config_hash);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
