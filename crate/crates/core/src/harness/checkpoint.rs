//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"RACAPCKP"  u32 version  u64 meta_len  meta (JSON)
//! u32 count
//! count x { u32 name_len  name  u32 ndim  ndim x u64 dim  numel x f64 }
//! ```
//!
//! The JSON meta block holds the model configuration, the vocabulary and
//! the relation names, so a checkpoint is self-contained.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelParams};
use super::ModelConfig;
use crate::data::RelationMap;
use crate::error::{Error, Result};
use crate::features::Vocab;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RACAPCKP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    vocab: Vec<String>,
    relations: Vec<String>,
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let meta = Meta {
        config: model.config.clone(),
        vocab: model.vocab.tokens().to_vec(),
        relations: model.relations.names().to_vec(),
    };
    let meta = serde_json::to_vec(&meta)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, t) in model.params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.len()?;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("shape of {name} overflows")))?;
        let bytes = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
    }
    if r.at != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after the last parameter".into()));
    }
    let vocab = Vocab::from_tokens(meta.vocab)?;
    let relations = RelationMap::from_names(meta.relations)?;
    Model::from_parts(meta.config, ModelParams::new(tensors), vocab, relations)
}
