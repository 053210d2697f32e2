//! Binary checkpoint layout, all integers and reals little-endian:
//!
//! ```text
//! "GMSL" | version u32 | config_len u32 | config JSON
//! | n_arrays u32 | per array: len u64, len x f64      (params, then Adam m, then Adam v)
//! | adam_step u64 | epoch u32
//! | n_records u64 | per record: epoch u32, batch u32, loss f64, grad_norm f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_atomic, DataError};
use crate::diffcore::Tensor;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::trainer::{AdamState, BatchRecord, TrainConfig};

const MAGIC: &[u8; 4] = b"GMSL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    /// Completed epochs.
    pub epoch: u32,
    pub history: Vec<BatchRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub params: EncoderParams,
    pub adam: AdamState,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct ConfigBlock {
    encoder: EncoderConfig,
    train: TrainConfig,
}

pub fn write_checkpoint<W: Write>(mut w: W, c: &ModelCheckpoint) -> Result<(), DataError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&ConfigBlock { encoder: c.encoder, train: c.train })
        .map_err(|e| DataError::Corruption(e.to_string()))?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    let arrays: Vec<&[f64]> = c
        .params
        .tensors()
        .into_iter()
        .map(Tensor::data)
        .chain(c.adam.m.iter().map(Vec::as_slice))
        .chain(c.adam.v.iter().map(Vec::as_slice))
        .collect();
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        buf.extend_from_slice(&(a.len() as u64).to_le_bytes());
        for x in a {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf.extend_from_slice(&c.adam.step.to_le_bytes());
    buf.extend_from_slice(&c.meta.epoch.to_le_bytes());
    buf.extend_from_slice(&(c.meta.history.len() as u64).to_le_bytes());
    for r in &c.meta.history {
        buf.extend_from_slice(&r.epoch.to_le_bytes());
        buf.extend_from_slice(&r.batch.to_le_bytes());
        buf.extend_from_slice(&r.loss.to_le_bytes());
        buf.extend_from_slice(&r.grad_norm.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| DataError::io(Path::new("<checkpoint>"), e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            DataError::Corruption(format!("need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array(&mut self) -> Result<Vec<f64>, DataError> {
        let len = self.u64()? as usize;
        if len > (self.bytes.len() - self.pos) / 8 {
            return Err(DataError::Corruption(format!("array of {len} reals overruns the file")));
        }
        (0..len).map(|_| self.f64()).collect()
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelCheckpoint, DataError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| DataError::io(Path::new("<checkpoint>"), e))?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(DataError::Magic);
    }
    let mut c = Cursor { bytes: &bytes, pos: 4 };
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DataError::Version(version));
    }
    let config_len = c.u32()? as usize;
    let block: ConfigBlock =
        serde_json::from_slice(c.take(config_len)?).map_err(|e| DataError::Corruption(format!("config: {e}")))?;
    let n_arrays = c.u32()? as usize;
    if n_arrays != 9 {
        return Err(DataError::Corruption(format!("expected 9 arrays, found {n_arrays}")));
    }
    let mut arrays: Vec<Vec<f64>> = (0..n_arrays).map(|_| c.array()).collect::<Result<_, _>>()?;
    let v = arrays.split_off(6);
    let m = arrays.split_off(3);
    let h = block.encoder.hidden_dim;
    let shapes = [(crate::encoder::EDGE_INPUT, h), (h, h), (crate::molgraph::ATOM_FEATURES + h, h)];
    let mut tensors = Vec::new();
    for (data, (rows, cols)) in arrays.into_iter().zip(shapes) {
        tensors.push(
            Tensor::matrix(rows, cols, data)
                .map_err(|_| DataError::Corruption(format!("parameter is not {rows}x{cols}")))?,
        );
    }
    let params = EncoderParams::from_tensors(tensors, &block.encoder)
        .map_err(|e| DataError::Corruption(e.to_string()))?;
    for (k, t) in params.tensors().iter().enumerate() {
        if m[k].len() != t.numel() || v[k].len() != t.numel() {
            return Err(DataError::Corruption(format!("optimizer moment {k} has the wrong length")));
        }
    }
    let step = c.u64()?;
    let epoch = c.u32()?;
    let n_records = c.u64()? as usize;
    if n_records > (bytes.len() - c.pos) / 24 {
        return Err(DataError::Corruption(format!("{n_records} history records overrun the file")));
    }
    let mut history = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        history.push(BatchRecord { epoch: c.u32()?, batch: c.u32()?, loss: c.f64()?, grad_norm: c.f64()? });
    }
    if c.pos != bytes.len() {
        return Err(DataError::Corruption(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(ModelCheckpoint {
        format_version: version,
        encoder: block.encoder,
        train: block.train,
        params,
        adam: AdamState { m, v, step },
        meta: TrainingMeta { epoch, history },
    })
}

pub fn save_checkpoint(c: &ModelCheckpoint, path: &Path) -> Result<(), DataError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, c)?;
    write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, DataError> {
    let f = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}
