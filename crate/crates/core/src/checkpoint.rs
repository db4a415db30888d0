//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "HMODE1"
//! u32 header length, JSON header {config, step, epoch, batch, precision}
//! u32 parameter count
//! per parameter: u32 name length, name, u32 rank, u32 dims..., values
//! per parameter: Adam first moments, then per parameter second moments
//! ```
//!
//! Values are stored at the training precision (4 or 8 bytes each).

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Param;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 6] = b"HMODE1";

/// Training position stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// 0-based epoch of the next batch to run.
    pub epoch: usize,
    /// Index of the next batch within that epoch.
    pub batch: usize,
    pub precision: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub params: Vec<Param<T>>,
    pub adam: Adam<T>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_values<T: Element>(buf: &mut Vec<u8>, values: &[T]) {
    for &x in values {
        if T::BITS == 32 {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        } else {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("truncated or corrupt checkpoint ({what})"))
}

fn get_u32(r: &mut Cursor<&[u8]>, what: &str) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| corrupt(what))?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_bytes(r: &mut Cursor<&[u8]>, len: usize, what: &str) -> Result<Vec<u8>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(corrupt(what));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(|_| corrupt(what))?;
    Ok(b)
}

fn get_values<T: Element>(r: &mut Cursor<&[u8]>, n: usize, what: &str) -> Result<Vec<T>> {
    let width = T::BITS as usize / 8;
    let bytes = get_bytes(r, n * width, what)?;
    Ok(bytes
        .chunks_exact(width)
        .map(|c| {
            if width == 4 {
                T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            } else {
                T::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))
            }
        })
        .collect())
}

impl<T: Element> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = MAGIC.to_vec();
        let header = serde_json::to_vec(&self.header)?;
        put_u32(&mut buf, header.len());
        buf.extend_from_slice(&header);
        put_u32(&mut buf, self.params.len());
        for p in &self.params {
            put_u32(&mut buf, p.name.len());
            buf.extend_from_slice(p.name.as_bytes());
            put_u32(&mut buf, p.value.shape().len());
            for &d in p.value.shape() {
                put_u32(&mut buf, d);
            }
            put_values(&mut buf, p.value.data());
        }
        for moments in [&self.adam.m, &self.adam.v] {
            for m in moments {
                put_values(&mut buf, m);
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("missing HMODE1 magic".into()));
        }
        let mut r = Cursor::new(bytes);
        r.set_position(MAGIC.len() as u64);
        let len = get_u32(&mut r, "header length")?;
        let header: CheckpointHeader = serde_json::from_slice(&get_bytes(&mut r, len, "header")?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.precision != T::BITS {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {}-bit values, expected {}-bit",
                header.precision,
                T::BITS
            )));
        }
        let count = get_u32(&mut r, "parameter count")?;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = get_u32(&mut r, "name length")?;
            let name = String::from_utf8(get_bytes(&mut r, name_len, "name")?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = get_u32(&mut r, "rank")?;
            let shape = (0..rank).map(|_| get_u32(&mut r, "dims")).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let data = get_values(&mut r, numel, &name)?;
            let value = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            params.push(Param { name, value });
        }
        let mut moments = [Vec::new(), Vec::new()];
        for slot in &mut moments {
            for p in &params {
                slot.push(get_values(&mut r, p.value.numel(), "optimizer state")?);
            }
        }
        if r.position() as usize != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after optimizer state".into()));
        }
        let [m, v] = moments;
        let adam = Adam { step: header.step, m, v };
        Ok(Self { header, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies stored weights into `target`, requiring identical names and
    /// shapes in identical order.
    pub fn restore_into(&self, target: &mut [Param<T>]) -> Result<()> {
        if target.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                target.len()
            )));
        }
        for (dst, src) in target.iter_mut().zip(&self.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: model has {} {:?}, checkpoint has {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Reads only the header, e.g. to decide the precision before a full load.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("missing HMODE1 magic".into()));
    }
    let mut r = Cursor::new(bytes.as_slice());
    r.set_position(MAGIC.len() as u64);
    let len = get_u32(&mut r, "header length")?;
    serde_json::from_slice(&get_bytes(&mut r, len, "header")?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))
}
