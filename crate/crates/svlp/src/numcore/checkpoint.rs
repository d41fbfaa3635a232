//! Binary checkpoint format shared by all persisted state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "SVLP" (4 bytes)
//! version u32 = 1
//! count   u32
//! entry*  { name_len u32, name utf-8, dtype u8, ndim u32, dims u32 x ndim, raw data }
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = u8. Weights, prompts, aggregation
//! logits, Fisher snapshots, and prototypes are float entries; index sets and
//! textual metadata blocks are u8 entries.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::tensor::{Dtype, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"SVLP";
pub const VERSION: u32 = 1;

/// Raw entry payload, tagged by element width.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_real<T: Real>(data: &[T]) -> TensorData {
        match T::DTYPE {
            Dtype::F32 => TensorData::F32(data.iter().map(|v| v.to_f64() as f32).collect()),
            _ => TensorData::F64(data.iter().map(|v| v.to_f64()).collect()),
        }
    }
}

/// One named tensor in a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct CkptEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl CkptEntry {
    pub fn from_tensor<T: Real>(name: &str, tensor: &Tensor<T>) -> CkptEntry {
        CkptEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            data: TensorData::from_real(tensor.data()),
        }
    }

    pub fn text(name: &str, text: &str) -> CkptEntry {
        let bytes = text.as_bytes().to_vec();
        CkptEntry {
            name: name.to_string(),
            shape: vec![bytes.len()],
            data: TensorData::U8(bytes),
        }
    }

    /// Decode as a tensor of `T`. Widening (f32 file -> f64 store) is allowed;
    /// narrowing is refused so precision is never lost silently.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let values: Vec<T> = match (&self.data, T::DTYPE) {
            (TensorData::F32(v), _) => v.iter().map(|x| T::from_f64(*x as f64)).collect(),
            (TensorData::F64(v), Dtype::F64) => v.iter().map(|x| T::from_f64(*x)).collect(),
            (TensorData::F64(_), _) => {
                return Err(Error::Checkpoint(format!(
                    "entry `{}` is f64; refusing to narrow to f32",
                    self.name
                )))
            }
            (TensorData::U8(_), _) => {
                return Err(Error::Checkpoint(format!(
                    "entry `{}` is a u8 block, not a float tensor",
                    self.name
                )))
            }
        };
        Tensor::new(self.shape.clone(), values)
    }

    pub fn to_text(&self) -> Result<String> {
        match &self.data {
            TensorData::U8(bytes) => String::from_utf8(bytes.clone())
                .map_err(|_| Error::Checkpoint(format!("entry `{}` is not utf-8", self.name))),
            _ => Err(Error::Checkpoint(format!(
                "entry `{}` is not a u8 text block",
                self.name
            ))),
        }
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn encode(entries: &[CkptEntry]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    push_u32(&mut buf, entries.len() as u32);
    for e in entries {
        let numel: usize = e.shape.iter().product();
        if numel != e.data.len() {
            return Err(Error::Checkpoint(format!(
                "entry `{}`: shape {:?} does not match {} elements",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
        push_u32(&mut buf, e.name.len() as u32);
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(e.data.dtype().code());
        push_u32(&mut buf, e.shape.len() as u32);
        for d in &e.shape {
            push_u32(&mut buf, *d as u32);
        }
        match &e.data {
            TensorData::F32(v) => {
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::F64(v) => {
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::U8(v) => buf.extend_from_slice(v),
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file while reading {what}: need {} bytes, have {}",
                self.pos + n,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let s = self.take(4, what)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<CkptEntry>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            &magic,
            MAGIC
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint("entry name is not utf-8".to_string()))?;
        let dtype = Dtype::from_code(r.u8("dtype")?)
            .ok_or_else(|| Error::Checkpoint(format!("entry `{name}`: unknown dtype code")))?;
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * dtype.byte_width(), &format!("entry `{name}` data"))?;
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                raw.chunks_exact(8)
                    .map(|c| {
                        f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                    })
                    .collect(),
            ),
            Dtype::U8 => TensorData::U8(raw.to_vec()),
        };
        entries.push(CkptEntry { name, shape, data });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last entry",
            buf.len() - r.pos
        )));
    }
    Ok(entries)
}

pub fn write_checkpoint(path: &Path, entries: &[CkptEntry]) -> Result<()> {
    let bytes = encode(entries)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CkptEntry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
