//! Binary checkpoint, all integers little-endian:
//!
//! ```text
//! b"CKPT" | version u32 | epoch u32 | seed u64
//! meta_len u32 | meta JSON ({"train": …, "geometry": …})
//! count u32 | count × (name_len u32 | name | ndim u32 | dims u32… | f32 data)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelSpec};
use crate::tensor::Mat;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: ModelParams,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn new(epoch: usize, params: ModelParams) -> Self {
        Self { epoch, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = self.params.spec();
        let meta = serde_json::to_vec(spec).expect("spec serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION as usize);
        put_u32(&mut out, self.epoch);
        out.extend_from_slice(&spec.train.seed.to_le_bytes());
        put_u32(&mut out, meta.len());
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.params.layout().len());
        for (name, m) in self.params.named() {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, 2);
            put_u32(&mut out, m.rows());
            put_u32(&mut out, m.cols());
            for &v in m.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let epoch = r.u32()? as usize;
        let seed = r.u64()?;
        let meta_len = r.u32()? as usize;
        let spec: ModelSpec = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if spec.train.seed != seed {
            return Err(Error::Format("header seed disagrees with the config snapshot".into()));
        }
        let spec = ModelSpec::new(spec.train, spec.geometry)?;
        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let (rows, cols) = match dims[..] {
                [n] => (1, n),
                [rows, cols] => (rows, cols),
                _ => return Err(Error::Format(format!("tensor `{name}` has {ndim} dimensions"))),
            };
            let n = rows.checked_mul(cols).ok_or_else(|| Error::Format("tensor size overflows".into()))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor size overflows".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
                .collect();
            named.push((name, Mat::from_vec(rows, cols, data)));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let params = ModelParams::from_named(spec, named)?;
        Ok(Self { epoch, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
