//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "MENANCKP"
//! version      u32      = 1
//! global_step  u64
//! n_meta       u32
//!   key        u32 length + UTF-8 bytes
//!   value      u32 length + UTF-8 bytes
//! n_params     u32
//!   name       u32 length + UTF-8 bytes
//!   group      u32 length + UTF-8 bytes
//!   ndim       u32, then ndim × u64 dimensions
//!   values     product(dims) × f64, row-major
//!   has_adam   u8 (0 or 1); when 1:
//!     step     u64
//!     m        product(dims) × f64
//!     v        product(dims) × f64
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamState, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MENANCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub global_step: u64,
    pub store: ParamStore,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.global_step.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (id, p) in self.store.iter() {
            put_str(&mut out, &p.name);
            put_str(&mut out, &p.group);
            out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, p.value.data());
            match self.adam.state(id) {
                Some(st) => {
                    out.push(1);
                    out.extend_from_slice(&st.step.to_le_bytes());
                    put_f64s(&mut out, &st.m);
                    put_f64s(&mut out, &st.v);
                }
                None => out.push(0),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let global_step = r.u64()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let mut store = ParamStore::new();
        let mut adam = Adam::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let group = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let values = r.f64s(n)?;
            let value = Tensor::new(shape, values).map_err(|e| Error::format(path, e.to_string()))?;
            let id = store.add(name, &group, value);
            match r.take(1)?[0] {
                0 => {}
                1 => {
                    let step = r.u64()?;
                    let m = r.f64s(n)?;
                    let v = r.f64s(n)?;
                    adam.set_state(id, AdamState { step, m, v });
                }
                b => return Err(Error::format(path, format!("bad optimizer flag {b}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            meta,
            global_step,
            store,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, "truncated checkpoint"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
