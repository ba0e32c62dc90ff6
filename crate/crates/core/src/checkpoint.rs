//! Binary parameter snapshots.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "FAECKPT1"
//! version  u32      currently 1
//! config   32 bytes SHA-256 of the canonical config TOML
//! epoch    u64      completed epochs
//! count    u64      number of records
//! record*  name_len u32, name (UTF-8), ndim u32, dims u64 × ndim,
//!          payload f64 × prod(dims)
//! ```

use std::fs;
use std::path::Path;

use ndarray::IxDyn;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::Module;

pub const MAGIC: &[u8; 8] = b"FAECKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub epoch: u64,
    pub records: Vec<Record>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated {what} at byte offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32], epoch: u64) -> Self {
        Self {
            config_hash,
            epoch,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.records.push(Record {
            name: name.into(),
            value,
        });
    }

    pub fn push_module(&mut self, module: &dyn Module) {
        for p in module.parameters() {
            self.push(p.name.clone(), p.value.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|r| r.name == name).map(|r| &r.value)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.require(name)?;
        t.iter()
            .next()
            .copied()
            .filter(|_| t.len() == 1)
            .ok_or_else(|| Error::Checkpoint(format!("record {name} is not a scalar")))
    }

    /// Copies every parameter of `module` from the record of the same name.
    pub fn restore_module(&self, module: &mut dyn Module) -> Result<()> {
        for p in module.parameters_mut() {
            let v = self.require(&p.name)?;
            if v.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?} in checkpoint, {:?} in model",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.value.ndim() as u32).to_le_bytes());
            for &d in r.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in r.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut rd = Reader { buf, pos: 0 };
        if rd.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic at byte offset 0".into()));
        }
        let version = rd.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_hash: [u8; 32] = rd.take(32, "config hash")?.try_into().unwrap();
        let epoch = rd.u64("epoch")?;
        let count = rd.u64("record count")?;
        let mut records = Vec::new();
        for _ in 0..count {
            let len = rd.u32("name length")? as usize;
            let name = std::str::from_utf8(rd.take(len, "name")?)
                .map_err(|_| Error::Checkpoint(format!("non-utf8 name before byte offset {}", rd.pos)))?
                .to_string();
            let ndim = rd.u32("ndim")? as usize;
            let dims = (0..ndim)
                .map(|_| rd.u64("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let payload = rd.take(n.checked_mul(8).unwrap_or(usize::MAX), "payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(Record {
                name,
                value: Tensor::from_shape_vec(IxDyn(&dims), data).expect("sizes checked"),
            });
        }
        if rd.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "trailing bytes at byte offset {}",
                rd.pos
            )));
        }
        Ok(Self {
            config_hash,
            epoch,
            records,
        })
    }

    /// Writes to a sibling temp file and renames it over `path`, so a crash
    /// never leaves a partial checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
